"""System models, RK4 rollouts, trajectory costs and control clipping.

All state/control arguments are batched: states are ``(B, d_x)`` and control
sequences ``(B, T, d_u)``. Unbatched inputs are accepted by :func:`rollout`
and promoted internally.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


class InfeasibleMassError(ValueError):
    """Rocket mass dropped below the dry mass."""


# -- parameters ----------------------------------------------------------------
@dataclass(frozen=True)
class VdpParams:
    mu: float = 1.0


@dataclass(frozen=True)
class RocketParams:
    g_mars: float = 3.71
    isp: float = 200.7
    g0: float = 9.81
    t_min: float = 4000.0
    t_max: float = 13000.0
    glideslope_deg: float = 75.0
    v_tol: float = 1.0
    m_dry: float = 1000.0
    m_wet: float = 2000.0

    def __post_init__(self):
        if not 0 < self.t_min < self.t_max:
            raise ValueError("need 0 < t_min < t_max")
        if not self.m_dry < self.m_wet:
            raise ValueError("need m_dry < m_wet")
        if not 0 < self.glideslope_deg < 90:
            raise ValueError("glideslope angle must lie in (0, 90) degrees")

    @property
    def tan_gs(self) -> float:
        return math.tan(math.radians(self.glideslope_deg))


# -- systems -------------------------------------------------------------------
class VanDerPol:
    """x1' = x2, x2' = mu (1 - x1^2) x2 - x1 + u."""

    system_id = "vdp"
    d_x, d_u = 2, 1

    def __init__(self, params: VdpParams | None = None):
        self.params = params or VdpParams()

    def derivative(self, x: Tensor, u: Tensor) -> Tensor:
        x1 = x[..., 0]
        x2 = x[..., 1]
        damping = ad.scale(ad.mul(ad.sub(1.0, ad.square(x1)), x2), self.params.mu)
        return ad.stack([x2, damping - x1 + u[..., 0]], axis=-1)

    def jacobians(self, x: np.ndarray, u: np.ndarray):
        mu = self.params.mu
        x1, x2 = x[..., 0], x[..., 1]
        f = np.stack([x2, mu * (1.0 - x1 * x1) * x2 - x1 + u[..., 0]], axis=-1)
        jx = np.zeros(x.shape + (2,))
        jx[..., 0, 1] = 1.0
        jx[..., 1, 0] = -2.0 * mu * x1 * x2 - 1.0
        jx[..., 1, 1] = mu * (1.0 - x1 * x1)
        ju = np.zeros(x.shape + (1,))
        ju[..., 1, 0] = 1.0
        return f, jx, ju

    def step(self, x: Tensor, u: Tensor, dt: float) -> Tensor:
        return rk4_step(self, x, u, dt)


class Rocket:
    """3-DOF variable-mass lander: r' = v, v' = T/m + g, m' = -|T| / (Isp g0)."""

    system_id = "rocket"
    d_x, d_u = 7, 3
    # keeps |T| differentiable at T = 0; shifts |T| by < 1e-3 N
    NORM_EPS = 1e-6

    def __init__(self, params: RocketParams | None = None):
        self.params = params or RocketParams()
        self.gravity = np.array([0.0, 0.0, -self.params.g_mars])

    def derivative(self, x: Tensor, u: Tensor) -> Tensor:
        p = self.params
        mass = x[..., 6:7]
        if np.any(mass.data < p.m_dry):
            raise InfeasibleMassError(f"mass {mass.data.min():.3f} kg below dry mass {p.m_dry} kg")
        thrust_mag = ad.norm(u, axis=-1, eps=self.NORM_EPS).reshape(u.shape[:-1] + (1,))
        accel = ad.div(u, mass) + self.gravity
        mdot = ad.scale(thrust_mag, -1.0 / (p.isp * p.g0))
        return ad.concat([x[..., 3:6], accel, mdot], axis=-1)

    def jacobians(self, x: np.ndarray, u: np.ndarray):
        p = self.params
        mass = x[..., 6:7]
        if np.any(mass < p.m_dry):
            raise InfeasibleMassError(f"mass {mass.min():.3f} kg below dry mass {p.m_dry} kg")
        c = 1.0 / (p.isp * p.g0)
        mag = np.sqrt((u * u).sum(axis=-1, keepdims=True) + self.NORM_EPS)
        f = np.concatenate([x[..., 3:6], u / mass + self.gravity, -c * mag], axis=-1)
        jx = np.zeros(x.shape + (7,))
        jx[..., 0, 3] = jx[..., 1, 4] = jx[..., 2, 5] = 1.0
        jx[..., 3:6, 6] = -u / (mass * mass)
        ju = np.zeros(x.shape + (3,))
        inv_m = 1.0 / mass[..., 0]
        for i in range(3):
            ju[..., 3 + i, i] = inv_m
        ju[..., 6, :] = -c * u / mag
        return f, jx, ju

    def step(self, x: Tensor, u: Tensor, dt: float) -> Tensor:
        return rk4_step(self, x, u, dt)


class LinearSystem:
    """Discrete-time x+ = A x + B u; used only as a verification oracle target."""

    system_id = "linear"

    def __init__(self, A, B):
        self.A = np.asarray(A, dtype=float)
        self.B = np.asarray(B, dtype=float)
        self.d_x, self.d_u = self.B.shape

    def step(self, x: Tensor, u: Tensor, dt: float) -> Tensor:
        return ad.matmul(x, self.A.T) + ad.matmul(u, self.B.T)


def derivative(system, x, u) -> Tensor:
    return system.derivative(ad.as_tensor(x), ad.as_tensor(u))


def rk4_step(system, x, u, dt: float) -> Tensor:
    """Classical RK4 with the control held constant over the step.

    Systems exposing ``jacobians`` get a single fused tape node whose
    backward pass chains the stage Jacobians; others are composed from
    elementary ops (see :func:`rk4_step_composed`).
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    if not hasattr(system, "jacobians"):
        return rk4_step_composed(system, x, u, dt)
    x, u = ad.as_tensor(x), ad.as_tensor(u)
    xd, ud = x.data, u.data
    f1, jx1, ju1 = system.jacobians(xd, ud)
    f2, jx2, ju2 = system.jacobians(xd + 0.5 * dt * f1, ud)
    f3, jx3, ju3 = system.jacobians(xd + 0.5 * dt * f2, ud)
    f4, jx4, ju4 = system.jacobians(xd + dt * f3, ud)
    out = xd + (dt / 6.0) * (f1 + 2.0 * f2 + 2.0 * f3 + f4)

    def vjp(g):
        def tx(j, v):
            return np.einsum("...ij,...i->...j", j, v)

        g4 = (dt / 6.0) * g
        a4 = tx(jx4, g4)
        g3 = (dt / 3.0) * g + dt * a4
        a3 = tx(jx3, g3)
        g2 = (dt / 3.0) * g + 0.5 * dt * a3
        a2 = tx(jx2, g2)
        g1 = (dt / 6.0) * g + 0.5 * dt * a2
        a1 = tx(jx1, g1)
        gx = g + a1 + a2 + a3 + a4
        gu = tx(ju1, g1) + tx(ju2, g2) + tx(ju3, g3) + tx(ju4, g4)
        return gx, ad._unbroadcast(gu, ud.shape)

    return ad._make(out, (x, u), vjp)


def rk4_step_composed(system, x, u, dt: float) -> Tensor:
    """RK4 built from elementary tape ops; the reference for the fused step."""
    x, u = ad.as_tensor(x), ad.as_tensor(u)
    f = system.derivative
    k1 = f(x, u)
    k2 = f(x + ad.scale(k1, 0.5 * dt), u)
    k3 = f(x + ad.scale(k2, 0.5 * dt), u)
    k4 = f(x + ad.scale(k3, dt), u)
    incr = k1 + k4 + ad.scale(k2 + k3, 2.0)
    return x + ad.scale(incr, dt / 6.0)


# -- problems and costs ------------------------------------------------------------
@dataclass
class CostSpec:
    kind: str  # "quadratic" | "fuel"
    Q: np.ndarray | None = None
    R: np.ndarray | None = None
    Qf: np.ndarray | None = None
    w_pos: float = 1.0
    w_vel: float = 10.0

    def __post_init__(self):
        if self.kind not in ("quadratic", "fuel"):
            raise ValueError(f"unknown cost kind {self.kind!r}")
        if self.kind == "quadratic":
            for name in ("Q", "R", "Qf"):
                m = np.atleast_2d(np.asarray(getattr(self, name), dtype=float))
                if not np.allclose(m, m.T):
                    raise ValueError(f"{name} must be symmetric")
                setattr(self, name, m)
            if np.linalg.eigvalsh(self.R).min() <= 0:
                raise ValueError("R must be positive definite")
            for name in ("Q", "Qf"):
                if np.linalg.eigvalsh(getattr(self, name)).min() < -1e-12:
                    raise ValueError(f"{name} must be positive semidefinite")

    def to_dict(self) -> dict:
        if self.kind == "fuel":
            return {"kind": "fuel", "w_pos": self.w_pos, "w_vel": self.w_vel}
        return {"kind": "quadratic", "Q": self.Q.tolist(), "R": self.R.tolist(), "Qf": self.Qf.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "CostSpec":
        return cls(**d)


@dataclass
class ControlProblem:
    system: object
    T: int
    dt: float
    u_min: np.ndarray
    u_max: np.ndarray
    cost_spec: CostSpec
    x_target: np.ndarray
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        self.u_min = np.broadcast_to(np.asarray(self.u_min, dtype=float), (self.d_u,)).copy()
        self.u_max = np.broadcast_to(np.asarray(self.u_max, dtype=float), (self.d_u,)).copy()
        self.x_target = np.asarray(self.x_target, dtype=float)
        if np.any(self.u_min >= self.u_max):
            raise ValueError("u_min must be below u_max componentwise")

    @property
    def system_id(self) -> str:
        return self.system.system_id

    @property
    def d_x(self) -> int:
        return self.system.d_x

    @property
    def d_u(self) -> int:
        return self.system.d_u

    @property
    def d_e(self) -> int:
        """Size of the terminal error fed back to the network."""
        return 6 if self.system_id == "rocket" else self.d_x

    @property
    def control_scale(self) -> np.ndarray:
        s = np.maximum(np.abs(self.u_min), np.abs(self.u_max))
        return np.where(np.isfinite(s), s, 1.0)

    def to_dict(self) -> dict:
        d = {
            "system_id": self.system_id,
            "T": self.T,
            "dt": self.dt,
            "u_min": self.u_min.tolist(),
            "u_max": self.u_max.tolist(),
            "cost_spec": self.cost_spec.to_dict(),
            "x_target": self.x_target.tolist(),
        }
        if self.system_id == "vdp":
            d["params"] = {"mu": self.system.params.mu}
        elif self.system_id == "rocket":
            d["params"] = dict(vars(self.system.params))
        elif self.system_id == "linear":
            d["params"] = {"A": self.system.A.tolist(), "B": self.system.B.tolist()}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ControlProblem":
        sid = d["system_id"]
        params = d.get("params", {})
        if sid == "vdp":
            system = VanDerPol(VdpParams(**params))
        elif sid == "rocket":
            system = Rocket(RocketParams(**params))
        elif sid == "linear":
            system = LinearSystem(params["A"], params["B"])
        else:
            raise ValueError(f"unknown system {sid!r}")
        return cls(
            system=system,
            T=int(d["T"]),
            dt=float(d["dt"]),
            u_min=d["u_min"],
            u_max=d["u_max"],
            cost_spec=CostSpec.from_dict(d["cost_spec"]),
            x_target=d["x_target"],
        )


def vdp_problem(mu: float = 1.0, T: int = 100, dt: float = 0.05, u_bound: float = 2.0) -> ControlProblem:
    Q = np.diag([10.0, 5.0])
    return ControlProblem(
        system=VanDerPol(VdpParams(mu)),
        T=T,
        dt=dt,
        u_min=[-u_bound],
        u_max=[u_bound],
        cost_spec=CostSpec("quadratic", Q=Q, R=[[0.5]], Qf=20.0 * Q),
        x_target=np.zeros(2),
    )


def rocket_problem(params: RocketParams | None = None, T: int = 50, dt: float = 1.15,
                   w_pos: float = 1.0, w_vel: float = 10.0) -> ControlProblem:
    params = params or RocketParams()
    return ControlProblem(
        system=Rocket(params),
        T=T,
        dt=dt,
        u_min=[-params.t_max] * 3,
        u_max=[params.t_max] * 3,
        cost_spec=CostSpec("fuel", w_pos=w_pos, w_vel=w_vel),
        x_target=np.zeros(7),
    )


def linear_problem(A, B, Q, R, Qf, T: int, u_bound: float = math.inf) -> ControlProblem:
    system = LinearSystem(A, B)
    return ControlProblem(
        system=system,
        T=T,
        dt=1.0,
        u_min=[-u_bound] * system.d_u,
        u_max=[u_bound] * system.d_u,
        cost_spec=CostSpec("quadratic", Q=Q, R=R, Qf=Qf),
        x_target=np.zeros(system.d_x),
    )


# -- rollouts ---------------------------------------------------------------------
@dataclass
class Trajectory:
    states: Tensor  # (B, T+1, d_x)
    controls: Tensor  # (B, T, d_u)
    cost: Tensor  # (B,)

    @property
    def final_state(self) -> np.ndarray:
        return self.states.data[:, -1]


def rollout(problem: ControlProblem, x0, controls, x_target=None) -> Trajectory:
    """Simulate ``controls`` from ``x0`` and attach the trajectory cost."""
    x0, controls = ad.as_tensor(x0), ad.as_tensor(controls)
    squeeze = x0.ndim == 1
    if squeeze:
        x0 = x0.reshape(1, -1)
        controls = controls.reshape((1,) + controls.shape)
    if controls.shape[1:] != (problem.T, problem.d_u) or x0.shape != (controls.shape[0], problem.d_x):
        raise ad.DimensionError(
            f"rollout expects x0 (B, {problem.d_x}) and controls (B, {problem.T}, {problem.d_u}); "
            f"got {x0.shape} and {controls.shape}"
        )
    system, dt = problem.system, problem.dt
    x = x0
    states = [x]
    for t in range(problem.T):
        try:
            x = system.step(x, controls[:, t], dt)
        except InfeasibleMassError as exc:
            raise InfeasibleMassError(f"step {t}: {exc}") from None
        states.append(x)
    states = ad.stack(states, axis=1)
    if problem.system_id == "rocket" and np.any(states.data[..., 6] < problem.system.params.m_dry):
        t = int(np.argmax(np.any(states.data[..., 6] < problem.system.params.m_dry, axis=0)))
        raise InfeasibleMassError(f"step {t - 1}: mass below dry mass")
    target = problem.x_target if x_target is None else x_target
    traj = Trajectory(states, controls, None)
    traj.cost = trajectory_cost(problem, traj, target)
    if squeeze:
        traj = Trajectory(states[0], controls[0], traj.cost[0])
    return traj


def trajectory_cost(problem: ControlProblem, traj: Trajectory, x_target) -> Tensor:
    """Per-sample cost, shape ``(B,)``."""
    spec = problem.cost_spec
    S, U = traj.states, traj.controls
    target = np.asarray(x_target.data if isinstance(x_target, Tensor) else x_target, dtype=float)
    if spec.kind == "quadratic":
        X = S[:, :-1]
        running = ad.tsum(ad.matmul(X, spec.Q) * X, axis=(1, 2)) + ad.tsum(ad.matmul(U, spec.R) * U, axis=(1, 2))
        err = S[:, -1] - target
        terminal = ad.tsum(ad.matmul(err, spec.Qf) * err, axis=-1)
        return running + terminal
    final = S[:, -1]
    fuel = S[:, 0, 6] - final[:, 6]
    pos_err = final[:, 0:3] - target[..., 0:3]
    speed = ad.norm(final[:, 3:6] - target[..., 3:6], axis=-1, eps=1e-12)
    v_tol = problem.system.params.v_tol
    return (
        fuel
        + ad.scale(ad.tsum(ad.square(pos_err), axis=-1), spec.w_pos)
        + ad.scale(ad.square(ad.relu(speed - v_tol)), spec.w_vel)
    )


def fuel_used(states: np.ndarray) -> np.ndarray:
    """m0 - m(tf) for rocket state arrays ``(..., T+1, 7)``."""
    states = np.asarray(states)
    return states[..., 0, 6] - states[..., -1, 6]


def clip_controls(u, u_min, u_max) -> Tensor:
    return ad.clip(u, u_min, u_max)


def terminal_error(problem: ControlProblem, traj: Trajectory, x_target) -> Tensor:
    """x_T - x_target; the rocket variant keeps position and velocity only."""
    target = np.asarray(x_target.data if isinstance(x_target, Tensor) else x_target, dtype=float)
    final = traj.states[..., -1, :]
    err = final - target
    if problem.system_id == "rocket":
        err = err[..., 0:6]
    return err


# -- rocket reporting helpers -------------------------------------------------------
def project_thrust(u: np.ndarray, t_min: float, t_max: float) -> np.ndarray:
    """Rescale each thrust vector so its norm lies in [t_min, t_max].

    Zero vectors are sent to ``t_min`` straight up.
    """
    u = np.array(u, dtype=float)
    mag = np.linalg.norm(u, axis=-1, keepdims=True)
    up = np.zeros_like(u)
    up[..., 2] = 1.0
    direction = np.where(mag > 0, u / np.where(mag > 0, mag, 1.0), up)
    return direction * np.clip(mag, t_min, t_max)


def glideslope_violation(states: np.ndarray, tan_gs: float) -> np.ndarray:
    """Deepest excursion (m) outside the glideslope cone for each trajectory."""
    states = np.asarray(states)
    horiz = np.linalg.norm(states[..., 0:2], axis=-1)
    depth = horiz - states[..., 2] * tan_gs
    return np.maximum(depth.max(axis=-1), 0.0)
