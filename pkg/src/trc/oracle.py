"""Optimal demonstrations by direct shooting, plus closed-form LQR for checking.

Direct shooting runs projected Adam on the whole control sequence, using the
autodiff gradient of the rollout cost. Controls are optimized in units of
``problem.control_scale`` so one step size suits both the oscillator
(|u| <= 2) and the lander (|T_i| <= 13 kN). Every sample in a batch keeps its
own Adam moments and step size; a step that raises a sample's objective is
rejected, that sample's step size halved and its moments restarted from the
current gradient, so each sample's objective sequence is non-increasing.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from . import dynamics as dyn
from .autodiff import Tape, Tensor

log = logging.getLogger(__name__)


class DivergenceError(RuntimeError):
    """The oracle produced a non-finite cost."""


class GenerationError(RuntimeError):
    """Too many dataset samples failed to converge."""


@dataclass
class OracleConfig:
    max_iters: int = 2000
    step_size: float = 0.05
    optimizer: str = "adam"
    convergence_tol: float = 1e-7
    patience: int = 10
    restarts: int = 3
    seed: int = 0
    # rocket only: hinge-penalty weights, multiplied by anneal**round
    penalty_weights: dict = field(
        default_factory=lambda: {"thrust": 1e-4, "glideslope": 1.0, "terminal_velocity": 10.0}
    )
    penalty_rounds: int = 3
    anneal: float = 10.0
    # rocket acceptance gate after the final thrust projection
    max_terminal_miss: float = 5.0
    max_terminal_speed: float = 2.0
    chunk_size: int = 1000

    def __post_init__(self):
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if self.step_size <= 0 or self.convergence_tol <= 0:
            raise ValueError("step_size and convergence_tol must be positive")
        if self.optimizer != "adam":
            raise ValueError(f"unsupported optimizer {self.optimizer!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "OracleConfig":
        return cls(**d)


@dataclass
class Sample:
    x0: np.ndarray
    x_target: np.ndarray
    u_star: np.ndarray  # (T, d_u)
    j_star: float

    def to_dict(self) -> dict:
        return {
            "x0": self.x0.tolist(),
            "x_target": self.x_target.tolist(),
            "u_star": self.u_star.reshape(-1).tolist(),
            "j_star": self.j_star,
        }

    @classmethod
    def from_dict(cls, d: dict, T: int, d_u: int) -> "Sample":
        return cls(
            x0=np.asarray(d["x0"], dtype=float),
            x_target=np.asarray(d["x_target"], dtype=float),
            u_star=np.asarray(d["u_star"], dtype=float).reshape(T, d_u),
            j_star=float(d["j_star"]),
        )


# -- LQR ------------------------------------------------------------------------
@dataclass
class LQRProblem:
    A: np.ndarray
    B: np.ndarray
    Q: np.ndarray
    R: np.ndarray
    Qf: np.ndarray
    T: int

    def __post_init__(self):
        for name in ("A", "B", "Q", "R", "Qf"):
            setattr(self, name, np.atleast_2d(np.asarray(getattr(self, name), dtype=float)))
        n, m = self.B.shape
        if self.A.shape != (n, n) or self.Q.shape != (n, n) or self.Qf.shape != (n, n) or self.R.shape != (m, m):
            raise ValueError("inconsistent LQR matrix dimensions")

    def as_control_problem(self) -> dyn.ControlProblem:
        return dyn.linear_problem(self.A, self.B, self.Q, self.R, self.Qf, self.T)


def riccati_lqr(lqr: LQRProblem, x0) -> tuple[float, list[np.ndarray]]:
    """Finite-horizon backward Riccati recursion.

    Returns the optimal cost ``x0' P_0 x0`` and the gains ``K_t`` (u_t = -K_t x_t).
    """
    A, B, Q, R = lqr.A, lqr.B, lqr.Q, lqr.R
    P = lqr.Qf
    gains = []
    for _ in range(lqr.T):
        S = R + B.T @ P @ B
        if np.linalg.cond(S) > 1e12:
            raise np.linalg.LinAlgError("R + B'PB is singular")
        K = np.linalg.solve(S, B.T @ P @ A)
        P = Q + A.T @ P @ (A - B @ K)
        P = 0.5 * (P + P.T)
        gains.append(K)
    gains.reverse()
    x0 = np.asarray(x0, dtype=float)
    return float(x0 @ P @ x0), gains


# -- shooting objective -------------------------------------------------------------
def _penalties(problem: dyn.ControlProblem, states: Tensor, controls: Tensor, weights: dict, mult: float) -> Tensor:
    p = problem.system.params
    mag = ad.norm(controls, axis=-1, eps=dyn.Rocket.NORM_EPS)
    thrust = ad.square(ad.relu(mag - p.t_max)) + ad.square(ad.relu(p.t_min - mag))
    horiz = ad.norm(states[..., 0:2], axis=-1, eps=1e-12)
    glide = ad.square(ad.relu(horiz - ad.scale(states[..., 2], p.tan_gs)))
    speed = ad.norm(states[:, -1, 3:6], axis=-1, eps=1e-12)
    term_v = ad.square(ad.relu(speed - p.v_tol))
    return ad.scale(
        ad.scale(ad.tsum(thrust, axis=-1), weights["thrust"])
        + ad.scale(ad.tsum(glide, axis=-1), weights["glideslope"])
        + ad.scale(term_v, weights["terminal_velocity"]),
        mult,
    )


def _objective_and_grad(problem, x0, w, scale, x_target, weights=None, mult=0.0):
    W = Tensor(w, requires_grad=True)
    with Tape() as tape:
        traj = dyn.rollout(problem, x0, W * scale, x_target)
        obj = traj.cost
        if weights is not None:
            obj = obj + _penalties(problem, traj.states, traj.controls, weights, mult)
        total = obj.sum()
    tape.backward(total)
    grad = W.grad if W.grad is not None else np.zeros_like(w)
    return obj.data.copy(), grad


def _initial_guess(problem: dyn.ControlProblem, x0: np.ndarray, rng: np.random.Generator, restart: int) -> np.ndarray:
    B = len(x0)
    shape = (B, problem.T, problem.d_u)
    scale = problem.control_scale
    if problem.system_id == "rocket":
        # hover thrust along +z, perturbed on restarts
        w = np.zeros(shape)
        w[..., 2] = (x0[:, 6] * problem.system.params.g_mars / scale[2])[:, None]
        if restart:
            w = w + rng.uniform(-0.15, 0.15, size=shape)
    elif restart == 0:
        w = np.zeros(shape)
    else:
        w = rng.uniform(-0.5, 0.5, size=shape)
    lo, hi = problem.u_min / scale, problem.u_max / scale
    return np.clip(w, lo, hi)


def _adam_batch(problem, x0, w, x_target, config: OracleConfig, weights=None, mult=0.0):
    """Projected Adam with per-sample backtracking. Returns (w, objective, iterations)."""
    scale = problem.control_scale
    lo, hi = problem.u_min / scale, problem.u_max / scale
    b1, b2, eps = 0.9, 0.999, 1e-8
    B = len(x0)
    J, g = _objective_and_grad(problem, x0, w, scale, x_target, weights, mult)
    if not np.all(np.isfinite(J)):
        raise DivergenceError("non-finite cost at the initial guess")
    m = np.zeros_like(w)
    v = np.zeros_like(w)
    steps = np.zeros(B)
    lr = np.full(B, config.step_size)
    fresh = np.ones(B, dtype=bool)
    history = np.full((config.patience + 1, B), np.inf)
    history[-1] = J
    active = np.ones(B, dtype=bool)
    iters = np.zeros(B, dtype=int)
    since_reject = np.zeros(B, dtype=int)
    for _ in range(config.max_iters):
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        f = fresh[idx]
        if f.any():
            fi = idx[f]
            m[fi] = b1 * m[fi] + (1 - b1) * g[fi]
            v[fi] = b2 * v[fi] + (1 - b2) * g[fi] ** 2
            steps[fi] += 1
        t = steps[idx][:, None, None]
        mhat = m[idx] / (1 - b1**t)
        vhat = v[idx] / (1 - b2**t)
        cand = np.clip(w[idx] - lr[idx][:, None, None] * mhat / (np.sqrt(vhat) + eps), lo, hi)
        Jc, gc = _objective_and_grad(problem, x0[idx], cand, scale, x_target[idx], weights, mult)
        if not np.all(np.isfinite(Jc)):
            bad = idx[~np.isfinite(Jc)]
            raise DivergenceError(f"non-finite cost for batch entries {bad.tolist()[:5]}")
        acc = Jc <= J[idx]
        ai = idx[acc]
        w[ai], J[ai], g[ai] = cand[acc], Jc[acc], gc[acc]
        ri = idx[~acc]
        lr[ri] *= 0.5
        lr[ai] = np.minimum(lr[ai] * 1.25, config.step_size)
        # stale momentum need not point downhill at w: restart it from g(w)
        m[ri] = 0.0
        v[ri] = 0.0
        steps[ri] = 0
        fresh[idx] = True
        iters[idx] += 1
        since_reject[idx] = np.where(acc, since_reject[idx] + 1, 0)
        history = np.roll(history, -1, axis=0)
        history[-1] = J
        rel = (history[0] - J) / np.maximum(np.abs(J), 1e-12)
        # a run of rejected steps leaves J flat without being converged
        stalled = (rel < config.convergence_tol) & (since_reject >= config.patience)
        active &= ~(stalled | (lr < 1e-10))
    return w, J, iters


def solve_batch(problem: dyn.ControlProblem, x0, config: OracleConfig, x_target=None, seeds=None):
    """Solve a batch of shooting problems; returns ``(u_star, j_star, iterations)``.

    ``j_star`` is the problem's trajectory cost (penalty terms excluded) of the
    returned controls; for the lander those controls are first projected onto
    the thrust-magnitude bounds.
    """
    x0 = np.atleast_2d(np.asarray(x0, dtype=float))
    B = len(x0)
    if x_target is None:
        x_target = np.tile(problem.x_target, (B, 1))
    x_target = np.atleast_2d(np.asarray(x_target, dtype=float))
    if not np.all(np.isfinite(x0)):
        raise ValueError("x0 must be finite")
    if seeds is None:
        seeds = [config.seed] * B
    scale = problem.control_scale
    rocket = problem.system_id == "rocket"
    best_w = None
    best_J = np.full(B, np.inf)
    total_iters = np.zeros(B, dtype=int)
    for r in range(config.restarts):
        rngs = [np.random.default_rng([int(s), r]) for s in seeds]
        w = np.concatenate([_initial_guess(problem, x0[i : i + 1], rngs[i], r) for i in range(B)])
        if rocket:
            for k in range(config.penalty_rounds):
                w, _, it = _adam_batch(problem, x0, w, x_target, config, config.penalty_weights, config.anneal**k)
                total_iters += it
            w = dyn.project_thrust(w * scale, problem.system.params.t_min, problem.system.params.t_max) / scale
        else:
            w, _, it = _adam_batch(problem, x0, w, x_target, config)
            total_iters += it
        J = dyn.rollout(problem, x0, w * scale, x_target).cost.data
        better = J < best_J
        best_J = np.where(better, J, best_J)
        best_w = w.copy() if best_w is None else np.where(better[:, None, None], w, best_w)
    return best_w * scale, best_J, total_iters


def solve_direct_shooting(problem: dyn.ControlProblem, x0, config: OracleConfig | None = None, x_target=None) -> Sample:
    config = config or OracleConfig()
    target = problem.x_target if x_target is None else np.asarray(x_target, dtype=float)
    u, J, _ = solve_batch(problem, np.asarray(x0, dtype=float)[None], config, target[None])
    return Sample(np.asarray(x0, dtype=float), target, u[0], float(J[0]))


def true_cost_gradient(problem: dyn.ControlProblem, x0, controls, x_target=None) -> np.ndarray:
    """d J / d u through the differentiable rollout; same shape as ``controls``."""
    U = Tensor(controls, requires_grad=True)
    with Tape() as tape:
        cost = dyn.rollout(problem, x0, U, x_target).cost.sum()
    tape.backward(cost)
    return U.grad


# -- datasets -------------------------------------------------------------------------
def sample_initial_states(problem: dyn.ControlProblem, n: int, rng: np.random.Generator) -> np.ndarray:
    if problem.system_id == "vdp":
        return rng.uniform(-2.0, 2.0, size=(n, 2))
    if problem.system_id == "rocket":
        z = rng.uniform(1500.0, 2500.0, n)
        r_xy = _uniform_disk(rng, n, 500.0)
        vz = rng.uniform(-100.0, -50.0, n)
        v_xy = _uniform_disk(rng, n, 50.0)
        m0 = rng.uniform(1800.0, 2000.0, n)
        return np.column_stack([r_xy, z, v_xy, vz, m0])
    raise ValueError(f"no initial-state distribution for {problem.system_id!r}")


def _uniform_disk(rng: np.random.Generator, n: int, radius: float) -> np.ndarray:
    rad = radius * np.sqrt(rng.uniform(0.0, 1.0, n))
    ang = rng.uniform(0.0, 2.0 * np.pi, n)
    return np.column_stack([rad * np.cos(ang), rad * np.sin(ang)])


def sample_ok(problem: dyn.ControlProblem, x0, u, J, config: OracleConfig) -> np.ndarray:
    ok = np.isfinite(J)
    if problem.system_id == "rocket":
        final = dyn.rollout(problem, x0, u).states.data[:, -1]
        ok &= np.linalg.norm(final[:, 0:3], axis=-1) <= config.max_terminal_miss
        ok &= np.linalg.norm(final[:, 3:6], axis=-1) <= config.max_terminal_speed
    return ok


def generate_dataset(problem: dyn.ControlProblem, n_samples: int, config: OracleConfig | None = None,
                     seed: int = 0, max_failure_fraction: float = 0.05):
    """Draw ``n_samples`` initial states and solve each one.

    Returns ``(samples, failures)`` where ``failures`` lists the indices that
    were skipped. Raises :class:`GenerationError` when more than
    ``max_failure_fraction`` of the draws fail.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    config = config or OracleConfig()
    rng = np.random.default_rng(seed)
    x0_all = sample_initial_states(problem, n_samples, rng)
    samples: list[Sample] = []
    failures: list[int] = []
    for start in range(0, n_samples, config.chunk_size):
        x0 = x0_all[start : start + config.chunk_size]
        seeds = [seed * 1_000_003 + start + i for i in range(len(x0))]
        try:
            u, J, _ = solve_batch(problem, x0, config, seeds=seeds)
            ok = sample_ok(problem, x0, u, J, config)
        except (DivergenceError, dyn.InfeasibleMassError) as exc:
            log.warning("chunk at %d failed as a whole: %s", start, exc)
            failures.extend(range(start, start + len(x0)))
            continue
        for i in range(len(x0)):
            if ok[i]:
                samples.append(Sample(x0[i].copy(), problem.x_target.copy(), u[i], float(J[i])))
            else:
                failures.append(start + i)
        log.info("solved %d/%d", start + len(x0), n_samples)
    if len(failures) > max_failure_fraction * n_samples:
        raise GenerationError(f"{len(failures)} of {n_samples} samples failed (limit {max_failure_fraction:.0%})")
    return samples, failures
