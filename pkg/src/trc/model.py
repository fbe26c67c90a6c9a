"""The TRC network and its recursive forward pass.

One parameter set holds every learnable tensor. The reasoning module
(``reason.*``) exists exactly once and is applied ``K * (n + 1)`` times per
forward pass: ``n`` low-level updates and one high-level update per outer
iteration.

The reasoning module treats its two arguments as a 2-token sequence
``[self; context]``. Each block applies multi-head self-attention and a
feed-forward layer, each followed by a residual add and layernorm; the first
token of the final block is the output.
"""

from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from . import dynamics as dyn
from .autodiff import Tensor


@dataclass
class TrcConfig:
    d_x: int
    d_u: int
    T: int
    d_e: int
    d_z: int = 256
    d_h: int = 512
    L: int = 3
    heads: int = 8
    K: int = 3
    n: int = 4

    def __post_init__(self):
        if self.d_z % self.heads:
            raise ValueError(f"d_z={self.d_z} is not divisible by heads={self.heads}")
        if self.K < 1 or self.n < 1 or self.L < 1:
            raise ValueError("need K >= 1, n >= 1, L >= 1")

    @classmethod
    def for_problem(cls, problem: dyn.ControlProblem, **overrides) -> "TrcConfig":
        defaults = {"n": 6 if problem.system_id == "rocket" else 4}
        defaults.update(overrides)
        return cls(d_x=problem.d_x, d_u=problem.d_u, T=problem.T, d_e=problem.d_e, **defaults)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Normalizer:
    """Per-dimension statistics of initial states and optimal controls."""

    state_mean: np.ndarray
    state_std: np.ndarray
    control_mean: np.ndarray
    control_std: np.ndarray

    STD_FLOOR = 1e-6

    def __post_init__(self):
        for name in ("state_mean", "state_std", "control_mean", "control_std"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=float))
        self.state_std = np.maximum(self.state_std, self.STD_FLOOR)
        self.control_std = np.maximum(self.control_std, self.STD_FLOOR)

    @classmethod
    def fit(cls, x0: np.ndarray, u_star: np.ndarray) -> "Normalizer":
        """``x0`` is (N, d_x); ``u_star`` is (N, T, d_u)."""
        u = np.asarray(u_star).reshape(-1, np.asarray(u_star).shape[-1])
        return cls(x0.mean(axis=0), x0.std(axis=0), u.mean(axis=0), u.std(axis=0))

    @classmethod
    def identity(cls, d_x: int, d_u: int) -> "Normalizer":
        return cls(np.zeros(d_x), np.ones(d_x), np.zeros(d_u), np.ones(d_u))

    def to_dict(self) -> dict:
        return {k: getattr(self, k).tolist() for k in ("state_mean", "state_std", "control_mean", "control_std")}

    @classmethod
    def from_dict(cls, d: dict) -> "Normalizer":
        return cls(**d)


@dataclass
class ForwardRecord:
    controls: list  # K+1 tensors (B, T, d_u), physical units, within bounds
    costs: list  # K+1 tensors (B,)
    latents: list  # K+1 tensors (B, d_z): z_H before refinement, then after each iteration
    errors: list  # K tensors (B, d_e)
    residuals: list  # K tensors (B, T, d_u): pre-clip residual in physical units
    final_states: np.ndarray = field(default=None)  # (B, T+1, d_x) rollout of u^(K)

    @property
    def K(self) -> int:
        return len(self.residuals)

    def cost_matrix(self) -> np.ndarray:
        return np.stack([c.data for c in self.costs], axis=1)

    def residual_norms(self) -> np.ndarray:
        """(B, K) Euclidean norms of each residual."""
        if not self.residuals:
            return np.zeros((len(self.costs[0].data), 0))
        return np.stack([np.linalg.norm(r.data.reshape(len(r.data), -1), axis=-1) for r in self.residuals], axis=1)

    def controls_array(self) -> np.ndarray:
        """(K+1, B, T, d_u)."""
        return np.stack([u.data for u in self.controls])

    def latents_array(self) -> np.ndarray:
        """(K+1, B, d_z)."""
        return np.stack([z.data for z in self.latents])


def _init_linear(rng, fan_in: int, fan_out: int, bias: bool = True):
    bound = 1.0 / math.sqrt(fan_in)
    w = rng.uniform(-bound, bound, size=(fan_in, fan_out))
    b = rng.uniform(-bound, bound, size=fan_out) if bias else None
    return w, b


class TRCModel:
    """Parameters plus the forward pass; parameters live in ``self.params``."""

    def __init__(self, config: TrcConfig, normalizer: Normalizer | None = None, seed: int = 0):
        self.config = config
        self.normalizer = normalizer or Normalizer.identity(config.d_x, config.d_u)
        self.params: OrderedDict[str, Tensor] = OrderedDict()
        self._init_params(np.random.default_rng(seed))

    # -- parameters -------------------------------------------------------
    def _add(self, name: str, value: np.ndarray) -> None:
        self.params[name] = Tensor(value, requires_grad=True, name=name)

    def _add_linear(self, rng, name: str, fan_in: int, fan_out: int, bias: bool = True) -> None:
        w, b = _init_linear(rng, fan_in, fan_out, bias)
        self._add(f"{name}.w", w)
        if bias:
            self._add(f"{name}.b", b)

    def _add_layernorm(self, name: str, d: int) -> None:
        self._add(f"{name}.gamma", np.ones(d))
        self._add(f"{name}.beta", np.zeros(d))

    def _init_params(self, rng) -> None:
        c = self.config
        dz, dh, flat_u = c.d_z, c.d_h, c.T * c.d_u
        self._add_linear(rng, "state_enc.fc1", 2 * c.d_x + 1, dz)
        self._add_layernorm("state_enc.ln", dz)
        self._add_linear(rng, "state_enc.fc2", dz, dz)
        self._add_linear(rng, "error_enc.fc1", c.d_e, dz)
        self._add_layernorm("error_enc.ln", dz)
        self._add_linear(rng, "error_enc.fc2", dz, dz)
        self._add_linear(rng, "control_embed", flat_u, dz)
        self._add("H_init", rng.normal(0.0, 0.02, dz))
        self._add("L_init", rng.normal(0.0, 0.02, dz))
        self._add_linear(rng, "proj_H", dz, dz, bias=False)
        self._add_linear(rng, "proj_L", dz, dz, bias=False)
        for i in range(c.L):
            p = f"reason.{i}"
            for part in ("q", "k", "v", "o"):
                self._add_linear(rng, f"{p}.attn.{part}", dz, dz)
            self._add_layernorm(f"{p}.ln1", dz)
            self._add_linear(rng, f"{p}.ff1", dz, dh)
            self._add_linear(rng, f"{p}.ff2", dh, dz)
            self._add_layernorm(f"{p}.ln2", dz)
        self._add_linear(rng, "init_dec.fc1", dz, dh)
        self._add_linear(rng, "init_dec.fc2", dh, flat_u)
        self._add_linear(rng, "res_dec.fc1", dz + flat_u, dh)
        self._add_linear(rng, "res_dec.fc2", dh, flat_u)

    def param_count(self) -> int:
        return sum(p.data.size for p in self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    # -- building blocks ----------------------------------------------------
    def _linear(self, name: str, x) -> Tensor:
        return ad.linear(x, self.params[f"{name}.w"], self.params.get(f"{name}.b"))

    def _layernorm(self, name: str, x) -> Tensor:
        return ad.layernorm(x, self.params[f"{name}.gamma"], self.params[f"{name}.beta"])

    def _mlp_encoder(self, name: str, x) -> Tensor:
        h = ad.gelu(self._layernorm(f"{name}.ln", self._linear(f"{name}.fc1", x)))
        return self._linear(f"{name}.fc2", h)

    def _attention(self, prefix: str, x: Tensor) -> Tensor:
        B, S, dz = x.shape
        H = self.config.heads
        dk = dz // H

        def heads(t):
            return t.reshape(B, S, H, dk).swapaxes(1, 2)  # (B, H, S, dk)

        q = heads(self._linear(f"{prefix}.q", x))
        k = heads(self._linear(f"{prefix}.k", x))
        v = heads(self._linear(f"{prefix}.v", x))
        scores = ad.scale(ad.matmul(q, k.swapaxes(-1, -2)), 1.0 / math.sqrt(dk))
        mixed = ad.matmul(ad.softmax(scores), v).swapaxes(1, 2).reshape(B, S, dz)
        return self._linear(f"{prefix}.o", mixed)

    def reasoning_step(self, z_self, z_context) -> Tensor:
        """The shared module: (B, d_z) x (B, d_z) -> (B, d_z)."""
        h = ad.stack([z_self, z_context], axis=1)
        for i in range(self.config.L):
            p = f"reason.{i}"
            h = self._layernorm(f"{p}.ln1", h + self._attention(f"{p}.attn", h))
            ff = self._linear(f"{p}.ff2", ad.gelu(self._linear(f"{p}.ff1", h)))
            h = self._layernorm(f"{p}.ln2", h + ff)
        return h[:, 0]

    def encode_state(self, x0, x_target, t_remaining: float = 1.0) -> Tensor:
        nz = self.normalizer
        x0, xt = np.asarray(x0, dtype=float), np.asarray(x_target, dtype=float)
        if x0.shape[-1] != self.config.d_x or xt.shape != x0.shape:
            raise ad.DimensionError(f"state encoder expects x0 and x_target of width {self.config.d_x}, "
                                    f"got {x0.shape} and {xt.shape}")
        x0 = (x0 - nz.state_mean) / nz.state_std
        xt = (xt - nz.state_mean) / nz.state_std
        feats = np.concatenate([x0, xt, np.full(x0.shape[:-1] + (1,), t_remaining)], axis=-1)
        return self._mlp_encoder("state_enc", feats)

    def encode_error(self, e) -> Tensor:
        """``e`` in physical units; scaled by the state std of the matching dimensions."""
        e = ad.as_tensor(e)
        if e.shape[-1] != self.config.d_e:
            raise ad.DimensionError(f"error encoder expects d_e={self.config.d_e}, got {e.shape[-1]}")
        return self._mlp_encoder("error_enc", e / self.normalizer.state_std[: self.config.d_e])

    def _normalize_controls(self, u) -> Tensor:
        nz = self.normalizer
        return (ad.as_tensor(u) - nz.control_mean) / nz.control_std

    def embed_controls(self, u) -> Tensor:
        un = self._normalize_controls(u)
        return self._linear("control_embed", un.reshape(un.shape[0], -1))

    def initial_controls(self, z0) -> Tensor:
        c, nz = self.config, self.normalizer
        out = self._linear("init_dec.fc2", ad.gelu(self._linear("init_dec.fc1", z0)))
        return out.reshape(out.shape[0], c.T, c.d_u) * nz.control_std + nz.control_mean

    def residual(self, z_h, u_prev) -> Tensor:
        c = self.config
        un = self._normalize_controls(u_prev)
        h = ad.concat([z_h, un.reshape(un.shape[0], -1)], axis=-1)
        out = self._linear("res_dec.fc2", ad.gelu(self._linear("res_dec.fc1", h)))
        return out.reshape(out.shape[0], c.T, c.d_u) * self.normalizer.control_std

    # -- recursion ------------------------------------------------------------
    def forward(self, problem: dyn.ControlProblem, x0, x_target=None, K: int | None = None,
                n: int | None = None, initial_controls=None) -> ForwardRecord:
        """Run the two-level refinement for a batch ``x0`` of shape (B, d_x).

        ``initial_controls`` replaces the decoder's u^(0) when given (used to
        refine externally supplied sequences).
        """
        K = self.config.K if K is None else K
        n = self.config.n if n is None else n
        x0 = np.atleast_2d(np.asarray(x0, dtype=float))
        if x_target is None:
            x_target = np.tile(problem.x_target, (len(x0), 1))
        x_target = np.atleast_2d(np.asarray(x_target, dtype=float))
        lo, hi = problem.u_min, problem.u_max

        z0 = self.encode_state(x0, x_target)
        z_h = self.params["H_init"] + self._linear("proj_H", z0)
        z_l = self.params["L_init"] + self._linear("proj_L", z0)
        if initial_controls is None:
            u = dyn.clip_controls(self.initial_controls(z0), lo, hi)
        else:
            u = dyn.clip_controls(ad.as_tensor(initial_controls), lo, hi)

        rec = ForwardRecord(controls=[u], costs=[], latents=[z_h], errors=[], residuals=[])
        for k in range(1, K + 1):
            try:
                traj = dyn.rollout(problem, x0, u, x_target)
            except dyn.InfeasibleMassError as exc:
                raise dyn.InfeasibleMassError(f"iteration {k - 1}: {exc}") from None
            rec.costs.append(traj.cost)
            err = dyn.terminal_error(problem, traj, x_target)
            rec.errors.append(err)
            z_ctx = z0 + self.encode_error(err) + self.embed_controls(u)
            for _ in range(n):
                z_l = self.reasoning_step(z_l, z_h + z_ctx)
            z_h = self.reasoning_step(z_h, z_l)
            du = self.residual(z_h, u)
            u = dyn.clip_controls(u + du, lo, hi)
            rec.latents.append(z_h)
            rec.residuals.append(du)
            rec.controls.append(u)
        try:
            final = dyn.rollout(problem, x0, u, x_target)
        except dyn.InfeasibleMassError as exc:
            raise dyn.InfeasibleMassError(f"iteration {K}: {exc}") from None
        rec.costs.append(final.cost)
        rec.final_states = final.states.data
        return rec

    # -- state ------------------------------------------------------------------
    def state_arrays(self) -> OrderedDict:
        return OrderedDict((k, v.data) for k, v in self.params.items())

    def load_arrays(self, arrays: dict) -> None:
        for k, p in self.params.items():
            a = np.asarray(arrays[k], dtype=float)
            if a.shape != p.shape:
                raise ad.DimensionError(f"parameter {k}: expected {p.shape}, got {a.shape}")
            p.data = a.copy()
