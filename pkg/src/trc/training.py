"""Process-supervised training, AdamW with cosine annealing, and evaluation."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import dynamics as dyn
from . import oracle as orc
from .autodiff import Tape, Tensor
from .model import ForwardRecord, Normalizer, TRCModel, TrcConfig

log = logging.getLogger(__name__)

__all__ = [
    "TrainConfig", "Normalizer", "MetricsRecord", "AdamW", "TrainingError", "DivergenceError",
    "process_supervision_loss", "improvement_metric", "cosine_lr", "clip_grad_norm",
    "adamw_step", "split_indices", "train", "evaluate", "controls_report",
]


class TrainingError(RuntimeError):
    """A batch produced a non-finite loss."""


class DivergenceError(TrainingError):
    """Loss stayed non-finite for several consecutive epochs."""


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 64
    epochs: int = 50
    lam: float = 0.1
    grad_clip_norm: float = 1.0
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    val_fraction: float = 0.1
    divergence_patience: int = 3

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lam must be >= 0")
        if self.grad_clip_norm <= 0:
            raise ValueError("grad_clip_norm must be positive")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be >= 1 and epochs >= 0")

    @classmethod
    def for_problem(cls, problem: dyn.ControlProblem, **overrides) -> "TrainConfig":
        rocket = problem.system_id == "rocket"
        defaults = {"lam": 0.5 if rocket else 0.1, "epochs": 200 if rocket else 50}
        defaults.update(overrides)
        return cls(**defaults)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


@dataclass
class MetricsRecord:
    epoch: int
    control_loss: float
    improvement_metric: float
    normalized_costs: list  # mean J(k)/J(0) for k = 0..K
    total_loss: float
    learning_rate: float
    val_control_loss: float = math.nan
    val_total_loss: float = math.nan
    skipped_steps: int = 0

    def to_row(self) -> dict:
        row = asdict(self)
        costs = row.pop("normalized_costs")
        for k, c in enumerate(costs):
            row[f"norm_cost_{k}"] = c
        return row


# -- loss and metric -------------------------------------------------------------
def process_supervision_loss(record: ForwardRecord, u_star, lam: float, normalizer: Normalizer,
                             K: int | None = None):
    """Final-accuracy term minus the lambda-weighted improvement reward.

    The accuracy term is the squared control error in normalized units,
    averaged over batch and entries. The reward averages the normalized cost
    drops over transitions 0..K-1; samples with J(0) <= 0 contribute zero.
    Returns ``(loss, control_loss, reward)``.
    """
    K = record.K if K is None else K
    u_k = record.controls[K] if K < len(record.controls) else record.controls[-1]
    diff = (u_k - np.asarray(u_star, dtype=float)) / normalizer.control_std
    control_loss = ad.square(diff).mean()
    if lam == 0 or K < 2:
        reward = Tensor(0.0)
        loss = control_loss
    else:
        j0 = record.costs[0]
        valid = j0.data > 0
        safe_j0 = ad.add(ad.mul(j0, valid.astype(float)), (~valid).astype(float))
        drop = ad.sub(record.costs[0], record.costs[1])
        for k in range(2, K):
            drop = drop + ad.sub(record.costs[k - 1], record.costs[k])
        drop = drop / safe_j0
        reward = ad.mul(drop, valid.astype(float)).mean() * (1.0 / (K - 1))
        loss = control_loss - reward * lam
    if not np.isfinite(loss.data):
        costs = np.stack([c.data for c in record.costs], axis=1)
        bad = np.where(~np.all(np.isfinite(costs), axis=1))[0]
        raise TrainingError(
            f"non-finite loss: control_loss={control_loss.item()}, non-finite cost rows={bad.tolist()[:10]}"
        )
    return loss, control_loss.item(), reward.item()


def improvement_metric(costs, K: int | None = None) -> float:
    """Mean relative per-transition cost drop over J(0)..J(K-1).

    ``costs`` is (B, M) or a single row; K defaults to M. Samples with
    J(0) <= 0 are excluded from the average.
    """
    costs = np.atleast_2d(np.asarray(costs, dtype=float))
    K = costs.shape[1] if K is None else K
    if K < 2:
        return 0.0
    keep = costs[:, 0] > 0
    if not keep.any():
        return 0.0
    c = costs[keep, :K]
    drops = (c[:, :-1] - c[:, 1:]) / c[:, :1]
    return float(drops.sum() / (len(c) * (K - 1)))


# -- optimizer ---------------------------------------------------------------------
def cosine_lr(base_lr: float, step: int, total_steps: int) -> float:
    if total_steps <= 1:
        return base_lr
    return 0.5 * base_lr * (1.0 + math.cos(math.pi * min(step, total_steps - 1) / (total_steps - 1)))


def clip_grad_norm(grads: list, max_norm: float) -> tuple[list, float]:
    """Scale ``grads`` so their global L2 norm is at most ``max_norm``."""
    total = math.sqrt(sum(float(np.sum(g * g)) for g in grads))
    if total > max_norm:
        s = max_norm / total
        grads = [g * s for g in grads]
    return grads, total


class AdamW:
    """Decoupled weight-decay Adam over a dict of tensors."""

    def __init__(self, params: dict, lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.01):
        self.params = params
        self.lr, self.betas, self.eps, self.weight_decay = lr, betas, eps, weight_decay
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.t = 0

    def step(self, grads: dict, lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        b1, b2 = self.betas
        self.t += 1
        c1, c2 = 1 - b1 ** self.t, 1 - b2 ** self.t
        for k, p in self.params.items():
            g = grads.get(k)
            if g is None:
                g = np.zeros_like(p.data)
            m, v = self.m[k], self.v[k]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            p.data = p.data * (1 - lr * self.weight_decay) - lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state_dict(self) -> dict:
        return {"t": self.t, "m": self.m, "v": self.v}


def adamw_step(params: dict, grads: dict, config: TrainConfig, step_index: int, optimizer: AdamW,
               total_steps: int) -> tuple[bool, float]:
    """Clip, then take one AdamW step at the cosine-annealed rate.

    Returns ``(applied, grad_norm)``; non-finite gradients skip the step.
    """
    names = list(params)
    glist = [grads[k] if grads.get(k) is not None else np.zeros_like(params[k].data) for k in names]
    if not all(np.all(np.isfinite(g)) for g in glist):
        return False, math.nan
    glist, norm = clip_grad_norm(glist, config.grad_clip_norm)
    lr = cosine_lr(config.learning_rate, step_index, total_steps)
    optimizer.step(dict(zip(names, glist)), lr)
    return True, norm


# -- data helpers ------------------------------------------------------------------
def split_indices(n: int, val_fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    perm = np.random.default_rng(seed).permutation(n)
    n_val = int(round(n * val_fraction)) if n > 1 else 0
    return np.sort(perm[n_val:]), np.sort(perm[:n_val])


def _arrays(samples) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    x0 = np.stack([s.x0 for s in samples])
    xt = np.stack([s.x_target for s in samples])
    u = np.stack([s.u_star for s in samples])
    j = np.array([s.j_star for s in samples])
    return x0, xt, u, j


def _batch_loss(model: TRCModel, problem, x0, xt, u_star, lam):
    rec = model.forward(problem, x0, xt)
    loss, closs, reward = process_supervision_loss(rec, u_star, lam, model.normalizer)
    return rec, loss, closs, reward


def _validate(model, problem, x0, xt, u_star, lam, batch_size) -> tuple[float, float]:
    if len(x0) == 0:
        return math.nan, math.nan
    tot = ctl = 0.0
    for s in range(0, len(x0), batch_size):
        sl = slice(s, s + batch_size)
        _, loss, closs, _ = _batch_loss(model, problem, x0[sl], xt[sl], u_star[sl], lam)
        w = len(x0[sl])
        tot += loss.item() * w
        ctl += closs * w
    return ctl / len(x0), tot / len(x0)


# -- training loop -----------------------------------------------------------------
@dataclass
class TrainResult:
    model: TRCModel
    history: list = field(default_factory=list)
    best_epoch: int = -1
    train_indices: np.ndarray = None
    val_indices: np.ndarray = None


def train(problem: dyn.ControlProblem, samples: list, trc_config: TrcConfig, train_config: TrainConfig,
          out_dir: str | Path | None = None, on_epoch=None) -> TrainResult:
    """Fit a TRC model on ``samples``; checkpoints go to ``out_dir`` when given.

    Writes ``best.ckpt`` (lowest validation loss), ``final.ckpt`` and
    ``training_metrics.csv``.
    """
    from . import artifacts

    if not samples:
        raise ValueError("dataset is empty")
    cfg = train_config
    x0, xt, u_star, _ = _arrays(samples)
    tr_idx, va_idx = split_indices(len(samples), cfg.val_fraction, cfg.seed)
    normalizer = Normalizer.fit(x0[tr_idx], u_star[tr_idx])
    model = TRCModel(trc_config, normalizer, seed=cfg.seed)
    opt = AdamW(model.params, cfg.learning_rate, (cfg.beta1, cfg.beta2), cfg.eps, cfg.weight_decay)
    rng = np.random.default_rng(cfg.seed + 1)
    steps_per_epoch = math.ceil(len(tr_idx) / cfg.batch_size)
    total_steps = max(1, steps_per_epoch * cfg.epochs)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    def save(name):
        if out is not None:
            artifacts.save_checkpoint(out / name, model, problem, train_config=cfg)

    result = TrainResult(model=model, train_indices=tr_idx, val_indices=va_idx)
    best = math.inf
    bad_epochs = 0
    step = 0
    for epoch in range(cfg.epochs):
        perm = tr_idx[rng.permutation(len(tr_idx))]
        sums = {"loss": 0.0, "ctl": 0.0, "n": 0}
        cost_rows = []
        skipped = 0
        nonfinite = False
        for s in range(0, len(perm), cfg.batch_size):
            b = perm[s:s + cfg.batch_size]
            model.zero_grad()
            try:
                with Tape() as tape:
                    rec, loss, closs, _ = _batch_loss(model, problem, x0[b], xt[b], u_star[b], cfg.lam)
                tape.backward(loss)
            except TrainingError as exc:
                log.warning("epoch %d batch %d: %s", epoch, s // cfg.batch_size, exc)
                nonfinite = True
                skipped += 1
                step += 1
                continue
            applied, _ = adamw_step(model.params, {k: p.grad for k, p in model.params.items()}, cfg, step,
                                    opt, total_steps)
            skipped += not applied
            step += 1
            sums["loss"] += loss.item() * len(b)
            sums["ctl"] += closs * len(b)
            sums["n"] += len(b)
            cost_rows.append(rec.cost_matrix())
        n = max(sums["n"], 1)
        if cost_rows:
            costs = np.concatenate(cost_rows)
            with np.errstate(divide="ignore", invalid="ignore"):
                norm_costs = np.mean(costs / costs[:, :1], axis=0)
        else:
            costs = np.full((1, trc_config.K + 1), math.nan)
            norm_costs = costs[0]
        val_ctl, val_tot = _validate(model, problem, x0[va_idx], xt[va_idx], u_star[va_idx], cfg.lam,
                                     max(cfg.batch_size, 256))
        metric = MetricsRecord(
            epoch=epoch,
            control_loss=sums["ctl"] / n if sums["n"] else math.nan,
            improvement_metric=improvement_metric(costs, trc_config.K),
            normalized_costs=[float(c) for c in norm_costs],
            total_loss=sums["loss"] / n if sums["n"] else math.nan,
            learning_rate=cosine_lr(cfg.learning_rate, max(step - 1, 0), total_steps),
            val_control_loss=val_ctl,
            val_total_loss=val_tot,
            skipped_steps=skipped,
        )
        result.history.append(metric)
        log.info("epoch %d loss %.5g control %.5g improvement %.4f val %.5g", epoch, metric.total_loss,
                 metric.control_loss, metric.improvement_metric, val_tot)
        if on_epoch is not None:
            on_epoch(metric)
        if out is not None:
            artifacts.write_metrics_csv(out / "training_metrics.csv", result.history)

        bad_epochs = bad_epochs + 1 if nonfinite or not math.isfinite(metric.total_loss) else 0
        if bad_epochs >= cfg.divergence_patience:
            save("final.ckpt")
            raise DivergenceError(f"loss non-finite for {bad_epochs} consecutive epochs (last epoch {epoch})")
        score = val_tot if math.isfinite(val_tot) else metric.total_loss
        if math.isfinite(score) and score < best:
            best = score
            result.best_epoch = epoch
            save("best.ckpt")
    save("final.ckpt")
    return result


# -- evaluation --------------------------------------------------------------------
def _mean_pairwise_distance(z: np.ndarray) -> float:
    if len(z) < 2:
        return 0.0
    sq = np.sum(z * z, axis=1)
    d2 = np.maximum(sq[:, None] + sq[None, :] - 2.0 * z @ z.T, 0.0)
    iu = np.triu_indices(len(z), k=1)
    return float(np.sqrt(d2[iu]).mean())


def _rocket_stats(problem, x0, xt, controls) -> dict:
    p = problem.system.params
    u = dyn.project_thrust(controls, p.t_min, p.t_max)
    states = dyn.rollout(problem, x0, u, xt).states.data
    norms = np.linalg.norm(u, axis=-1)
    gs = dyn.glideslope_violation(states, p.tan_gs)
    return {
        "fuel": dyn.fuel_used(states),
        "thrust_norm_min": float(norms.min()),
        "thrust_norm_max": float(norms.max()),
        "thrust_in_bounds": bool(np.all((norms >= p.t_min * (1 - 1e-9)) & (norms <= p.t_max * (1 + 1e-9)))),
        "glideslope_depth": gs,
        "terminal_miss": np.linalg.norm(states[:, -1, :3] - xt[:, :3], axis=-1),
        "terminal_speed": np.linalg.norm(states[:, -1, 3:6] - xt[:, 3:6], axis=-1),
    }


def controls_report(problem: dyn.ControlProblem, samples: list, controls: np.ndarray) -> dict:
    """Compare final ``controls`` (N, T, d_u) against the samples' oracle controls."""
    x0, xt, u_star, j_star = _arrays(samples)
    trc = dyn.rollout(problem, x0, controls, xt)
    ref = dyn.rollout(problem, x0, u_star, xt)
    trc_cost, ref_cost = trc.cost.data, ref.cost.data
    err = dyn.terminal_error(problem, trc, xt).data
    rep = {
        "n_samples": len(samples),
        "mean_trc_cost": float(trc_cost.mean()),
        "mean_oracle_cost": float(ref_cost.mean()),
        "mean_stored_oracle_cost": float(j_star.mean()),
        "cost_ratio": float(trc_cost.mean() / ref_cost.mean()) if ref_cost.mean() != 0 else math.nan,
        "terminal_error_mean": float(np.linalg.norm(err, axis=-1).mean()),
        "terminal_error_max": float(np.linalg.norm(err, axis=-1).max()),
    }
    if problem.system_id == "rocket":
        mine = _rocket_stats(problem, x0, xt, controls)
        theirs = _rocket_stats(problem, x0, xt, u_star)
        rep.update({
            "mean_fuel": float(mine["fuel"].mean()),
            "mean_oracle_fuel": float(theirs["fuel"].mean()),
            "fuel_ratio": float(mine["fuel"].mean() / theirs["fuel"].mean()),
            "thrust_norm_min": mine["thrust_norm_min"],
            "thrust_norm_max": mine["thrust_norm_max"],
            "thrust_in_bounds": mine["thrust_in_bounds"],
            "glideslope_depth_max": float(mine["glideslope_depth"].max()),
            "glideslope_ok_fraction": float(np.mean(mine["glideslope_depth"] < 5.0)),
            "terminal_miss_mean": float(mine["terminal_miss"].mean()),
            "terminal_speed_mean": float(mine["terminal_speed"].mean()),
        })
    return rep


def evaluate(model: TRCModel, problem: dyn.ControlProblem, samples: list, K: int | None = None,
             batch_size: int = 256, return_records: bool = False):
    """Held-out report for ``model``; optionally also the concatenated per-batch data."""
    if not samples:
        raise ValueError("no samples to evaluate")
    if model.config.d_x != problem.d_x or model.config.d_u != problem.d_u or model.config.T != problem.T:
        raise ad.DimensionError("checkpoint and dataset dimensions disagree")
    x0, xt, _, _ = _arrays(samples)
    costs, res, lat, ctrl, cos = [], [], [], [], []
    for s in range(0, len(x0), batch_size):
        sl = slice(s, s + batch_size)
        rec = model.forward(problem, x0[sl], xt[sl], K=K)
        costs.append(rec.cost_matrix())
        res.append(rec.residual_norms())
        lat.append(rec.latents_array())
        ctrl.append(rec.controls_array())
        if rec.K >= 1:
            u0 = rec.controls[0].data
            g = orc.true_cost_gradient(problem, x0[sl], u0, xt[sl]).reshape(len(u0), -1)
            du = rec.residuals[0].data.reshape(len(u0), -1)
            denom = np.linalg.norm(du, axis=1) * np.linalg.norm(g, axis=1)
            cos.append(np.where(denom > 0, -(du * g).sum(axis=1) / np.where(denom > 0, denom, 1.0), 0.0))
    costs = np.concatenate(costs)
    res = np.concatenate(res)
    lat = np.concatenate(lat, axis=1)
    ctrl = np.concatenate(ctrl, axis=1)
    Kr = costs.shape[1] - 1

    rep = controls_report(problem, samples, ctrl[-1])
    rep.update({
        "K": Kr,
        "mean_cost_per_iteration": costs.mean(axis=0).tolist(),
        "refinement_cost_ratio": float(costs[:, -1].mean() / costs[:, 0].mean()) if Kr else 1.0,
        "monotone_fraction": float(np.mean(np.all(np.diff(costs, axis=1) <= 0, axis=1))),
        "median_residual_norm": np.median(res, axis=0).tolist() if Kr else [],
        "improvement_metric": improvement_metric(costs, Kr),
        "latent_pairwise_distance": [_mean_pairwise_distance(lat[k]) for k in range(Kr + 1)],
        "latent_mean_norm": np.linalg.norm(lat, axis=-1).mean(axis=1).tolist(),
        "descent_cosine_positive_fraction": float(np.mean(np.concatenate(cos) > 0)) if cos else math.nan,
    })
    d = rep["latent_pairwise_distance"]
    rep["latent_collapse_ratio"] = d[-1] / d[0] if d[0] > 0 else math.nan
    if return_records:
        return rep, {"costs": costs, "residual_norms": res, "latents": lat, "controls": ctrl}
    return rep
