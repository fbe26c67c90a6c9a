"""On-disk formats: JSONL datasets, binary checkpoints, CSV exports, PCA.

Dataset: a header line (JSON object) followed by one JSON object per sample.

Checkpoint: one file. Line 1 is a JSON manifest terminated by a newline; the
rest is a blob of little-endian float32 parameter values concatenated in
manifest order. The manifest records each parameter's name, shape, byte
offset and dtype plus the blob's sha256.

All writes go to a temporary file in the target directory, then rename.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import os
import tempfile
from pathlib import Path

import numpy as np

from . import dynamics as dyn
from . import oracle as orc
from .autodiff import ContractError, DimensionError
from .model import Normalizer, TRCModel, TrcConfig

DATASET_VERSION = 1
CHECKPOINT_VERSION = 1

REFINEMENT_HEADER = ["sample_id", "iteration", "cost", "residual_norm", "u_mean", "u_std", "u_min", "u_max",
                     "u_abs_mean"]
QUANTILE_HEADER = ["iteration", "cost_q25", "cost_q50", "cost_q75", "umag_q25", "umag_q50", "umag_q75"]
LATENT_HEADER = ["sample_id", "iteration", "pc1", "pc2", "final_cost"]


class FormatError(ValueError):
    """A file does not match its documented format."""


def atomic_write(path: str | Path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        umask = os.umask(0)
        os.umask(umask)
        os.chmod(tmp, 0o666 & ~umask)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)


# -- datasets ---------------------------------------------------------------------
def write_dataset(path, problem: dyn.ControlProblem, samples: list, oracle_config: orc.OracleConfig | None,
                  seed: int | None, failure_count: int = 0) -> None:
    x0 = np.stack([s.x0 for s in samples]) if samples else np.zeros((0, problem.d_x))
    u = np.stack([s.u_star for s in samples]) if samples else np.zeros((0, problem.T, problem.d_u))
    stats = Normalizer.fit(x0, u).to_dict() if samples else None
    header = {
        "format_version": DATASET_VERSION,
        "problem": problem.to_dict(),
        "oracle_config": oracle_config.to_dict() if oracle_config is not None else None,
        "seed": seed,
        "sample_count": len(samples),
        "failure_count": failure_count,
        "normalization": stats,
    }
    lines = [_dumps(header)] + [_dumps(s.to_dict()) for s in samples]
    atomic_write(path, ("\n".join(lines) + "\n").encode("utf-8"))


def read_dataset(path) -> tuple[dict, dyn.ControlProblem, list]:
    """Returns ``(header, problem, samples)``; validates counts, finiteness and bounds."""
    with open(path, encoding="utf-8") as fh:
        lines = [ln for ln in fh.read().split("\n") if ln]
    if not lines:
        raise FormatError(f"{path}: empty dataset file")
    try:
        header = json.loads(lines[0])
        problem = dyn.ControlProblem.from_dict(header["problem"])
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise FormatError(f"{path}: bad header: {exc}") from None
    if header.get("format_version") != DATASET_VERSION:
        raise FormatError(f"{path}: unsupported format_version {header.get('format_version')}")
    body = lines[1:]
    if header.get("sample_count") != len(body):
        raise FormatError(f"{path}: header says {header.get('sample_count')} samples, found {len(body)}")
    samples = []
    for i, ln in enumerate(body):
        try:
            s = orc.Sample.from_dict(json.loads(ln), problem.T, problem.d_u)
        except (json.JSONDecodeError, KeyError, ValueError) as exc:
            raise FormatError(f"{path}: sample {i}: {exc}") from None
        if len(s.x0) != problem.d_x or len(s.x_target) != problem.d_x:
            raise FormatError(f"{path}: sample {i}: state dimension mismatch")
        arrays = (s.x0, s.x_target, s.u_star, np.asarray(s.j_star))
        if not all(np.all(np.isfinite(a)) for a in arrays):
            raise FormatError(f"{path}: sample {i}: non-finite values")
        if np.any(s.u_star < problem.u_min - 1e-9) or np.any(s.u_star > problem.u_max + 1e-9):
            raise FormatError(f"{path}: sample {i}: u_star out of bounds")
        samples.append(s)
    return header, problem, samples


# -- checkpoints -------------------------------------------------------------------
def checkpoint_bytes(model: TRCModel, problem: dyn.ControlProblem, train_config=None) -> bytes:
    descriptors, chunks, offset = [], [], 0
    for name, arr in model.state_arrays().items():
        raw = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        descriptors.append({"name": name, "shape": list(arr.shape), "offset": offset, "dtype": "<f4"})
        chunks.append(raw)
        offset += len(raw)
    blob = b"".join(chunks)
    manifest = {
        "format_version": CHECKPOINT_VERSION,
        "trc_config": model.config.to_dict(),
        "train_config": train_config.to_dict() if train_config is not None else None,
        "normalizer": model.normalizer.to_dict(),
        "problem": problem.to_dict(),
        "parameters": descriptors,
        "blob_bytes": len(blob),
        "blob_sha256": hashlib.sha256(blob).hexdigest(),
    }
    return _dumps(manifest).encode("utf-8") + b"\n" + blob


def save_checkpoint(path, model: TRCModel, problem: dyn.ControlProblem, train_config=None) -> None:
    atomic_write(path, checkpoint_bytes(model, problem, train_config))


def load_checkpoint(path) -> tuple[TRCModel, dyn.ControlProblem, dict]:
    """Returns ``(model, problem, manifest)``."""
    data = Path(path).read_bytes()
    nl = data.find(b"\n")
    if nl < 0:
        raise FormatError(f"{path}: missing manifest line")
    try:
        manifest = json.loads(data[:nl].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: bad manifest: {exc}") from None
    if manifest.get("format_version") != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: unsupported format_version {manifest.get('format_version')}")
    blob = data[nl + 1:]
    if len(blob) != manifest["blob_bytes"] or hashlib.sha256(blob).hexdigest() != manifest["blob_sha256"]:
        raise FormatError(f"{path}: blob checksum mismatch")
    model = TRCModel(TrcConfig(**manifest["trc_config"]), Normalizer.from_dict(manifest["normalizer"]))
    arrays, expected = {}, 0
    for d in manifest["parameters"]:
        if d["offset"] != expected or d["dtype"] != "<f4":
            raise FormatError(f"{path}: parameter {d['name']} has a bad offset or dtype")
        count = int(np.prod(d["shape"], dtype=np.int64))
        arrays[d["name"]] = np.frombuffer(blob, dtype="<f4", count=count, offset=d["offset"]).reshape(d["shape"])
        expected += 4 * count
    if expected != len(blob):
        raise FormatError(f"{path}: blob has {len(blob) - expected} trailing bytes")
    if set(arrays) != set(model.params):
        raise FormatError(f"{path}: parameter names do not match the configured architecture")
    model.load_arrays(arrays)
    return model, dyn.ControlProblem.from_dict(manifest["problem"]), manifest


# -- CSV ---------------------------------------------------------------------------
def _csv_bytes(header: list, rows) -> bytes:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in r])
    return buf.getvalue().encode("utf-8")


def write_metrics_csv(path, history: list) -> None:
    rows = [m.to_row() for m in history]
    header = list(rows[0]) if rows else ["epoch"]
    atomic_write(path, _csv_bytes(header, ([r[h] for h in header] for r in rows)))


def write_report(report_dir, report: dict) -> None:
    atomic_write(Path(report_dir) / "report.json", (json.dumps(report, indent=2, sort_keys=True) + "\n").encode())


# -- PCA and exports ---------------------------------------------------------------
def pca_2d(points) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Top-2 principal projections of (N, d) points.

    Returns ``(projections (N, 2), explained_variance_ratio (2,), components (2, d))``.
    Each component's largest-magnitude entry is made positive.
    """
    x = np.asarray(points, dtype=float)
    if x.ndim != 2:
        raise DimensionError(f"pca_2d expects (N, d), got {x.shape}")
    if len(x) < 2:
        raise ContractError("pca_2d needs at least 2 points")
    xc = x - x.mean(axis=0)
    cov = xc.T @ xc / (len(x) - 1)
    vals, vecs = np.linalg.eigh(cov)
    order = np.argsort(vals)[::-1]
    vals, vecs = np.maximum(vals[order], 0.0), vecs[:, order]
    comps = vecs[:, :2].T.copy()
    if comps.shape[0] < 2:
        comps = np.vstack([comps, np.zeros((2 - comps.shape[0], x.shape[1]))])
    for c in comps:
        if c[np.argmax(np.abs(c))] < 0:
            c *= -1
    total = vals.sum()
    top = np.zeros(2)
    top[: min(2, len(vals))] = vals[:2]
    ratio = top / total if total > 0 else np.zeros(2)
    return xc @ comps.T, ratio, comps


def refinement_rows(costs: np.ndarray, residual_norms: np.ndarray, controls: np.ndarray) -> list:
    """One row per (sample, iteration); ``controls`` is (K+1, N, T, d_u)."""
    rows = []
    Kp1, N = controls.shape[:2]
    for i in range(N):
        for k in range(Kp1):
            u = controls[k, i]
            rn = residual_norms[i, k - 1] if k > 0 else 0.0
            rows.append([i, k, costs[i, k], rn, u.mean(), u.std(), u.min(), u.max(), np.abs(u).mean()])
    return rows


def refinement_quantiles(costs: np.ndarray, controls: np.ndarray) -> list:
    """25/50/75th percentiles per iteration of cost and per-step control magnitude."""
    mags = np.linalg.norm(controls, axis=-1)  # (K+1, N, T)
    rows = []
    for k in range(costs.shape[1]):
        cq = np.percentile(costs[:, k], [25, 50, 75])
        uq = np.percentile(mags[k], [25, 50, 75])
        rows.append([k, *cq, *uq])
    return rows


def export_refinement(out_dir, records: dict) -> tuple[Path, Path]:
    out = Path(out_dir)
    ref, qua = out / "refinement.csv", out / "refinement_quantiles.csv"
    atomic_write(ref, _csv_bytes(REFINEMENT_HEADER,
                                 refinement_rows(records["costs"], records["residual_norms"], records["controls"])))
    atomic_write(qua, _csv_bytes(QUANTILE_HEADER, refinement_quantiles(records["costs"], records["controls"])))
    return ref, qua


def latent_rows(latents: np.ndarray, final_costs: np.ndarray) -> tuple[list, np.ndarray]:
    """PCA over pooled z_H snapshots; ``latents`` is (K+1, N, d_z)."""
    Kp1, N, dz = latents.shape
    proj, ratio, _ = pca_2d(latents.reshape(Kp1 * N, dz))
    proj = proj.reshape(Kp1, N, 2)
    rows = [[i, k, proj[k, i, 0], proj[k, i, 1], final_costs[i]] for i in range(N) for k in range(Kp1)]
    return rows, ratio


def export_latents(path, records: dict) -> np.ndarray:
    rows, ratio = latent_rows(records["latents"], records["costs"][:, -1])
    atomic_write(path, _csv_bytes(LATENT_HEADER, rows))
    return ratio
