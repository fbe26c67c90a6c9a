"""Command-line entry point: ``trc <subcommand> ...``.

Exit codes: 0 success, 1 usage error, 2 runtime error. ``--seed`` falls back
to the ``TRC_SEED`` environment variable, then to 0.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import shutil
import sys
from pathlib import Path

import numpy as np

from . import artifacts
from . import dynamics as dyn
from . import oracle as orc
from . import training as trn
from .autodiff import ContractError, DimensionError
from .model import TrcConfig

log = logging.getLogger("trc")

PROBLEMS = {"vdp": dyn.vdp_problem, "rocket": dyn.rocket_problem}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _seed(args) -> int:
    if args.seed is not None:
        return args.seed
    env = os.environ.get("TRC_SEED")
    if env is None:
        return 0
    try:
        return int(env)
    except ValueError:
        raise UsageError(f"TRC_SEED must be an integer, got {env!r}") from None


def _read_json(path) -> dict:
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


def _vector_arg(text: str, name: str) -> np.ndarray:
    """Comma-separated numbers, or a CSV file with one row per sample."""
    p = Path(text)
    if p.is_file():
        rows = np.loadtxt(p, delimiter=",", ndmin=2)
    else:
        try:
            rows = np.atleast_2d(np.array([float(v) for v in text.split(",")]))
        except ValueError:
            raise UsageError(f"--{name}: expected comma-separated numbers or an existing CSV file, got {text!r}") from None
    return rows


def _states(args, problem):
    x0 = _vector_arg(args.x0, "x0")
    xt = _vector_arg(args.target, "target")
    if xt.shape[0] == 1 and x0.shape[0] > 1:
        xt = np.repeat(xt, len(x0), axis=0)
    for name, a in (("x0", x0), ("target", xt)):
        if a.shape[1] != problem.d_x:
            raise DimensionError(f"--{name} has {a.shape[1]} entries; problem state has {problem.d_x}")
    if len(xt) != len(x0):
        raise DimensionError(f"--x0 has {len(x0)} rows but --target has {len(xt)}")
    return x0, xt


# -- subcommands -----------------------------------------------------------------
def cmd_gen_data(args) -> int:
    problem = PROBLEMS[args.problem]()
    cfg = orc.OracleConfig.from_dict(_read_json(args.oracle_config)) if args.oracle_config else orc.OracleConfig()
    seed = _seed(args)
    samples, failures = orc.generate_dataset(problem, args.n, cfg, seed)
    artifacts.write_dataset(args.out, problem, samples, cfg, seed, len(failures))
    log.info("wrote %d samples (%d failures) to %s", len(samples), len(failures), args.out)
    return 0


def cmd_train(args) -> int:
    _, problem, samples = artifacts.read_dataset(args.data)
    cfg = _read_json(args.config) if args.config else {}
    unknown = set(cfg) - {"trc", "train"}
    if unknown:
        raise UsageError(f"config: unknown sections {sorted(unknown)}; expected 'trc' and 'train'")
    train_over = dict(cfg.get("train", {}))
    if args.seed is not None or "seed" not in train_over:
        train_over["seed"] = _seed(args)
    tcfg = trn.TrainConfig.for_problem(problem, **train_over)
    mcfg = TrcConfig.for_problem(problem, **cfg.get("trc", {}))
    res = trn.train(problem, samples, mcfg, tcfg, out_dir=args.out)
    last = res.history[-1] if res.history else None
    if last is not None:
        log.info("final epoch %d: control_loss %.5g improvement %.4f", last.epoch, last.control_loss,
                 last.improvement_metric)
    return 0


def _eval_records(args):
    model, problem, _ = artifacts.load_checkpoint(args.ckpt)
    _, dproblem, samples = artifacts.read_dataset(args.data)
    if dproblem.system_id != problem.system_id or dproblem.d_x != problem.d_x or dproblem.T != problem.T:
        raise DimensionError(f"checkpoint problem {problem.system_id} (T={problem.T}) does not match dataset "
                             f"problem {dproblem.system_id} (T={dproblem.T})")
    return trn.evaluate(model, problem, samples, K=getattr(args, "k", None), return_records=True)


def cmd_eval(args) -> int:
    report, records = _eval_records(args)
    out = Path(args.report)
    artifacts.write_report(out, report)
    artifacts.export_refinement(out, records)
    ratio = artifacts.export_latents(out / "latents.csv", records)
    metrics = Path(args.ckpt).parent / "training_metrics.csv"
    if metrics.is_file():
        shutil.copyfile(metrics, out / "training_metrics.csv")
    log.info("cost ratio %.4f, monotone fraction %.3f, PCA variance %s", report["cost_ratio"],
             report["monotone_fraction"], np.round(ratio, 4).tolist())
    return 0


def cmd_export_latents(args) -> int:
    _, records = _eval_records(args)
    artifacts.export_latents(args.out, records)
    return 0


def cmd_infer(args) -> int:
    model, problem, _ = artifacts.load_checkpoint(args.ckpt)
    x0, xt = _states(args, problem)
    rec = model.forward(problem, x0, xt, K=args.k)
    out = {
        "controls": rec.controls[-1].data.tolist(),
        "costs_per_iteration": rec.cost_matrix().tolist(),
        "residual_norms": rec.residual_norms().tolist(),
    }
    print(json.dumps(out))
    return 0


def cmd_oracle(args) -> int:
    problem = PROBLEMS[args.problem]()
    x0, xt = _states(args, problem)
    cfg = orc.OracleConfig.from_dict(_read_json(args.oracle_config)) if args.oracle_config else orc.OracleConfig()
    cfg.seed = _seed(args)
    u, J, _ = orc.solve_batch(problem, x0, cfg, x_target=xt)
    print(json.dumps({"u_star": u.tolist(), "j_star": J.tolist()}))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="trc", description="TRC: data, training, evaluation.")
    p.add_argument("--seed", type=int, default=None, help="overrides TRC_SEED")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="generate an oracle dataset")
    g.add_argument("--problem", choices=sorted(PROBLEMS), required=True)
    g.add_argument("--n", type=int, required=True)
    g.add_argument("--seed", type=int, default=argparse.SUPPRESS)
    g.add_argument("--out", required=True)
    g.add_argument("--oracle-config")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train a model")
    t.add_argument("--data", required=True)
    t.add_argument("--config", help="JSON with optional 'trc' and 'train' sections")
    t.add_argument("--out", required=True)
    t.add_argument("--seed", type=int, default=argparse.SUPPRESS)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint and write a report directory")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--report", required=True)
    e.add_argument("--k", type=int, default=None)
    e.set_defaults(func=cmd_eval)

    i = sub.add_parser("infer", help="refine controls for given states")
    i.add_argument("--ckpt", required=True)
    i.add_argument("--x0", required=True)
    i.add_argument("--target", required=True)
    i.add_argument("--k", type=int, default=None)
    i.set_defaults(func=cmd_infer)

    o = sub.add_parser("oracle", help="solve with the direct-shooting oracle")
    o.add_argument("--problem", choices=sorted(PROBLEMS), required=True)
    o.add_argument("--x0", required=True)
    o.add_argument("--target", required=True)
    o.add_argument("--oracle-config")
    o.add_argument("--seed", type=int, default=argparse.SUPPRESS)
    o.set_defaults(func=cmd_oracle)

    x = sub.add_parser("export-latents", help="write PCA projections of z_H snapshots")
    x.add_argument("--ckpt", required=True)
    x.add_argument("--data", required=True)
    x.add_argument("--out", required=True)
    x.set_defaults(func=cmd_export_latents)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(str(exc), file=sys.stderr)
        return 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"trc {args.command}: {exc}", file=sys.stderr)
        return 1
    except (OSError, ValueError, DimensionError, ContractError, RuntimeError, KeyError) as exc:
        msg = " ".join(str(exc).split()) or type(exc).__name__
        print(f"trc {args.command}: {type(exc).__name__}: {msg}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
