"""Command-line harness: ``stsc train|eval|ablate|gradcheck|heatmap|gen-data``."""

from __future__ import annotations

import argparse
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import config as cfgmod
from . import data as D
from . import experiment, gradcheck
from .config import ConfigError, ExperimentConfig
from .metrics import METRIC_NAMES
from .model import load_checkpoint
from .relation import write_csv, write_pgm
from .tensor import ContractError, ShapeError
from .trainer import evaluate_params

# Row order of the switch grid: supervised only, each single term, each pair, all three.
ABLATION_ROWS = (
    (False, False, False),
    (True, False, False),
    (False, True, False),
    (False, False, True),
    (True, True, False),
    (True, False, True),
    (False, True, True),
    (True, True, True),
)


class CliError(Exception):
    pass


def _config(args) -> ExperimentConfig:
    base = cfgmod.load(args.config) if args.config else ExperimentConfig()
    pairs = cfgmod.parse_overrides(args.set)
    if args.seed is not None:
        pairs["seed"] = str(args.seed)
    return cfgmod.parse_pairs(pairs, base)


def _flag(b: bool) -> str:
    return "1" if b else "0"


def cmd_train(args) -> int:
    cfg = _config(args)
    out = Path(args.out or "runs/train")
    result = experiment.run(cfg, out)
    best = result.fit.history[result.fit.best_epoch] if result.fit.history else None
    print(f"run dir: {out}")
    if best is not None:
        print(f"best epoch {result.fit.best_epoch}: val auc {best.val.auc:.4f} acc {best.val.accuracy:.4f}")
    print("test:", result.test.pretty())
    return 0


def cmd_eval(args) -> int:
    params, epoch = load_checkpoint(args.checkpoint)
    if args.data:
        ds = D.load_csv(args.data, params.n_classes)
    else:
        splits = experiment.build_splits(experiment.resolve(_config(args)))
        ds = getattr(splits, args.split)
    if ds.dim != params.input_dim:
        raise CliError(f"dimension mismatch: checkpoint expects {params.input_dim} input features, dataset has {ds.dim}")
    if ds.n_classes != params.n_classes:
        raise CliError(f"class count mismatch: checkpoint has {params.n_classes} outputs, dataset has {ds.n_classes} classes")
    report = evaluate_params(params, ds)
    print(f"checkpoint {args.checkpoint} (epoch {epoch}), {len(ds)} samples")
    print(report.pretty())
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(report.csv_header() + "\n" + report.csv_row() + "\n")
    return 0


def _ablation_job(job):
    cfg, switches, seed = job
    pairs = {"use_lc": _flag(switches[0]), "use_lsc": _flag(switches[1]), "use_ltc": _flag(switches[2]), "seed": str(seed)}
    return list(experiment.run(cfgmod.parse_pairs(pairs, cfg)).test.as_row().values())


def ablation_table(cfg: ExperimentConfig, seeds, jobs: int = 1):
    """Test metrics for every switch row and seed, plus per-row medians."""
    grid = [(cfg, row, s) for row in ABLATION_ROWS for s in seeds]
    if jobs > 1:
        with ProcessPoolExecutor(jobs) as pool:
            rows = list(pool.map(_ablation_job, grid))
    else:
        rows = [_ablation_job(j) for j in grid]
    per_seed = {(row, s): r for (_, row, s), r in zip(grid, rows)}
    medians = {row: np.median([per_seed[(row, s)] for s in seeds], axis=0) for row in ABLATION_ROWS}
    return per_seed, medians


def cmd_ablate(args) -> int:
    cfg = _config(args)
    seeds = [int(s) for s in args.seeds.split(",")]
    per_seed, medians = ablation_table(cfg, seeds, args.jobs)
    out = Path(args.out or "runs/ablate")
    out.mkdir(parents=True, exist_ok=True)
    head = "L_c,L_sc,L_tc"
    lines = [f"{head},seed," + ",".join(METRIC_NAMES)]
    for row in ABLATION_ROWS:
        for s in seeds:
            lines.append(",".join(map(_flag, row)) + f",{s}," + ",".join(repr(float(v)) for v in per_seed[(row, s)]))
    (out / "ablation_seeds.csv").write_text("\n".join(lines) + "\n")
    lines = [f"{head},n_seeds," + ",".join(METRIC_NAMES)]
    for row in ABLATION_ROWS:
        lines.append(",".join(map(_flag, row)) + f",{len(seeds)}," + ",".join(repr(float(v)) for v in medians[row]))
    (out / "ablation.csv").write_text("\n".join(lines) + "\n")
    (out / "manifest.txt").write_text(cfgmod.dumps(cfg, {"seeds": args.seeds}))
    print(f"{'L_c':>4} {'L_sc':>4} {'L_tc':>4} " + " ".join(f"{m:>11}" for m in METRIC_NAMES))
    for row in ABLATION_ROWS:
        print(" ".join(f"{_flag(b):>4}" for b in row) + " " + " ".join(f"{v:11.4f}" for v in medians[row]))
    return 0


def cmd_gradcheck(args) -> int:
    seed = 0 if args.seed is None else args.seed
    errors = gradcheck.run(args.instances, seed)
    failed = False
    for term, err in errors.items():
        ok = err <= gradcheck.THRESHOLD
        failed |= not ok
        print(f"{term:5s} max relative error {err:.3e}  {'ok' if ok else 'FAIL'}")
    return 1 if failed else 0


def cmd_heatmap(args) -> int:
    run_dir = Path(args.run_dir)
    try:
        student, teacher = experiment.load_relations(run_dir, args.epoch)
    except FileNotFoundError:
        raise CliError(f"no relation snapshot for epoch {args.epoch} in {run_dir}") from None
    diff = np.abs(student.data - teacher.data)
    out = Path(args.out) if args.out else run_dir / "heatmaps"
    out.mkdir(parents=True, exist_ok=True)
    stem = out / f"distance_epoch_{args.epoch:04d}"
    write_csv(stem.with_suffix(".csv"), diff)
    write_pgm(stem.with_suffix(".pgm"), diff)
    print(f"epoch {args.epoch}: mean |R_s - R_t| = {diff.mean():.6f} -> {stem}.pgm/.csv")
    return 0


def cmd_gen_data(args) -> int:
    cfg = _config(args)
    if cfg.data.dataset == "csv":
        raise CliError("gen-data needs a synthetic dataset (rings, blobs or multilabel)")
    ds = experiment.build_dataset(cfg.data, cfg.seed)
    out = Path(args.out or f"{cfg.data.dataset}.csv")
    out.parent.mkdir(parents=True, exist_ok=True)
    D.save_csv(out, ds)
    print(f"wrote {len(ds)} samples ({ds.dim} features, {ds.n_classes} classes) to {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value config file")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key (repeatable)")
    common.add_argument("--out", help="output directory (file for eval and gen-data)")
    common.add_argument("--seed", type=int, help="root seed (overrides the config)")

    parser = argparse.ArgumentParser(prog="stsc", description="Teacher-student training with relation consistency.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", parents=[common], help="train one configuration and write a run directory")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common], help="score a checkpoint on a dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", help="CSV dataset (otherwise the config's split is used)")
    p.add_argument("--split", default="test", choices=["labeled", "unlabeled", "val", "test"])
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", parents=[common], help="run all 8 loss-switch combinations")
    p.add_argument("--seeds", default="0,1,2,3,4", help="comma-separated root seeds")
    p.add_argument("--jobs", type=int, default=1, help="worker processes")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference check of every loss term")
    p.add_argument("--instances", type=int, default=100)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("heatmap", parents=[common], help="export |R_student - R_teacher| for one epoch")
    p.add_argument("run_dir")
    p.add_argument("--epoch", type=int, required=True)
    p.set_defaults(func=cmd_heatmap)

    p = sub.add_parser("gen-data", parents=[common], help="write a synthetic dataset as CSV")
    p.set_defaults(func=cmd_gen_data)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (CliError, ConfigError, ContractError, ShapeError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
