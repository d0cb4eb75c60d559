"""Build datasets from a config, run training, and write run-directory artifacts.

Run directory layout::

    manifest.txt                  resolved config (re-runnable with ``--config``)
    metrics.csv                   one row per epoch
    best.ckpt / final.ckpt        checkpoints (+ .manifest)
    substructures/epoch_XXXX.txt  stable components per batch
    relations/epoch_XXXX.bin      student and teacher relation matrices of batch 0
    test_metrics.csv              test-split report of the best checkpoint
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from pathlib import Path

from . import __version__
from . import config as cfgmod
from . import data as D
from .config import ExperimentConfig, derive_seed
from .metrics import MetricsReport
from .model import save_checkpoint
from .tensor import read_tensors, write_tensors
from .temporal_graph import format_substructures, stable_substructures
from .trainer import EpochRecord, FitResult, StepOutputs, TrainState, eval_params, evaluate_params, fit


def build_dataset(dc: cfgmod.DataConfig, seed: int) -> D.Dataset:
    data_seed = derive_seed(seed, "data")
    if dc.dataset == "rings":
        return D.gen_rings(dc.n, dc.data_noise, data_seed, (dc.inner_radius, dc.outer_radius))
    if dc.dataset == "blobs":
        return D.gen_blobs(dc.n, dc.d, dc.c, dc.class_separation, dc.data_noise, data_seed)
    if dc.dataset == "multilabel":
        return D.gen_multilabel(dc.n, dc.d, dc.c, data_seed, dc.data_noise)
    return D.load_csv(dc.csv_path)


def build_splits(cfg: ExperimentConfig) -> D.Splits:
    dc = cfg.data
    ds = build_dataset(dc, cfg.seed)
    spec = D.SplitSpec(dc.labeled_ratio, dc.train_frac, dc.val_frac, dc.test_frac, derive_seed(cfg.seed, "split"))
    return D.split(ds, spec)


def resolve(cfg: ExperimentConfig) -> ExperimentConfig:
    """Fill dataset-dependent settings (head mode) so manifests are explicit."""
    head = "multi" if cfg.data.dataset == "multilabel" else cfg.train.head_mode
    return replace(cfg, train=replace(cfg.train, head_mode=head))


def relation_file(run_dir: Path, epoch: int) -> Path:
    return Path(run_dir) / "relations" / f"epoch_{epoch:04d}.bin"


@dataclass
class RunResult:
    fit: FitResult
    test: MetricsReport
    config: ExperimentConfig


class RunWriter:
    """Epoch hook that streams artifacts into a run directory."""

    def __init__(self, run_dir: Path, train_cfg: cfgmod.TrainConfig):
        self.run_dir = Path(run_dir)
        self.train_cfg = train_cfg
        self._prev_adj: dict = {}
        (self.run_dir / "relations").mkdir(parents=True, exist_ok=True)
        (self.run_dir / "substructures").mkdir(parents=True, exist_ok=True)
        self.metrics_path = self.run_dir / "metrics.csv"
        self.metrics_path.write_text(",".join(EpochRecord.CSV_FIELDS) + "\n")

    def __call__(self, state: TrainState, record: EpochRecord, first: StepOutputs, improved: bool) -> None:
        with open(self.metrics_path, "a") as fh:
            fh.write(",".join(record.csv_values()) + "\n")
        write_tensors(relation_file(self.run_dir, record.epoch), [first.r_student.values, first.r_teacher.values])
        named = []
        for i, (key, entry) in enumerate(state.cache.entries.items()):
            prev = self._prev_adj.get(key)
            if prev is not None:
                named.append((f"batch {i}", stable_substructures(entry.adjacency, prev)))
        self._prev_adj = {k: e.adjacency for k, e in state.cache.entries.items()}
        (self.run_dir / "substructures" / f"epoch_{record.epoch:04d}.txt").write_text(format_substructures(named))
        if improved:
            save_checkpoint(self.run_dir / "best.ckpt", eval_params(state, self.train_cfg), record.epoch)


def run(cfg: ExperimentConfig, run_dir: Path | None = None) -> RunResult:
    """Train on the configured data; evaluate the best checkpoint on the test split."""
    cfg = resolve(cfg)
    splits = build_splits(cfg)
    hook = None
    if run_dir is not None:
        run_dir = Path(run_dir)
        run_dir.mkdir(parents=True, exist_ok=True)
        write_manifest(run_dir, cfg)
        hook = RunWriter(run_dir, cfg.train)
    result = fit(splits, cfg.train, hook)
    test = evaluate_params(result.best_params, splits.test)
    if run_dir is not None:
        save_checkpoint(run_dir / "final.ckpt", result.state.student.detached(), max(result.state.epoch, 0))
        (run_dir / "test_metrics.csv").write_text(test.csv_header() + "\n" + test.csv_row() + "\n")
    return RunResult(result, test, cfg)


def write_manifest(run_dir: Path, cfg: ExperimentConfig) -> Path:
    path = Path(run_dir) / "manifest.txt"
    header = {"tool_version": __version__, "output_dir": str(run_dir), "seed": str(cfg.seed)}
    path.write_text(cfgmod.dumps(cfg, header))
    return path


def load_relations(run_dir: Path, epoch: int):
    path = relation_file(run_dir, epoch)
    if not path.exists():
        raise FileNotFoundError(f"no relation snapshot for epoch {epoch} in {run_dir}")
    student, teacher = read_tensors(path)
    return student, teacher
