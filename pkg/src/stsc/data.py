"""Synthetic datasets, CSV ingestion, stratified splits and fixed batch partitions."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .tensor import ContractError


@dataclass(frozen=True)
class Dataset:
    """Samples with stable integer ids.

    ``labels`` is a length-N int array (single-label) or an N×c 0/1 array
    (multi-label). ``image_shape`` is set when rows are flattened images.
    """

    features: np.ndarray
    labels: np.ndarray
    sample_ids: np.ndarray
    n_classes: int
    image_shape: tuple[int, int] | None = None

    def __post_init__(self):
        n = self.features.shape[0]
        if self.features.ndim != 2:
            raise ContractError("features must be 2-D (N×d)")
        if self.labels.shape[0] != n or self.sample_ids.shape[0] != n:
            raise ContractError("features, labels and sample_ids disagree on N")
        if len(np.unique(self.sample_ids)) != n:
            raise ContractError("sample ids must be unique")
        if self.multilabel:
            if self.labels.shape[1] != self.n_classes or not np.isin(self.labels, (0, 1)).all():
                raise ContractError("multi-label targets must be 0/1 vectors of length c")
        elif n and (self.labels.min() < 0 or self.labels.max() >= self.n_classes):
            raise ContractError(f"labels must lie in [0, {self.n_classes})")

    @property
    def multilabel(self) -> bool:
        return self.labels.ndim == 2

    @property
    def head_mode(self) -> str:
        return "multi" if self.multilabel else "single"

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def __len__(self) -> int:
        return self.features.shape[0]

    def subset(self, index) -> "Dataset":
        index = np.asarray(index, dtype=np.intp)
        return Dataset(
            self.features[index], self.labels[index], self.sample_ids[index], self.n_classes, self.image_shape
        )


def _balanced_labels(n: int, c: int, rng: np.random.Generator) -> np.ndarray:
    return rng.permutation(np.arange(n) % c)


def blob_centers(d: int, c: int, separation: float, seed: int) -> np.ndarray:
    """Class centers: ``separation`` times distinct axes when c <= d, else random unit directions."""
    if c <= d:
        return separation * np.eye(d)[:c]
    dirs = np.random.default_rng([seed, 1]).normal(size=(c, d))
    return separation * dirs / np.linalg.norm(dirs, axis=1, keepdims=True)


def gen_blobs(n: int, d: int, c: int, class_separation: float = 4.0, noise: float = 1.0, seed: int = 0) -> Dataset:
    """Isotropic Gaussian clusters around :func:`blob_centers`; class sizes differ by at most one."""
    if c < 2 or n < c or d < 1:
        raise ContractError("gen_blobs needs n >= c >= 2 and d >= 1")
    rng = np.random.default_rng(seed)
    labels = _balanced_labels(n, c, rng)
    centers = blob_centers(d, c, class_separation, seed)
    x = centers[labels] + rng.normal(0.0, noise, size=(n, d))
    return Dataset(x, labels, np.arange(n), c)


def gen_rings(
    n: int, noise: float = 0.1, seed: int = 0, radii: tuple[float, float] = (1.0, 2.0)
) -> Dataset:
    """Two concentric annuli in the plane; class 0 is the inner ring."""
    if n < 4:
        raise ContractError("gen_rings needs n >= 4")
    rng = np.random.default_rng(seed)
    labels = _balanced_labels(n, 2, rng)
    angle = rng.uniform(0.0, 2.0 * np.pi, size=n)
    r = np.asarray(radii, dtype=np.float64)[labels] + noise * rng.normal(size=n)
    x = np.stack([r * np.cos(angle), r * np.sin(angle)], axis=1)
    return Dataset(x, labels, np.arange(n), 2)


def gen_multilabel(n: int, d: int, c: int, seed: int = 0, noise: float = 0.1) -> Dataset:
    """Each class is an independent half-space indicator over latent Gaussian features.

    Thresholds are empirical quantiles, so every class has a positive rate
    in [0.3, 0.7]. Observed features are the latents plus small noise.
    """
    if c < 2 or n < 2 or d < 1:
        raise ContractError("gen_multilabel needs c >= 2, n >= 2, d >= 1")
    rng = np.random.default_rng(seed)
    z = rng.normal(size=(n, d))
    w = rng.normal(size=(d, c))
    proj = z @ w
    rates = rng.uniform(0.3, 0.7, size=c)
    thresholds = np.array([np.quantile(proj[:, k], 1.0 - rates[k]) for k in range(c)])
    labels = (proj > thresholds).astype(np.int64)
    x = z + noise * rng.normal(size=z.shape)
    return Dataset(x, labels, np.arange(n), c)


# --- CSV --------------------------------------------------------------------


def save_csv(path, ds: Dataset) -> None:
    header = ["id"] + [f"f_{j}" for j in range(ds.dim)]
    header += [f"l_{k}" for k in range(ds.n_classes)] if ds.multilabel else ["label"]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for sid, x, y in zip(ds.sample_ids, ds.features, ds.labels):
            labels = [int(v) for v in y] if ds.multilabel else [int(y)]
            w.writerow([int(sid)] + [repr(float(v)) for v in x] + labels)


def load_csv(path, n_classes: int | None = None) -> Dataset:
    """Read ``id, f_0..f_{d-1}, label`` or ``id, f_*, l_0..l_{c-1}`` files.

    Single-label class count defaults to ``max(label) + 1``.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"dataset file not found: {path}")
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ValueError(f"{path}: empty file")
    header = [h.strip() for h in rows[0]]
    if not header or header[0] != "id":
        raise ValueError(f"{path}: first column must be 'id'")
    feat_cols = [i for i, h in enumerate(header) if h.startswith("f_")]
    label_cols = [i for i, h in enumerate(header) if h.startswith("l_")]
    multilabel = bool(label_cols)
    if not multilabel:
        if "label" not in header:
            raise ValueError(f"{path}: need a 'label' column or l_* columns")
        label_cols = [header.index("label")]
    if not feat_cols:
        raise ValueError(f"{path}: no feature columns (f_*)")
    if len(rows) == 1:
        raise ValueError(f"{path}: header only, no samples")
    ids, feats, labels = [], [], []
    for lineno, row in enumerate(rows[1:], start=2):
        if len(row) != len(header):
            raise ValueError(f"{path}:{lineno}: expected {len(header)} columns, found {len(row)}")
        try:
            ids.append(int(row[0]))
            feats.append([float(row[i]) for i in feat_cols])
            labels.append([int(row[i]) for i in label_cols])
        except ValueError as exc:
            raise ValueError(f"{path}:{lineno}: non-numeric value ({exc})") from None
    x = np.array(feats, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise ValueError(f"{path}: non-finite feature values")
    y = np.array(labels, dtype=np.int64)
    if multilabel:
        c = y.shape[1]
    else:
        y = y[:, 0]
        c = n_classes if n_classes is not None else int(y.max()) + 1
    return Dataset(x, y, np.array(ids, dtype=np.int64), max(c, 1))


# --- splitting ---------------------------------------------------------------


@dataclass(frozen=True)
class SplitSpec:
    labeled_ratio: float = 0.1
    train_frac: float = 0.7
    val_frac: float = 0.1
    test_frac: float = 0.2
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.labeled_ratio <= 1.0:
            raise ContractError("labeled_ratio must lie in (0, 1]")
        fracs = (self.train_frac, self.val_frac, self.test_frac)
        if min(fracs) < 0 or abs(sum(fracs) - 1.0) > 1e-9:
            raise ContractError("train/val/test fractions must be non-negative and sum to 1")


@dataclass(frozen=True)
class Splits:
    labeled: Dataset
    unlabeled: Dataset
    val: Dataset
    test: Dataset

    def __iter__(self):
        return iter((self.labeled, self.unlabeled, self.val, self.test))


def stratified_order(labels: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """A permutation whose every prefix is class-proportional to within one sample per class.

    Within each class the members are shuffled and the i-th of n_c gets key
    (i + 0.5) / n_c; sorting all samples by key interleaves the classes.
    """
    labels = np.asarray(labels)
    keys = np.empty(len(labels))
    for cls in np.unique(labels):
        members = rng.permutation(np.flatnonzero(labels == cls))
        keys[members] = (np.arange(len(members)) + 0.5) / len(members)
    # ties between classes break on a random secondary key
    return np.lexsort((rng.random(len(labels)), keys))


def split(ds: Dataset, spec: SplitSpec) -> Splits:
    """Partition into (train_labeled, train_unlabeled, val, test).

    Sizes are ``round(frac * N)``; the labeled subset has
    ``round(labeled_ratio * |train|)`` samples drawn from train only. Every
    cut is stratified by class in single-label mode.
    """
    rng = np.random.default_rng(spec.seed)
    n = len(ds)
    order = rng.permutation(n) if ds.multilabel else stratified_order(ds.labels, rng)
    n_train = int(round(spec.train_frac * n))
    n_val = int(round(spec.val_frac * n))
    if spec.test_frac == 0:
        n_val = n - n_train
    train_idx, val_idx, test_idx = order[:n_train], order[n_train : n_train + n_val], order[n_train + n_val :]
    n_lab = int(round(spec.labeled_ratio * n_train))
    if n_lab == 0:
        raise ContractError("labeled subset is empty after rounding")
    if ds.multilabel:
        train_order = rng.permutation(train_idx)
    else:
        train_order = train_idx[stratified_order(ds.labels[train_idx], rng)]
    return Splits(
        ds.subset(np.sort(train_order[:n_lab])),
        ds.subset(np.sort(train_order[n_lab:])),
        ds.subset(np.sort(val_idx)),
        ds.subset(np.sort(test_idx)),
    )


# --- batching --------------------------------------------------------------------


@dataclass(frozen=True)
class Batch:
    """A fixed mini-batch. Labels exist only for the labeled positions."""

    sample_ids: tuple[int, ...]
    x: np.ndarray
    labeled_pos: np.ndarray
    labels: np.ndarray

    @property
    def key(self) -> tuple[int, ...]:
        return self.sample_ids

    def __len__(self) -> int:
        return len(self.sample_ids)


def batch_partition(
    labeled: Dataset, unlabeled: Dataset | None, batch_size: int, seed: int
) -> list[Batch]:
    """Shuffle once and cut contiguous batches that are reused every epoch.

    Labeled and unlabeled samples are interleaved proportionally before the
    cut, so each batch carries its share of both. A trailing batch with
    fewer than two samples is dropped.
    """
    if batch_size < 2:
        raise ContractError("batch_size must be >= 2")
    rng = np.random.default_rng(seed)
    n_l = len(labeled)
    n_u = 0 if unlabeled is None else len(unlabeled)
    origin = np.r_[np.zeros(n_l, dtype=int), np.ones(n_u, dtype=int)]
    order = stratified_order(origin, rng)
    feats = labeled.features if n_u == 0 else np.concatenate([labeled.features, unlabeled.features])
    ids = labeled.sample_ids if n_u == 0 else np.concatenate([labeled.sample_ids, unlabeled.sample_ids])
    batches = []
    for start in range(0, len(order), batch_size):
        idx = order[start : start + batch_size]
        if len(idx) < 2:
            continue
        pos = np.flatnonzero(idx < n_l)
        batches.append(
            Batch(
                sample_ids=tuple(int(i) for i in ids[idx]),
                x=feats[idx],
                labeled_pos=pos,
                labels=labeled.labels[idx[pos]],
            )
        )
    return batches
