"""Case-wise Gram matrices, relation matrices and the two consistency losses.

Teacher-side arguments are expected to be detached (built off-tape); the
losses then only carry gradient into the student branch.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor


class AlignmentError(ValueError):
    """Two relation structures describe different samples (or a different order)."""


@dataclass(frozen=True)
class RelationMatrix:
    """Row-normalized B×B sample-similarity matrix, tagged with the sample ids it covers."""

    values: Tensor
    batch_ids: tuple[int, ...]

    def __post_init__(self):
        B = len(self.batch_ids)
        if self.values.shape != (B, B):
            raise ShapeError(f"relation matrix {self.values.shape} does not match {B} batch ids")

    @property
    def size(self) -> int:
        return len(self.batch_ids)

    @property
    def zero_rows(self) -> frozenset[int]:
        return T.zero_rows(self.values)

    def detached(self) -> "RelationMatrix":
        return RelationMatrix(self.values.detach(), self.batch_ids)


def check_aligned(a: Sequence[int], b: Sequence[int]) -> None:
    if tuple(a) != tuple(b):
        raise AlignmentError("batch ids differ; relation structures are not sample-aligned")


def gram_matrix(features: Tensor) -> Tensor:
    """``D @ D.T`` for flattened features D (B×K)."""
    if features.ndim != 2 or min(features.shape) < 1:
        raise ShapeError(f"gram_matrix needs a non-empty B×K tensor, got {features.shape}")
    return T.matmul(features, T.transpose(features))


def relation_matrix(features: Tensor, batch_ids: Sequence[int] | None = None) -> RelationMatrix:
    """Gram matrix with every row scaled to unit L2 norm.

    A sample whose feature row is all zero yields a zero row (a
    ``ZeroRowWarning`` is emitted) instead of being patched with an epsilon.
    """
    if batch_ids is None:
        batch_ids = range(features.shape[0])
    return RelationMatrix(T.row_l2_normalize(gram_matrix(features)), tuple(int(i) for i in batch_ids))


def individual_consistency_loss(p_student: Tensor, p_teacher: Tensor) -> Tensor:
    """Batch mean of the squared L2 distance between per-sample prediction vectors."""
    if p_student.shape != p_teacher.shape or p_student.ndim != 2:
        raise ShapeError(f"prediction shapes differ: {p_student.shape} vs {p_teacher.shape}")
    B = p_student.shape[0]
    return T.scale(T.sum(T.square(T.sub(p_student, p_teacher))), 1.0 / B)


def spatial_consistency_loss(r_student: RelationMatrix, r_teacher: RelationMatrix) -> Tensor:
    """(1/B) * squared Frobenius distance between student and teacher relations."""
    check_aligned(r_student.batch_ids, r_teacher.batch_ids)
    diff = T.sub(r_student.values, r_teacher.values)
    return T.scale(T.sum(T.square(diff)), 1.0 / r_student.size)


# --- export ----------------------------------------------------------------


def write_csv(path, matrix) -> None:
    arr = np.asarray(matrix.data if isinstance(matrix, Tensor) else matrix, dtype=np.float64)
    with open(path, "w") as fh:
        for row in np.atleast_2d(arr):
            fh.write(",".join(repr(float(v)) for v in row) + "\n")


def read_csv(path) -> np.ndarray:
    rows = [
        [float(v) for v in line.split(",")]
        for line in Path(path).read_text().splitlines()
        if line.strip()
    ]
    return np.array(rows, dtype=np.float64)


def to_gray(matrix) -> np.ndarray:
    """Map values affinely from their observed [min, max] onto 0..255.

    A constant matrix maps to all zeros.
    """
    arr = np.asarray(matrix.data if isinstance(matrix, Tensor) else matrix, dtype=np.float64)
    lo, hi = float(arr.min()), float(arr.max())
    if hi == lo:
        return np.zeros(arr.shape, dtype=np.uint8)
    return np.rint((arr - lo) / (hi - lo) * 255.0).astype(np.uint8)


def write_pgm(path, matrix) -> None:
    """Binary 8-bit PGM (P5) heatmap of a 2-D matrix."""
    gray = to_gray(matrix)
    h, w = gray.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(gray.tobytes())


def read_pgm(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    fields, pos = [], 0
    # four whitespace-separated header tokens, then exactly one whitespace byte before the pixels
    while len(fields) < 4:
        while buf[pos : pos + 1].isspace():
            pos += 1
        end = pos
        while end < len(buf) and not buf[end : end + 1].isspace():
            end += 1
        fields.append(buf[pos:end])
        pos = end
    if fields[0] != b"P5" or int(fields[3]) != 255:
        raise ValueError(f"{path}: not an 8-bit binary PGM")
    w, h = int(fields[1]), int(fields[2])
    return np.frombuffer(buf, dtype=np.uint8, count=w * h, offset=pos + 1).reshape(h, w)
