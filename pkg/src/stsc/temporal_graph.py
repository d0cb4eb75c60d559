"""Relation graphs, stable sub-structures across visits, and the temporal loss."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Hashable, Sequence

import numpy as np

from . import tensor as T
from .relation import RelationMatrix, check_aligned
from .tensor import Tensor


@dataclass(frozen=True)
class AdjacencyMatrix:
    """Thresholded, OR-symmetrized relation graph. Diagonal bits carry no edge meaning."""

    bits: np.ndarray
    batch_ids: tuple[int, ...]
    tau: float

    @property
    def size(self) -> int:
        return len(self.batch_ids)

    def edge_matrix(self) -> np.ndarray:
        """Boolean adjacency with self-loops removed."""
        e = np.array(self.bits, dtype=bool)
        np.fill_diagonal(e, False)
        return e

    def edges(self) -> set[tuple[int, int]]:
        i, j = np.nonzero(np.triu(self.edge_matrix(), k=1))
        return {(int(a), int(b)) for a, b in zip(i, j)}


@dataclass(frozen=True)
class StableSubstructureSet:
    """Connected components (size >= 2) of the edge intersection of two graphs.

    Components are sorted tuples of batch positions, ordered by first element.
    """

    components: tuple[tuple[int, ...], ...]
    batch_ids: tuple[int, ...]
    source_iterations: tuple[int, int] | None = None

    def __len__(self) -> int:
        return len(self.components)

    def sample_ids(self) -> list[list[int]]:
        return [sorted(self.batch_ids[i] for i in comp) for comp in self.components]


def binarize(r: RelationMatrix, tau: float) -> AdjacencyMatrix:
    """Set bit (i, j) when ``R[i, j] >= tau``, then OR with the transpose."""
    if not 0.0 <= tau <= 1.0:
        warnings.warn(f"tau={tau} is outside [0, 1]", RuntimeWarning, stacklevel=2)
    bits = r.values.data >= tau
    bits = bits | bits.T
    bits.flags.writeable = False
    return AdjacencyMatrix(bits, r.batch_ids, float(tau))


class _DisjointSet:
    def __init__(self, n: int):
        self.parent = list(range(n))

    def find(self, x: int) -> int:
        root = x
        while self.parent[root] != root:
            root = self.parent[root]
        while self.parent[x] != root:
            self.parent[x], x = root, self.parent[x]
        return root

    def union(self, a: int, b: int) -> None:
        ra, rb = self.find(a), self.find(b)
        if ra != rb:
            # smaller root wins, keeps representatives deterministic
            if rb < ra:
                ra, rb = rb, ra
            self.parent[rb] = ra


def stable_substructures(
    a_t: AdjacencyMatrix,
    a_prev: AdjacencyMatrix,
    iterations: tuple[int, int] | None = None,
) -> StableSubstructureSet:
    """Groups of samples that stay connected in both graphs.

    Takes the edge intersection of the two adjacency matrices and returns its
    connected components with at least two vertices.
    """
    check_aligned(a_t.batch_ids, a_prev.batch_ids)
    both = a_t.edge_matrix() & a_prev.edge_matrix()
    n = a_t.size
    ds = _DisjointSet(n)
    touched = np.zeros(n, dtype=bool)
    for i, j in zip(*np.nonzero(np.triu(both, k=1))):
        ds.union(int(i), int(j))
        touched[i] = touched[j] = True
    groups: dict[int, list[int]] = {}
    for v in np.flatnonzero(touched):
        groups.setdefault(ds.find(int(v)), []).append(int(v))
    comps = tuple(sorted(tuple(g) for g in groups.values() if len(g) >= 2))
    return StableSubstructureSet(comps, a_t.batch_ids, iterations)


def temporal_consistency_loss(
    r_t: RelationMatrix,
    r_prev: RelationMatrix,
    s: StableSubstructureSet,
    batch_size: int | None = None,
) -> Tensor:
    """Sum over components of (1/B) * ||R_t[s, s] - R_prev[s, s]||_F^2.

    ``r_prev`` is a stored snapshot and should be detached. Zero when there
    are no components.
    """
    check_aligned(r_t.batch_ids, r_prev.batch_ids)
    check_aligned(r_t.batch_ids, s.batch_ids)
    B = r_t.size if batch_size is None else int(batch_size)
    total = T.zeros(())
    for comp in s.components:
        if min(comp) < 0 or max(comp) >= r_t.size:
            raise IndexError(f"component {comp} indexes outside a batch of {r_t.size}")
        diff = T.sub(T.take(r_t.values, comp, comp), T.take(r_prev.values, comp, comp))
        total = T.add(total, T.scale(T.sum(T.square(diff)), 1.0 / B))
    return total


@dataclass
class CacheEntry:
    relation: RelationMatrix
    adjacency: AdjacencyMatrix
    iteration: int


@dataclass
class RelationCache:
    """Last detached relation snapshot per batch key."""

    entries: dict[Hashable, CacheEntry] = field(default_factory=dict)

    def get(self, key: Hashable) -> CacheEntry | None:
        return self.entries.get(key)

    def __contains__(self, key: Hashable) -> bool:
        return key in self.entries

    def __len__(self) -> int:
        return len(self.entries)


def cache_update(
    cache: RelationCache,
    batch_key: Hashable,
    r: RelationMatrix,
    a: AdjacencyMatrix,
    iteration: int,
) -> RelationCache:
    """Store a detached snapshot for ``batch_key``, replacing any older one."""
    cache.entries[batch_key] = CacheEntry(r.detached(), a, int(iteration))
    return cache


def format_substructures(named: Sequence[tuple[str, StableSubstructureSet]]) -> str:
    """One line per batch: the label followed by each component as a sorted id list."""
    lines = []
    for label, s in named:
        comps = " ".join("[" + ",".join(map(str, ids)) + "]" for ids in s.sample_ids())
        lines.append(f"{label}: {comps}".rstrip())
    return "\n".join(lines) + ("\n" if lines else "")
