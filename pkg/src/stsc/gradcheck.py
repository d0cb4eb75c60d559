"""Finite-difference audit of the four training loss terms.

Each term is differentiated with respect to the tensor the student network
feeds into it (logits for the supervised and individual terms, penultimate
features for the two relation terms) and compared with central differences.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from . import tensor as T
from .relation import individual_consistency_loss, relation_matrix, spatial_consistency_loss
from .temporal_graph import binarize, stable_substructures, temporal_consistency_loss
from .tensor import Tape, Tensor
from .trainer import supervised_loss

TERMS = ("L_s", "L_c", "L_sc", "L_tc")
THRESHOLD = 1e-4

Instance = tuple[Callable[[Tensor], Tensor], np.ndarray]


def _supervised(rng: np.random.Generator, B: int, K: int) -> Instance:
    c = max(K, 2)
    z = rng.uniform(-3, 3, size=(B, c))
    if rng.random() < 0.5:
        labels = rng.integers(0, c, size=B)
        return (lambda x: supervised_loss(x, labels, "single")), z
    bits = rng.integers(0, 2, size=(B, c))
    return (lambda x: supervised_loss(x, bits, "multi")), z


def _individual(rng: np.random.Generator, B: int, K: int) -> Instance:
    c = max(K, 2)
    z, zt = rng.uniform(-3, 3, size=(2, B, c))
    squash = T.softmax if rng.random() < 0.5 else T.sigmoid
    p_t = squash(Tensor(zt))
    return (lambda x: individual_consistency_loss(squash(x), p_t)), z


def _spatial(rng: np.random.Generator, B: int, K: int) -> Instance:
    d, dt = rng.uniform(-2, 2, size=(2, B, K))
    r_t = relation_matrix(Tensor(dt))
    return (lambda x: spatial_consistency_loss(relation_matrix(x), r_t)), d


def _temporal(rng: np.random.Generator, B: int, K: int) -> Instance:
    # nonnegative features (as after a ReLU) keep relations positive, so edges exist
    d = rng.uniform(0, 2, size=(B, K))
    prev = np.abs(d + rng.normal(0, 0.3, size=(B, K)))
    r_prev = relation_matrix(Tensor(prev))
    r_now = relation_matrix(Tensor(d))
    off = r_now.values.data[~np.eye(B, dtype=bool)]
    tau = float(np.quantile(off, rng.uniform(0.2, 0.8)))
    subs = stable_substructures(binarize(r_now, tau), binarize(r_prev, tau))
    # the substructure set is held fixed; only the relation values move
    return (lambda x: temporal_consistency_loss(relation_matrix(x), r_prev, subs)), d


_BUILDERS = {"L_s": _supervised, "L_c": _individual, "L_sc": _spatial, "L_tc": _temporal}


def instances(term: str, count: int, seed: int) -> list[Instance]:
    """``count`` random problems for one term, with B in 2..6 and width in 1..8."""
    rng = np.random.default_rng([seed, TERMS.index(term)])
    out = []
    for _ in range(count):
        B, K = int(rng.integers(2, 7)), int(rng.integers(1, 9))
        out.append(_BUILDERS[term](rng, B, K))
    return out


def term_error(term: str, count: int = 100, seed: int = 0, eps: float = 1e-5) -> float:
    """Largest relative error between tape and finite-difference gradients."""
    worst = 0.0
    for f, x0 in instances(term, count, seed):
        x = Tensor(x0, requires_grad=True)
        with Tape() as tape:
            loss = f(x)
        analytic = tape.backward(loss, [x])[x]
        numeric = T.finite_difference_grad(f, x0, eps)
        worst = max(worst, T.max_relative_error(analytic, numeric))
    return worst


def run(count: int = 100, seed: int = 0, eps: float = 1e-5) -> dict[str, float]:
    return {term: term_error(term, count, seed, eps) for term in TERMS}
