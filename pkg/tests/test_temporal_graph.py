import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stsc import tensor as T
from stsc.relation import AlignmentError, RelationMatrix, relation_matrix
from stsc.temporal_graph import (
    AdjacencyMatrix,
    RelationCache,
    StableSubstructureSet,
    binarize,
    cache_update,
    format_substructures,
    stable_substructures,
    temporal_consistency_loss,
)
from stsc.tensor import Tape, Tensor, finite_difference_grad, max_relative_error

from oracles import brute_force_components


def adjacency(n, edges, ids=None):
    bits = np.zeros((n, n), dtype=bool)
    for i, j in edges:
        bits[i, j] = bits[j, i] = True
    return AdjacencyMatrix(bits, tuple(range(n)) if ids is None else tuple(ids), 0.5)


def random_adjacency(rng, n, p):
    upper = np.triu(rng.random((n, n)) < p, k=1)
    return AdjacencyMatrix(upper | upper.T, tuple(range(n)), 0.5)


class TestBinarize:
    R = [[1.0, 0.7, 0.2], [0.7, 1.0, 0.4], [0.2, 0.4, 1.0]]

    def test_hand_example(self):
        a = binarize(RelationMatrix(Tensor(self.R), (0, 1, 2)), 0.5)
        assert a.edges() == {(0, 1)}

    def test_zero_threshold_sets_everything(self):
        r = relation_matrix(Tensor(np.random.default_rng(0).random((4, 3))))
        assert binarize(r, 0.0).bits.all()

    def test_threshold_above_one_has_no_edges(self):
        r = relation_matrix(Tensor(np.random.default_rng(1).normal(size=(5, 3))))
        with pytest.warns(RuntimeWarning):
            a = binarize(r, 1.01)
        assert a.edges() == set()

    def test_or_symmetrization(self):
        r = RelationMatrix(Tensor([[1.0, 0.9], [0.1, 1.0]]), (0, 1))
        assert binarize(r, 0.5).edges() == {(0, 1)}

    @settings(max_examples=100, deadline=None)
    @given(st.integers(0, 2**31 - 1), st.floats(0, 1), st.floats(0, 1))
    def test_monotone_in_tau(self, seed, t1, t2):
        lo, hi = sorted((t1, t2))
        rng = np.random.default_rng(seed)
        r = relation_matrix(Tensor(rng.normal(size=(int(rng.integers(2, 9)), 3))))
        assert binarize(r, hi).edges() <= binarize(r, lo).edges()


class TestStableSubstructures:
    def test_identical_graphs(self):
        a = adjacency(6, [(0, 1), (1, 2), (4, 5)])
        assert stable_substructures(a, a).components == ((0, 1, 2), (4, 5))

    def test_disjoint_edges(self):
        s = stable_substructures(adjacency(4, [(0, 1)]), adjacency(4, [(2, 3)]))
        assert len(s) == 0

    def test_hand_example(self):
        a_t = adjacency(5, [(0, 1), (1, 2), (3, 4)])
        a_prev = adjacency(5, [(0, 1), (2, 3), (3, 4)])
        assert brute_force_components(a_t.edge_matrix() & a_prev.edge_matrix()) == [(0, 1), (3, 4)]
        assert stable_substructures(a_t, a_prev).components == ((0, 1), (3, 4))

    def test_self_loops_ignored(self):
        bits = np.eye(3, dtype=bool)
        a = AdjacencyMatrix(bits, (0, 1, 2), 0.5)
        assert len(stable_substructures(a, a)) == 0

    def test_alignment_guard(self):
        with pytest.raises(AlignmentError):
            stable_substructures(adjacency(3, [], [0, 1, 2]), adjacency(3, [], [0, 2, 1]))

    def test_matches_brute_force(self):
        rng = np.random.default_rng(2)
        for n in range(1, 9):
            for _ in range(200):
                p = rng.uniform(0.1, 0.9)
                a, b = random_adjacency(rng, n, p), random_adjacency(rng, n, p)
                got = list(stable_substructures(a, b).components)
                assert got == brute_force_components(a.edge_matrix() & b.edge_matrix())

    @settings(max_examples=100, deadline=None)
    @given(st.integers(0, 2**31 - 1))
    def test_structure_invariants(self, seed):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(2, 12))
        a, b = random_adjacency(rng, n, 0.4), random_adjacency(rng, n, 0.4)
        s = stable_substructures(a, b)
        both = a.edge_matrix() & b.edge_matrix()
        seen = set()
        for comp in s.components:
            assert len(comp) >= 2 and not seen & set(comp)
            seen |= set(comp)
            assert all(both[v].any() for v in comp)

    def test_sample_ids_reported(self):
        a = adjacency(3, [(0, 2)], ids=[10, 20, 30])
        s = stable_substructures(a, a)
        assert s.sample_ids() == [[10, 30]]
        assert format_substructures([("batch 0", s)]) == "batch 0: [10,30]\n"


class TestTemporalLoss:
    def test_equal_snapshots(self):
        r = relation_matrix(Tensor(np.random.default_rng(3).normal(size=(4, 3))))
        s = stable_substructures(binarize(r, 0.0), binarize(r, 0.0))
        assert temporal_consistency_loss(r, r.detached(), s).item() == 0.0

    def test_no_components(self):
        rng = np.random.default_rng(4)
        r1 = relation_matrix(Tensor(rng.normal(size=(4, 3))))
        r2 = relation_matrix(Tensor(rng.normal(size=(4, 3))))
        empty = StableSubstructureSet((), r1.batch_ids)
        assert temporal_consistency_loss(r1, r2, empty).item() == 0.0

    def test_hand_example(self):
        base = np.eye(4)
        moved = base.copy()
        moved[0, 1] = moved[1, 0] = 0.1
        s = StableSubstructureSet(((0, 1),), (0, 1, 2, 3))
        loss = temporal_consistency_loss(RelationMatrix(Tensor(moved), s.batch_ids), RelationMatrix(Tensor(base), s.batch_ids), s)
        # (0.1^2 + 0.1^2) / 4
        assert loss.item() == pytest.approx(0.005, abs=1e-15)

    def test_component_out_of_range(self):
        r = RelationMatrix(Tensor(np.eye(2)), (0, 1))
        with pytest.raises(IndexError):
            temporal_consistency_loss(r, r, StableSubstructureSet(((0, 5),), (0, 1)))

    def test_gradient_current_only(self):
        rng = np.random.default_rng(5)
        for _ in range(20):
            B, K = int(rng.integers(2, 7)), int(rng.integers(1, 9))
            cur, prev = rng.uniform(-2, 2, size=(2, B, K))
            r_prev = relation_matrix(Tensor(prev))
            s = stable_substructures(binarize(relation_matrix(Tensor(cur)), 0.0), binarize(r_prev, 0.0))
            x = Tensor(cur, requires_grad=True)
            prev_leaf = Tensor(prev, requires_grad=True)
            with Tape():
                loss = temporal_consistency_loss(relation_matrix(x), relation_matrix(prev_leaf).detached(), s)
            grads = T.backward(loss)
            assert prev_leaf not in grads
            fd = finite_difference_grad(lambda v: temporal_consistency_loss(relation_matrix(v), r_prev, s), cur)
            assert max_relative_error(T.backward(loss, [x])[x], fd) <= 1e-4


class TestCache:
    def test_first_visit_then_hit(self):
        cache = RelationCache()
        key = (1, 2, 3)
        assert cache.get(key) is None
        r = relation_matrix(Tensor(np.random.default_rng(6).normal(size=(3, 2))), key)
        cache_update(cache, key, r, binarize(r, 0.5), 1)
        entry = cache.get(key)
        assert entry.iteration == 1 and entry.relation.values.data.tobytes() == r.values.data.tobytes()

    def test_entry_replaced(self):
        cache = RelationCache()
        rng = np.random.default_rng(7)
        for it in (1, 2):
            r = relation_matrix(Tensor(rng.normal(size=(3, 2))), (0, 1, 2))
            cache_update(cache, (0, 1, 2), r, binarize(r, 0.5), it)
        assert len(cache) == 1 and cache.get((0, 1, 2)).iteration == 2

    def test_snapshot_is_detached(self):
        x = Tensor(np.random.default_rng(8).normal(size=(3, 2)), requires_grad=True)
        with Tape():
            r = relation_matrix(x)
        cache = cache_update(RelationCache(), "k", r, binarize(r, 0.5), 1)
        assert not cache.get("k").relation.values.requires_grad
