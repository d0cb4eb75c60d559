import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stsc import tensor as T
from stsc.config import TrainConfig, derive_seed
from stsc.data import SplitSpec, batch_partition, gen_rings, split
from stsc.model import ema_update
from stsc.tensor import ContractError, Tape, Tensor
from stsc.trainer import (
    AdamState,
    LossParts,
    adam_step,
    compute_losses,
    fit,
    init_state,
    lr_schedule,
    ramp_up,
    supervised_loss,
    total_loss,
    train_step,
)


def small_setup(**overrides):
    cfg = TrainConfig(**{"epochs": 3, "batch_size": 16, "hidden_dims": (8, 6), "ramp_up_epochs": 2, **overrides})
    splits = split(gen_rings(120, 0.1, 0), SplitSpec(labeled_ratio=0.3, seed=0))
    batches = batch_partition(splits.labeled, splits.unlabeled, cfg.batch_size, derive_seed(cfg.seed, "partition"))
    return cfg, splits, batches


class TestSupervisedLoss:
    def test_confident_correct(self):
        logits = Tensor([[20.0, 0.0], [0.0, 20.0]])
        assert supervised_loss(logits, [0, 1]).item() <= 1e-6

    def test_uniform_binary(self):
        assert supervised_loss(Tensor(np.zeros((3, 2))), [0, 1, 1]).item() == pytest.approx(math.log(2), abs=1e-15)

    def test_multilabel_half(self):
        y = np.array([[0, 1, 1], [1, 0, 0]])
        assert supervised_loss(Tensor(np.zeros((2, 3))), y, "multi").item() == pytest.approx(math.log(2), abs=1e-15)

    def test_label_out_of_range(self):
        with pytest.raises(ContractError):
            supervised_loss(Tensor(np.zeros((1, 2))), [2])

    def test_gradient(self):
        rng = np.random.default_rng(0)
        z = rng.normal(size=(4, 3))
        labels = [0, 2, 1, 2]
        x = Tensor(z, requires_grad=True)
        with Tape() as tape:
            loss = supervised_loss(x, labels)
        fd = T.finite_difference_grad(lambda v: supervised_loss(v, labels), z)
        assert T.max_relative_error(tape.backward(loss)[x], fd) <= 1e-4


class TestTotalLoss:
    parts = LossParts(*(Tensor(v) for v in (0.5, 0.1, 0.2, 0.3)))

    def test_arithmetic(self):
        assert total_loss(self.parts, 1.0, TrainConfig()).item() == pytest.approx(1.1, abs=1e-15)

    def test_switches_off(self):
        cfg = TrainConfig(use_lc=False, use_lsc=False, use_ltc=False)
        assert total_loss(self.parts, 1.0, cfg).item() == 0.5

    def test_lambda_zero(self):
        assert total_loss(self.parts, 0.0, TrainConfig()).item() == 0.5

    def test_weights(self):
        cfg = TrainConfig(beta=2.0, gamma=0.0)
        assert total_loss(self.parts, 0.5, cfg).item() == pytest.approx(0.5 + 0.5 * (0.1 + 0.4), abs=1e-15)


class TestSchedules:
    def test_ramp_endpoints(self):
        assert ramp_up(0, 10, 2.0) == pytest.approx(2.0 * math.exp(-5))
        assert ramp_up(10, 10, 2.0) == ramp_up(30, 10, 2.0) == 2.0
        assert ramp_up(0, 0, 3.0) == 3.0
        assert ramp_up(5, 10, 1.0) == pytest.approx(math.exp(-1.25), abs=1e-15)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 50), st.integers(0, 100))
    def test_ramp_monotone(self, ramp, e):
        assert ramp_up(e, ramp, 1.0) <= ramp_up(e + 1, ramp, 1.0)

    def test_lr(self):
        assert lr_schedule(0, 1e-4, 0.9) == 1e-4
        assert lr_schedule(1, 1e-4, 0.9) == pytest.approx(9e-5, rel=1e-15)
        assert lr_schedule(7, 0.3, 1.0) == 0.3
        assert lr_schedule(5, 1.0, 0.9, "poly", 10) == pytest.approx(0.5**0.9)
        with pytest.raises(ContractError):
            lr_schedule(0, 1.0, 0.0)


class TestAdam:
    def test_zero_gradient_fixed_point(self):
        p = [np.array([1.0, -2.0])]
        new, _ = adam_step(p, [np.zeros(2)], AdamState.zeros_like(p), 0.1)
        assert new[0].tolist() == [1.0, -2.0]

    def test_first_step_magnitude(self):
        new, state = adam_step([np.zeros(1)], [np.ones(1)], AdamState.zeros_like([np.zeros(1)]), 0.1)
        assert new[0][0] == pytest.approx(-0.1, abs=1e-8) and state.t == 1

    def test_shape_mismatch(self):
        with pytest.raises(ContractError):
            adam_step([np.zeros(2)], [np.zeros(3)], AdamState.zeros_like([np.zeros(2)]), 0.1)

    def test_matches_reference_recurrence(self):
        rng = np.random.default_rng(1)
        p, m, v = rng.normal(size=3), np.zeros(3), np.zeros(3)
        state, cur = AdamState.zeros_like([p]), [p.copy()]
        for t in range(1, 6):
            g = rng.normal(size=3)
            m, v = 0.9 * m + 0.1 * g, 0.999 * v + 0.001 * g * g
            p = p - 0.01 * (m / (1 - 0.9**t)) / (np.sqrt(v / (1 - 0.999**t)) + 1e-8)
            cur, state = adam_step(cur, [g], state, 0.01)
            np.testing.assert_allclose(cur[0], p, rtol=0, atol=1e-15)


class TestConfigContract:
    def test_small_batch_rejected(self):
        with pytest.raises(ContractError):
            TrainConfig(batch_size=1)

    def test_negative_weight_rejected(self):
        with pytest.raises(ContractError):
            TrainConfig(beta=-1.0)


class TestTrainStep:
    def test_switches_off_is_plain_supervised(self):
        cfg, _, batches = small_setup(use_lc=False, use_lsc=False, use_ltc=False)
        state = init_state(cfg, 2, 2)
        b = batches[0]
        _, log = train_step(state, b, cfg)
        out = compute_losses(state, b, cfg, 1)
        assert log.total == out.parts.ls.item() == log.ls

    def test_cold_cache_has_no_temporal_term(self):
        cfg, _, batches = small_setup(tsc_start_epoch=0)
        state = init_state(cfg, 2, 2)
        state, log = train_step(state, batches[0], cfg)
        assert log.ltc == 0.0 and log.k == 0

    def test_teacher_is_ema_of_new_student(self):
        cfg, _, batches = small_setup(alpha_ema=0.9, ema_warmup=False)
        state = init_state(cfg, 2, 2)
        for b in batches[:3]:
            old_teacher = state.teacher
            state, _ = train_step(state, b, cfg)
            expected = ema_update(old_teacher, state.student, 0.9)
            for a, e in zip(state.teacher.tensors(), expected.tensors()):
                assert a.data.tobytes() == e.data.tobytes()

    def test_warmup_caps_early_decay(self):
        cfg, _, batches = small_setup(alpha_ema=0.9, ema_warmup=True)
        state = init_state(cfg, 2, 2)
        for t, b in enumerate(batches[:3], start=1):
            old_teacher = state.teacher
            state, _ = train_step(state, b, cfg)
            expected = ema_update(old_teacher, state.student, min(0.9, 1 - 1 / (t + 1)))
            for a, e in zip(state.teacher.tensors(), expected.tensors()):
                assert a.data.tobytes() == e.data.tobytes()

    def test_iteration_increases_and_cache_fills(self):
        cfg, _, batches = small_setup()
        state = init_state(cfg, 2, 2)
        for i, b in enumerate(batches, start=1):
            state, _ = train_step(state, b, cfg)
            assert state.iteration == i
        assert len(state.cache) == len(batches)


def warm_state(cfg, batches):
    """Visit every batch once so the next visit of batch 0 hits the cache."""
    state = init_state(cfg, 2, 2)
    for b in batches:
        state, _ = train_step(state, b, cfg)
    state.epoch = cfg.tsc_start_epoch
    return state


class TestGradientAlgebra:
    def grads_of(self, state, batch, cfg, pick):
        with Tape() as tape:
            out = compute_losses(state, batch, cfg, state.iteration + 1)
            loss = pick(out)
        params = state.student.tensors()
        g = tape.backward(loss, params)
        return out, [g[p].data for p in params]

    def test_linearity(self):
        cfg, _, batches = small_setup(tau=0.0, tsc_start_epoch=0, beta=0.7, gamma=1.3, lambda_max=2.0)
        state = warm_state(cfg, batches)
        b, lam = batches[0], 0.8
        out, total = self.grads_of(state, b, cfg, lambda o: total_loss(o.parts, lam, cfg))
        assert out.substructures is not None and len(out.substructures) > 0 and out.parts.ltc.item() > 0
        pieces = [self.grads_of(state, b, cfg, lambda o, n=n: getattr(o.parts, n))[1] for n in ("ls", "lc", "lsc", "ltc")]
        weights = (1.0, lam, lam * 0.7, lam * 1.3)
        for i, g in enumerate(total):
            combined = sum(w * p[i] for w, p in zip(weights, pieces))
            assert np.abs(g - combined).max() <= 1e-10

    @pytest.mark.parametrize("off", ["use_lc", "use_lsc", "use_ltc"])
    def test_switch_zeroes_contribution(self, off):
        cfg, _, batches = small_setup(tau=0.0, tsc_start_epoch=0)
        state = warm_state(cfg, batches)
        cfg_off = replace(cfg, **{off: False})
        weights = {"use_lc": ("lc", 1.0), "use_lsc": ("lsc", cfg.beta), "use_ltc": ("ltc", cfg.gamma)}
        name, w = weights[off]
        _, with_term = self.grads_of(state, batches[0], cfg, lambda o: total_loss(o.parts, 1.0, cfg))
        _, without = self.grads_of(state, batches[0], cfg_off, lambda o: total_loss(o.parts, 1.0, cfg_off))
        _, term = self.grads_of(state, batches[0], cfg, lambda o: getattr(o.parts, name))
        for a, b, t in zip(with_term, without, term):
            assert np.abs(a - w * t - b).max() <= 1e-10


class TestFit:
    def test_zero_epochs_returns_initial_state(self):
        cfg, splits, _ = small_setup(epochs=0)
        res = fit(splits, cfg)
        fresh = init_state(cfg, 2, 2)
        assert res.history == [] and res.state.iteration == 0
        assert all(a.data.tobytes() == b.data.tobytes() for a, b in zip(res.state.student.tensors(), fresh.student.tensors()))

    def test_deterministic(self):
        cfg, splits, _ = small_setup()
        a, b = fit(splits, cfg), fit(splits, cfg)
        assert [r.csv_values() for r in a.history] == [r.csv_values() for r in b.history]

    def test_empty_labeled_rejected(self):
        cfg, splits, _ = small_setup()
        with pytest.raises(ContractError):
            fit(replace(splits, labeled=splits.labeled.subset(np.array([], dtype=int))), cfg)

    def test_history_and_best(self):
        cfg, splits, _ = small_setup(epochs=4)
        res = fit(splits, cfg)
        assert [r.epoch for r in res.history] == [0, 1, 2, 3]
        best_auc = max(r.val.auc for r in res.history)
        assert res.history[res.best_epoch].val.auc == best_auc
