"""Teacher-student training with spatial and temporal relation consistency."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .config import TrainConfig, derive_seed
from .data import Batch, Splits, batch_partition
from .metrics import MetricsReport, evaluate, relation_distance
from .model import ConvSpec, ModelParams, Perturbation, ema_update, forward, init_params, predict, probabilities
from .relation import RelationMatrix, individual_consistency_loss, relation_matrix, spatial_consistency_loss
from .temporal_graph import (
    RelationCache,
    StableSubstructureSet,
    binarize,
    cache_update,
    stable_substructures,
    temporal_consistency_loss,
)
from .tensor import ContractError, Tape, Tensor, ZeroRowWarning


# --- loss pieces -------------------------------------------------------------


def supervised_loss(logits: Tensor, labels, head_mode: str = "single") -> Tensor:
    """Mean cross-entropy (single-label) or mean per-class binary cross-entropy (multi-label)."""
    labels = np.asarray(labels)
    B, c = logits.shape
    if labels.shape[0] != B:
        raise ContractError(f"{labels.shape[0]} labels for {B} logit rows")
    if head_mode == "single":
        labels = labels.astype(np.int64)
        if labels.ndim != 1 or (B and (labels.min() < 0 or labels.max() >= c)):
            raise ContractError(f"class labels must be integers in [0, {c})")
        onehot = Tensor(np.eye(c)[labels])
        return T.scale(T.sum(T.mul(onehot, T.log_softmax(logits))), -1.0 / B)
    if labels.shape != (B, c) or not np.isin(labels, (0, 1)).all():
        raise ContractError(f"multi-label targets must be a {B}x{c} 0/1 array")
    # BCE with logits: softplus(z) - y * z
    y = Tensor(labels.astype(np.float64))
    return T.mean(T.sub(T.softplus(logits), T.mul(y, logits)))


@dataclass
class LossParts:
    ls: Tensor
    lc: Tensor
    lsc: Tensor
    ltc: Tensor

    def values(self) -> tuple[float, float, float, float]:
        return tuple(t.item() for t in (self.ls, self.lc, self.lsc, self.ltc))


def total_loss(parts: LossParts | Sequence, lam: float, config: TrainConfig) -> Tensor:
    """L_s + lam * (L_c + beta * L_sc + gamma * L_tc), leaving disabled terms out entirely."""
    if not isinstance(parts, LossParts):
        parts = LossParts(*(T.as_tensor(p) for p in parts))
    terms = []
    if config.use_lc:
        terms.append(parts.lc)
    if config.use_lsc:
        terms.append(T.scale(parts.lsc, config.beta))
    if config.use_ltc:
        terms.append(T.scale(parts.ltc, config.gamma))
    if not terms or lam == 0:
        return parts.ls
    unsup = terms[0]
    for term in terms[1:]:
        unsup = T.add(unsup, term)
    return T.add(parts.ls, T.scale(unsup, lam))


# --- schedules -----------------------------------------------------------------


def ramp_up(epoch: int, ramp_up_epochs: int, lambda_max: float) -> float:
    """Sigmoid-shaped ramp: lambda_max * exp(-5 (1 - min(epoch / ramp, 1))^2)."""
    if ramp_up_epochs < 0:
        raise ContractError("ramp_up_epochs must be >= 0")
    if ramp_up_epochs == 0:
        return float(lambda_max)
    phase = 1.0 - min(epoch / ramp_up_epochs, 1.0)
    return float(lambda_max * math.exp(-5.0 * phase * phase))


def lr_schedule(
    epoch: int, lr_initial: float, decay: float, mode: str = "exp", total_epochs: int | None = None
) -> float:
    """Per-epoch learning rate.

    ``exp``: lr_initial * decay**epoch. ``poly``: lr_initial * (1 - epoch/total)**decay.
    """
    if not 0.0 < decay <= 1.0:
        raise ContractError("decay must lie in (0, 1]")
    if mode == "exp":
        return float(lr_initial * decay**epoch)
    if mode == "poly":
        if not total_epochs:
            raise ContractError("poly schedule needs total_epochs")
        return float(lr_initial * max(1.0 - epoch / total_epochs, 0.0) ** decay)
    raise ContractError(f"unknown schedule {mode!r}")


# --- optimizer -----------------------------------------------------------------


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0

    @classmethod
    def zeros_like(cls, arrays: Sequence[np.ndarray]) -> "AdamState":
        return cls([np.zeros(np.shape(a)) for a in arrays], [np.zeros(np.shape(a)) for a in arrays], 0)


def adam_step(
    params: Sequence[np.ndarray],
    grads: Sequence[np.ndarray],
    moments: AdamState,
    lr: float,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
) -> tuple[list[np.ndarray], AdamState]:
    """One bias-corrected Adam update. Inputs are not modified."""
    if len(params) != len(grads) or len(params) != len(moments.m):
        raise ContractError("adam_step: params, grads and moments differ in length")
    b1, b2 = betas
    t = moments.t + 1
    new_p, new_m, new_v = [], [], []
    for p, g, m, v in zip(params, grads, moments.m, moments.v):
        p, g = np.asarray(p), np.asarray(g)
        if p.shape != g.shape or p.shape != m.shape:
            raise ContractError(f"adam_step: shape mismatch {p.shape} / {g.shape}")
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        m_hat = m / (1.0 - b1**t)
        v_hat = v / (1.0 - b2**t)
        new_p.append(p - lr * m_hat / (np.sqrt(v_hat) + eps))
        new_m.append(m)
        new_v.append(v)
    return new_p, AdamState(new_m, new_v, t)


# --- state and steps ---------------------------------------------------------


@dataclass
class StepLog:
    iteration: int
    epoch: int
    ls: float
    lc: float
    lsc: float
    ltc: float
    total: float
    k: int
    relation_distance: float
    zero_rows: int


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    lam: float
    ls: float
    lc: float
    lsc: float
    ltc: float
    k: float
    val: MetricsReport
    relation_distance: float

    CSV_FIELDS = (
        "epoch", "lr", "lambda", "L_s", "L_c", "L_sc", "L_tc", "k",
        "val_acc", "val_sen", "val_spec", "val_auc", "val_f1", "relation_distance",
    )

    def csv_values(self) -> list[str]:
        v = self.val
        nums = [
            self.lr, self.lam, self.ls, self.lc, self.lsc, self.ltc, self.k,
            v.accuracy, v.sensitivity, v.specificity, v.auc, v.f1, self.relation_distance,
        ]
        return [str(self.epoch)] + [repr(float(x)) for x in nums]


@dataclass
class TrainState:
    iteration: int
    epoch: int
    student: ModelParams
    teacher: ModelParams
    adam: AdamState
    cache: RelationCache = field(default_factory=RelationCache)
    history: list[EpochRecord] = field(default_factory=list)


def init_state(
    config: TrainConfig, input_dim: int, n_classes: int, image_shape: tuple[int, int] | None = None
) -> TrainState:
    """Fresh student from the ``init`` stream; the teacher starts as an exact copy."""
    conv = None
    front = input_dim
    if config.conv_channels > 0:
        if image_shape is None:
            raise ContractError("conv_channels > 0 needs an image dataset")
        conv = ConvSpec(image_shape[0], image_shape[1], config.conv_kernel, config.conv_channels)
        front = conv.out_features
    dims = (front, *config.hidden_dims, n_classes)
    student = init_params(dims, derive_seed(config.seed, "init"), config.head_mode, conv).trainable()
    return TrainState(0, 0, student, student.detached(), AdamState.zeros_like([p.data for p in student.tensors()]))


@dataclass
class StepOutputs:
    parts: LossParts
    r_student: RelationMatrix
    r_teacher: RelationMatrix
    substructures: StableSubstructureSet | None


def compute_losses(state: TrainState, batch: Batch, config: TrainConfig, iteration: int) -> StepOutputs:
    """Forward both networks on ``batch`` and build every loss term.

    Call inside an active :class:`Tape` to make the student terms
    differentiable. All four terms are always computed (for logging); the
    switches only act in :func:`total_loss`.
    """
    if len(batch) < 2:
        raise ContractError("relation terms need at least two samples per batch")
    pert_s = Perturbation(config.noise_sigma, config.flip_prob, derive_seed(config.seed, "perturb-student", iteration))
    pert_t = Perturbation(config.noise_sigma, config.flip_prob, derive_seed(config.seed, "perturb-teacher", iteration))
    out_s = forward(state.student, batch.x, pert_s)
    out_t = forward(state.teacher, batch.x, pert_t)

    if len(batch.labeled_pos):
        ls = supervised_loss(T.take(out_s.logits, batch.labeled_pos), batch.labels, config.head_mode)
    else:
        ls = T.zeros(())
    p_s = probabilities(out_s.logits, config.head_mode)
    p_t = probabilities(out_t.logits, config.head_mode)
    lc = individual_consistency_loss(p_s, p_t)

    r_s = relation_matrix(out_s.features, batch.sample_ids)
    r_t = relation_matrix(out_t.features, batch.sample_ids)
    lsc = spatial_consistency_loss(r_s, r_t)

    ltc, subs = T.zeros(()), None
    entry = state.cache.get(batch.key)
    if entry is not None and state.epoch >= config.tsc_start_epoch:
        subs = stable_substructures(binarize(r_s, config.tau), entry.adjacency, (entry.iteration, iteration))
        ltc = temporal_consistency_loss(r_s, entry.relation, subs, len(batch))
    return StepOutputs(LossParts(ls, lc, lsc, ltc), r_s, r_t, subs)


def train_step(state: TrainState, batch: Batch, config: TrainConfig) -> tuple[TrainState, StepLog]:
    """Forward, total loss, backward, Adam on the student, EMA on the teacher, cache refresh."""
    t = state.iteration + 1
    lam = ramp_up(state.epoch, config.ramp_up_epochs, config.lambda_max)
    lr = lr_schedule(state.epoch, config.lr_initial, config.lr_decay, config.lr_schedule, config.epochs)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", ZeroRowWarning)
        with Tape() as tape:
            out = compute_losses(state, batch, config, t)
            loss = total_loss(out.parts, lam, config)
        params = state.student.tensors()
        grads = tape.backward(loss, params)
    new_arrays, adam = adam_step(
        [p.data for p in params],
        [grads[p].data for p in params],
        state.adam,
        lr,
        (config.adam_beta1, config.adam_beta2),
        config.adam_eps,
    )
    student = state.student.with_tensors(new_arrays, requires_grad=True)
    alpha = min(config.alpha_ema, 1.0 - 1.0 / (t + 1)) if config.ema_warmup else config.alpha_ema
    teacher = ema_update(state.teacher, student, alpha)
    cache_update(state.cache, batch.key, out.r_student, binarize(out.r_student, config.tau), t)
    dist, _ = relation_distance(out.r_student, out.r_teacher)
    ls, lc, lsc, ltc = out.parts.values()
    log = StepLog(
        t, state.epoch, ls, lc, lsc, ltc, loss.item(),
        0 if out.substructures is None else len(out.substructures),
        dist,
        sum(1 for w in caught if issubclass(w.category, ZeroRowWarning)),
    )
    return replace(state, iteration=t, student=student, teacher=teacher, adam=adam), log


def eval_params(state: TrainState, config: TrainConfig) -> ModelParams:
    return state.teacher if config.eval_model == "teacher" else state.student.detached()


def evaluate_params(params: ModelParams, ds) -> MetricsReport:
    return evaluate(predict(params, ds.features).data, ds.labels, ds.n_classes)


@dataclass
class FitResult:
    state: TrainState
    history: list[EpochRecord]
    best_params: ModelParams
    best_epoch: int
    batches: list[Batch]


EpochHook = Callable[[TrainState, EpochRecord, StepOutputs, bool], None]


def _better(report: MetricsReport, best: MetricsReport | None) -> bool:
    if best is None:
        return True
    key = lambda r: (-math.inf if math.isnan(r.auc) else r.auc, r.accuracy)  # noqa: E731
    return key(report) >= key(best)


def fit(splits: Splits, config: TrainConfig, on_epoch: EpochHook | None = None) -> FitResult:
    """Train for ``config.epochs`` epochs over a fixed batch partition.

    The evaluated network (student or teacher, per ``eval_model``) is scored
    on the validation split after every epoch; the best one by validation
    AUC (accuracy breaks ties, the later epoch wins remaining ties) is kept.
    ``on_epoch`` receives the state, the epoch record, the first batch's
    step outputs (for relation snapshots) and whether this epoch is the new
    best.
    """
    if len(splits.labeled) == 0:
        raise ContractError("the labeled training set is empty")
    if len(splits.val) == 0:
        raise ContractError("the validation split is empty")
    config.validate()
    labeled = splits.labeled
    state = init_state(config, labeled.dim, labeled.n_classes, labeled.image_shape)
    batches = batch_partition(labeled, splits.unlabeled, config.batch_size, derive_seed(config.seed, "partition"))
    best_params, best_epoch, best_report = eval_params(state, config), -1, None
    for epoch in range(config.epochs):
        state.epoch = epoch
        logs, first = [], None
        for i, batch in enumerate(batches):
            if i == 0:
                # relation snapshot of the first batch, taken before its update
                with warnings.catch_warnings():
                    warnings.simplefilter("ignore", ZeroRowWarning)
                    first = compute_losses(state, batch, config, state.iteration + 1)
            state, log = train_step(state, batch, config)
            logs.append(log)
        val = evaluate_params(eval_params(state, config), splits.val)
        record = EpochRecord(
            epoch=epoch,
            lr=lr_schedule(epoch, config.lr_initial, config.lr_decay, config.lr_schedule, config.epochs),
            lam=ramp_up(epoch, config.ramp_up_epochs, config.lambda_max),
            ls=float(np.mean([g.ls for g in logs])),
            lc=float(np.mean([g.lc for g in logs])),
            lsc=float(np.mean([g.lsc for g in logs])),
            ltc=float(np.mean([g.ltc for g in logs])),
            k=float(np.mean([g.k for g in logs])),
            val=val,
            relation_distance=float(np.mean([g.relation_distance for g in logs])),
        )
        state.history.append(record)
        improved = _better(val, best_report)
        if improved:
            best_params, best_epoch, best_report = eval_params(state, config), epoch, val
        if on_epoch is not None:
            on_epoch(state, record, first, improved)
    return FitResult(state, state.history, best_params, best_epoch, batches)
