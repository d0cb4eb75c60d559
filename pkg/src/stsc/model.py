"""Student/teacher classifier networks, input perturbation and EMA updates."""

from __future__ import annotations

from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .tensor import ContractError, ShapeError, Tensor

HEAD_MODES = ("single", "multi")


@dataclass(frozen=True)
class ConvSpec:
    """Optional image front: one valid k×k convolution, ReLU, 2×2 mean pooling."""

    height: int
    width: int
    kernel: int = 3
    channels: int = 4

    def __post_init__(self):
        if min(self.height, self.width) < self.kernel + 1 or self.kernel < 1 or self.channels < 1:
            raise ContractError(f"invalid conv front {self}")

    @property
    def conv_hw(self) -> tuple[int, int]:
        return self.height - self.kernel + 1, self.width - self.kernel + 1

    @property
    def pooled_hw(self) -> tuple[int, int]:
        h, w = self.conv_hw
        return h // 2, w // 2

    @property
    def out_features(self) -> int:
        ph, pw = self.pooled_hw
        return ph * pw * self.channels

    def patch_index(self) -> np.ndarray:
        """(positions × k²) pixel indices into a flattened H·W image."""
        ch, cw = self.conv_hw
        k = self.kernel
        rows = np.arange(ch)[:, None, None, None] + np.arange(k)[None, None, :, None]
        cols = np.arange(cw)[None, :, None, None] + np.arange(k)[None, None, None, :]
        return (rows * self.width + cols).reshape(ch * cw, k * k)

    def pool_matrix(self) -> np.ndarray:
        """Linear map from (position, channel) activations to 2×2-pooled ones."""
        ch, cw = self.conv_hw
        ph, pw = self.pooled_hw
        C = self.channels
        P = np.zeros((ch * cw * C, ph * pw * C))
        for i in range(ph * 2):
            for j in range(pw * 2):
                src = (i * cw + j) * C
                dst = ((i // 2) * pw + j // 2) * C
                P[src + np.arange(C), dst + np.arange(C)] = 0.25
        return P


@dataclass(frozen=True)
class ModelParams:
    """Weights of one network. ``weights[i]`` maps ``layer_dims[i]`` to ``layer_dims[i+1]``."""

    weights: tuple[Tensor, ...]
    biases: tuple[Tensor, ...]
    layer_dims: tuple[int, ...]
    head_mode: str = "single"
    conv: ConvSpec | None = None
    conv_weight: Tensor | None = None
    conv_bias: Tensor | None = None

    def __post_init__(self):
        dims = self.layer_dims
        if len(self.weights) != len(dims) - 1 or len(self.biases) != len(dims) - 1:
            raise ShapeError("layer count does not match layer_dims")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.shape != (dims[i], dims[i + 1]) or b.shape != (dims[i + 1],):
                raise ShapeError(
                    f"layer {i}: weight {w.shape} / bias {b.shape} do not chain {dims[i]}->{dims[i + 1]}"
                )
        if self.head_mode not in HEAD_MODES:
            raise ContractError(f"head_mode must be one of {HEAD_MODES}")
        if self.conv is not None and dims[0] != self.conv.out_features:
            raise ShapeError(
                f"conv front emits {self.conv.out_features} features but layer_dims[0] is {dims[0]}"
            )

    @property
    def n_classes(self) -> int:
        return self.layer_dims[-1]

    @property
    def input_dim(self) -> int:
        if self.conv is not None:
            return self.conv.height * self.conv.width
        return self.layer_dims[0]

    def tensors(self) -> list[Tensor]:
        out = [] if self.conv is None else [self.conv_weight, self.conv_bias]
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def with_tensors(self, arrays: Sequence, requires_grad: bool = False) -> "ModelParams":
        """Same architecture, new values (``arrays`` ordered as :meth:`tensors`)."""
        ts = [Tensor(a.data if isinstance(a, Tensor) else a, requires_grad=requires_grad) for a in arrays]
        if len(ts) != len(self.tensors()):
            raise ShapeError("wrong number of parameter tensors")
        conv_w = conv_b = None
        if self.conv is not None:
            conv_w, conv_b, ts = ts[0], ts[1], ts[2:]
        return replace(
            self, weights=tuple(ts[0::2]), biases=tuple(ts[1::2]), conv_weight=conv_w, conv_bias=conv_b
        )

    def detached(self) -> "ModelParams":
        return self.with_tensors(self.tensors(), requires_grad=False)

    def trainable(self) -> "ModelParams":
        return self.with_tensors(self.tensors(), requires_grad=True)


@dataclass(frozen=True)
class Perturbation:
    """Input perturbation: additive Gaussian noise, plus horizontal flips for images."""

    noise_sigma: float = 0.0
    flip_prob: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.noise_sigma < 0:
            raise ContractError("noise_sigma must be >= 0")
        if not 0.0 <= self.flip_prob <= 1.0:
            raise ContractError("flip_prob must lie in [0, 1]")


NO_PERTURBATION = Perturbation()


@dataclass(frozen=True)
class FeatureBatch:
    features: Tensor  # penultimate activations, B×K
    logits: Tensor  # B×c


def init_params(
    layer_dims: Sequence[int],
    seed: int,
    head_mode: str = "single",
    conv: ConvSpec | None = None,
) -> ModelParams:
    """Uniform(±1/sqrt(fan_in)) weights and zero biases, deterministic in ``seed``."""
    dims = tuple(int(d) for d in layer_dims)
    if len(dims) < 2:
        raise ContractError("layer_dims needs at least an input and an output width")
    if min(dims) < 1:
        raise ContractError("all layer widths must be >= 1")
    rng = np.random.default_rng(seed)
    conv_w = conv_b = None
    if conv is not None:
        fan = conv.kernel * conv.kernel
        bound = 1.0 / np.sqrt(fan)
        conv_w = Tensor(rng.uniform(-bound, bound, size=(fan, conv.channels)))
        conv_b = Tensor(np.zeros(conv.channels))
    weights, biases = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        bound = 1.0 / np.sqrt(fan_in)
        weights.append(Tensor(rng.uniform(-bound, bound, size=(fan_in, fan_out))))
        biases.append(Tensor(np.zeros(fan_out)))
    return ModelParams(tuple(weights), tuple(biases), dims, head_mode, conv, conv_w, conv_b)


def perturb(x: np.ndarray, pert: Perturbation, image_shape: tuple[int, int] | None = None) -> np.ndarray:
    """Apply ``pert`` to a batch of flattened inputs; identity when both knobs are zero."""
    x = np.asarray(x, dtype=np.float64)
    if pert.noise_sigma == 0 and pert.flip_prob == 0:
        return x
    rng = np.random.default_rng(pert.seed)
    out = x
    if pert.flip_prob > 0:
        if image_shape is None:
            raise ContractError("flip perturbation needs image-shaped inputs")
        h, w = image_shape
        flip = rng.random(x.shape[0]) < pert.flip_prob
        imgs = x.reshape(x.shape[0], h, w).copy()
        imgs[flip] = imgs[flip][:, :, ::-1]
        out = imgs.reshape(x.shape)
    if pert.noise_sigma > 0:
        out = out + rng.normal(0.0, pert.noise_sigma, size=x.shape)
    return out


def _conv_front(params: ModelParams, x: Tensor) -> Tensor:
    spec = params.conv
    B = x.shape[0]
    idx = spec.patch_index()
    n_pos, k2 = idx.shape
    patches = T.reshape(T.gather_columns(x, idx), (B * n_pos, k2))
    act = T.relu(T.add_row_vector(T.matmul(patches, params.conv_weight), params.conv_bias))
    act = T.reshape(act, (B, n_pos * spec.channels))
    return T.matmul(act, Tensor(spec.pool_matrix()))


def forward(params: ModelParams, x, pert: Perturbation = NO_PERTURBATION) -> FeatureBatch:
    """Perturb the inputs, then run the network.

    Every layer but the last is affine + ReLU; the output of the last hidden
    layer is returned as ``features``, the final affine map as ``logits``.
    """
    raw = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
    if raw.ndim != 2 or raw.shape[1] != params.input_dim:
        raise ShapeError(f"forward: input shape {raw.shape} does not match input dim {params.input_dim}")
    image_shape = None if params.conv is None else (params.conv.height, params.conv.width)
    h = Tensor(perturb(raw, pert, image_shape))
    if params.conv is not None:
        h = _conv_front(params, h)
    last = len(params.weights) - 1
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        z = T.add_row_vector(T.matmul(h, w), b)
        if i == last:
            return FeatureBatch(features=h, logits=z)
        h = T.relu(z)
    raise AssertionError("unreachable")


def probabilities(logits: Tensor, head_mode: str) -> Tensor:
    return T.softmax(logits) if head_mode == "single" else T.sigmoid(logits)


def predict(params: ModelParams, x) -> Tensor:
    """Class probabilities without perturbation: softmax rows or per-class sigmoids."""
    return probabilities(forward(params, x).logits, params.head_mode)


def ema_update(teacher: ModelParams, student: ModelParams, alpha: float) -> ModelParams:
    """Return ``alpha * teacher + (1 - alpha) * student`` parameter-wise.

    The result never requires gradients, so the teacher stays off any tape.
    """
    if not 0.0 <= alpha <= 1.0:
        raise ContractError(f"EMA alpha must lie in [0, 1], got {alpha}")
    t_list, s_list = teacher.tensors(), student.tensors()
    if len(t_list) != len(s_list) or any(a.shape != b.shape for a, b in zip(t_list, s_list)):
        raise ShapeError("ema_update: teacher and student architectures differ")
    mixed = [alpha * t.data + (1.0 - alpha) * s.data for t, s in zip(t_list, s_list)]
    return teacher.with_tensors(mixed, requires_grad=False)


# --- checkpoints -----------------------------------------------------------


def save_checkpoint(path, params: ModelParams, epoch: int) -> None:
    """Tensor payloads in ``path`` plus a ``key = value`` manifest beside it."""
    path = Path(path)
    T.write_tensors(path, params.tensors())
    lines = [
        f"layer_dims = {','.join(map(str, params.layer_dims))}",
        f"head_mode = {params.head_mode}",
        f"epoch = {epoch}",
    ]
    if params.conv is not None:
        c = params.conv
        lines.append(f"conv = {c.height},{c.width},{c.kernel},{c.channels}")
    path.with_name(path.name + ".manifest").write_text("\n".join(lines) + "\n")


def load_checkpoint(path) -> tuple[ModelParams, int]:
    path = Path(path)
    manifest_path = path.with_name(path.name + ".manifest")
    if not path.exists() or not manifest_path.exists():
        raise FileNotFoundError(f"checkpoint {path} (or its manifest) not found")
    meta = {}
    for line in manifest_path.read_text().splitlines():
        if line.strip():
            key, _, value = line.partition("=")
            meta[key.strip()] = value.strip()
    dims = tuple(int(v) for v in meta["layer_dims"].split(","))
    conv = None
    if "conv" in meta:
        conv = ConvSpec(*(int(v) for v in meta["conv"].split(",")))
    skeleton = init_params(dims, 0, meta["head_mode"], conv)
    return skeleton.with_tensors(T.read_tensors(path)), int(meta["epoch"])
