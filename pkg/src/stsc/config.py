"""Run configuration and the flat ``key = value`` file format.

All randomness is derived from the single root ``seed`` through named
sub-streams (see :func:`derive_seed`), so each source of variation can be
changed without disturbing the others.
"""

from __future__ import annotations

import dataclasses
import typing
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from .tensor import ContractError

STREAMS = {
    "data": 0,
    "split": 1,
    "init": 2,
    "partition": 3,
    "perturb-student": 4,
    "perturb-teacher": 5,
}


def derive_seed(root: int, stream: str, *extra: int) -> int:
    """Deterministic 63-bit seed for one named stream (optionally indexed, e.g. by iteration)."""
    ss = np.random.SeedSequence([int(root), STREAMS[stream], *(int(e) for e in extra)])
    return int(ss.generate_state(2, dtype=np.uint64)[0] >> np.uint64(1))


class ConfigError(ValueError):
    pass


@dataclass
class TrainConfig:
    """Hyperparameters of one training run.

    ``tsc_start_epoch`` defaults to ``ramp_up_epochs``. ``lr_schedule`` is
    ``exp`` (lr * decay**epoch) or ``poly`` (lr * (1 - epoch/epochs)**decay).
    """

    lambda_max: float = 3.0
    beta: float = 1.0
    gamma: float = 1.0
    alpha_ema: float = 0.99
    ema_warmup: bool = True
    tau: float = 0.1
    ramp_up_epochs: int = 20
    tsc_start_epoch: int = -1
    epochs: int = 100
    batch_size: int = 64
    lr_initial: float = 0.01
    lr_decay: float = 0.98
    lr_schedule: str = "exp"
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    head_mode: str = "single"
    use_lc: bool = True
    use_lsc: bool = True
    use_ltc: bool = True
    hidden_dims: tuple[int, ...] = (32, 32)
    noise_sigma: float = 0.15
    flip_prob: float = 0.0
    conv_channels: int = 0
    conv_kernel: int = 3
    eval_model: str = "teacher"

    def __post_init__(self):
        if self.tsc_start_epoch < 0:
            self.tsc_start_epoch = self.ramp_up_epochs
        self.hidden_dims = tuple(int(h) for h in self.hidden_dims)
        self.validate()

    def validate(self) -> None:
        problems = []
        for name in ("lambda_max", "beta", "gamma"):
            if getattr(self, name) < 0:
                problems.append(f"{name} must be >= 0")
        if not 0.0 <= self.alpha_ema <= 1.0:
            problems.append("alpha_ema must lie in [0, 1]")
        if self.epochs < 0:
            problems.append("epochs must be >= 0")
        if self.ramp_up_epochs < 0:
            problems.append("ramp_up_epochs must be >= 0")
        if self.batch_size < 1:
            problems.append("batch_size must be >= 1")
        if self.batch_size < 2 and (self.use_lsc or self.use_ltc):
            problems.append("relation losses need batch_size >= 2")
        if not 0.0 < self.lr_decay <= 1.0:
            problems.append("lr_decay must lie in (0, 1]")
        if self.lr_schedule not in ("exp", "poly"):
            problems.append("lr_schedule must be 'exp' or 'poly'")
        if self.head_mode not in ("single", "multi"):
            problems.append("head_mode must be 'single' or 'multi'")
        if self.eval_model not in ("student", "teacher"):
            problems.append("eval_model must be 'student' or 'teacher'")
        if self.noise_sigma < 0 or not 0.0 <= self.flip_prob <= 1.0:
            problems.append("noise_sigma must be >= 0 and flip_prob in [0, 1]")
        if any(h < 1 for h in self.hidden_dims):
            problems.append("hidden_dims entries must be >= 1")
        if problems:
            raise ContractError("; ".join(problems))

    @property
    def switches(self) -> tuple[bool, bool, bool]:
        return (self.use_lc, self.use_lsc, self.use_ltc)


@dataclass
class DataConfig:
    """Which dataset to build and how to split it."""

    dataset: str = "rings"
    n: int = 1000
    d: int = 2
    c: int = 2
    class_separation: float = 3.0
    data_noise: float = 0.25
    inner_radius: float = 1.0
    outer_radius: float = 2.0
    csv_path: str = ""
    labeled_ratio: float = 0.1
    train_frac: float = 0.7
    val_frac: float = 0.1
    test_frac: float = 0.2

    def __post_init__(self):
        if self.dataset not in ("rings", "blobs", "multilabel", "csv"):
            raise ContractError("dataset must be one of rings, blobs, multilabel, csv")
        if self.dataset == "csv" and not self.csv_path:
            raise ContractError("dataset=csv needs csv_path")


@dataclass
class ExperimentConfig:
    data: DataConfig = field(default_factory=DataConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    @property
    def seed(self) -> int:
        return self.train.seed


_SECTIONS = (("data", DataConfig), ("train", TrainConfig))


def valid_keys() -> list[str]:
    return [f.name for _, cls in _SECTIONS for f in fields(cls)]


def _owner(key: str):
    for section, cls in _SECTIONS:
        if key in {f.name for f in fields(cls)}:
            return section, cls
    raise ConfigError(f"unknown config key {key!r}; valid keys: {', '.join(valid_keys())}")


def _parse_value(key: str, raw: str, hint):
    raw = raw.strip()
    try:
        if hint is bool:
            low = raw.lower()
            if low in ("true", "1", "yes", "on"):
                return True
            if low in ("false", "0", "no", "off"):
                return False
            raise ValueError(raw)
        if hint is int:
            return int(raw)
        if hint is float:
            return float(raw)
        if hint is str:
            return raw
        if typing.get_origin(hint) is tuple:
            return tuple(int(v) for v in raw.split(",") if v.strip())
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r}") from None
    raise ConfigError(f"unsupported type for {key}")


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    return str(value)


def parse_pairs(pairs: dict[str, str], base: ExperimentConfig | None = None) -> ExperimentConfig:
    """Apply string ``key -> value`` pairs over ``base`` (defaults if omitted)."""
    base = base or ExperimentConfig()
    values = {section: dataclasses.asdict(getattr(base, section)) for section, _ in _SECTIONS}
    explicit_tsc = False
    for key, raw in pairs.items():
        section, cls = _owner(key)
        hints = typing.get_type_hints(cls)
        values[section][key] = _parse_value(key, raw, hints[key])
        explicit_tsc |= key == "tsc_start_epoch"
    if "ramp_up_epochs" in pairs and not explicit_tsc:
        # the default start tracks the ramp-up length
        if base.train.tsc_start_epoch == base.train.ramp_up_epochs:
            values["train"]["tsc_start_epoch"] = -1
    try:
        return ExperimentConfig(DataConfig(**values["data"]), TrainConfig(**values["train"]))
    except ContractError as exc:
        raise ConfigError(str(exc)) from None


def parse_text(text: str, base: ExperimentConfig | None = None) -> ExperimentConfig:
    pairs: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, _, value = line.partition("=")
        key = key.strip()
        if key in pairs:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        pairs[key] = value
    return parse_pairs(pairs, base)


def load(path) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    return parse_text(path.read_text())


def parse_overrides(items: list[str]) -> dict[str, str]:
    pairs = {}
    for item in items or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, _, value = item.partition("=")
        pairs[key.strip()] = value.strip()
    return pairs


def dumps(cfg: ExperimentConfig, header: dict[str, str] | None = None) -> str:
    """Serialize as ``key = value`` lines; ``header`` entries become comment lines."""
    lines = [f"# {k} = {v}" for k, v in (header or {}).items()]
    for section, _ in _SECTIONS:
        lines.append(f"# [{section}]")
        obj = getattr(cfg, section)
        for f in fields(obj):
            lines.append(f"{f.name} = {_format_value(getattr(obj, f.name))}")
    return "\n".join(lines) + "\n"
