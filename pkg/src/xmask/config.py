"""Run configuration: a TOML file whose sections map onto the library dataclasses.

Every key is checked against the target dataclass before any work starts;
unknown keys, wrong types and out-of-range values raise :class:`ConfigError`.
The full schema is documented in ``docs/config.md``.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import tomli

from .attacks import AttackConfig
from .benchmark import METHODS
from .monitor import BalanceWeights, MonitorConfig
from .mute import MuteConfig
from .train import LossWeights

U64_MAX = 2 ** 64 - 1


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    source: str = "synthetic"  # synthetic | digits | idx | cifar10
    kind: str = "blobs"
    n: int = 1200
    shape: list = field(default_factory=lambda: [1, 28, 28])
    classes: int = 10
    noise: float = 0.05
    images: str = ""
    labels: str = ""
    batches: list = field(default_factory=list)
    eval_size: int = 200

    def __post_init__(self):
        if self.source not in ("synthetic", "digits", "idx", "cifar10"):
            raise ValueError(f"data.source must be synthetic, digits, idx or cifar10, got {self.source!r}")
        if self.source == "idx" and not (self.images and self.labels):
            raise ValueError("data.source = 'idx' needs data.images and data.labels")
        if self.source == "cifar10" and not self.batches:
            raise ValueError("data.source = 'cifar10' needs data.batches")
        if len(self.shape) != 3 or min(self.shape) < 1:
            raise ValueError(f"data.shape must be [C, H, W], got {self.shape}")
        if self.eval_size < 1:
            raise ValueError(f"data.eval_size must be >= 1, got {self.eval_size}")


@dataclass
class ModelConfig:
    kind: str = "mlp"  # mlp | convnet
    xunet_widths: list = field(default_factory=lambda: [16, 32, 64])
    slu_a: float = 0.5

    def __post_init__(self):
        if self.kind not in ("mlp", "convnet"):
            raise ValueError(f"model.kind must be 'mlp' or 'convnet', got {self.kind!r}")
        if len(self.xunet_widths) != 3:
            raise ValueError(f"model.xunet_widths needs three entries, got {self.xunet_widths}")


@dataclass
class TrainSection:
    epochs: int = 5
    batch_size: int = 50
    lr: float = 0.01
    optimizer: str = "sgd+momentum"
    momentum: float = 0.9
    xunet_epochs: int = 10
    xunet_lr: float = 0.01
    unroll: int = 3
    ig_steps: int = 32
    lrp_eps: float = 1e-6
    cache_every: int = 0
    train_size: int = 0  # 0 = every non-eval sample

    def __post_init__(self):
        for name in ("epochs", "batch_size", "xunet_epochs", "unroll", "ig_steps"):
            if getattr(self, name) < 1:
                raise ValueError(f"train.{name} must be >= 1, got {getattr(self, name)}")
        if self.lr < 0 or self.xunet_lr < 0:
            raise ValueError("learning rates must be >= 0")
        if self.optimizer not in ("sgd", "sgd+momentum"):
            raise ValueError(f"train.optimizer must be 'sgd' or 'sgd+momentum', got {self.optimizer!r}")


@dataclass
class BenchmarkSection:
    methods: list = field(default_factory=lambda: list(METHODS))
    attack: AttackConfig = field(default_factory=lambda: AttackConfig(epsilon=0.2, alpha=0.02, steps=10))
    sinifgsm_scales: int = 5
    sinifgsm_momentum: float = 1.0
    timing: str = "queries"

    def __post_init__(self):
        bad = [m for m in self.methods if m not in METHODS]
        if bad or not self.methods:
            raise ValueError(f"benchmark.methods must be a non-empty subset of {list(METHODS)}, got {self.methods}")
        if self.timing not in ("wall", "queries"):
            raise ValueError(f"benchmark.timing must be 'wall' or 'queries', got {self.timing!r}")


@dataclass
class RunConfig:
    seed: int = 0
    float_mode: str = "f32"
    out: str = "run"
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainSection = field(default_factory=TrainSection)
    attack: AttackConfig = field(default_factory=AttackConfig)
    mute: MuteConfig = field(default_factory=MuteConfig)
    monitor: MonitorConfig = field(default_factory=MonitorConfig)
    loss_weights: LossWeights = field(default_factory=LossWeights)
    balance_weights: BalanceWeights = field(default_factory=BalanceWeights)
    benchmark: BenchmarkSection = field(default_factory=BenchmarkSection)

    def __post_init__(self):
        if not 0 <= self.seed <= U64_MAX:
            raise ValueError(f"seed must be an unsigned 64-bit integer, got {self.seed}")
        if self.float_mode not in ("f32", "f64"):
            raise ValueError(f"float_mode must be 'f32' or 'f64', got {self.float_mode!r}")


def _type_ok(value, annotation) -> bool:
    ann = str(annotation)
    if ann == "bool":
        return isinstance(value, bool)
    if ann == "int":
        return isinstance(value, int) and not isinstance(value, bool)
    if ann == "float":
        return isinstance(value, (int, float)) and not isinstance(value, bool)
    if ann == "str":
        return isinstance(value, str)
    if ann == "list":
        return isinstance(value, list)
    return True


def build(cls, raw: dict, where: str = ""):
    """Instantiate dataclass ``cls`` from a plain dict, checking keys and types."""
    if not isinstance(raw, dict):
        raise ConfigError(f"{where or 'config'}: expected a table, got {type(raw).__name__}")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(raw) - set(fields))
    if unknown:
        raise ConfigError(f"{where or 'config'}: unknown key(s) {unknown}; allowed: {sorted(fields)}")
    kwargs = {}
    for name, value in raw.items():
        f = fields[name]
        key = f"{where}.{name}" if where else name
        sub = f.default_factory if f.default_factory is not dataclasses.MISSING else None
        proto = sub() if sub is not None else None
        if dataclasses.is_dataclass(proto):
            kwargs[name] = build(type(proto), value, key)
            continue
        if not _type_ok(value, f.type):
            raise ConfigError(f"{key}: expected {f.type}, got {type(value).__name__} {value!r}")
        kwargs[name] = float(value) if str(f.type) == "float" else value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{where or 'config'}: {e}") from e


def parse_config(text: str) -> RunConfig:
    try:
        raw = tomli.loads(text)
    except tomli.TOMLDecodeError as e:
        raise ConfigError(f"config is not valid TOML: {e}") from e
    return build(RunConfig, raw)


def load_config(path) -> RunConfig:
    try:
        with open(path, "rb") as f:
            text = f.read().decode("utf-8")
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e.strerror}") from e
    return parse_config(text)


def to_dict(cfg: RunConfig) -> dict:
    return dataclasses.asdict(cfg)
