"""Experiment configuration: TOML sections, flag overrides and the config hash."""

from __future__ import annotations

import hashlib
import json
import sys
from dataclasses import asdict, dataclass, field, fields, replace

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .errors import ConfigError
from .nqp import NqpExperimentConfig

# Fields that never change results and are left out of the hash. Checkpoint
# paths are locations; the trained run's own hash is recorded alongside.
HASH_EXCLUDED = {("run", "out"), ("run", "jobs"), ("nqp", "chunk"),
                 ("flatness", "checkpoint"), ("ood", "checkpoint")}


@dataclass
class DataConfig:
    generator: str = "gauss_blobs"
    classes: int = 4
    features: int = 8
    separation: float = 4.0
    noise: float = 0.1
    n: int = 4000
    seed: int | None = None
    test_fraction: float = 0.5
    standardize: bool = True


@dataclass
class ModelConfig:
    hidden: list = field(default_factory=lambda: [32, 32])
    batchnorm: bool = True
    late_model: str = "batchnorm"
    include_last: bool = True
    hypernet_dim: int = 2


@dataclass
class OptimConfig:
    optimizer: str = "sgd_nesterov"
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 0.0
    schedule: str = "linear_anneal"
    anneal_start: float = 0.5
    anneal_end: float = 0.9
    lr_end: float = 0.0005
    milestones: list = field(default_factory=list)
    factor: float = 0.1
    swa_start: float = 0.8
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8


@dataclass
class LateConfig:
    K: int = 10
    T0: float = 12.0
    T0_unit: str = "epoch"
    sigma0: float = 0.0
    gamma_theta: float = 1.0
    shared_minibatch: bool = False
    allow_zero_norm: bool = False
    late_weight_decay: float | None = None


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 32
    reestimate_bn: bool = True
    run_base: bool = True
    checkpoint_every: int = 0


@dataclass
class SweepConfig:
    K: list = field(default_factory=list)
    T0: list = field(default_factory=list)
    sigma0: list = field(default_factory=list)
    gamma_theta: list = field(default_factory=list)
    seed: list = field(default_factory=list)


@dataclass
class FlatnessConfig:
    sigmas: list = field(default_factory=lambda: [0.0, 0.01, 0.02, 0.05, 0.1])
    n_samples: int = 20
    checkpoint: str = ""


@dataclass
class OodConfig:
    n: int = 10_000
    spread: float = 0.5
    far_shift: float = 0.0
    checkpoint: str = ""


@dataclass
class RunConfig:
    seed: int = 0
    out: str = "runs/latest"
    jobs: int = 1


SECTIONS = {
    "run": RunConfig,
    "nqp": NqpExperimentConfig,
    "data": DataConfig,
    "model": ModelConfig,
    "optim": OptimConfig,
    "late": LateConfig,
    "train": TrainConfig,
    "sweep": SweepConfig,
    "flatness": FlatnessConfig,
    "ood": OodConfig,
}


@dataclass
class ExperimentConfig:
    run: RunConfig = field(default_factory=RunConfig)
    nqp: NqpExperimentConfig = field(default_factory=NqpExperimentConfig)
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    late: LateConfig = field(default_factory=LateConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    sweep: SweepConfig = field(default_factory=SweepConfig)
    flatness: FlatnessConfig = field(default_factory=FlatnessConfig)
    ood: OodConfig = field(default_factory=OodConfig)

    def to_dict(self):
        out = {}
        for name in SECTIONS:
            section = asdict(getattr(self, name))
            out[name] = {k: (list(v) if isinstance(v, tuple) else v) for k, v in section.items()}
        return out

    def hash(self, sections=None):
        return config_hash(self, sections)

    def data_seed(self):
        return self.run.seed if self.data.seed is None else self.data.seed


def _coerce(section, key, value, default):
    """Bring a parsed value to the type of the field default."""
    if default is None or value is None:
        return value
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{section}.{key} must be true or false")
        return value
    if isinstance(default, int):
        if (isinstance(value, bool) or not isinstance(value, (int, float))
                or not float(value).is_integer()):
            raise ConfigError(f"{section}.{key} must be an integer")
        return int(value)
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{section}.{key} must be a number")
        return float(value)
    if isinstance(default, (list, tuple)):
        if not isinstance(value, (list, tuple)):
            value = [value]
        return type(default)(value)
    if isinstance(default, str) and not isinstance(value, str):
        raise ConfigError(f"{section}.{key} must be a string")
    return value


def _update_section(obj, section, values):
    if not isinstance(values, dict):
        raise ConfigError(f"[{section}] must be a table")
    known = {f.name: f for f in fields(obj)}
    changes = {}
    for key, value in values.items():
        if key not in known:
            raise ConfigError(f"unknown option {section}.{key}")
        changes[key] = _coerce(section, key, value, getattr(obj, key))
    return replace(obj, **changes)


def from_dict(values: dict, base: ExperimentConfig | None = None) -> ExperimentConfig:
    cfg = base or ExperimentConfig()
    for section, body in values.items():
        if section not in SECTIONS:
            raise ConfigError(f"unknown config section [{section}]")
        setattr(cfg, section, _update_section(getattr(cfg, section), section, body))
    return cfg


def load_config(path=None, overrides=()) -> ExperimentConfig:
    """Read a TOML file (optional) and apply ``section.key=value`` overrides."""
    cfg = ExperimentConfig()
    if path:
        try:
            with open(path, "rb") as fh:
                values = tomllib.load(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from None
        cfg = from_dict(values, cfg)
    for item in overrides:
        section, key, value = parse_override(item)
        cfg = from_dict({section: {key: value}}, cfg)
    return cfg


def parse_override(item):
    name, sep, raw = item.partition("=")
    if not sep or "." not in name:
        raise ConfigError(f"override {item!r} must look like section.key=value")
    section, key = name.strip().split(".", 1)
    try:
        value = tomllib.loads(f"v = {raw.strip()}")["v"]
    except tomllib.TOMLDecodeError:
        value = raw.strip()
    return section, key, value


def _canonical(cfg: ExperimentConfig, sections=None):
    d = cfg.to_dict()
    for section, key in HASH_EXCLUDED:
        d[section].pop(key, None)
    if sections is not None:
        d = {k: v for k, v in d.items() if k in sections}
    return json.dumps(d, sort_keys=True, separators=(",", ":"))


def config_hash(cfg: ExperimentConfig, sections=None) -> str:
    """First 16 hex digits of the SHA-256 of the canonical JSON form."""
    return hashlib.sha256(_canonical(cfg, sections).encode()).hexdigest()[:16]


def dump_toml(cfg: ExperimentConfig) -> str:
    """Serialize to TOML (None-valued fields are omitted)."""
    lines = []
    for section, body in cfg.to_dict().items():
        lines.append(f"[{section}]")
        for key, value in body.items():
            if value is None:
                continue
            lines.append(f"{key} = {_toml_value(value)}")
        lines.append("")
    return "\n".join(lines)


def _toml_value(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (int, float)):
        return repr(v)
    if isinstance(v, str):
        return json.dumps(v)
    if isinstance(v, (list, tuple)):
        return "[" + ", ".join(_toml_value(x) for x in v) + "]"
    raise ConfigError(f"cannot serialize {v!r}")
