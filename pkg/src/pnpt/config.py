"""Run configuration: dataclass sections, INI-style files and dotted-key overrides.

A config file looks like::

    [train]
    epochs = 30
    learning_rate = 1e-3

    [model]
    hidden_dim = 96

and every field can be overridden as ``section.key=value``.
"""
from __future__ import annotations

import configparser
import dataclasses
import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path


@dataclass
class BackboneSection:
    name: str = "tiny"
    input_size: int = 256
    seed: int = 0
    weights_path: str | None = None
    freeze: bool = True


@dataclass
class HPESection:
    patch_sizes: list[int] = field(default_factory=lambda: [4, 2, 1])
    per_scale_dims: list[int] | None = None
    noise_std: float = 0.1
    concat_axis: str = "channel"


@dataclass
class ModelSection:
    hidden_dim: int = 760
    heads: int = 8
    num_blocks: int = 4
    num_semantic_tokens: int = 40
    share_branch_weights: bool = True
    ffn_expansion: int = 4


@dataclass
class TrainSection:
    epochs: int = 300
    batch_size: int = 8
    learning_rate: float = 1e-4
    weight_decay: float = 1e-4
    grad_clip: float = 1.0
    seed: int = 0
    checkpoint_every: int = 0


@dataclass
class FusionSection:
    w_prior: float = 0.5
    w_self: float = 0.5


@dataclass
class ScoreSection:
    reduction: str = "max"
    sigma: float = 4.0
    top_k: int = 100
    border: int = 8  # edge pixels left out of the image-level reduction


@dataclass
class PoolSection:
    metric: str = "euclidean"
    normalize_codings: bool = False


@dataclass
class AblationSection:
    disable_pool: bool = False
    disable_semantic_tokens: bool = False
    disable_cscd: bool = False
    disable_hpe_multiscale: bool = False


# Ablation presets: A is a plain single-stream transformer on the last scale,
# B adds the multi-scale embedding, C-E remove one component from the full model.
VARIANTS = {
    "A": dict(disable_pool=True, disable_semantic_tokens=True, disable_cscd=True, disable_hpe_multiscale=True),
    "B": dict(disable_pool=True, disable_semantic_tokens=True, disable_cscd=True, disable_hpe_multiscale=False),
    "C": dict(disable_pool=True),
    "D": dict(disable_semantic_tokens=True),
    "E": dict(disable_cscd=True),
    "full": {},
}


@dataclass
class TrainConfig:
    backbone: BackboneSection = field(default_factory=BackboneSection)
    hpe: HPESection = field(default_factory=HPESection)
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainSection = field(default_factory=TrainSection)
    fusion: FusionSection = field(default_factory=FusionSection)
    score: ScoreSection = field(default_factory=ScoreSection)
    pool: PoolSection = field(default_factory=PoolSection)
    ablation: AblationSection = field(default_factory=AblationSection)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        cfg = cls()
        for section, values in data.items():
            for key, value in values.items():
                set_value(cfg, f"{section}.{key}", value)
        return cfg

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]

    def with_variant(self, variant: str) -> "TrainConfig":
        if variant not in VARIANTS:
            raise ValueError(f"unknown ablation variant {variant!r}; expected one of {sorted(VARIANTS)}")
        cfg = TrainConfig.from_dict(self.to_dict())
        cfg.ablation = AblationSection(**VARIANTS[variant])
        return cfg

    def validate(self) -> "TrainConfig":
        t = self.train
        for name in ("epochs", "batch_size", "learning_rate"):
            if getattr(t, name) <= 0:
                raise ValueError(f"train.{name} must be positive")
        if t.weight_decay < 0 or t.grad_clip < 0:
            raise ValueError("train.weight_decay and train.grad_clip must be >= 0")
        if self.model.hidden_dim <= 0 or self.model.num_semantic_tokens <= 0:
            raise ValueError("model.hidden_dim and model.num_semantic_tokens must be positive")
        return self


class ConfigError(ValueError):
    pass


def _coerce(value, template_type: str, key: str):
    if not isinstance(value, str):
        return value
    text = value.strip()
    if text.lower() in ("none", "null", ""):
        return None
    if "bool" in template_type:
        if text.lower() in ("1", "true", "yes", "on"):
            return True
        if text.lower() in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{key}: expected a boolean, got {value!r}")
    if "list" in template_type:
        return [int(v) for v in text.replace("[", "").replace("]", "").replace(",", " ").split()]
    try:
        if template_type.startswith("int"):
            return int(text)
        if template_type.startswith("float"):
            return float(text)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {value!r} as {template_type}") from None
    return text


def set_value(cfg: TrainConfig, dotted: str, value) -> None:
    try:
        section_name, key = dotted.split(".", 1)
    except ValueError:
        raise ConfigError(f"config keys are 'section.key', got {dotted!r}") from None
    section = getattr(cfg, section_name, None)
    if section is None or not dataclasses.is_dataclass(section):
        raise ConfigError(f"unknown config section {section_name!r}")
    types = {f.name: str(f.type) for f in fields(section)}
    if key not in types:
        raise ConfigError(f"unknown config key {dotted!r}")
    setattr(section, key, _coerce(value, types[key], dotted))


def load_config(path=None, overrides: list[str] | dict | None = None, base: TrainConfig | None = None) -> TrainConfig:
    """Defaults (or a copy of ``base``), then the INI file, then dotted overrides."""
    cfg = TrainConfig.from_dict(base.to_dict()) if base is not None else TrainConfig()
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        parser = configparser.ConfigParser()
        parser.optionxform = str
        parser.read(path)
        for section in parser.sections():
            for key, value in parser.items(section):
                set_value(cfg, f"{section}.{key}", value)
    if isinstance(overrides, dict):
        overrides = [f"{k}={v}" for k, v in overrides.items()]
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"override must be section.key=value, got {item!r}")
        key, value = item.split("=", 1)
        set_value(cfg, key.strip(), value)
    return cfg.validate()


def dump_config(cfg: TrainConfig, path) -> None:
    parser = configparser.ConfigParser()
    parser.optionxform = str
    for section, values in cfg.to_dict().items():
        parser[section] = {
            k: ("none" if v is None else " ".join(map(str, v)) if isinstance(v, list) else str(v))
            for k, v in values.items()
        }
    with open(path, "w") as fh:
        parser.write(fh)
