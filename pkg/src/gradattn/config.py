"""Run configuration: defaults follow the Adam/plateau/early-stop training protocol."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path

import yaml

from .attention import PE_VARIANTS, EncoderConfig
from .data import SplitConfig
from .errors import ContractError
from .models import WidthConfig

DATASETS = ("synthetic", "fashion_mnist", "idx", "cifar10")


@dataclass
class RunConfig:
    model: str = "gradattn"
    pe_variant: str = "learnable"

    dataset: str = "synthetic"
    data_path: str = ""
    labels_path: str = ""
    subset: int = 0
    synthetic_classes: int = 2
    synthetic_per_class: int = 200
    synthetic_size: int = 16

    width_scale: float = 0.25
    stem: str = "small"
    enc_depth: int = 2
    enc_heads: int = 4
    enc_dim: int = 64
    enc_ffn_dim: int = 512

    lr: float = 1e-3
    weight_decay: float = 1e-4
    batch_size: int = 128
    plateau_patience: int = 3
    plateau_factor: float = 0.2
    plateau_threshold: float = 1e-4
    early_stop_patience: int = 7
    max_epochs: int = 15
    val_fraction: float = 0.2
    seed: int = 42
    precision: str = "float32"
    gradflow_every: int = 10

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.model not in ("resnet18", "gradattn"):
            raise ContractError(f"model must be resnet18 or gradattn, got {self.model!r}")
        if self.pe_variant not in PE_VARIANTS:
            raise ContractError(f"pe_variant must be one of {PE_VARIANTS}")
        if self.dataset not in DATASETS:
            raise ContractError(f"dataset must be one of {DATASETS}")
        if self.precision not in ("float32", "float64"):
            raise ContractError("precision must be float32 or float64")
        if self.max_epochs < 1 or self.gradflow_every < 1 or self.subset < 0:
            raise ContractError("max_epochs and gradflow_every must be >= 1, subset >= 0")
        if self.width_scale <= 0:
            raise ContractError("width_scale must be positive")
        self.split_config()
        self.encoder_config()

    def split_config(self) -> SplitConfig:
        return SplitConfig(self.val_fraction, self.seed, self.batch_size)

    def encoder_config(self) -> EncoderConfig:
        return EncoderConfig(self.enc_depth, self.enc_heads, self.enc_dim, self.enc_ffn_dim, self.pe_variant)

    def width_config(self, in_channels: int, input_size: int, num_classes: int) -> WidthConfig:
        if self.width_scale == 1.0 and self.stem == "imagenet":
            return WidthConfig.full(num_classes, in_channels, input_size)
        return WidthConfig.desk(self.width_scale, num_classes, in_channels, input_size, self.stem)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name: f for f in fields(cls)}
        unknown = set(d) - set(known)
        if unknown:
            raise ContractError(f"unknown config keys: {sorted(unknown)}")
        return cls(**{k: _coerce(known[k], v) for k, v in d.items()})

    def with_overrides(self, overrides: dict) -> "RunConfig":
        return RunConfig.from_dict({**self.to_dict(), **overrides})

    def dump(self, path) -> None:
        Path(path).write_text(yaml.safe_dump(self.to_dict(), sort_keys=False))

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            doc = yaml.safe_load(Path(path).read_text()) or {}
        except yaml.YAMLError as exc:
            raise ContractError(f"{path}: invalid YAML ({exc})") from None
        if not isinstance(doc, dict):
            raise ContractError(f"{path}: expected a key-value document")
        return cls.from_dict(doc)


def _coerce(f: dataclasses.Field, value):
    typ = f.type if isinstance(f.type, str) else f.type.__name__
    try:
        if typ == "int":
            return int(value)
        if typ == "float":
            return float(value)
        return str(value)
    except (TypeError, ValueError):
        raise ContractError(f"config key {f.name}: cannot interpret {value!r} as {typ}") from None


def parse_override(item: str) -> tuple[str, str]:
    if "=" not in item:
        raise ContractError(f"override must look like key=value, got {item!r}")
    key, value = item.split("=", 1)
    return key.strip(), value.strip()
