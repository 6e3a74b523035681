"""Configuration dataclasses and the flat TOML config file loader.

Every tunable lives here with its default; a config file may override any
subset. Unknown sections or keys are hard errors so typos cannot silently
fall back to defaults.
"""

from __future__ import annotations

import hashlib
import json
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .data import MODALITIES, Modality
from .errors import ConfigError

BACKBONE_KINDS = ("tiny_cnn", "resnet18_gap")
BACKBONE_DIMS = {"tiny_cnn": 32, "resnet18_gap": 512}


@dataclass
class DataConfig:
    min_area_frac: float = 0.02


@dataclass
class AugmentConfig:
    rotation_deg: float = 15.0
    hflip_prob: float = 0.5
    mix_alpha: float = 0.2
    tta_seed: int = 0


@dataclass
class BackboneConfig:
    kind: str = "tiny_cnn"
    weights: str = ""

    @property
    def feature_dim(self) -> int:
        return BACKBONE_DIMS[self.kind]


@dataclass
class ModelConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    rnn_units: int = 128
    routing_units: int = 64
    fusion_units: int = 128
    t: dict[Modality, int] = field(
        default_factory=lambda: {
            Modality.FLAIR: 250,
            Modality.T1W: 200,
            Modality.T1WCE: 200,
            Modality.T2: 250,
        }
    )
    num_classes: int = 2
    routing_shared: str = "group"  # "group" or "per_modality"

    def to_dict(self) -> dict:
        return {
            "backbone": self.backbone.kind,
            "backbone_weights": self.backbone.weights,
            "rnn_units": self.rnn_units,
            "routing_units": self.routing_units,
            "fusion_units": self.fusion_units,
            "t": {m.value: self.t[m] for m in MODALITIES},
            "num_classes": self.num_classes,
            "routing_shared": self.routing_shared,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(
            backbone=BackboneConfig(d["backbone"], d.get("backbone_weights", "")),
            rnn_units=int(d["rnn_units"]),
            routing_units=int(d["routing_units"]),
            fusion_units=int(d["fusion_units"]),
            t={m: int(d["t"][m.value]) for m in MODALITIES},
            num_classes=int(d["num_classes"]),
            routing_shared=d.get("routing_shared", "group"),
        )


@dataclass
class LossConfig:
    alpha: float = 0.25
    gamma: float = 2.0
    literal_eq2: bool = False
    reduction: str = "sum"  # or "mean"


@dataclass
class TrainConfig:
    batch_size: int = 4
    lr_phase1: float = 1e-4
    lr_phase2: float = 1e-5
    momentum: float = 0.9
    sam_rho: float = 0.05
    epochs_phase1: int = 30
    epochs_phase2: int = 20
    patience: int = 7
    seed: int = 0
    folds: int = 5
    mix_within_batch: bool = True
    phase2_init: str = "best"  # "best" or "fresh"
    strict_length: bool = True


@dataclass
class SynthConfig:
    num_scans: int = 200
    image_size: int = 64
    label_balance: float = 0.5
    separability: float = 1.0
    seed: int = 0
    slice_range: dict[Modality, tuple[int, int]] = field(
        default_factory=lambda: {
            Modality.FLAIR: (20, 32),
            Modality.T1W: (16, 28),
            Modality.T1WCE: (16, 28),
            Modality.T2: (20, 32),
        }
    )


@dataclass
class Config:
    data: DataConfig = field(default_factory=DataConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["model"] = self.model.to_dict()
        d["synth"]["slice_range"] = {
            m.value: list(self.synth.slice_range[m]) for m in MODALITIES
        }
        return d


def config_digest(config: Config) -> str:
    blob = json.dumps(config.to_dict(), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


_MODALITY_KEYS = {
    "flair": Modality.FLAIR,
    "t1w": Modality.T1W,
    "t1wce": Modality.T1WCE,
    "t2": Modality.T2,
}


def _set_scalar(obj, name: str, value, section: str, key: str) -> None:
    current = getattr(obj, name)
    if isinstance(current, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{section}.{key}: expected a boolean, got {value!r}")
        setattr(obj, name, value)
    elif isinstance(current, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{section}.{key}: expected a number, got {value!r}")
        setattr(obj, name, float(value))
    elif isinstance(current, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{section}.{key}: expected an integer, got {value!r}")
        setattr(obj, name, int(value))
    else:
        if not isinstance(value, str):
            raise ConfigError(f"{section}.{key}: expected a string, got {value!r}")
        setattr(obj, name, value)


def _apply_section(obj, section: str, values: dict) -> None:
    names = {f.name for f in fields(obj)}
    for key, value in values.items():
        if key not in names:
            raise ConfigError(f"unknown config key {section}.{key}")
        _set_scalar(obj, key, value, section, key)


def load_config(path: str | Path) -> Config:
    """Parse a flat TOML config file into a fully validated Config."""
    with open(path, "rb") as fh:
        raw = tomllib.load(fh)
    return config_from_mapping(raw)


def config_from_mapping(raw: dict) -> Config:
    cfg = Config()
    for section, values in raw.items():
        if not isinstance(values, dict):
            raise ConfigError(f"top-level key {section!r} must be a section")
        if section == "data":
            _apply_section(cfg.data, section, values)
        elif section == "augment":
            _apply_section(cfg.augment, section, values)
        elif section == "loss":
            _apply_section(cfg.loss, section, values)
        elif section == "train":
            _apply_section(cfg.train, section, values)
        elif section == "model":
            _apply_model(cfg.model, values)
        elif section == "synth":
            _apply_synth(cfg.synth, values)
        else:
            raise ConfigError(f"unknown config section [{section}]")
    _validate(cfg)
    return cfg


def _apply_model(model: ModelConfig, values: dict) -> None:
    for key, value in values.items():
        if key == "backbone":
            if value not in BACKBONE_KINDS:
                raise ConfigError(f"model.backbone must be one of {BACKBONE_KINDS}")
            model.backbone.kind = value
        elif key == "backbone_weights":
            model.backbone.weights = str(value)
        elif key in ("rnn_units", "routing_units", "fusion_units", "num_classes"):
            if isinstance(value, bool) or not isinstance(value, int):
                raise ConfigError(f"model.{key}: expected an integer")
            setattr(model, key, value)
        elif key == "routing_shared":
            if value not in ("group", "per_modality"):
                raise ConfigError("model.routing_shared must be 'group' or 'per_modality'")
            model.routing_shared = value
        elif key.startswith("t_") and key[2:] in _MODALITY_KEYS:
            if isinstance(value, bool) or not isinstance(value, int):
                raise ConfigError(f"model.{key}: expected an integer")
            model.t[_MODALITY_KEYS[key[2:]]] = value
        else:
            raise ConfigError(f"unknown config key model.{key}")


def _apply_synth(synth: SynthConfig, values: dict) -> None:
    for key, value in values.items():
        if key in ("num_scans", "image_size", "seed"):
            if isinstance(value, bool) or not isinstance(value, int):
                raise ConfigError(f"synth.{key}: expected an integer")
            setattr(synth, key, value)
        elif key in ("label_balance", "separability"):
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                raise ConfigError(f"synth.{key}: expected a number")
            setattr(synth, key, float(value))
        elif key.endswith("_slices") and key[:-7] in _MODALITY_KEYS:
            if (
                not isinstance(value, list)
                or len(value) != 2
                or not all(isinstance(v, int) for v in value)
            ):
                raise ConfigError(f"synth.{key}: expected [min, max]")
            synth.slice_range[_MODALITY_KEYS[key[:-7]]] = (value[0], value[1])
        else:
            raise ConfigError(f"unknown config key synth.{key}")


def _validate(cfg: Config) -> None:
    if not 0.0 < cfg.loss.alpha < 1.0:
        raise ConfigError("loss.alpha must lie in (0, 1)")
    if cfg.loss.gamma < 0.0:
        raise ConfigError("loss.gamma must be >= 0")
    if cfg.loss.reduction not in ("sum", "mean"):
        raise ConfigError("loss.reduction must be 'sum' or 'mean'")
    if cfg.train.batch_size < 2:
        raise ConfigError("train.batch_size must be >= 2 (mixing needs pairs)")
    if cfg.train.folds < 2:
        raise ConfigError("train.folds must be >= 2")
    if min(cfg.train.lr_phase1, cfg.train.lr_phase2) <= 0:
        raise ConfigError("learning rates must be positive")
    if cfg.train.sam_rho < 0:
        raise ConfigError("train.sam_rho must be >= 0")
    if cfg.augment.mix_alpha <= 0:
        raise ConfigError("augment.mix_alpha must be > 0")
    if cfg.augment.rotation_deg < 0:
        raise ConfigError("augment.rotation_deg must be >= 0")
    if not 0.0 <= cfg.augment.hflip_prob <= 1.0:
        raise ConfigError("augment.hflip_prob must lie in [0, 1]")
    if cfg.train.phase2_init not in ("best", "fresh"):
        raise ConfigError("train.phase2_init must be 'best' or 'fresh'")
    for m, (lo, hi) in cfg.synth.slice_range.items():
        if not 1 <= lo <= hi:
            raise ConfigError(f"synth slice range for {m.value} is invalid")
    if any(v <= 0 for v in cfg.model.t.values()):
        raise ConfigError("model t values must be positive")
    if any(
        v <= 0
        for v in (cfg.model.rnn_units, cfg.model.routing_units, cfg.model.fusion_units)
    ):
        raise ConfigError("model layer widths must be positive")
