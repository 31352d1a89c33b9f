"""Nested run configuration addressed by dotted ``--section.key value`` flags."""

from __future__ import annotations

import dataclasses
import json
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

from .data import SynthConfig
from .encoder import EncoderConfig
from .transducer import TransducerConfig

MODES = ("pretrain", "just", "finetune_pure", "finetune_just")
DEFAULT_BETA = {"pretrain": 0.0, "just": 0.07, "finetune_pure": 0.0, "finetune_just": 0.01}


class ConfigError(ValueError):
    pass


@dataclass
class QuantizerConfig:
    V: int = 32
    tau: float = 0.5
    d_cb: int = 0  # 0 means "same as model.d"
    freeze: bool = False


@dataclass
class MaskConfig:
    rate: float = 0.065
    span: int = 11


@dataclass
class LossConfig:
    alpha: float = 0.1
    beta: Optional[float] = None  # None picks the mode default
    K: int = 10
    mlm_all_positions: bool = False


@dataclass
class ScheduleConfig:
    warmup: int = 5000
    peak_lr: float = 4e-4
    decoder_warmup: int = 1500
    decoder_peak_lr: float = 7e-4


@dataclass
class TrainConfig:
    mode: str = "just"
    steps: int = 1000
    batch_size: int = 16
    seed: int = 0
    checkpoint_every: int = 0
    clip_norm: float = 5.0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.98
    adam_eps: float = 1e-8
    bucket_by_length: bool = False
    init_checkpoint: str = ""
    out_dir: str = "runs/default"
    log_every: int = 0


@dataclass
class DataConfig:
    manifest: str = ""
    eval_manifest: str = ""
    synth: SynthConfig = field(default_factory=SynthConfig)


@dataclass
class EvalConfig:
    exclude_language: str = ""
    max_symbols_per_frame: int = 5


@dataclass
class Config:
    model: EncoderConfig = field(default_factory=EncoderConfig)
    quantizer: QuantizerConfig = field(default_factory=QuantizerConfig)
    mask: MaskConfig = field(default_factory=MaskConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    decoder: TransducerConfig = field(default_factory=TransducerConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    @property
    def beta(self) -> float:
        if self.train.mode == "finetune_pure":
            return 0.0
        return DEFAULT_BETA[self.train.mode] if self.loss.beta is None else self.loss.beta

    @property
    def codebook_dim(self) -> int:
        return self.quantizer.d_cb or self.model.d

    def validate(self) -> None:
        if self.train.mode not in MODES:
            raise ConfigError(f"train.mode must be one of {MODES}, got {self.train.mode!r}")
        try:
            self.model.validate()
            self.decoder.validate()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        if self.loss.alpha < 0 or (self.loss.beta is not None and self.loss.beta < 0):
            raise ConfigError("loss weights must be non-negative")
        if self.schedule.warmup < 1 or self.schedule.decoder_warmup < 1:
            raise ConfigError("schedule warmup must be >= 1")
        if self.schedule.peak_lr <= 0 or self.schedule.decoder_peak_lr <= 0:
            raise ConfigError("schedule peak learning rates must be > 0")
        if self.quantizer.V < 2 or self.quantizer.tau <= 0:
            raise ConfigError("quantizer.V must be >= 2 and quantizer.tau > 0")
        if self.train.batch_size < 1:
            raise ConfigError("train.batch_size must be >= 1")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, data: dict) -> "Config":
        return _build(cls, data)

    def copy(self) -> "Config":
        return Config.from_dict(self.to_dict())


# architecture-defining keys; a checkpoint only loads into a config that agrees on these
ARCHITECTURE_KEYS = (
    [f"model.{f.name}" for f in dataclasses.fields(EncoderConfig)]
    + ["quantizer.V", "quantizer.d_cb"]
    + [f"decoder.{f.name}" for f in dataclasses.fields(TransducerConfig)]
)


def _build(cls, data: dict):
    hints = typing.get_type_hints(cls)
    kwargs = {}
    for f in dataclasses.fields(cls):
        if f.name not in data:
            continue
        value = data[f.name]
        hint = hints[f.name]
        if dataclasses.is_dataclass(hint):
            value = _build(hint, value)
        elif typing.get_origin(hint) is tuple:
            value = tuple(value)
        kwargs[f.name] = value
    return cls(**kwargs)


def get_key(cfg: Config, key: str) -> Any:
    obj = cfg
    for part in key.split("."):
        obj = getattr(obj, part)
    return obj


def _parse_value(hint, raw: str):
    origin = typing.get_origin(hint)
    if origin is typing.Union:
        args = [a for a in typing.get_args(hint) if a is not type(None)]
        if raw.lower() in ("none", "null", ""):
            return None
        return _parse_value(args[0], raw)
    if origin is tuple:
        item = typing.get_args(hint)[0]
        return tuple(_parse_value(item, p) for p in raw.replace(",", " ").split())
    if hint is bool:
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if hint is int:
        return int(raw)
    if hint is float:
        return float(raw)
    return raw


def set_key(cfg: Config, key: str, raw: str) -> None:
    parts = key.split(".")
    obj = cfg
    for part in parts[:-1]:
        if not hasattr(obj, part) or not dataclasses.is_dataclass(getattr(obj, part)):
            raise ConfigError(f"unknown config key {key!r}")
        obj = getattr(obj, part)
    name = parts[-1]
    hints = typing.get_type_hints(type(obj))
    if name not in hints or dataclasses.is_dataclass(hints[name]):
        raise ConfigError(f"unknown config key {key!r}")
    try:
        setattr(obj, name, _parse_value(hints[name], raw))
    except ValueError as exc:
        raise ConfigError(f"{key}: {exc}") from None


def read_config_file(path) -> list[tuple[str, str]]:
    """``--key value`` (or ``key value`` / ``key = value``) pairs, one per line; ``#`` comments."""
    pairs = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" in line:
            key, _, value = line.partition("=")
        else:
            key, _, value = line.partition(" ")
        key = key.strip().lstrip("-")
        if not key:
            raise ConfigError(f"{path}:{lineno}: missing key")
        pairs.append((key, value.strip()))
    return pairs


PRESETS: dict[str, dict[str, str]] = {
    # desk-scale settings that train the synthetic corpus in minutes on one CPU core
    "toy": {
        "model.d": "32",
        "model.contrastive_blocks": "1",
        "model.mlm_blocks": "1",
        "model.heads": "4",
        "model.ff_mult": "2",
        "quantizer.V": "16",
        "loss.K": "5",
        "decoder.pred_dim": "32",
        "decoder.joint_dim": "64",
        "schedule.warmup": "200",
        "schedule.peak_lr": "3e-3",
        "schedule.decoder_warmup": "100",
        "schedule.decoder_peak_lr": "3e-3",
        "train.batch_size": "16",
    },
}


def build_config(pairs: list[tuple[str, str]] = (), preset: str = "", config_file: str = "",
                 base: Optional[Config] = None) -> Config:
    """Defaults (or ``base``), then preset, then config file, then explicit pairs (later wins)."""
    cfg = Config() if base is None else base.copy()
    layers: list[tuple[str, str]] = []
    if preset:
        if preset not in PRESETS:
            raise ConfigError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
        layers += list(PRESETS[preset].items())
    if config_file:
        layers += read_config_file(config_file)
    layers += list(pairs)
    for key, value in layers:
        set_key(cfg, key, value)
    cfg.validate()
    return cfg


def architecture_diff(a: Config, b: Config) -> list[str]:
    diffs = []
    for key in ARCHITECTURE_KEYS:
        va, vb = get_key(a, key), get_key(b, key)
        if key == "quantizer.d_cb":
            va, vb = a.codebook_dim, b.codebook_dim
        if va != vb:
            diffs.append(f"{key}: checkpoint={va!r} config={vb!r}")
    return diffs
