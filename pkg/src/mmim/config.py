"""Run configuration as an INI document with a schema version.

Every section maps onto a dataclass; unknown sections or keys are
rejected and missing keys take the defaults below. Mask ratios (0.85 for
OCT, 0.65 for IR) and the optimizer (AdamW, peak lr 1e-4, warmup then
cosine decay) match the full-scale recipe; batch size, model width and run
length are small enough for a laptop. ``RunConfig.full_scale()`` restores
the full batch size and a ViT-B sized model.
"""

from __future__ import annotations

import configparser
import dataclasses
import io
import typing
from dataclasses import dataclass, field
from typing import Dict, Optional, Tuple

from .optim import OptimConfig

SCHEMA_VERSION = 1


@dataclass
class RunSection:
    schema_version: int = SCHEMA_VERSION
    seed: int = 0
    run_dir: str = "runs/default"
    dtype: str = "float64"


@dataclass
class ModelSection:
    depth: int = 2
    heads: int = 4
    width: int = 64
    mlp_ratio: float = 4.0
    patch_size: int = 8
    decoder_depth: int = 2
    decoder_width: int = 128
    decoder_heads: int = 4
    channels: int = 1
    decoder_mode: str = "joint"
    modalities: Tuple[str, ...] = ("oct",)
    image_size: int = 32
    norm_target: bool = False


@dataclass
class MaskSection:
    mask_ratio_oct: float = 0.85
    mask_ratio_ir: float = 0.65
    fixed_count: bool = False


@dataclass
class TrainSection:
    steps: int = 200
    batch_size: int = 8
    checkpoint_every: int = 100
    # full-scale recipe: batch 1024 for 400 epochs
    full_batch_size: int = 1024
    full_epochs: int = 400


@dataclass
class DataSection:
    manifest: str = ""
    root: str = ""
    num_patients: int = 40
    visits_per_patient: int = 2
    eyes_per_patient: int = 1
    num_classes: int = 2
    noise: float = 0.03
    class_shift: float = 0.08
    modality_noise: float = 0.06
    image_size: int = 32
    synth_seed: int = 0


@dataclass
class EvalSection:
    steps: int = 300
    batch_size: int = 32
    seeds: Tuple[int, ...] = (0, 1, 2)
    warmup_steps: int = 10
    # linear probing: SGD, lr 1e-2, no weight decay
    probe_algorithm: str = "sgd"
    probe_peak_lr: float = 1e-2
    probe_weight_decay: float = 0.0
    finetune_algorithm: str = "adamw"
    finetune_peak_lr: float = 1e-4
    finetune_weight_decay: float = 0.05
    stage_decay: Optional[float] = None
    ema_decay: Optional[float] = None
    modalities: Tuple[str, ...] = ()
    num_classes: int = 0
    split: Tuple[float, ...] = (0.6, 0.1, 0.3)
    split_seed: int = 0
    threshold: float = 0.0


@dataclass
class RunConfig:
    run: RunSection = field(default_factory=RunSection)
    model: ModelSection = field(default_factory=ModelSection)
    mask: MaskSection = field(default_factory=MaskSection)
    optim: OptimConfig = field(default_factory=lambda: OptimConfig(
        peak_lr=1e-4, warmup_steps=20, total_steps=200, weight_decay=0.05))
    train: TrainSection = field(default_factory=TrainSection)
    data: DataSection = field(default_factory=DataSection)
    eval: EvalSection = field(default_factory=EvalSection)

    # -- (de)serialisation ------------------------------------------------------------
    @classmethod
    def from_string(cls, text: str) -> "RunConfig":
        parser = configparser.ConfigParser(interpolation=None)
        parser.optionxform = str
        parser.read_string(text)
        return cls.from_mapping({s: dict(parser[s]) for s in parser.sections()})

    @classmethod
    def from_file(cls, path) -> "RunConfig":
        with open(path, encoding="utf-8") as fh:
            return cls.from_string(fh.read())

    @classmethod
    def from_mapping(cls, sections: Dict[str, Dict[str, str]]) -> "RunConfig":
        cfg = cls()
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(sections) - known)
        if unknown:
            raise ValueError(f"unknown config sections: {unknown}")
        for name, values in sections.items():
            cfg.update(name, values)
        if cfg.run.schema_version != SCHEMA_VERSION:
            raise ValueError(f"config schema_version {cfg.run.schema_version} != {SCHEMA_VERSION}")
        return cfg

    def update(self, section: str, values: Dict[str, str]) -> None:
        """Apply string overrides to one section, re-validating it."""
        current = getattr(self, section)
        hints = typing.get_type_hints(type(current))
        names = {f.name for f in dataclasses.fields(current)}
        unknown = sorted(set(values) - names)
        if unknown:
            raise ValueError(f"unknown keys in [{section}]: {unknown}")
        kwargs = dataclasses.asdict(current)
        for key, raw in values.items():
            kwargs[key] = _parse(raw, hints[key], f"{section}.{key}")
        setattr(self, section, type(current)(**kwargs))

    def to_string(self) -> str:
        parser = configparser.ConfigParser(interpolation=None)
        parser.optionxform = str
        for f in dataclasses.fields(self):
            section = getattr(self, f.name)
            parser[f.name] = {k: _format(v) for k, v in dataclasses.asdict(section).items()}
        buf = io.StringIO()
        parser.write(buf)
        return buf.getvalue()

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        return cls.from_mapping({s: {k: _format(v) for k, v in vals.items()} for s, vals in d.items()})

    @classmethod
    def full_scale(cls) -> "RunConfig":
        cfg = cls()
        cfg.update("model", {"depth": "12", "heads": "12", "width": "768", "patch_size": "16",
                             "decoder_depth": "8", "decoder_width": "512", "decoder_heads": "16",
                             "image_size": "224"})
        cfg.update("train", {"batch_size": str(cfg.train.full_batch_size)})
        return cfg


def _format(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (tuple, list)):
        return ",".join(_format(v) for v in value)
    return str(value)


def _parse(raw, hint, where: str):
    if not isinstance(raw, str):
        return raw
    text = raw.strip()
    origin = typing.get_origin(hint)
    args = typing.get_args(hint)
    try:
        if origin is typing.Union and type(None) in args:
            if text.lower() in ("none", ""):
                return None
            inner = next(a for a in args if a is not type(None))
            return _parse(text, inner, where)
        if origin in (tuple, Tuple):
            if not text:
                return ()
            return tuple(_parse(part, args[0], where) for part in text.split(","))
        if hint is bool:
            low = text.lower()
            if low in ("true", "yes", "1", "on"):
                return True
            if low in ("false", "no", "0", "off"):
                return False
            raise ValueError(text)
        if hint is int:
            return int(text)
        if hint is float:
            return float(text)
        if hint is str:
            return text
    except ValueError:
        raise ValueError(f"{where}: cannot parse {raw!r} as {hint}") from None
    raise TypeError(f"{where}: unsupported config type {hint}")
