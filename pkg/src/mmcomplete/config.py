"""Training configuration and its flat ``section.key = value`` file format."""

from __future__ import annotations

import hashlib
import os
import typing
from dataclasses import dataclass, field, fields
from pathlib import Path

from .data import HELDOUT_CATEGORIES, KNOWN_CATEGORIES, SplitSpec
from .fusion import FusionConfig


def desk_fusion_config(**overrides) -> FusionConfig:
    base = dict(channels=64, tokens=32, attention_heads=4, output_points=2048, input_points=512,
                k_neighbors=16, point_hidden=32, image_width=8, fuse_hidden=128)
    base.update(overrides)
    return FusionConfig(**base).validate()


@dataclass
class TrainConfig:
    optimizer: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    lr: float = 1e-3
    epochs: int = 200
    batch_size: int = 8
    seed: int = 0
    checkpoint_every: int = 10
    fusion: FusionConfig = field(default_factory=desk_fusion_config)
    embedder_backend: str = "stub"
    embedder_endpoint: str = ""
    data_root: str = ""
    corpus: str = ""
    train_categories: list[str] = field(default_factory=lambda: list(KNOWN_CATEGORIES))
    eval_categories: list[str] = field(default_factory=lambda: list(KNOWN_CATEGORIES))
    heldout_categories: list[str] = field(default_factory=lambda: list(HELDOUT_CATEGORIES))
    split_file: str = ""
    eval_tau: float = 0.001

    def validate(self):
        if self.optimizer != "adam":
            raise ValueError(f"unsupported optimizer {self.optimizer!r}")
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if self.epochs < 1 or self.batch_size < 1 or self.checkpoint_every < 1:
            raise ValueError("epochs, batch_size and checkpoint_every must be >= 1")
        self.fusion.validate()
        return self

    def split(self) -> SplitSpec:
        if self.split_file:
            return SplitSpec.from_id_file(self.split_file, train_categories=self.train_categories,
                                          eval_categories=self.eval_categories,
                                          heldout_categories=self.heldout_categories)
        return SplitSpec(self.train_categories, self.eval_categories, self.heldout_categories)

    def dumps(self) -> str:
        return dump_config(self)

    def hash(self) -> str:
        return hashlib.sha256(self.dumps().encode()).hexdigest()


def full_scale_config(**overrides) -> TrainConfig:
    """Full-scale settings: Adam(0.9, 0.999), lr 0.00209, 400 epochs, batch 560."""
    cfg = TrainConfig(lr=0.00209, epochs=400, batch_size=560, fusion=FusionConfig())
    for k, v in overrides.items():
        setattr(cfg, k, v)
    return cfg.validate()


# section prefix for each TrainConfig field; fusion fields live under "fusion."
_SECTIONS = {
    "optimizer": "train", "beta1": "train", "beta2": "train", "lr": "train", "epochs": "train",
    "batch_size": "train", "seed": "train", "checkpoint_every": "train",
    "embedder_backend": ("embedder", "backend"), "embedder_endpoint": ("embedder", "endpoint"),
    "data_root": ("data", "root"), "corpus": "data", "train_categories": "data",
    "eval_categories": "data", "heldout_categories": "data", "split_file": "data",
    "eval_tau": ("eval", "tau"),
}


def _key(name):
    sec = _SECTIONS[name]
    return f"{sec[0]}.{sec[1]}" if isinstance(sec, tuple) else f"{sec}.{name}"


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, list):
        return ",".join(value)
    return str(value)


def _parse(value: str, typ):
    if typ is bool:
        if value.lower() not in ("true", "false", "1", "0", "yes", "no"):
            raise ValueError(f"not a boolean: {value!r}")
        return value.lower() in ("true", "1", "yes")
    if typ is int:
        return int(value)
    if typ is float:
        return float(value)
    if typing.get_origin(typ) is list:
        return [v.strip() for v in value.split(",") if v.strip()]
    return value


def dump_config(cfg: TrainConfig) -> str:
    lines = []
    for f in fields(TrainConfig):
        if f.name == "fusion":
            continue
        lines.append(f"{_key(f.name)} = {_format(getattr(cfg, f.name))}")
    for f in fields(FusionConfig):
        lines.append(f"fusion.{f.name} = {_format(getattr(cfg.fusion, f.name))}")
    return "\n".join(lines) + "\n"


def parse_config(text: str, env: dict | None = None) -> TrainConfig:
    """Parse a config file; ``MMC_SEED`` in ``env`` overrides ``train.seed``."""
    env = os.environ if env is None else env
    cfg = TrainConfig()
    train_types = typing.get_type_hints(TrainConfig)
    fusion_types = typing.get_type_hints(FusionConfig)
    by_key = {_key(f.name): f.name for f in fields(TrainConfig) if f.name != "fusion"}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not sep:
            raise ValueError(f"config line {lineno}: expected key = value")
        if key.startswith("fusion."):
            name = key[len("fusion."):]
            if name not in fusion_types:
                raise ValueError(f"config line {lineno}: unknown key {key!r}")
            setattr(cfg.fusion, name, _parse(value, fusion_types[name]))
        elif key in by_key:
            name = by_key[key]
            setattr(cfg, name, _parse(value, train_types[name]))
        else:
            raise ValueError(f"config line {lineno}: unknown key {key!r}")
    if env.get("MMC_SEED"):
        cfg.seed = int(env["MMC_SEED"])
    return cfg.validate()


def load_config(path, env: dict | None = None) -> TrainConfig:
    return parse_config(Path(path).read_text(), env)
