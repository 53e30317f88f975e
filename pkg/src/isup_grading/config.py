"""Pipeline configuration: nested dataclasses, TOML loading and ``section.key=value`` overrides.

Defaults are the published training values (batch 8/40/8, epochs 35/50/30,
base lr 3e-4). ``desk_config()`` is the preset the synthetic end-to-end run
uses on a single CPU.
"""

from __future__ import annotations

import json
import os
import sys
from dataclasses import asdict, dataclass, field, fields, is_dataclass, replace
from pathlib import Path

from .errors import ConfigError
from .nn import EncoderSpec

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

RUNS_ROOT_ENV = "ISUP_RUNS_ROOT"
ABLATIONS = ("no-or", "no-ssl")


@dataclass
class PathsConfig:
    # directory holding train/ val/ test/ corpora written by ``synth``; empty means generate one
    corpus: str = ""
    # pre-built SSL patch manifest; empty means the one written by build-ssl-dataset
    ssl_corpus: str = ""
    runs_root: str = ""

    def resolved_runs_root(self) -> Path:
        return Path(self.runs_root or os.environ.get(RUNS_ROOT_ENV, "runs"))


@dataclass
class SynthConfig:
    train_per_grade: int = 10
    val_per_grade: int = 3
    test_per_grade: int = 3
    size: int = 1024
    region_scale: float = 150.0
    seed: int = 7


@dataclass
class TilingConfig:
    patch_size: int = 256
    bag_size: int = 36
    # patches below this tissue fraction are not pseudo-labelled
    min_tissue: float = 0.25


@dataclass
class EncoderConfig:
    channels: tuple[int, ...] = (16, 32, 64, 128)
    input_pool: int = 4
    embedding_dim: int = 128

    def spec(self) -> EncoderSpec:
        return EncoderSpec(channels=tuple(self.channels), input_pool=self.input_pool,
                           embedding_dim=self.embedding_dim)


@dataclass
class MILStageConfig:
    k: int = 4
    epochs: int = 35
    batch_size: int = 8
    lr: float = 3e-4


@dataclass
class SSLStageConfig:
    lam: float = 0.02
    momentum: float = 0.99
    batch_size: int = 40
    epochs: int = 50
    lr: float = 3e-4
    per_class: int = 400
    val_per_class: int = 100
    stain_mode: str = "centered"
    head_norm: str = "batch"


@dataclass
class FinetuneStageConfig:
    batch_size: int = 8
    epochs: int = 30
    lr: float = 3e-4
    attention_hidden: int = 64
    freeze_backbone: bool = False


@dataclass
class PipelineConfig:
    paths: PathsConfig = field(default_factory=PathsConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)
    tiling: TilingConfig = field(default_factory=TilingConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    mil: MILStageConfig = field(default_factory=MILStageConfig)
    ssl: SSLStageConfig = field(default_factory=SSLStageConfig)
    finetune: FinetuneStageConfig = field(default_factory=FinetuneStageConfig)
    seed: int = 0
    ablations: tuple[str, ...] = ()

    def to_dict(self) -> dict:
        d = asdict(self)
        d["ablations"] = list(self.ablations)
        d["encoder"]["channels"] = list(self.encoder.channels)
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict, base: "PipelineConfig | None" = None) -> "PipelineConfig":
        cfg = base or cls()
        for key, value in d.items():
            cfg = _set(cfg, key.split("."), value)
        cfg.validate()
        return cfg

    def with_overrides(self, items: list[str]) -> "PipelineConfig":
        """Apply ``section.key=value`` strings; values are parsed as TOML (bare words as strings)."""
        cfg = self
        for item in items:
            if "=" not in item:
                raise ConfigError(f"override {item!r} is not of the form section.key=value")
            key, raw = item.split("=", 1)
            cfg = _set(cfg, key.strip().split("."), _parse_value(raw.strip()))
        cfg.validate()
        return cfg

    def validate(self) -> None:
        checks = [
            (self.synth.train_per_grade >= 1, "synth.train_per_grade must be >= 1"),
            (self.synth.val_per_grade >= 1, "synth.val_per_grade must be >= 1"),
            (self.synth.test_per_grade >= 1, "synth.test_per_grade must be >= 1"),
            (self.synth.size >= self.tiling.patch_size, "synth.size must be at least one patch"),
            (self.tiling.patch_size % self.encoder.input_pool == 0, "patch_size must be divisible by input_pool"),
            (self.tiling.bag_size >= 1, "tiling.bag_size must be >= 1"),
            (0.0 <= self.tiling.min_tissue <= 1.0, "tiling.min_tissue must lie in [0, 1]"),
            (1 <= self.mil.k <= self.tiling.bag_size, "mil.k must lie in [1, bag_size]"),
            (0.0 <= self.ssl.momentum <= 1.0, "ssl.momentum must lie in [0, 1]"),
            (self.ssl.lam >= 0.0, "ssl.lam must be non-negative"),
            (self.ssl.stain_mode in ("centered", "wide"), "ssl.stain_mode must be centered or wide"),
            (self.ssl.head_norm in ("none", "batch"), "ssl.head_norm must be none or batch"),
            (self.ssl.per_class >= 1 and self.ssl.val_per_class >= 1, "ssl per-class counts must be >= 1"),
            (self.encoder.embedding_dim >= 8, "encoder.embedding_dim must be >= 8"),
        ]
        for stage in (self.mil, self.ssl, self.finetune):
            checks.append((stage.epochs >= 1 and stage.batch_size >= 1, "epochs and batch sizes must be >= 1"))
            checks.append((stage.lr > 0, "learning rates must be positive"))
        for ok, msg in checks:
            if not ok:
                raise ConfigError(msg)
        bad = [a for a in self.ablations if a not in ABLATIONS]
        if bad:
            raise ConfigError(f"unknown ablation(s) {bad}; choose from {list(ABLATIONS)}")


def _parse_value(raw: str):
    try:
        return tomllib.loads(f"v = {raw}")["v"]
    except tomllib.TOMLDecodeError:
        return raw


def _set(obj, path: list[str], value):
    name = path[0]
    names = {f.name: f for f in fields(obj)}
    if name not in names:
        raise ConfigError(f"unknown config key {name!r} in {type(obj).__name__}")
    current = getattr(obj, name)
    if len(path) > 1:
        if not is_dataclass(current):
            raise ConfigError(f"{name!r} is not a section")
        return replace(obj, **{name: _set(current, path[1:], value)})
    if is_dataclass(current):
        if not isinstance(value, dict):
            raise ConfigError(f"section {name!r} needs a table")
        for k, v in value.items():
            current = _set(current, [k], v)
        return replace(obj, **{name: current})
    return replace(obj, **{name: _coerce(name, current, value)})


def _coerce(name: str, current, value):
    try:
        if isinstance(current, bool):
            if not isinstance(value, bool):
                raise TypeError
            return value
        if isinstance(current, int):
            if isinstance(value, bool) or int(value) != value:
                raise TypeError
            return int(value)
        if isinstance(current, float):
            return float(value)
        if isinstance(current, str):
            return str(value)
        if isinstance(current, tuple):
            items = value if isinstance(value, (list, tuple)) else [v for v in str(value).split(",") if v]
            kind = type(current[0]) if current else str
            return tuple(kind(v) for v in items)
    except (TypeError, ValueError):
        pass
    else:
        return value
    raise ConfigError(f"bad value {value!r} for {name!r} (expected {type(current).__name__})")


def load_config(path=None, overrides: list[str] | None = None, preset: str = "desk") -> PipelineConfig:
    """Preset defaults, then the TOML file, then CLI overrides."""
    base = {"desk": desk_config, "full": PipelineConfig}.get(preset)
    if base is None:
        raise ConfigError(f"unknown preset {preset!r}")
    cfg = base()
    if path is not None:
        with open(path, "rb") as fh:
            try:
                data = tomllib.load(fh)
            except tomllib.TOMLDecodeError as e:
                raise ConfigError(f"{path}: {e}") from e
        cfg = PipelineConfig.from_dict(data, base=cfg)
    return cfg.with_overrides(overrides or [])


def desk_config() -> PipelineConfig:
    """Single-CPU preset: published batch sizes and epochs for modules 1 and 3, shorter SSL, higher lr."""
    cfg = PipelineConfig()
    return replace(
        cfg,
        mil=replace(cfg.mil, lr=1e-3),
        ssl=replace(cfg.ssl, lr=1e-3, epochs=20),
        finetune=replace(cfg.finetune, lr=1e-3),
    )
