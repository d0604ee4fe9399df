"""Run configuration: one flat TOML file per experiment.

Every key has a default (see :class:`RunConfig`) and unknown keys are fatal,
so an ablation file states exactly what it changes.  Relative data paths are
resolved against the directory of the config file.

Presets for the ablation axes ship inside the package and can be named as
``preset:<name>`` wherever a config path is accepted; :func:`preset_names`
lists them.
"""
from __future__ import annotations

import dataclasses
import sys
from dataclasses import dataclass, field, fields
from importlib import resources
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

from .architecture import ModelConfig
from .data import SyntheticConfig
from .training import TrainConfig

CONFIG_VERSION = 1


class ConfigError(ValueError):
    """Unreadable, malformed or inconsistent configuration."""


@dataclass
class RunConfig:
    """Every field of a training / evaluation run.

    Model
        levels, channels, input_channels, stmu, stmu_depth, atrous_rates,
        heads, groups, multiscale, temporal_attention, spatial_attention,
        decoder, image_size, threshold
    Sequences
        width (frames per sequence), interval (minutes between frames)
    Loss and optimisation
        gamma_focal, clamp, lr, beta1, beta2, adam_eps, plateau_factor,
        plateau_patience, min_lr, epochs, batch_size, seed
    Data
        data: training manifest.  val_data: optional validation manifest;
        when empty, ``data`` is split per month into ``split_groups``
        contiguous blocks and block ``test_group`` is held out.
    """

    version: int = CONFIG_VERSION
    # model
    levels: int = 4
    channels: list[int] = field(default_factory=lambda: [16, 32, 64, 128])
    input_channels: int = 1
    stmu: str = "dsta"
    stmu_depth: int = 2
    atrous_rates: list[int] = field(default_factory=lambda: [1, 2, 4])
    heads: int = 4
    groups: int = 4
    multiscale: bool = True
    temporal_attention: bool = True
    spatial_attention: bool = True
    decoder: bool = True
    image_size: list[int] = field(default_factory=lambda: [64, 64])
    threshold: float = 0.5
    # sequences
    width: int = 6
    interval: int = 30
    # loss, optimiser, scheduler, loop
    gamma_focal: float = 2.0
    clamp: float = 1e-7
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    plateau_factor: float = 0.5
    plateau_patience: int = 3
    min_lr: float = 1e-6
    epochs: int = 50
    batch_size: int = 8
    seed: int = 0
    # data
    data: str = ""
    val_data: str = ""
    split_groups: int = 5
    test_group: int = 0

    def __post_init__(self):
        if self.version != CONFIG_VERSION:
            raise ConfigError(f"unsupported config version {self.version} (expected {CONFIG_VERSION})")
        for name, value in (("width", self.width), ("interval", self.interval),
                            ("epochs", self.epochs), ("batch_size", self.batch_size)):
            if value < 1:
                raise ConfigError(f"{name} must be positive, got {value}")
        try:
            self.model_config()
        except ValueError as e:
            raise ConfigError(str(e)) from None

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            levels=self.levels, channels=tuple(self.channels), input_channels=self.input_channels,
            stmu_kind=self.stmu, stmu_depth=self.stmu_depth, atrous_rates=tuple(self.atrous_rates),
            heads=self.heads, threshold=self.threshold, seq_len=self.width,
            image_size=tuple(self.image_size), groups=self.groups, multiscale=self.multiscale,
            temporal_attention=self.temporal_attention, spatial_attention=self.spatial_attention,
            decoder=self.decoder,
        )

    @classmethod
    def from_checkpoint_fields(cls, model: ModelConfig, stored: dict) -> "RunConfig":
        """Rebuild a run config from a checkpoint's model config and stored run keys."""
        known = {f.name for f in fields(cls)}
        values = {k: v for k, v in stored.items() if k in known}
        values.update(
            levels=model.levels, channels=list(model.channels), input_channels=model.input_channels,
            stmu=model.stmu_kind.value, stmu_depth=model.stmu_depth, atrous_rates=list(model.atrous_rates),
            heads=model.heads, groups=model.groups, multiscale=model.multiscale,
            temporal_attention=model.temporal_attention, spatial_attention=model.spatial_attention,
            decoder=model.decoder, image_size=list(model.image_size), threshold=model.threshold,
            width=model.seq_len,
        )
        return cls(**values)

    def train_config(self) -> TrainConfig:
        names = {f.name for f in fields(TrainConfig)}
        return TrainConfig(**{k: v for k, v in self.to_dict().items() if k in names})

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)


def _check_type(name: str, value, default):
    expected = type(default)
    if expected is float and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    if expected is list:
        if not isinstance(value, list) or not all(isinstance(v, int) and not isinstance(v, bool) for v in value):
            raise ConfigError(f"key {name!r} must be a list of integers, got {value!r}")
        return list(value)
    if type(value) is not expected:
        raise ConfigError(f"key {name!r} must be {expected.__name__}, got {type(value).__name__} {value!r}")
    return value


def _from_mapping(cls, raw: dict, source: str):
    defaults = cls()
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ConfigError(f"{source}: unknown key(s) {', '.join(repr(k) for k in unknown)}")
    values = {k: _check_type(k, v, getattr(defaults, k)) for k, v in raw.items()}
    try:
        return cls(**values)
    except ConfigError as e:
        raise ConfigError(f"{source}: {e}") from None
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{source}: {e}") from None


def _read_toml(path) -> tuple[dict, Path | None, str]:
    text_path = str(path)
    if text_path.startswith("preset:"):
        name = text_path.split(":", 1)[1]
        res = resources.files("mcsdnet") / "presets" / f"{name}.toml"
        if not res.is_file():
            raise ConfigError(f"unknown preset {name!r}; available: {', '.join(preset_names())}")
        text, base = res.read_text(), None
    else:
        p = Path(path)
        try:
            text = p.read_text()
        except OSError as e:
            raise ConfigError(f"cannot read config {p}: {e}") from None
        base = p.resolve().parent
    try:
        raw = tomllib.loads(text)
    except tomllib.TOMLDecodeError as e:
        raise ConfigError(f"{text_path}: {e}") from None
    nested = [k for k, v in raw.items() if isinstance(v, dict)]
    if nested:
        raise ConfigError(f"{text_path}: tables are not allowed; unknown key(s) {', '.join(map(repr, nested))}")
    return raw, base, text_path


def load_config(path=None, **overrides) -> RunConfig:
    """Parse a run config (or the defaults when ``path`` is None)."""
    raw, base, source = ({}, None, "defaults") if path is None else _read_toml(path)
    raw.update({k: v for k, v in overrides.items() if v is not None})
    cfg = _from_mapping(RunConfig, raw, source)
    if base is not None:
        for key in ("data", "val_data"):
            value = getattr(cfg, key)
            if value and not Path(value).is_absolute():
                setattr(cfg, key, str(base / value))
    return cfg


def load_synthetic_config(path=None, **overrides) -> SyntheticConfig:
    raw, _, source = ({}, None, "defaults") if path is None else _read_toml(path)
    raw.update({k: v for k, v in overrides.items() if v is not None})
    defaults = SyntheticConfig()
    for k, v in list(raw.items()):
        if k in {f.name for f in fields(SyntheticConfig)} and isinstance(getattr(defaults, k), tuple):
            raw[k] = tuple(v) if isinstance(v, list) else v
    unknown = sorted(set(raw) - {f.name for f in fields(SyntheticConfig)})
    if unknown:
        raise ConfigError(f"{source}: unknown key(s) {', '.join(repr(k) for k in unknown)}")
    try:
        return SyntheticConfig(**raw)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{source}: {e}") from None


def _toml_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (int, float)):
        return repr(v)
    if isinstance(v, str):
        return '"' + v.replace("\\", "\\\\").replace('"', '\\"') + '"'
    if isinstance(v, (list, tuple)):
        return "[" + ", ".join(_toml_value(x) for x in v) + "]"
    raise TypeError(f"cannot write {type(v).__name__} to TOML")


def dump_config(cfg) -> str:
    """Flat TOML text that :func:`load_config` reads back to an equal config."""
    return "".join(f"{k} = {_toml_value(v)}\n" for k, v in dataclasses.asdict(cfg).items())


def preset_names() -> list[str]:
    folder = resources.files("mcsdnet") / "presets"
    return sorted(p.name[:-5] for p in folder.iterdir() if p.name.endswith(".toml"))
