"""Typed run configuration, read from one JSON document and overridable from the CLI."""

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import List, Optional

from src.codec import canonical_hash
from src.config import (
    BOX_MEDIAN_SAMPLES,
    CLUSTER_RADIUS_FACTOR,
    DEFAULT_BATCH_SIZE,
    DEFAULT_COUPLING_LAYERS,
    DEFAULT_EPOCHS,
    DEFAULT_FINAL_LR_FRACTION,
    DEFAULT_EPSILONS,
    DEFAULT_FORECAST_SAMPLES,
    DEFAULT_GRID_CELLS,
    DEFAULT_HIDDEN_SIZE,
    DEFAULT_LEARNING_RATE,
    DEFAULT_LOG_EVERY,
    DEFAULT_MC_SAMPLES,
    DEFAULT_NET_DEPTH,
    DEFAULT_NET_WIDTH,
    DEFAULT_S_CLAMP,
    DEFAULT_SEED,
    DEFAULT_VOLUME_SERIES,
    GRID_MARGIN_STD,
)
from src.errors import ConfigError

DATA_SOURCES = ("particle", "bimodal", "csv")
REGION_MODES = ("grid", "mc")


def _coerce(section, name, value, default):
    """Casts a raw JSON/CLI value to the type of the field default."""
    where = f"{section}.{name}"
    try:
        if isinstance(default, bool):
            if isinstance(value, bool):
                return value
            if isinstance(value, str) and value.lower() in ("true", "false", "1", "0"):
                return value.lower() in ("true", "1")
            raise ConfigError(where, f"expected true/false, got {value!r}")
        if isinstance(default, int):
            as_float = float(value)
            if as_float != int(as_float):
                raise ConfigError(where, f"expected an integer, got {value!r}")
            return int(as_float)
        if isinstance(default, float):
            return float(value)
        if isinstance(default, str):
            return str(value)
    except (TypeError, ValueError) as e:
        raise ConfigError(where, f"cannot read {value!r}") from e
    return value


class _Section:
    """Shared dict conversion for configuration sections."""

    SECTION = ""

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, data):
        data = data or {}
        known = {f.name: f for f in fields(cls)}
        for key in data:
            if key not in known:
                raise ConfigError(f"{cls.SECTION}.{key}", "unknown setting")
        defaults = cls()
        values = {}
        for name in known:
            default = getattr(defaults, name)
            if name in data:
                default = _coerce(cls.SECTION, name, data[name], default)
            values[name] = default
        section = cls(**values)
        section.validate()
        return section

    def validate(self):
        pass


@dataclass
class DataConfig(_Section):
    SECTION = "data"

    source: str = "particle"
    path: Optional[str] = None
    n: int = 3500
    context_len: int = 16
    horizon: int = 4
    dim: int = 2
    sigma: float = 0.05
    seed: int = DEFAULT_SEED

    def validate(self):
        if self.source not in DATA_SOURCES:
            raise ConfigError("data.source", f"must be one of {', '.join(DATA_SOURCES)}")
        if self.source == "csv" and not self.path:
            raise ConfigError("data.path", "required when data.source is csv")
        for name in ("n", "context_len", "horizon", "dim"):
            if getattr(self, name) < 1:
                raise ConfigError(f"data.{name}", "must be at least 1")
        if self.source != "csv" and self.dim != 2:
            raise ConfigError("data.dim", "synthetic generators produce two-dimensional series")
        if self.sigma <= 0:
            raise ConfigError("data.sigma", "must be positive")


@dataclass
class ModelConfig(_Section):
    SECTION = "model"

    n_layers: int = DEFAULT_COUPLING_LAYERS
    hidden_dim: int = DEFAULT_HIDDEN_SIZE
    net_width: int = DEFAULT_NET_WIDTH
    net_depth: int = DEFAULT_NET_DEPTH
    s_clamp: float = DEFAULT_S_CLAMP

    def validate(self):
        if self.n_layers < 2:
            raise ConfigError("model.n_layers", "a flow needs at least 2 coupling layers")
        for name in ("hidden_dim", "net_width", "net_depth"):
            if getattr(self, name) < 1:
                raise ConfigError(f"model.{name}", "must be at least 1")
        if self.s_clamp <= 0:
            raise ConfigError("model.s_clamp", "must be positive")


@dataclass
class TrainConfig(_Section):
    SECTION = "train"

    epochs: int = DEFAULT_EPOCHS
    batch_size: int = DEFAULT_BATCH_SIZE
    learning_rate: float = DEFAULT_LEARNING_RATE
    seed: int = DEFAULT_SEED
    log_every: int = DEFAULT_LOG_EVERY
    final_lr_fraction: float = DEFAULT_FINAL_LR_FRACTION

    def validate(self):
        if self.epochs < 0:
            raise ConfigError("train.epochs", "must be non-negative")
        if self.batch_size < 1:
            raise ConfigError("train.batch_size", "must be at least 1")
        if self.learning_rate <= 0:
            raise ConfigError("train.learning_rate", "must be positive")
        if not 0.0 < self.final_lr_fraction <= 1.0:
            raise ConfigError("train.final_lr_fraction", "must be in (0, 1]")
        if self.log_every < 1:
            raise ConfigError("train.log_every", "must be at least 1")


@dataclass
class SplitConfig(_Section):
    SECTION = "split"

    train: int = 2000
    calibration: int = 500
    seed: int = DEFAULT_SEED

    def validate(self):
        if self.train < 1 or self.calibration < 1:
            raise ConfigError("split", "train and calibration sizes must be at least 1")


@dataclass
class RegionConfig(_Section):
    SECTION = "region"

    mode: str = "grid"
    cells: int = DEFAULT_GRID_CELLS
    margin: float = GRID_MARGIN_STD
    n_samples: int = DEFAULT_MC_SAMPLES
    radius_factor: float = CLUSTER_RADIUS_FACTOR
    diagonal: bool = False
    series: int = 0
    seed: int = DEFAULT_SEED
    compute_volume: bool = False
    volume_series: int = DEFAULT_VOLUME_SERIES
    box_samples: int = BOX_MEDIAN_SAMPLES
    forecast_samples: int = DEFAULT_FORECAST_SAMPLES

    def validate(self):
        if self.mode not in REGION_MODES:
            raise ConfigError("region.mode", f"must be one of {', '.join(REGION_MODES)}")
        if self.cells < 2:
            raise ConfigError("region.cells", "at least 2 cells per dimension")
        if self.margin < 0:
            raise ConfigError("region.margin", "must be non-negative")
        for name in ("n_samples", "volume_series", "box_samples", "forecast_samples"):
            if getattr(self, name) < 1:
                raise ConfigError(f"region.{name}", "must be at least 1")
        if self.radius_factor <= 0:
            raise ConfigError("region.radius_factor", "must be positive")
        if self.series < 0:
            raise ConfigError("region.series", "must be a non-negative test-series index")


def _validate_epsilons(epsilons):
    if not epsilons:
        raise ConfigError("epsilons", "at least one significance level is required")
    for eps in epsilons:
        if not 0.0 < eps < 1.0:
            raise ConfigError("epsilons", f"{eps} is outside (0, 1)")


@dataclass
class RunConfig:
    """Everything one CLI invocation needs."""

    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    split: SplitConfig = field(default_factory=SplitConfig)
    region: RegionConfig = field(default_factory=RegionConfig)
    epsilons: List[float] = field(default_factory=lambda: list(DEFAULT_EPSILONS))
    out_dir: Optional[str] = None

    SECTIONS = {
        "data": DataConfig,
        "model": ModelConfig,
        "train": TrainConfig,
        "split": SplitConfig,
        "region": RegionConfig,
    }

    def validate(self):
        for name in self.SECTIONS:
            getattr(self, name).validate()
        _validate_epsilons(self.epsilons)
        if self.split.train + self.split.calibration >= self.data.n and self.data.source != "csv":
            raise ConfigError("split", "train + calibration must leave at least one test series")

    def to_dict(self):
        doc = {name: getattr(self, name).to_dict() for name in self.SECTIONS}
        doc["epsilons"] = list(self.epsilons)
        doc["out_dir"] = self.out_dir
        return doc

    @classmethod
    def from_dict(cls, data):
        data = dict(data or {})
        unknown = set(data) - set(cls.SECTIONS) - {"epsilons", "out_dir"}
        if unknown:
            raise ConfigError(sorted(unknown)[0], "unknown section")
        sections = {
            name: section.from_dict(data.get(name)) for name, section in cls.SECTIONS.items()
        }
        try:
            epsilons = [float(e) for e in data.get("epsilons", DEFAULT_EPSILONS)]
        except (TypeError, ValueError) as e:
            raise ConfigError("epsilons", "must be a list of numbers") from e
        config = cls(epsilons=epsilons, out_dir=data.get("out_dir"), **sections)
        config.validate()
        return config

    @classmethod
    def load(cls, path):
        """Reads a JSON configuration document."""
        path = Path(path)
        try:
            with open(path, "r", encoding="utf-8") as f:
                data = json.load(f)
        except FileNotFoundError as e:
            raise ConfigError("config", f"file {path} not found") from e
        except json.JSONDecodeError as e:
            raise ConfigError("config", f"{path} is not valid JSON: {e}") from e
        return cls.from_dict(data)

    def with_overrides(self, overrides):
        """New config with dotted-key overrides such as {"train.seed": 3}."""
        doc = self.to_dict()
        for key, value in overrides.items():
            if value is None:
                continue
            if "." in key:
                section, name = key.split(".", 1)
                if section not in self.SECTIONS:
                    raise ConfigError(key, "unknown section")
                doc[section][name] = value
            else:
                doc[key] = value
        return RunConfig.from_dict(doc)

    def config_hash(self):
        """Hash of the settings that determine a trained model."""
        return canonical_hash({
            "data": self.data.to_dict(),
            "model": self.model.to_dict(),
            "train": self.train.to_dict(),
            "split": self.split.to_dict(),
        })
