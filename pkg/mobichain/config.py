"""Configuration files: voluptuous-validated sections materialised into the modules' dataclasses."""
from __future__ import annotations

import json
import logging
import tomllib
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any
from zoneinfo import ZoneInfo, ZoneInfoNotFoundError

import voluptuous as vol

from .const import CELL_AREA_BAND_KM2, CLASSES_OUT
from .encoding import ALL_STRATEGIES, MaskSpec, MaskStrategy
from .errors import InvalidConfigError
from .ingestion import (
    AnnotationConfig,
    FilterConfig,
    GridConfig,
    IngestConfig,
    MandatoryConfig,
    StayConfig,
)
from .loss import LossConfig
from .model import ModelConfig
from .simgen import DegradationConfig
from .training import TrainConfig
from .transfer import TransferConfig
from .utils import json_digest

_LOGGER = logging.getLogger(__name__)

SECTIONS = ("model", "loss", "train", "transfer", "ingest", "degrade", "mask")

POSITIVE_INT = vol.All(int, vol.Range(min=1))
NON_NEGATIVE_INT = vol.All(int, vol.Range(min=0))
POSITIVE = vol.All(vol.Coerce(float), vol.Range(min=0.0, min_included=False))
NON_NEGATIVE = vol.All(vol.Coerce(float), vol.Range(min=0.0))
FRACTION = vol.All(vol.Coerce(float), vol.Range(min=0.0, max=1.0))
HOUR = vol.All(int, vol.Range(min=0, max=24))
STRATEGIES = vol.All([vol.In([str(s) for s in MaskStrategy])], vol.Length(min=1))


def _timezone(value: Any) -> str:
    try:
        ZoneInfo(str(value))
    except (ZoneInfoNotFoundError, ValueError) as err:
        raise vol.Invalid(f"unknown time zone {value!r}") from err
    return str(value)


MODEL_SCHEMA = vol.Schema({
    vol.Optional("d_model"): POSITIVE_INT,
    vol.Optional("heads"): POSITIVE_INT,
    vol.Optional("blocks"): POSITIVE_INT,
    vol.Optional("mlp_hidden"): POSITIVE_INT,
    vol.Optional("ffn_hidden"): POSITIVE_INT,
    vol.Optional("dropout_p"): vol.All(vol.Coerce(float), vol.Range(min=0.0, max=1.0, max_included=False)),
    vol.Optional("token_embed_dim"): POSITIVE_INT,
    vol.Optional("time_embed_dim"): POSITIVE_INT,
    vol.Optional("dow_embed_dim"): POSITIVE_INT,
    vol.Optional("seed"): int,
    vol.Optional("dtype"): vol.In(["float32", "float64"]),
})

LOSS_SCHEMA = vol.Schema({
    vol.Optional("class_weights"): vol.All([NON_NEGATIVE], vol.Length(min=CLASSES_OUT, max=CLASSES_OUT)),
    vol.Optional("w1"): NON_NEGATIVE,
    vol.Optional("w2"): NON_NEGATIVE,
    vol.Optional("w3"): NON_NEGATIVE,
    vol.Optional("w_l"): NON_NEGATIVE,
    vol.Optional("w_s"): NON_NEGATIVE,
    vol.Optional("dtw_gamma"): NON_NEGATIVE,
    vol.Optional("eps"): POSITIVE,
    vol.Optional("masked_only"): bool,
})

TRAIN_SCHEMA = vol.Schema({
    vol.Optional("epochs"): POSITIVE_INT,
    vol.Optional("batch_size"): POSITIVE_INT,
    vol.Optional("warmup_epochs"): NON_NEGATIVE_INT,
    vol.Optional("phase2_end"): NON_NEGATIVE_INT,
    vol.Optional("phase2_fraction"): FRACTION,
    vol.Optional("phase3_fraction"): FRACTION,
    vol.Optional("lr"): POSITIVE,
    vol.Optional("beta1"): FRACTION,
    vol.Optional("beta2"): FRACTION,
    vol.Optional("adam_eps"): POSITIVE,
    vol.Optional("l2"): NON_NEGATIVE,
    vol.Optional("patience"): NON_NEGATIVE_INT,
    vol.Optional("split"): vol.ExactSequence([FRACTION, FRACTION, FRACTION]),
    vol.Optional("strategies"): STRATEGIES,
    vol.Optional("auto_class_weights"): bool,
    vol.Optional("seed"): int,
    vol.Optional("threads"): POSITIVE_INT,
})

TRANSFER_SCHEMA = vol.Schema({
    vol.Optional("max_iterations"): POSITIVE_INT,
    vol.Optional("epochs_per_iteration"): POSITIVE_INT,
    vol.Optional("retention_fraction"): FRACTION,
    vol.Optional("convergence_epsilon"): NON_NEGATIVE,
    vol.Optional("temperature"): POSITIVE,
    vol.Optional("unfreeze_fractions"): vol.ExactSequence([FRACTION, FRACTION, FRACTION]),
    vol.Optional("mask_fraction"): FRACTION,
    vol.Optional("holdout_fraction"): FRACTION,
    vol.Optional("batch_size"): POSITIVE_INT,
    vol.Optional("lr"): POSITIVE,
    vol.Optional("l2"): NON_NEGATIVE,
    vol.Optional("strategies"): STRATEGIES,
    vol.Optional("seed"): int,
    vol.Optional("threads"): POSITIVE_INT,
})

INGEST_SCHEMA = vol.Schema({
    vol.Optional("stay"): {
        vol.Optional("time_threshold_s"): NON_NEGATIVE,
        vol.Optional("distance_threshold_m"): NON_NEGATIVE,
        vol.Optional("speed_threshold_kmh"): POSITIVE,
    },
    vol.Optional("grid"): {
        vol.Optional("cell_size_m"): POSITIVE,
        vol.Optional("reference_lat"): vol.All(vol.Coerce(float), vol.Range(min=-89.0, max=89.0)),
    },
    vol.Optional("mandatory"): {
        vol.Optional("night_hours"): vol.ExactSequence([HOUR, HOUR]),
        vol.Optional("day_hours"): vol.ExactSequence([HOUR, HOUR]),
        vol.Optional("workdays"): [vol.All(int, vol.Range(min=0, max=6))],
        vol.Optional("min_work_days"): POSITIVE_INT,
        vol.Optional("education_categories"): [str],
    },
    vol.Optional("annotation"): {
        vol.Optional("radius_m"): POSITIVE,
        vol.Optional("time_profile_preset"): str,
    },
    vol.Optional("filter"): {
        vol.Optional("min_days"): NON_NEGATIVE_INT,
        vol.Optional("min_observed_slots"): vol.All(int, vol.Range(min=0, max=96)),
    },
    vol.Optional("timezone"): _timezone,
    vol.Optional("travel_cap_minutes"): NON_NEGATIVE_INT,
})

DEGRADE_SCHEMA = vol.Schema({
    vol.Optional("coverage_mean"): FRACTION,
    vol.Optional("coverage_concentration"): POSITIVE,
    vol.Optional("windows_mean"): NON_NEGATIVE,
    vol.Optional("seed"): int,
})

MASK_SCHEMA = vol.Schema({
    vol.Optional("fraction"): FRACTION,
    vol.Optional("strategies"): STRATEGIES,
    vol.Optional("temperature"): POSITIVE,
})

CONFIG_SCHEMA = vol.Schema({
    vol.Optional("model", default={}): MODEL_SCHEMA,
    vol.Optional("loss", default={}): LOSS_SCHEMA,
    vol.Optional("train", default={}): TRAIN_SCHEMA,
    vol.Optional("transfer", default={}): TRANSFER_SCHEMA,
    vol.Optional("ingest", default={}): INGEST_SCHEMA,
    vol.Optional("degrade", default={}): DEGRADE_SCHEMA,
    vol.Optional("mask", default={}): MASK_SCHEMA,
})


@dataclass(frozen=True)
class MaskSettings:
    """Masking used when evaluating or reconstructing held-out days."""

    fraction: float = 0.7
    strategies: tuple[MaskStrategy, ...] = ALL_STRATEGIES
    temperature: float = 1.0

    def __post_init__(self) -> None:
        object.__setattr__(self, "strategies", tuple(MaskStrategy(s) for s in self.strategies))
        self.specs()

    def specs(self, seed: int = 0) -> tuple[MaskSpec, ...]:
        return tuple(MaskSpec(strategy, self.fraction, seed) for strategy in self.strategies)


@dataclass(frozen=True)
class MobichainConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    transfer: TransferConfig = field(default_factory=TransferConfig)
    ingest: IngestConfig = field(default_factory=IngestConfig)
    degrade: DegradationConfig = field(default_factory=DegradationConfig)
    mask: MaskSettings = field(default_factory=MaskSettings)

    def to_dict(self) -> dict[str, Any]:
        return json.loads(json.dumps(asdict(self), default=_jsonable))

    @property
    def digest(self) -> str:
        return json_digest(self.to_dict())

    def section_dict(self, section: str) -> dict[str, Any]:
        return self.to_dict()[section]


def _jsonable(value: Any) -> Any:
    if isinstance(value, (set, frozenset)):
        return sorted(value)
    return str(value)


def _tuples(values: dict[str, Any]) -> dict[str, Any]:
    return {key: tuple(value) if isinstance(value, list) else value for key, value in values.items()}


def _with_strategies(values: dict[str, Any]) -> dict[str, Any]:
    values = _tuples(values)
    if "strategies" in values:
        values["strategies"] = tuple(MaskStrategy(s) for s in values["strategies"])
    return values


def _train_config(values: dict[str, Any]) -> TrainConfig:
    values = _with_strategies(values)
    if "epochs" in values and "warmup_epochs" not in values and "phase2_end" not in values:
        epochs = values.pop("epochs")
        return TrainConfig.scaled(epochs, **values)
    return TrainConfig(**values)


def _ingest_config(values: dict[str, Any]) -> IngestConfig:
    mandatory = _tuples(values.get("mandatory", {}))
    if "education_categories" in mandatory:
        mandatory["education_categories"] = frozenset(mandatory["education_categories"])
    grid = GridConfig(**values.get("grid", {}))
    low, high = CELL_AREA_BAND_KM2
    if not low <= grid.cell_area_km2 <= high:
        _LOGGER.warning("Grid cell area %.5f km2 lies outside %.5f-%.5f km2", grid.cell_area_km2, low, high)
    top_level = {key: values[key] for key in ("timezone", "travel_cap_minutes") if key in values}
    return IngestConfig(
        stay=StayConfig(**values.get("stay", {})),
        grid=grid,
        mandatory=MandatoryConfig(**mandatory),
        annotation=AnnotationConfig(**values.get("annotation", {})),
        filter=FilterConfig(**values.get("filter", {})),
        **top_level,
    )


def build_config(raw: dict[str, Any] | None = None) -> MobichainConfig:
    """
    Validate a raw configuration mapping and build every section.

    Missing sections and keys take the dataclass defaults.

    Raises:
        InvalidConfigError: With the offending key path when validation fails
    """
    try:
        data = CONFIG_SCHEMA(raw or {})
    except vol.Invalid as err:
        location = ".".join(str(part) for part in err.path) or "<root>"
        raise InvalidConfigError(f"Invalid configuration at {location}: {err.msg}") from err

    return MobichainConfig(
        model=ModelConfig(**data["model"]),
        loss=LossConfig(**_tuples(data["loss"])),
        train=_train_config(data["train"]),
        transfer=TransferConfig(**_with_strategies(data["transfer"])),
        ingest=_ingest_config(data["ingest"]),
        degrade=DegradationConfig(**data["degrade"]),
        mask=MaskSettings(**_with_strategies(data["mask"])),
    )


def load_config(path: str | Path | None = None) -> MobichainConfig:
    """
    Load a TOML or JSON configuration file.

    Args:
        path: File whose suffix selects the parser; ``None`` gives the defaults

    Raises:
        InvalidConfigError: If the file cannot be parsed or fails validation
        OSError: If the file cannot be read
    """
    if path is None:
        return build_config({})
    path = Path(path)
    if path.suffix.lower() == ".toml":
        with open(path, "rb") as handle:
            try:
                raw = tomllib.load(handle)
            except tomllib.TOMLDecodeError as err:
                raise InvalidConfigError(f"{path}: {err}") from err
    elif path.suffix.lower() == ".json":
        with open(path, encoding="utf-8") as handle:
            try:
                raw = json.load(handle)
            except json.JSONDecodeError as err:
                raise InvalidConfigError(f"{path}: {err}") from err
    else:
        raise InvalidConfigError(f"Unsupported configuration format {path.suffix!r}; use .toml or .json")
    config = build_config(raw)
    _LOGGER.debug("Loaded configuration %s (digest %s)", path, config.digest[:12])
    return config


def override(config: MobichainConfig, section: str, **values: Any) -> MobichainConfig:
    """ Replace fields of one section, ignoring ``None`` values. """
    if section not in SECTIONS:
        raise InvalidConfigError(f"Unknown configuration section {section!r}")
    current = getattr(config, section)
    known = {f.name for f in fields(current)}
    updates = {key: value for key, value in values.items() if value is not None}
    unknown = set(updates) - known
    if unknown:
        raise InvalidConfigError(f"Unknown {section} settings: {sorted(unknown)}")
    if not updates:
        return config
    return replace(config, **{section: replace(current, **updates)})
