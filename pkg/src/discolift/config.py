"""Experiment configuration: YAML (or JSON) files mapped onto dataclasses."""

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, is_dataclass, replace
from pathlib import Path
from typing import Any, Optional

import yaml

from .datagen import DataGenConfig
from .discrepancy import LossWeights
from .plants import PLANT_KINDS
from .training import TrainConfig


class ConfigError(ValueError):
    """Raised when a configuration file is unreadable or holds invalid values."""

    pass


@dataclass
class LiftingConfig:
    """Lifting network architecture."""

    hidden_widths: list = field(default_factory=lambda: [64, 64])
    activation: str = "elu"


@dataclass
class ObserverConfig:
    """Scalings of the identity weights used for the observer gain L_P."""

    q_scale: float = 1.0
    r_scale: float = 1.0


@dataclass
class ExperimentConfig:
    """Everything needed to regenerate data and retrain a model."""

    plant: str = "pendulum"
    lifted_dim: int = 10
    epsilon: float = 1e-3
    init_std: float = 0.1
    scaling: bool = False
    lifting: LiftingConfig = field(default_factory=LiftingConfig)
    observer: ObserverConfig = field(default_factory=ObserverConfig)
    datagen: DataGenConfig = field(default_factory=DataGenConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    output_dir: str = "runs"

    def __post_init__(self):
        if self.plant not in PLANT_KINDS:
            raise ValueError(f"plant must be one of {PLANT_KINDS}, got '{self.plant}'")
        if self.lifted_dim < 1:
            raise ValueError(f"lifted_dim must be positive, got {self.lifted_dim}")
        if not self.epsilon > 0:
            raise ValueError(f"epsilon must be positive, got {self.epsilon}")
        if self.init_std < 0:
            raise ValueError(f"init_std must be nonnegative, got {self.init_std}")

    def to_dict(self) -> dict:
        return asdict(self)


def default_config(plant: str = "pendulum") -> ExperimentConfig:
    """Benchmark defaults: N = 10 for pendulum and Van der Pol, N = 20 for the UAS."""
    if plant not in PLANT_KINDS:
        raise ConfigError(f"Unknown plant '{plant}' (expected one of {PLANT_KINDS})")
    if plant == "uas":
        return ExperimentConfig(
            plant=plant,
            lifted_dim=20,
            datagen=DataGenConfig.for_plant(plant),
            train=TrainConfig(loss=LossWeights(beta1=0.1, beta2=1e-5, beta3=1e-2)),
        )
    return ExperimentConfig(
        plant=plant,
        lifted_dim=10,
        datagen=DataGenConfig.for_plant(plant),
        train=TrainConfig(loss=LossWeights(beta1=0.1, beta2=1e-5, beta3=1e-5)),
    )


def _coerce(current: Any, value: Any, path: str) -> Any:
    """Convert a raw YAML value to the type of the value it replaces."""
    if isinstance(current, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected true/false, got {value!r}")
        return value
    if isinstance(current, int) and not isinstance(value, bool):
        if isinstance(value, int) or (isinstance(value, float) and value.is_integer()):
            return int(value)
        raise ConfigError(f"{path}: expected an integer, got {value!r}")
    if isinstance(current, float):
        try:
            return float(value)
        except (TypeError, ValueError):
            raise ConfigError(f"{path}: expected a number, got {value!r}") from None
    if isinstance(current, list) and current and isinstance(current[0], (int, float)):
        if not isinstance(value, list):
            raise ConfigError(f"{path}: expected a list, got {value!r}")
        cast = int if all(isinstance(v, int) for v in current) else float
        try:
            return [cast(v) for v in value]
        except (TypeError, ValueError):
            raise ConfigError(f"{path}: expected a list of numbers, got {value!r}") from None
    return value


def _merge(instance: Any, overrides: dict, path: str) -> Any:
    if not isinstance(overrides, dict):
        raise ConfigError(f"{path or 'config'}: expected a mapping, got {overrides!r}")

    known = {f.name for f in fields(instance)}
    updates = {}
    for key, value in overrides.items():
        key_path = f"{path}.{key}" if path else key
        if key not in known:
            raise ConfigError(f"Unknown configuration key '{key_path}'")
        current = getattr(instance, key)
        if is_dataclass(current):
            updates[key] = _merge(current, value, key_path)
        else:
            updates[key] = _coerce(current, value, key_path)

    try:
        return replace(instance, **updates)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"Invalid configuration{' in ' + path if path else ''}: {e}") from e


def config_from_dict(data: Optional[dict], plant: Optional[str] = None) -> ExperimentConfig:
    """Overlay a (possibly partial) mapping on the defaults of its plant.

    An explicit plant argument wins over the mapping's own 'plant' key.
    """
    data = dict(data or {})
    if plant is not None:
        data["plant"] = plant
    return _merge(default_config(data.get("plant", "pendulum")), data, "")


def config_hash(config: ExperimentConfig) -> str:
    """SHA-256 of the canonical JSON form of the configuration."""
    canonical = json.dumps(config.to_dict(), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


class ConfigFile:
    """Reads and writes an experiment configuration file (YAML; JSON is accepted too)."""

    def __init__(self, path: Path):
        self.path = Path(path)

    def load_dict(self) -> dict:
        """Raw mapping from the file."""
        if not self.path.exists():
            raise ConfigError(f"Config file not found: {self.path}")

        try:
            with open(self.path) as f:
                content = yaml.safe_load(f)
        except yaml.YAMLError as e:
            raise ConfigError(f"Failed to parse {self.path}: {e}") from e

        if content is None:
            return {}
        if not isinstance(content, dict):
            raise ConfigError(f"{self.path}: top level must be a mapping")
        return content

    def load(self, plant: Optional[str] = None) -> ExperimentConfig:
        return config_from_dict(self.load_dict(), plant=plant)

    def save(self, config: ExperimentConfig) -> None:
        self.path.parent.mkdir(parents=True, exist_ok=True)
        with open(self.path, "w") as f:
            yaml.dump(config.to_dict(), f, default_flow_style=False, sort_keys=False)


def load_config(path: Optional[Path] = None, plant: Optional[str] = None) -> ExperimentConfig:
    """Configuration from a file, or the plant defaults when no file is given."""
    if path is None:
        return default_config(plant or "pendulum")
    return ConfigFile(path).load(plant=plant)
