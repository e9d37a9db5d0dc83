import hashlib
import json
import logging
import os
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Tuple, Union

from dotenv import find_dotenv, load_dotenv
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .dataset import LabelScheme
from .denoise import TVParams
from .errors import ConfigError
from .imaging import ThresholdParams
from .imbalance import AugmentSpec
from .network import BASELINE_WIDTHS, HEAD_UNITS, NetworkSpec
from .training import TrainConfig


@dataclass
class Settings:
    """Process-wide settings read from the environment (and a .env file if present)"""
    output_root: str = "runs"
    log_level: str = "INFO"
    workers: int = 4

    @classmethod
    def from_env(cls):
        """Load configuration from environment variables"""
        load_dotenv(find_dotenv(usecwd=True))
        return cls(
            output_root=os.getenv("CXRKIT_OUTPUT_ROOT", "runs"),
            log_level=os.getenv("CXRKIT_LOG_LEVEL", "INFO").upper(),
            workers=max(1, int(os.getenv("CXRKIT_WORKERS", "4"))),
        )


# Global settings instance (lazy loaded)
_settings: Optional[Settings] = None


def get_settings() -> Settings:
    """Get or create the global settings instance"""
    global _settings
    if _settings is None:
        _settings = Settings.from_env()
    return _settings


def reset_settings():
    """Reset the global settings (useful for testing)"""
    global _settings
    _settings = None


def configure_logging(level: Optional[str] = None) -> None:
    logging.basicConfig(
        level=getattr(logging, (level or get_settings().log_level).upper(), logging.INFO),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        force=True,
    )


# ============ Run configuration ============

class ImbalanceStrategy(str, Enum):
    """C scenarios weight the loss, R scenarios oversample the training split"""
    WeightedLoss = "WeightedLoss"
    Oversample = "Oversample"

    @property
    def code(self) -> str:
        return "C" if self is ImbalanceStrategy.WeightedLoss else "R"


class _Section(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")


class ThresholdConfig(_Section):
    """Bright-marker mask bounds; both are user supplied"""
    min_th: float = Field(ge=0.0, le=255.0)
    max_th: float = Field(ge=0.0, le=255.0)

    @model_validator(mode="after")
    def _ordered(self) -> "ThresholdConfig":
        if self.min_th > self.max_th:
            raise ValueError(f"min_th ({self.min_th}) must not exceed max_th ({self.max_th})")
        return self

    def to_params(self) -> ThresholdParams:
        return ThresholdParams(self.min_th, self.max_th)


class TVConfig(_Section):
    k: float = Field(0.05, gt=0.0)
    sigma: float = Field(1.5, gt=0.0)
    step: float = Field(0.05, gt=0.0)
    max_iters: int = Field(500, ge=1)
    tol: float = Field(1e-6, ge=0.0)
    eps: float = Field(1e-3, gt=0.0)

    def to_params(self) -> TVParams:
        return TVParams(**self.model_dump())


class NetworkConfig(_Section):
    """Architecture knobs; the class count comes from the label scheme"""
    widths: Tuple[int, ...] = BASELINE_WIDTHS
    head_units: int = Field(HEAD_UNITS, ge=1)
    input_hw: Tuple[int, int] = (331, 331)
    channels: int = Field(3, ge=1)


class PathsConfig(_Section):
    manifest: Optional[str] = None
    image_root: str = "."
    output_root: Optional[str] = None


class RunConfig(BaseModel):
    """Everything needed to reproduce one scenario run"""
    model_config = ConfigDict(extra="forbid")

    scheme: LabelScheme = LabelScheme.Binary
    imbalance: ImbalanceStrategy = ImbalanceStrategy.WeightedLoss
    model: str = "baseline"
    seed: int = 0
    class_constants: Optional[List[float]] = None
    oversample_target: Union[str, int, Dict[int, int]] = "max"
    threshold: Optional[ThresholdConfig] = None
    tv: TVConfig = TVConfig()
    augment: AugmentSpec = AugmentSpec()
    train: TrainConfig = TrainConfig()
    network: NetworkConfig = NetworkConfig()
    paths: PathsConfig = PathsConfig()

    @field_validator("scheme", mode="before")
    @classmethod
    def _parse_scheme(cls, value: Any) -> Any:
        if isinstance(value, str):
            return LabelScheme.parse(value)
        return value

    @property
    def scenario(self) -> str:
        """CB, CM3, CM4, RB, RM3 or RM4"""
        return f"{self.imbalance.code}{self.scheme.code}"

    def train_config(self) -> TrainConfig:
        return self.train.model_copy(update={"seed": self.seed})

    def augment_spec(self) -> AugmentSpec:
        return self.augment.model_copy(update={"seed": self.seed})

    def network_spec(self) -> NetworkSpec:
        return NetworkSpec(num_classes=self.scheme.num_classes,
                           input_dims=(self.network.channels, *self.network.input_hw),
                           widths=self.network.widths, head_units=self.network.head_units,
                           seed=self.seed, class_names=self.scheme.class_names)

    def output_root(self) -> Path:
        return Path(self.paths.output_root or get_settings().output_root)

    def config_hash(self) -> str:
        """sha256 of the canonical config; where the run is written does not change it"""
        data = self.model_dump(mode="json")
        data["paths"].pop("output_root", None)
        canonical = json.dumps(data, sort_keys=True)
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()

    def run_name(self) -> str:
        return f"{self.scenario}-{self.model}-s{self.seed}-{self.config_hash()[:8]}"

    def with_overrides(self, overrides: Mapping[str, Any]) -> "RunConfig":
        """Apply dotted-key overrides (``train.batch_size``) and re-validate; None values are skipped"""
        data = self.model_dump(mode="json")
        for key, value in overrides.items():
            if value is None:
                continue
            target = data
            *parents, leaf = key.split(".")
            for part in parents:
                if target.get(part) is None:
                    target[part] = {}
                target = target[part]
            target[leaf] = value.value if isinstance(value, Enum) else value
        return load_run_config(data)

    def write(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.model_dump_json(indent=2), encoding="utf-8")
        return path


def load_run_config(source: Union[None, str, Path, Mapping[str, Any]] = None) -> RunConfig:
    """RunConfig from a JSON file, a mapping, or defaults; invalid input raises ConfigError"""
    try:
        if source is None:
            return RunConfig()
        if isinstance(source, Mapping):
            return RunConfig.model_validate(dict(source))
        return RunConfig.model_validate_json(Path(source).read_text(encoding="utf-8"))
    except OSError as e:
        raise ConfigError(f"cannot read config {source}: {e}") from e
    except (ValidationError, ValueError) as e:
        raise ConfigError(f"invalid run config: {e}") from e
