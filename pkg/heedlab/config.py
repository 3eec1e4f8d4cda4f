"""
Density-weighted residual alignment laboratory.

Experiment configuration: a dataclass tree read from and written to YAML.
Every value is validated on load, before anything runs.
"""
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Dict, Optional, Tuple, Type, TypeVar, Union

import yaml

from .constants import (
    BETA,
    BOOTSTRAP_ALPHA,
    BOOTSTRAP_RESAMPLES,
    CONDITIONS,
    CONTROL_BOOST,
    CONTROL_K,
    CONTROL_RANDOM_SEEDS,
    TAU,
)
from .exceptions import ConfigError, HeedError
from .toy.model import ToyConfig
from .toy.train import StageBudget, TrainParams
from .utils import sha256

__all__ = ("ControlParams", "DataParams", "DensityParams", "DiagnosticParams", "ExperimentConfig")

log = logging.getLogger(__name__)

T = TypeVar("T")


def _build(cls: Type[T], data: Any, where: str) -> T:
    """Instantiate a config dataclass from a mapping, rejecting unknown keys."""
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected a mapping, got {type(data).__name__}")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {', '.join(unknown)}")
    try:
        return cls.from_dict(data) if hasattr(cls, "from_dict") else cls(**data)  # type: ignore
    except ConfigError:
        raise
    except KeyError as exc:
        raise ConfigError(f"{where}: missing key {exc}") from exc
    except (HeedError, TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


@dataclass(frozen=True)
class DensityParams:
    tau: float = TAU
    beta: float = BETA

    def __post_init__(self) -> None:
        if self.tau <= 0 or self.beta <= 0:
            raise ConfigError(f"tau and beta must be positive, got tau={self.tau}, beta={self.beta}")


@dataclass(frozen=True)
class ControlParams:
    k_list: Tuple[float, ...] = CONTROL_K
    boost: float = CONTROL_BOOST
    random_seeds: Tuple[int, ...] = CONTROL_RANDOM_SEEDS
    # Adds one C4 run per seed as the continuous-weight endpoint
    with_reference: bool = True

    def __post_init__(self) -> None:
        object.__setattr__(self, "k_list", tuple(self.k_list))
        object.__setattr__(self, "random_seeds", tuple(int(s) for s in self.random_seeds))
        if not self.k_list:
            raise ConfigError("control needs at least one k")
        if any(not 0 <= k <= 100 for k in self.k_list):
            raise ConfigError(f"k values must be percentages in [0, 100], got {self.k_list}")
        if len(set(self.k_list)) != len(self.k_list):
            raise ConfigError(f"duplicate k values in {self.k_list}")
        if self.boost <= 0:
            raise ConfigError(f"boost must be positive, got {self.boost}")
        if not self.random_seeds:
            raise ConfigError("control needs at least one random seed")


@dataclass(frozen=True)
class DataParams:
    n_train: int = 2048
    n_eval: int = 512
    n_diag: int = 64
    teacher_train: int = 4096

    def __post_init__(self) -> None:
        for name in ("n_train", "n_eval", "teacher_train"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.n_diag < 2:
            raise ConfigError("the diagnostic slice needs at least 2 images")


@dataclass(frozen=True)
class DiagnosticParams:
    n_resamples: int = BOOTSTRAP_RESAMPLES
    alpha: float = BOOTSTRAP_ALPHA
    with_mask: bool = True
    # Threads for the bootstrap; processes for the runs live in ExperimentConfig.workers
    bootstrap_workers: int = 1

    def __post_init__(self) -> None:
        if self.n_resamples < 100:
            raise ConfigError(f"n_resamples must be at least 100, got {self.n_resamples}")
        if not 0 < self.alpha < 1:
            raise ConfigError(f"alpha must be in (0, 1), got {self.alpha}")


@dataclass(frozen=True)
class ExperimentConfig:
    toy: ToyConfig = field(default_factory=ToyConfig)
    budget: StageBudget = field(default_factory=lambda: StageBudget(total_tokens=200_000))
    train: TrainParams = field(default_factory=TrainParams)
    density: DensityParams = field(default_factory=DensityParams)
    control: ControlParams = field(default_factory=ControlParams)
    data: DataParams = field(default_factory=DataParams)
    diagnostics: DiagnosticParams = field(default_factory=DiagnosticParams)
    conditions: Tuple[str, ...] = CONDITIONS
    seeds: Tuple[int, ...] = (0, 1, 2)
    workers: int = 1
    output: str = "runs"
    # Optional density/gradient weight cache read by C4 and C5 runs
    cache: Optional[str] = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "conditions", tuple(self.conditions))
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        unknown = [c for c in self.conditions if c not in CONDITIONS]
        if unknown:
            raise ConfigError(f"unknown condition(s) {unknown}, expected a subset of {CONDITIONS}")
        if len(set(self.conditions)) != len(self.conditions):
            raise ConfigError(f"duplicate conditions in {self.conditions}")
        if len(set(self.seeds)) != len(self.seeds):
            raise ConfigError(f"duplicate seeds in {self.seeds}")
        if self.workers < 1:
            raise ConfigError(f"workers must be positive, got {self.workers}")
        if self.train.batch_size < 1:
            raise ConfigError("batch_size must be positive")
        if self.budget.total_tokens < self.train.batch_size * self.toy.seq_len:
            raise ConfigError(f"a budget of {self.budget.total_tokens} tokens does not fill one batch")

    @property
    def output_path(self) -> Path:
        return Path(self.output).expanduser()

    def toy_for(self, seed: int) -> ToyConfig:
        """Model config of one seed's teacher and student."""
        return ToyConfig.from_dict({**self.toy.to_dict(), "seed": seed})

    def to_dict(self) -> Dict[str, Any]:
        return {
            "toy": self.toy.to_dict(),
            "budget": self.budget.to_dict(),
            "train": self.train.to_dict(),
            "density": asdict(self.density),
            "control": {
                **asdict(self.control),
                "k_list": list(self.control.k_list),
                "random_seeds": list(self.control.random_seeds),
            },
            "data": asdict(self.data),
            "diagnostics": asdict(self.diagnostics),
            "conditions": list(self.conditions),
            "seeds": list(self.seeds),
            "workers": self.workers,
            "output": self.output,
            "cache": self.cache,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "ExperimentConfig":
        if not isinstance(data, dict):
            raise ConfigError("the configuration must be a mapping")
        unknown = sorted(set(data) - {f.name for f in fields(cls)})
        if unknown:
            raise ConfigError(f"unknown key(s) {', '.join(unknown)}")

        sections: Dict[str, Any] = {
            "toy": _build(ToyConfig, data.get("toy"), "toy"),
            "train": _build(TrainParams, data.get("train"), "train"),
            "density": _build(DensityParams, data.get("density"), "density"),
            "control": _build(ControlParams, data.get("control"), "control"),
            "data": _build(DataParams, data.get("data"), "data"),
            "diagnostics": _build(DiagnosticParams, data.get("diagnostics"), "diagnostics"),
        }
        if "budget" in data:
            sections["budget"] = _build(StageBudget, data["budget"], "budget")
        for key in ("conditions", "seeds", "workers", "output", "cache"):
            if key in data:
                sections[key] = data[key]
        try:
            return cls(**sections)
        except ConfigError:
            raise
        except (HeedError, TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def from_yaml(cls, path: Union[str, Path]) -> "ExperimentConfig":
        try:
            with open(path, encoding="utf-8") as handle:
                data = yaml.safe_load(handle)
        except OSError as exc:
            raise ConfigError(f"cannot read {path}: {exc}") from exc
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: invalid YAML: {exc}") from exc
        config = cls.from_dict(data or {})
        log.debug("loaded %s (hash %s)", path, config.config_hash()[:12])
        return config

    def to_yaml(self, path: Union[str, Path]) -> None:
        with open(path, "w", encoding="utf-8") as handle:
            yaml.safe_dump(self.to_dict(), handle, default_flow_style=False, sort_keys=False)

    def config_hash(self) -> str:
        """SHA-256 of the canonical JSON dump; where the results go does not count."""
        data = self.to_dict()
        data.pop("output")
        return sha256(data)
