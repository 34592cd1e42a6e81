"""Experiment configuration and report rows."""

import json
import logging
from pathlib import Path
from typing import Literal

from pydantic import BaseModel, ConfigDict, Field, PositiveInt, ValidationError, field_validator

from nrflab.constants import CONFIG_SCHEMA_VERSION, DEFAULT_L2_GRID, DEFAULT_VALIDATION_FRACTION
from nrflab.datasets import NormalizeMode
from nrflab.errors import ConfigError
from nrflab.models.architecture import ArchitectureSpec
from nrflab.probe import OptSettings

logger = logging.getLogger(__name__)

_strict = ConfigDict(frozen=True, extra="forbid")


class DatasetSpec(BaseModel):
    """Which data to load and how to preprocess it.

    ``dir`` falls back to ``$NRFLAB_DATA_DIR/<name>`` when unset. The ``blob_*`` fields only apply
    to the synthetic ``blobs`` dataset.
    """

    model_config = _strict

    name: Literal["cifar10", "cifar100", "mnist", "blobs"]
    dir: Path | None = None
    subsample: PositiveInt | None = Field(default=None, description="train examples per class")
    test_subsample: PositiveInt | None = Field(default=None, description="test examples per class")
    subsample_seed: int = 0
    normalize: NormalizeMode = NormalizeMode.UNIT_RANGE
    label_mode: Literal["fine", "coarse"] = "fine"
    blob_classes: PositiveInt = 10
    blob_per_class: PositiveInt = 100
    blob_dim: PositiveInt = 16
    blob_separation: float = Field(default=3.0, ge=0)
    blob_seed: int = 0


class ProbeSettings(BaseModel):
    model_config = _strict

    l2_grid: list[float] = Field(default_factory=lambda: list(DEFAULT_L2_GRID), min_length=1)
    opt: OptSettings = Field(default_factory=OptSettings)
    validation_fraction: float = Field(default=DEFAULT_VALIDATION_FRACTION, gt=0, lt=1)
    standardize: bool = False

    @field_validator("l2_grid")
    @classmethod
    def _nonnegative(cls, v: list[float]) -> list[float]:
        if any(l2 < 0 for l2 in v):
            raise ValueError("l2 values must be nonnegative")
        return v


class ExperimentConfig(BaseModel):
    """An ablation grid: every architecture x every n x every trial."""

    model_config = _strict

    schema_version: Literal[1] = CONFIG_SCHEMA_VERSION
    name: str = "ablation"
    dataset: DatasetSpec
    archs: list[ArchitectureSpec] = Field(min_length=1)
    n_grid: list[PositiveInt] = Field(min_length=1)
    base_seed: int = Field(default=0, ge=0, lt=2**64)
    trials: PositiveInt = 1
    probe: ProbeSettings = Field(default_factory=ProbeSettings)
    include_raw_baseline: bool = False
    output_dir: Path | None = None
    workers: PositiveInt = 1
    cache_features: bool = False
    record_timing: bool = Field(
        default=False, description="write wall times into the report (makes reports run-dependent)"
    )

    @classmethod
    def from_file(cls, path: Path) -> "ExperimentConfig":
        """Load and validate a JSON config; unknown keys and bad values raise ``ConfigError``."""
        path = Path(path)
        try:
            payload = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path} is not valid JSON: {e}") from e
        return cls.from_dict(payload, source=str(path))

    @classmethod
    def from_dict(cls, payload: dict, source: str = "<config>") -> "ExperimentConfig":
        try:
            return cls.model_validate(payload)
        except ValidationError as e:
            problems = "; ".join(
                f"{'.'.join(str(p) for p in err['loc']) or '<root>'}: {err['msg']}" for err in e.errors()
            )
            raise ConfigError(f"invalid config {source}: {problems}") from e


class ReportRow(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    dataset: str
    arch: str
    init: str
    activation: str
    n: int
    trial: int
    train_acc: float | None = Field(default=None, ge=0, le=1)
    test_acc: float | None = Field(default=None, ge=0, le=1)
    best_l2: float | None = None
    wall_time_s: float = 0.0
    base_seed: int = 0
    error: str | None = None

    @property
    def key(self) -> tuple[str, str, str, str, int, int]:
        return (self.dataset, self.arch, self.init, self.activation, self.n, self.trial)


class CellAggregate(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    dataset: str
    arch: str
    init: str
    activation: str
    n: int
    trials: int
    train_acc_mean: float | None
    train_acc_std: float | None
    test_acc_mean: float | None
    test_acc_std: float | None
    failures: int = 0


class Report(BaseModel):
    model_config = ConfigDict(extra="forbid")

    name: str = "ablation"
    config: ExperimentConfig | None = None
    rows: list[ReportRow] = Field(default_factory=list)
    aggregates: list[CellAggregate] = Field(default_factory=list)
