"""Scenario files: one YAML document validated before anything is computed.

Unknown keys anywhere are rejected.  Relative paths are resolved against
the directory of the scenario file.
"""

from __future__ import annotations

import hashlib
from pathlib import Path
from typing import Literal, Optional, Union

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from .health.calibration import FREE as MORTALITY_FREE
from .health.model import TRACKERS
from .health.study import SALT_SCENARIOS


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class DomainSection(_Strict):
    scenario: Literal["health"] = "health"


class InitSection(_Strict):
    size: int = Field(10_000, ge=0)
    women_share: Optional[float] = Field(None, ge=0.0, le=1.0)
    parents_stroke: Optional[float] = Field(None, ge=0.0, le=1.0)
    diabetes_prevalence: Optional[tuple[float, float]] = None
    prior_stroke_weibull: Optional[tuple[float, float]] = None


class EventsSection(_Strict):
    aging: bool = True
    order: Literal["shared", "per-individual"] = "shared"
    shuffle: bool = False


class ParametersSection(_Strict):
    stroke_male: Optional[str] = None
    stroke_female: Optional[str] = None
    diabetes: Optional[str] = None
    mortality: Optional[str] = None
    overrides: dict[str, float] = Field(default_factory=dict)


class CalibrationSection(_Strict):
    targets: Optional[str] = None
    horizon: int = Field(365, ge=1)
    free: tuple[str, ...] = MORTALITY_FREE
    max_evals: int = Field(200, ge=1)
    tol: float = Field(1e-6, gt=0.0)


class InterventionsSection(_Strict):
    horizon: int = Field(3650, ge=0)
    replications: int = Field(10, ge=1)
    scenarios: tuple[str, ...] = SALT_SCENARIOS

    @field_validator("scenarios")
    @classmethod
    def _known(cls, v):
        unknown = [s for s in v if s not in SALT_SCENARIOS]
        if unknown:
            raise ValueError(f"unknown scenario(s) {unknown}; choose from {list(SALT_SCENARIOS)}")
        return v


class ItemMissingness(_Strict):
    kind: Literal["MCAR", "MAR", "MNAR"] = "MCAR"
    prob: float = Field(0.0, ge=0.0, le=1.0)
    intercept: float = 0.0
    coefficients: dict[str, float] = Field(default_factory=dict)
    columns: tuple[str, ...] = ()


class SamplingSection(_Strict):
    invitees: Optional[int] = Field(None, ge=0)
    horizon: int = Field(3650, ge=0)
    nonparticipation: Union[str, Literal["none"], None] = None
    exclude_prior_stroke: bool = True
    item_missingness: Optional[ItemMissingness] = None
    fit_models: bool = True


class RunSection(_Strict):
    horizon: int = Field(365, ge=0)
    threads: int = Field(1, ge=1)
    snapshot: Union[Literal["none", "final"], int] = "none"


class OutputsSection(_Strict):
    dir: str = "out"
    binary: bool = True
    trackers: tuple[str, ...] = tuple(TRACKERS)

    @field_validator("trackers")
    @classmethod
    def _known(cls, v):
        unknown = [k for k in v if k not in TRACKERS]
        if unknown:
            raise ValueError(f"unknown tracker(s) {unknown}; choose from {sorted(TRACKERS)}")
        return v


class ScenarioFile(_Strict):
    seed: int = Field(1, ge=0)
    domain: DomainSection = DomainSection()
    init: InitSection = InitSection()
    events: EventsSection = EventsSection()
    parameters: ParametersSection = ParametersSection()
    calibration: CalibrationSection = CalibrationSection()
    interventions: InterventionsSection = InterventionsSection()
    sampling: SamplingSection = SamplingSection()
    run: RunSection = RunSection()
    outputs: OutputsSection = OutputsSection()


class ConfigError(ValueError):
    pass


def load_config(path) -> tuple[ScenarioFile, str]:
    """Parse and validate; returns the model and the sha256 of the file bytes."""
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from None
    try:
        data = yaml.safe_load(raw) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: not valid YAML: {exc}") from None
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    try:
        cfg = ScenarioFile.model_validate(data)
    except ValidationError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return cfg, hashlib.sha256(raw).hexdigest()


def resolve(base: Path, value: str | None) -> Path | None:
    if value is None:
        return None
    p = Path(value)
    return p if p.is_absolute() else base / p
