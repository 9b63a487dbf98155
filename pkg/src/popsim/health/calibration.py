"""Calibration of background and acute stroke mortality to yearly statistics."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..calibration import CalibrationProblem, NelderMeadOptions, TargetTable
from ..domain import State
from ..engine import RunPlan, SimulationRecord, Simulator
from .model import DATA

FREE = ("weibull_shape", "weibull_scale", "alpha0")
SHARE = "stroke_death_share"
# a group with no simulated deaths would make the log objective infinite
DEATH_FLOOR = 0.5


def age_band_label(lo: int, width: int = 5) -> str:
    return f"{lo}-{lo + width - 1}"


def parse_band(label: str) -> tuple[float, float]:
    lo, hi = label.split("-")
    return float(lo), float(hi) + 1.0


def default_targets() -> TargetTable:
    return TargetTable.from_csv(DATA / "mortality_targets.csv")


def banded_weights(targets: TargetTable, old_age: float = 80.0, share_weight: float = 2000.0) -> TargetTable:
    """Weight 1 for groups starting below ``old_age``, 100 otherwise; ``share_weight`` on the share."""
    w = np.array([1.0 if parse_band(k)[0] < old_age else 100.0 for k in targets.keys])
    scalars = {k: (v, share_weight if k == SHARE else wt) for k, (v, wt) in targets.scalars.items()}
    return TargetTable(targets.keys, targets.values, w, scalars)


@dataclass(frozen=True)
class MortalityOutput:
    """Yearly mortality per age band (age at the start) plus the stroke share of deaths.

    Mortality of a band is deaths over the run divided by the band's living
    members at the start, scaled to one year when the horizon differs.
    """

    bands: tuple[str, ...]
    start_age: np.ndarray
    start_alive: np.ndarray
    years: float = 1.0

    @classmethod
    def for_state(cls, start: State, targets: TargetTable, horizon: int) -> "MortalityOutput":
        pop = start.population
        return cls(targets.keys, np.asarray(pop["age"]).copy(), np.asarray(pop["alive"]) == 1.0, horizon / 365.0)

    def groups(self) -> list[np.ndarray]:
        out = []
        for band in self.bands:
            lo, hi = parse_band(band)
            out.append(self.start_alive & (self.start_age >= lo) & (self.start_age < hi))
        return out

    def __call__(self, record: SimulationRecord) -> np.ndarray:
        pop = record.final.population
        died = (pop["alive"] == 0.0)[: self.start_age.shape[0]] & self.start_alive
        stroke = (pop["death_stroke"] == 1.0)[: self.start_age.shape[0]] & died
        yhat = []
        for g in self.groups():
            size = int(g.sum())
            if size == 0:
                raise ValueError("an age band has no living members at the start")
            deaths = max(float(np.count_nonzero(died & g)), DEATH_FLOOR)
            # convert the period risk to a yearly one
            yhat.append(-np.expm1(np.log1p(-min(deaths / size, 1.0 - 1e-12)) / self.years))
        total = float(np.count_nonzero(died))
        share = max(float(np.count_nonzero(stroke)), DEATH_FLOOR) / max(total, 1.0)
        return np.array(yhat + [share])


def mortality_calibration_problem(sim: Simulator, start: State, targets: TargetTable | None = None,
                                  horizon: int = 365, free=FREE, max_evals: int = 300, tol: float = 1e-6,
                                  partitions: int = 1) -> CalibrationProblem:
    """Fit the Weibull background mortality and the acute stroke fatality logit."""
    targets = default_targets() if targets is None else targets
    if list(targets.scalars) != [SHARE]:
        raise ValueError(f"mortality targets need exactly one scalar target {SHARE!r}")
    if not (targets.vector() > 0).all():
        raise ValueError("mortality targets must be positive")
    output = MortalityOutput.for_state(start, targets, horizon)
    return CalibrationProblem(
        simulator=sim, start=start, free=tuple(free), plan=RunPlan(horizon, partitions=partitions),
        output=output, targets=targets,
        bounds={"weibull_shape": (1e-3, None), "weibull_scale": (1e-3, None)},
        # the simulated objective is piecewise constant, so only a coarse simplex diameter is asked for
        options=NelderMeadOptions(max_evals=max_evals, tol=tol, xtol=1e-4))
