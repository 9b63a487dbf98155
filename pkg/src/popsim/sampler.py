"""Data collection: who is invited, who takes part, and what gets measured.

Sampling rows (``draw_sample``) is kept apart from masking values
(``apply_missingness``) and from measurement error (``apply_error``).  A
:class:`Sample` keeps the true values of its columns next to a per-cell NA
mask; the analysis accessors only ever return unmasked cells.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, Mapping, Sequence

import numpy as np
from scipy.special import expit

from .domain import Population, State
from .engine import RunPlan, SimulationRecord, Simulator, run
from .streams import LatentDraws, Normal

# -- invitations ---------------------------------------------------------------


@dataclass(frozen=True)
class Design:
    """A without-replacement sampling design.

    ``n`` gives a simple random sample; ``strata`` plus ``sizes`` (level value
    -> count) gives a stratified one.  ``exclude`` marks rows that are never
    invited and is applied before sampling.
    """

    n: int | None = None
    strata: str | None = None
    sizes: Mapping[float, int] = field(default_factory=dict)
    exclude: Callable[[Population], np.ndarray] | None = None
    tag: str = "sample"

    def __post_init__(self):
        if (self.n is None) == (self.strata is None):
            raise ValueError("give either n (simple random) or strata with sizes (stratified)")
        if self.n is not None and self.n < 0:
            raise ValueError("sample size must be >= 0")
        if any(k < 0 for k in self.sizes.values()):
            raise ValueError("stratum sizes must be >= 0")


def _smallest(ids: np.ndarray, u: np.ndarray, k: int) -> np.ndarray:
    # ties in u (practically impossible) fall back to the id order
    order = np.lexsort((ids, u))
    return ids[order[:k]]


def draw_sample(pop: Population, design: Design, psi: LatentDraws, t: int = 0) -> np.ndarray:
    """Ids of the invited individuals, sorted ascending.

    Each eligible individual receives one uniform draw keyed on its id; the
    ``n`` smallest draws are invited, so the result does not depend on the
    row order of ``pop``.
    """
    eligible = np.ones(pop.n, dtype=bool)
    if design.exclude is not None:
        eligible &= ~np.asarray(design.exclude(pop), dtype=bool)
    ids = pop.ids[eligible]
    u = psi.uniform(ids, t, design.tag)
    if design.strata is None:
        if design.n > ids.shape[0]:
            raise ValueError(f"cannot sample {design.n} from {ids.shape[0]} eligible individuals")
        return np.sort(_smallest(ids, u, design.n))
    level = pop[design.strata][eligible]
    chosen = []
    for value, k in design.sizes.items():
        in_stratum = level == float(value)
        available = int(in_stratum.sum())
        if k > available:
            raise ValueError(f"stratum {design.strata}={value} has {available} eligible individuals, "
                             f"{k} requested")
        chosen.append(_smallest(ids[in_stratum], u[in_stratum], k))
    return np.sort(np.concatenate(chosen)) if chosen else np.empty(0, dtype=np.uint64)


# -- samples -------------------------------------------------------------------


class MaskedValueError(LookupError):
    pass


@dataclass(frozen=True)
class Sample:
    """Measured values of the invited individuals.

    ``values`` holds the (possibly error-perturbed) measurements and ``mask``
    marks NA cells.  ``participated`` is false for invitees lost to unit
    nonresponse; their rows stay in the sample, fully masked, so the invitee
    list is never lost.
    """

    ids: np.ndarray
    values: Mapping[str, np.ndarray]
    mask: Mapping[str, np.ndarray]
    participated: np.ndarray

    def __post_init__(self):
        n = self.ids.shape[0]
        if set(self.values) != set(self.mask):
            raise ValueError("values and mask must cover the same columns")
        for k in self.values:
            if self.values[k].shape != (n,) or self.mask[k].shape != (n,):
                raise ValueError(f"column {k!r} does not match the number of invitees")
        if self.participated.shape != (n,):
            raise ValueError("participation indicator does not match the number of invitees")

    @classmethod
    def from_population(cls, pop: Population, invitees, columns: Sequence[str] | None = None) -> "Sample":
        invitees = np.asarray(invitees, dtype=np.uint64)
        pos = np.searchsorted(pop.ids, invitees) if _sorted(pop.ids) else _positions(pop.ids, invitees)
        if invitees.shape[0] and (pos.max() >= pop.n or not np.array_equal(pop.ids[pos], invitees)):
            raise ValueError("some invitees are not in the population")
        columns = list(pop) if columns is None else list(columns)
        values = {k: np.array(pop[k][pos]) for k in columns}
        mask = {k: np.zeros(invitees.shape[0], dtype=bool) for k in columns}
        return cls(invitees.copy(), values, mask, np.ones(invitees.shape[0], dtype=bool))

    @property
    def n(self) -> int:
        return self.ids.shape[0]

    @property
    def columns(self) -> tuple[str, ...]:
        return tuple(self.values)

    def observed(self, name: str) -> np.ndarray:
        """Column with NaN in the masked cells."""
        out = self.values[name].copy()
        out[self.mask[name]] = np.nan
        return out

    def complete(self, names: Sequence[str]) -> tuple[np.ndarray, dict[str, np.ndarray]]:
        """Participating rows without NA in ``names``: (ids, columns)."""
        keep = self.participated.copy()
        for k in names:
            keep &= ~self.mask[k]
        return self.ids[keep], {k: self.values[k][keep] for k in names}

    def value(self, name: str, i: int) -> float:
        if self.mask[name][i]:
            raise MaskedValueError(f"{name!r} is missing for id {int(self.ids[i])}")
        return float(self.values[name][i])

    def unmasked(self) -> dict[str, np.ndarray]:
        """Debug view: every cell including masked ones."""
        return {k: v.copy() for k, v in self.values.items()}

    def with_columns(self, values: Mapping[str, np.ndarray], mask: Mapping[str, np.ndarray] | None = None,
                     participated: np.ndarray | None = None) -> "Sample":
        new_values = dict(self.values)
        new_values.update(values)
        new_mask = dict(self.mask)
        new_mask.update(mask or {k: np.zeros(self.n, dtype=bool) for k in values if k not in self.mask})
        return Sample(self.ids, new_values, new_mask,
                      self.participated if participated is None else participated)


def _sorted(a: np.ndarray) -> bool:
    return a.shape[0] < 2 or bool(np.all(a[1:] > a[:-1]))


def _positions(ids: np.ndarray, wanted: np.ndarray) -> np.ndarray:
    order = np.argsort(ids, kind="stable")
    pos = np.searchsorted(ids[order], wanted)
    pos = np.clip(pos, 0, max(ids.shape[0] - 1, 0))
    return order[pos] if ids.shape[0] else pos


# -- missingness ---------------------------------------------------------------

@dataclass(frozen=True)
class MissingnessMechanism:
    """Probability that a cell (or, with ``scope="row"``, a whole invitee) is NA.

    ``kind`` is ``"MCAR"`` (constant ``prob``), ``"MAR"`` or ``"MNAR"``; the
    latter two use ``expit(intercept + sum coefficients[v] * v)`` on the true
    values.  A cell-scope MAR model may not use a column it masks, and its
    predictors must be fully observed.  Unit nonresponse (``scope="row"``)
    reads the baseline values of each invitee before anything is masked.
    """

    kind: str
    prob: float = 0.0
    intercept: float = 0.0
    coefficients: Mapping[str, float] = field(default_factory=dict)
    scope: str = "cells"
    tag: str = "missingness"

    def __post_init__(self):
        if self.kind not in ("MCAR", "MAR", "MNAR"):
            raise ValueError(f"unknown missingness kind {self.kind!r}")
        if self.scope not in ("cells", "row"):
            raise ValueError(f"unknown missingness scope {self.scope!r}")
        if self.kind == "MCAR" and not 0.0 <= self.prob <= 1.0:
            raise ValueError("MCAR probability must lie in [0, 1]")
        if self.kind != "MCAR" and not self.coefficients and self.intercept == 0.0:
            raise ValueError(f"{self.kind} mechanism needs a logistic model")

    def probability(self, values: Mapping[str, np.ndarray], n: int) -> np.ndarray:
        if self.kind == "MCAR":
            return np.full(n, self.prob)
        lp = np.full(n, self.intercept)
        for k, c in self.coefficients.items():
            lp = lp + c * values[k]
        return expit(lp)


def logistic_probability(row: Mapping[str, float], intercept: float, coefficients: Mapping[str, float]) -> float:
    """expit(intercept + sum c_k row[k]) for a single row."""
    return float(expit(intercept + sum(c * float(row[k]) for k, c in coefficients.items())))


def apply_missingness(sample: Sample, mech: MissingnessMechanism, columns: Sequence[str] | None,
                      psi: LatentDraws, t: int = 0) -> Sample:
    """Mask cells (or whole invitees) at random according to ``mech``.

    Draws are keyed on (id, ``t``, ``mech.tag``) with one index per targeted
    column, so masking a column does not depend on which others are masked.
    """
    columns = list(sample.columns) if columns is None else list(columns)
    unknown = [c for c in columns if c not in sample.values]
    if unknown:
        raise ValueError(f"unknown column(s) {unknown}")
    predictors = list(mech.coefficients)
    missing = [k for k in predictors if k not in sample.values]
    if missing:
        raise ValueError(f"missingness model uses unknown column(s) {missing}")
    if mech.scope == "cells" and mech.kind == "MAR":
        clash = [k for k in predictors if k in columns]
        if clash:
            raise ValueError(f"MAR predictor(s) {clash} are masked by the same mechanism; use MNAR")
        partly = [k for k in predictors if sample.mask[k].any()]
        if partly:
            raise ValueError(f"MAR predictor(s) {partly} are not fully observed")
    p = mech.probability(sample.values, sample.n)
    mask = {k: v.copy() for k, v in sample.mask.items()}
    if mech.scope == "row":
        hit = psi.uniform(sample.ids, t, mech.tag) < p
        for k in mask:
            mask[k] |= hit
        return Sample(sample.ids, sample.values, mask, sample.participated & ~hit)
    for j, k in enumerate(columns):
        mask[k] |= psi.uniform(sample.ids, t, mech.tag, j) < p
    return Sample(sample.ids, sample.values, mask, sample.participated)


# -- measurement error ---------------------------------------------------------

@dataclass(frozen=True)
class MeasurementError:
    """``kind`` is ``"none"``, ``"normal"`` (additive, sd ``size``) or ``"round"`` (to a multiple of ``size``)."""

    kind: str = "none"
    size: float = 0.0
    tag: str = "measurement-error"

    def __post_init__(self):
        if self.kind not in ("none", "normal", "round"):
            raise ValueError(f"unknown error kind {self.kind!r}")
        if self.kind != "none" and not self.size > 0:
            raise ValueError("error size must be positive")


def apply_error(sample: Sample, column: str, error: MeasurementError, psi: LatentDraws, t: int = 0,
                index: int = 0) -> Sample:
    """Perturb the observed cells of ``column``; masked cells keep their values.

    Rounding is half-up: ``floor(x / step + 1/2) * step``.
    """
    if error.kind == "none":
        return sample
    x = sample.values[column]
    if x.dtype.kind not in "fiu":
        raise ValueError(f"column {column!r} is not numeric")
    seen = ~sample.mask[column]
    out = x.astype(np.float64, copy=True)
    if error.kind == "round":
        out[seen] = np.floor(x[seen] / error.size + 0.5) * error.size
    else:
        z = Normal(0.0, error.size).ppf(psi.uniform(sample.ids[seen], t, error.tag, index))
        out[seen] = x[seen] + z
    return replace(sample, values={**sample.values, column: out})


# -- follow-up -----------------------------------------------------------------

OUTCOME_SUFFIX = "_end"


def follow_up(sim: Simulator, start: State, baseline: Sample, outcomes: Sequence[str], horizon: int,
              record: SimulationRecord | None = None, partitions: int = 1) -> Sample:
    """Add end-of-follow-up outcomes to a baseline sample.

    The population in ``start`` is run for ``horizon`` steps (or ``record``,
    a run of exactly that start and horizon, is reused) and each outcome
    column is added as ``<name>_end``.  Invitees who did not take part get
    fully masked outcome cells.
    """
    if record is None:
        record = run(sim, start, RunPlan(horizon, partitions=partitions))
    final = record.final.population
    pos = _positions(final.ids, baseline.ids)
    if baseline.n and not np.array_equal(final.ids[pos], baseline.ids):
        raise ValueError("some invitees are missing from the final population")
    values = {k + OUTCOME_SUFFIX: np.array(final[k][pos]) for k in outcomes}
    mask = {k: ~baseline.participated for k in values}
    return baseline.with_columns(values, mask)
