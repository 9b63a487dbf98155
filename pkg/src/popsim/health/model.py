"""Stroke, diabetes and mortality events of the health scenario.

One step is one day.  The stroke and diabetes models are 10-year logistic
risk scores turned into a daily probability by assuming a constant-intensity
Poisson process over the 3650 days:

    tau = -log(1 - p10) / 3650,    p1 = 1 - exp(-tau)

Events read the row as it stands when they run, but diabetes diagnosed or a
stroke suffered on day t only becomes visible to the other risk models from
day t + 1 (the ``*_day`` columns carry the timing).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping

import numba
import numpy as np
from scipy.special import expit

from ..domain import EventOrder, ManipulationEvent, RowUpdate, SimulationDomain, Variable
from ..engine import Simulator

DAYS_10Y = 3650.0
DAYS_PER_YEAR = 365.0
EARLY_DAYS = 28

STROKE_TERMS = ("age", "smoking", "sbp", "hdl", "diabetes", "parents_stroke")
DIABETES_TERMS = ("age", "bmi", "waist", "bp_med", "high_glucose")
MORTALITY_PARAMS = ("alpha0", "alpha1", "alpha2", "alpha3", "weibull_shape", "weibull_scale")

BINARY = ("alive", "sex", "smoking", "bp_med", "high_glucose", "parents_stroke", "diabetes", "stroke",
          "death_stroke", "death_other", "salt_complier")
REAL = ("age", "bmi", "waist", "chol", "hdl", "sbp")
INTEGER = ("diabetes_day", "stroke_day", "death_day")


def stroke_params(sex: str) -> tuple[str, ...]:
    return tuple(f"stroke_{sex}_{term}" for term in ("intercept",) + STROKE_TERMS)


DIABETES_PARAMS = tuple(f"diabetes_{term}" for term in ("intercept",) + DIABETES_TERMS)
PARAMETERS = stroke_params("m") + stroke_params("f") + DIABETES_PARAMS + MORTALITY_PARAMS


def health_domain() -> SimulationDomain:
    variables = ([Variable(v, "binary") for v in BINARY] + [Variable(v, "real") for v in REAL]
                 + [Variable(v, "integer") for v in INTEGER])
    return SimulationDomain(tuple(variables), PARAMETERS,
                            latent_spec="one uniform per (id, day, event tag); see popsim.streams")


# -- coefficients ------------------------------------------------------------

DATA = Path(__file__).resolve().parent.parent / "data"


def read_coefficients(path) -> dict[str, float]:
    """CSV with columns term,estimate."""
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not {"term", "estimate"} <= set(reader.fieldnames):
            raise ValueError(f"{path}: expected columns term,estimate")
        return {row["term"].strip(): float(row["estimate"]) for row in reader}


def write_coefficients(path, coefs: Mapping[str, float]) -> None:
    Path(path).write_text("term,estimate\n" + "".join(f"{k},{float(v)!r}\n" for k, v in coefs.items()))


def _prefixed(prefix: str, coefs: Mapping[str, float], terms) -> dict[str, float]:
    missing = [t for t in ("intercept",) + tuple(terms) if t not in coefs]
    if missing:
        raise ValueError(f"coefficient file for {prefix!r} lacks term(s) {missing}")
    extra = [t for t in coefs if t not in ("intercept",) + tuple(terms)]
    if extra:
        raise ValueError(f"coefficient file for {prefix!r} has unknown term(s) {extra}")
    return {f"{prefix}_{t}": float(coefs[t]) for t in ("intercept",) + tuple(terms)}


def default_theta(stroke_male=None, stroke_female=None, diabetes=None, mortality=None) -> dict[str, float]:
    """Parameter vector from the shipped coefficient files (or given paths)."""
    theta = {}
    theta.update(_prefixed("stroke_m", read_coefficients(stroke_male or DATA / "stroke_male.csv"), STROKE_TERMS))
    theta.update(_prefixed("stroke_f", read_coefficients(stroke_female or DATA / "stroke_female.csv"), STROKE_TERMS))
    theta.update(_prefixed("diabetes", read_coefficients(diabetes or DATA / "diabetes.csv"), DIABETES_TERMS))
    mort = read_coefficients(mortality or DATA / "mortality.csv")
    missing = [p for p in MORTALITY_PARAMS if p not in mort]
    if missing:
        raise ValueError(f"mortality parameter file lacks {missing}")
    theta.update({p: mort[p] for p in MORTALITY_PARAMS})
    return theta


# -- risk conversion ---------------------------------------------------------

def ten_year_to_daily(p10):
    """Daily event probability from a 10-year risk under a Poisson process."""
    p10 = np.asarray(p10, dtype=np.float64)
    if np.any(p10 < 0) or np.any(p10 >= 1) or np.any(np.isnan(p10)):
        raise ValueError("10-year risk must lie in [0, 1); a risk of 1 means infinite intensity")
    out = -np.expm1(np.log1p(-p10) / DAYS_10Y)
    return float(out) if out.ndim == 0 else out


def daily_intensity(p10):
    p10 = np.asarray(p10, dtype=np.float64)
    return -np.log1p(-p10) / DAYS_10Y


def daily_from_logit(lp):
    """Same conversion starting from the 10-year log-odds.

    -log(1 - expit(lp)) is softplus(lp), which stays exact when p10 rounds
    to 1 in double precision.
    """
    return -np.expm1(-np.logaddexp(0.0, lp) / DAYS_10Y)


def _column(rows, name, idx):
    return rows[name] if idx is None else rows[name][idx]


def linear_predictor(rows, theta, prefix: str, terms, idx=None, t=None) -> np.ndarray:
    """Linear predictor of a risk model; with ``t``, only diabetes diagnosed before day t counts."""
    lp = theta[f"{prefix}_intercept"]
    for term in terms:
        x = _column(rows, term, idx)
        if term == "diabetes" and t is not None:
            x = ((x == 1.0) & (_column(rows, "diabetes_day", idx) < t)).astype(np.float64)
        lp = lp + theta[f"{prefix}_{term}"] * x
    return np.broadcast_to(np.asarray(lp, dtype=np.float64), (rows.n if idx is None else len(idx),))


def _extremes(col) -> tuple[float, float]:
    return float(col.min()), float(col.max())


_BINARY_TERMS = {"smoking", "diabetes", "parents_stroke", "bp_med", "high_glucose", "sex"}


def _lp_bound(rows, theta, prefix, terms, extremes) -> float:
    """Upper bound on the linear predictor over the rows (column extremes)."""
    bound = theta[f"{prefix}_intercept"]
    for term in terms:
        beta = theta[f"{prefix}_{term}"]
        if beta == 0.0:
            continue
        if term in _BINARY_TERMS:
            lo, hi = 0.0, 1.0
        else:
            if term not in extremes:
                extremes[term] = _extremes(rows[term])
            lo, hi = extremes[term]
        bound += max(beta * lo, beta * hi)
    return bound


# bound slack so that rounding in the exact path can never exceed the prefilter
_SLACK = 1.0 + 1e-9


def _daily_bound(lp_bound: float) -> float:
    # p1 = 1 - exp(-tau) <= tau = softplus(lp) / 3650
    return float(np.logaddexp(0.0, lp_bound)) / DAYS_10Y * _SLACK


def _fires(rows, theta, draws, t, groups):
    """Positions of rows whose daily risk-model Bernoulli fires.

    ``groups`` lists (prefix, terms, at-risk predicate on candidate positions).
    Only rows whose draw lies below the largest possible daily probability
    are evaluated exactly; the result equals evaluating every row.
    """
    extremes = {}
    bounds = [_daily_bound(_lp_bound(rows, theta, prefix, terms, extremes)) for prefix, terms, _ in groups]
    top = max(bounds)
    if not top > 0.0:
        return np.empty(0, dtype=np.intp)
    cand, u = draws.below(top)
    fired = []
    for (prefix, terms, at_risk), bound in zip(groups, bounds):
        keep = at_risk(cand) & (u < bound)
        idx, uk = cand[keep], u[keep]
        if idx.shape[0]:
            p1 = daily_from_logit(linear_predictor(rows, theta, prefix, terms, idx, t))
            fired.append(idx[uk < p1])
    return np.concatenate(fired) if fired else np.empty(0, dtype=np.intp)


def stroke_mechanism(rows, theta, draws, t):
    alive, stroke, sex = rows["alive"], rows["stroke"], rows["sex"]

    def at_risk(woman):
        return lambda i: (alive[i] == 1.0) & (stroke[i] == 0.0) & (sex[i] == woman)

    idx = _fires(rows, theta, draws, t, [("stroke_m", STROKE_TERMS, at_risk(0.0)),
                                         ("stroke_f", STROKE_TERMS, at_risk(1.0))])
    if idx.shape[0] == 0:
        return {}
    return {"stroke": RowUpdate(idx, 1.0), "stroke_day": RowUpdate(idx, float(t))}


def diabetes_mechanism(rows, theta, draws, t):
    alive, diabetes = rows["alive"], rows["diabetes"]
    idx = _fires(rows, theta, draws, t,
                 [("diabetes", DIABETES_TERMS, lambda i: (alive[i] == 1.0) & (diabetes[i] == 0.0))])
    if idx.shape[0] == 0:
        return {}
    return {"diabetes": RowUpdate(idx, 1.0), "diabetes_day": RowUpdate(idx, float(t))}


def days_since_stroke(rows, t, idx=None) -> np.ndarray:
    """Completed days since the stroke at the start of step ``t`` (0 on the day after)."""
    day = rows["stroke_day"] if idx is None else rows["stroke_day"][idx]
    return t - 1 - day


def early_death_probability(alpha0: float) -> float:
    return float(expit(-alpha0))


def late_death_probability(days, alpha1, alpha2, alpha3):
    """Daily death probability for ``days`` >= 28 completed days since the stroke."""
    return expit(-(alpha1 + alpha2 * np.exp(alpha3 * (np.asarray(days, dtype=np.float64) - (EARLY_DAYS - 1)))))


def _die(idx, t, cause):
    return {"alive": RowUpdate(idx, 0.0), cause: RowUpdate(idx, 1.0), "death_day": RowUpdate(idx, float(t))}


@numba.njit(cache=True, nogil=True)
def _patients(stroke, alive):
    n = 0
    for i in range(stroke.shape[0]):
        if stroke[i] == 1.0 and alive[i] == 1.0:
            n += 1
    out = np.empty(n, dtype=np.intp)
    k = 0
    for i in range(stroke.shape[0]):
        if stroke[i] == 1.0 and alive[i] == 1.0:
            out[k] = i
            k += 1
    return out


def _stroke_patients(rows, t):
    """Living stroke survivors whose stroke happened before day ``t``."""
    idx = _patients(rows["stroke"], rows["alive"])
    return idx[rows["stroke_day"][idx] < t]


def early_stroke_death_mechanism(rows, theta, draws, t):
    idx = _stroke_patients(rows, t)
    idx = idx[days_since_stroke(rows, t, idx) < EARLY_DAYS]
    q = early_death_probability(theta["alpha0"])
    if idx.shape[0] == 0 or q == 0.0:
        return {}
    dead = idx[draws.subset(idx).uniform() < q]
    return _die(dead, t, "death_stroke") if dead.shape[0] else {}


def late_stroke_death_mechanism(rows, theta, draws, t):
    idx = _stroke_patients(rows, t)
    days = days_since_stroke(rows, t, idx)
    late = days >= EARLY_DAYS
    idx, days = idx[late], days[late]
    if idx.shape[0] == 0:
        return {}
    q = late_death_probability(days, theta["alpha1"], theta["alpha2"], theta["alpha3"])
    dead = idx[draws.subset(idx).uniform() < q]
    return _die(dead, t, "death_stroke") if dead.shape[0] else {}


def background_death_probability(age, shape: float, scale: float):
    """Daily probability of death from other causes: the Weibull CDF at the age in years."""
    if not (shape > 0 and scale > 0):
        raise ValueError(f"weibull needs shape > 0 and scale > 0, got ({shape}, {scale})")
    age = np.maximum(np.asarray(age, dtype=np.float64), 0.0)
    return -np.expm1(-((age / scale) ** shape))


def background_death_mechanism(rows, theta, draws, t):
    shape, scale = theta["weibull_shape"], theta["weibull_scale"]
    age = rows["age"]
    # the probability increases with age, so the oldest row bounds it
    p_max = float(background_death_probability(age.max(), shape, scale)) * _SLACK
    if p_max == 0.0:
        return {}
    cand, u = draws.below(p_max)
    keep = (rows["alive"][cand] == 1.0) & (rows["stroke"][cand] == 0.0)
    cand, u = cand[keep], u[keep]
    if cand.shape[0] == 0:
        return {}
    dead = cand[u < background_death_probability(age[cand], shape, scale)]
    return _die(dead, t, "death_other") if dead.shape[0] else {}


def aging_mechanism(rows, theta, draws, t):
    return {"age": rows["age"] + rows["alive"] * (1.0 / DAYS_PER_YEAR)}


def health_events(aging: bool = True) -> tuple[ManipulationEvent, ...]:
    events = [
        ManipulationEvent("stroke", stroke_mechanism, stroke_params("m") + stroke_params("f"),
                          "first stroke; sex-specific 10-year logistic risk as a daily Poisson probability"),
        ManipulationEvent("diabetes", diabetes_mechanism, DIABETES_PARAMS,
                          "type 2 diabetes onset; 10-year logistic risk shared by both sexes"),
        ManipulationEvent("early-stroke-death", early_stroke_death_mechanism, ("alpha0",),
                          "constant daily fatality during the first 28 days after a stroke"),
        ManipulationEvent("late-stroke-death", late_stroke_death_mechanism, ("alpha1", "alpha2", "alpha3"),
                          "daily fatality of stroke survivors after day 27"),
        ManipulationEvent("background-death", background_death_mechanism, ("weibull_shape", "weibull_scale"),
                          "death from other causes among stroke-free individuals"),
    ]
    if aging:
        events.append(ManipulationEvent("aging", aging_mechanism, (), "age advances by one day"))
    return tuple(events)


# -- trackers ----------------------------------------------------------------

def _count(mask) -> float:
    return float(np.count_nonzero(mask))


TRACKERS = {
    "new_strokes": lambda rows, t: _count((rows["stroke_day"] == t) & (rows["stroke"] == 1.0)),
    "new_diabetes": lambda rows, t: _count((rows["diabetes_day"] == t) & (rows["diabetes"] == 1.0)),
    "stroke_deaths": lambda rows, t: _count((rows["death_day"] == t) & (rows["death_stroke"] == 1.0)),
    "other_deaths": lambda rows, t: _count((rows["death_day"] == t) & (rows["death_other"] == 1.0)),
    "alive": lambda rows, t: _count(rows["alive"] == 1.0),
}


def health_simulator(seed: int = 0, trackers=(), order: EventOrder = EventOrder(), aging: bool = True) -> Simulator:
    """The scenario's simulator; ``trackers`` selects names from :data:`TRACKERS`."""
    unknown = [k for k in trackers if k not in TRACKERS]
    if unknown:
        raise ValueError(f"unknown tracker(s) {unknown}; available: {sorted(TRACKERS)}")
    return Simulator(health_domain(), health_events(aging), (), order, seed, {k: TRACKERS[k] for k in trackers})


@dataclass(frozen=True)
class RiskProfile:
    """One row of covariates for hand evaluation of the risk models."""

    sex: int
    age: float
    smoking: int = 0
    sbp: float = 120.0
    hdl: float = 1.5
    diabetes: int = 0
    parents_stroke: int = 0
    bmi: float = 25.0
    waist: float = 90.0
    bp_med: int = 0
    high_glucose: int = 0

    def stroke_logit(self, theta) -> float:
        prefix = "stroke_f" if self.sex == 1 else "stroke_m"
        return theta[f"{prefix}_intercept"] + sum(theta[f"{prefix}_{k}"] * getattr(self, k) for k in STROKE_TERMS)

    def diabetes_logit(self, theta) -> float:
        return theta["diabetes_intercept"] + sum(theta[f"diabetes_{k}"] * getattr(self, k) for k in DIABETES_TERMS)
