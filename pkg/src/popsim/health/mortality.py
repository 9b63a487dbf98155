"""Post-stroke survival: fitting the daily fatality models to cumulative risks."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np
from scipy.special import log_expit, logit

from ..calibration import NelderMeadOptions, nelder_mead
from .model import EARLY_DAYS

log = logging.getLogger(__name__)

# cumulative risk of death after a stroke (days since the stroke, risk)
EARLY_TARGET = (28, 0.28)
LATE_TARGETS = ((365, 0.41), (1825, 0.60), (3650, 0.76), (5475, 0.86))

# the decay rate is optimised in units of 1/1000 per day so all coordinates have similar scale
_ALPHA3_SCALE = 1e-3


def daily_fatality(cumulative: float, days: int = EARLY_DAYS) -> float:
    """Constant daily death probability q with 1 - (1 - q)**days == cumulative."""
    if not 0.0 <= cumulative < 1.0:
        raise ValueError("cumulative risk must lie in [0, 1)")
    return -math.expm1(math.log1p(-cumulative) / days)


def alpha0_for(cumulative: float, days: int = EARLY_DAYS) -> float:
    """Early-phase survival logit that yields ``cumulative`` risk over ``days``."""
    return float(logit(1.0 - daily_fatality(cumulative, days)))


def late_cumulative_risk(alpha1: float, alpha2: float, alpha3: float, days, early_survival: float) -> np.ndarray:
    """Cumulative risk of death ``days`` after the stroke.

    Survival is ``early_survival`` through day 28 times the product of daily
    late survival probabilities for completed days 28 .. days - 1.
    """
    days = np.atleast_1d(np.asarray(days, dtype=np.int64))
    horizon = int(days.max()) - EARLY_DAYS
    k = np.arange(1, max(horizon, 0) + 1, dtype=np.float64)
    with np.errstate(over="ignore"):
        log_surv = np.concatenate([[0.0], np.cumsum(log_expit(alpha1 + alpha2 * np.exp(alpha3 * k)))])
    idx = np.clip(days - EARLY_DAYS, 0, None)
    return 1.0 - early_survival * np.exp(log_surv[idx])


@dataclass
class LateSurvivalFit:
    alpha1: float
    alpha2: float
    alpha3: float
    rss: float
    underdetermined: bool
    nfev: int
    trace: list

    @property
    def params(self) -> tuple[float, float, float]:
        return self.alpha1, self.alpha2, self.alpha3


class FitError(RuntimeError):
    def __init__(self, message, trace):
        super().__init__(message)
        self.trace = trace


def fit_late_survival(targets=LATE_TARGETS, alpha0: float | None = None, x0=(8.0, -1.0, -5.0),
                      rss_tol: float = 1e-4, max_evals: int = 4000, early_survival: float | None = None
                      ) -> LateSurvivalFit:
    """Least-squares fit of the late-phase survival logit to cumulative death risks.

    The early phase contributes the 28-day survival implied by ``alpha0``
    (default: the 28% fatality target).  ``x0`` gives alpha3 in units of 1e-3.
    With fewer than three targets the fit is underdetermined and flagged.
    """
    targets = tuple((int(d), float(r)) for d, r in targets)
    if not targets:
        raise ValueError("need at least one target")
    days = np.array([d for d, _ in targets])
    risk = np.array([r for _, r in targets])
    if np.any(np.diff(days) <= 0) or np.any(np.diff(risk) <= 0):
        raise ValueError("targets must be increasing in both time and risk")
    if days.min() <= EARLY_DAYS:
        raise ValueError(f"late-phase targets must lie beyond day {EARLY_DAYS}")
    if early_survival is None:
        q = daily_fatality(EARLY_TARGET[1]) if alpha0 is None else float(1.0 - np.exp(log_expit(alpha0)))
        early_survival = (1.0 - q) ** EARLY_DAYS

    def rss(x):
        pred = late_cumulative_risk(x[0], x[1], x[2] * _ALPHA3_SCALE, days, early_survival)
        return float(np.sum((pred - risk) ** 2))

    trace, best = [], None
    start = np.asarray(x0, dtype=np.float64)
    # restarts from the best point refresh a collapsed simplex
    for _ in range(5):
        res = nelder_mead(rss, start, NelderMeadOptions(tol=1e-16, max_evals=max_evals))
        trace.extend(res.trace)
        if best is None or res.fun < best.fun:
            best = res
        if np.allclose(res.x, start, rtol=1e-10, atol=1e-12):
            break
        start = res.x
    underdetermined = len(targets) < 3
    if underdetermined:
        log.warning("late survival fit with %d target(s) is underdetermined", len(targets))
    elif best.fun >= rss_tol:
        raise FitError(f"late survival fit did not reach RSS < {rss_tol} (got {best.fun:.3g})", trace)
    a1, a2, a3 = best.x
    return LateSurvivalFit(float(a1), float(a2), float(a3 * _ALPHA3_SCALE), best.fun, underdetermined,
                           len(trace), trace)


def fit_survival_weibull(targets=LATE_TARGETS) -> tuple[float, float]:
    """Weibull (shape, scale in days) whose survival exp(-(t/scale)**shape) fits 1 - risk.

    Least squares on the survival probabilities, started from the
    log(-log S) against log t regression line.
    """
    days = np.array([d for d, _ in targets], dtype=np.float64)
    surv = 1.0 - np.array([r for _, r in targets], dtype=np.float64)
    slope, icpt = np.polyfit(np.log(days), np.log(-np.log(surv)), 1)
    x0 = np.array([slope, -icpt / slope])

    def sse(x):
        shape, scale = x
        if shape <= 0 or scale <= 0:
            return math.inf
        return float(np.sum((np.exp(-(days / scale) ** shape) - surv) ** 2))

    res = nelder_mead(sse, x0, NelderMeadOptions(tol=1e-18, max_evals=4000))
    return float(res.x[0]), float(res.x[1])
