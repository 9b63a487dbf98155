"""Initial population for the health scenario.

The defaults are synthetic parametric stand-ins for a Finnish adult
population (age 30 and over).  Continuous risk factors are drawn per
subgroup (sex x 10-year age group x smoking) from a multivariate normal on
the Box-Cox scale and transformed back.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import expit, ndtri

from ..domain import Population
from ..streams import LatentDraws, Weibull
from .model import DAYS_PER_YEAR, DIABETES_TERMS, health_domain

RISK_FACTORS = ("bmi", "waist", "chol", "hdl", "sbp")
AGE_GROUPS = (30, 40, 50, 60, 70, 80)   # lower bounds; the last group is open-ended
AGE_BIN_EDGES = tuple(range(30, 105, 5))
MAX_ATTEMPTS = 100

# Finland 2017, thousands of persons by 5-year age band 30-34 ... 95-99
_AGE_MEN = (179, 177, 163, 168, 182, 183, 177, 180, 139, 89, 62, 34, 11, 2)
_AGE_WOMEN = (168, 168, 156, 163, 183, 188, 187, 194, 160, 114, 95, 68, 30, 7)

# smoking prevalence by age group
_SMOKING = {0: (0.25, 0.24, 0.22, 0.18, 0.10, 0.05), 1: (0.17, 0.17, 0.16, 0.12, 0.06, 0.03)}

# medians on the original scale, by sex and age group: bmi, waist, chol, hdl, sbp
_MEDIANS = {
    0: ((26.5, 94.0, 5.3, 1.35, 128.0), (27.3, 97.0, 5.5, 1.35, 131.0), (27.8, 99.0, 5.4, 1.40, 137.0),
        (28.0, 101.0, 5.1, 1.40, 142.0), (27.5, 101.0, 4.8, 1.40, 146.0), (26.3, 99.0, 4.6, 1.40, 147.0)),
    1: ((25.0, 83.0, 5.0, 1.65, 118.0), (26.2, 86.0, 5.2, 1.70, 124.0), (27.0, 89.0, 5.6, 1.75, 133.0),
        (27.6, 91.0, 5.5, 1.75, 141.0), (27.4, 92.0, 5.3, 1.70, 148.0), (26.0, 91.0, 5.2, 1.65, 150.0)),
}
_SMOKER_SHIFT = (-0.6, -0.5, 0.1, -0.08, -1.0)
_CV = (0.15, 0.11, 0.18, 0.25, 0.13)
_CORRELATION = np.array([
    [1.00, 0.85, 0.10, -0.30, 0.25],
    [0.85, 1.00, 0.12, -0.35, 0.25],
    [0.10, 0.12, 1.00, 0.15, 0.15],
    [-0.30, -0.35, 0.15, 1.00, -0.05],
    [0.25, 0.25, 0.15, -0.05, 1.00],
])
_BOXCOX = (-0.5, 0.0, 0.5, 0.0, -1.0)
_RANGES = ((15.0, 60.0), (55.0, 160.0), (2.0, 12.0), (0.3, 4.0), (80.0, 240.0))

# by age group
_BP_MED = {0: (0.05, 0.10, 0.20, 0.35, 0.45, 0.50), 1: (0.04, 0.08, 0.18, 0.33, 0.45, 0.55)}
_HIGH_GLUCOSE = (0.03, 0.05, 0.08, 0.12, 0.15, 0.15)
_PRIOR_STROKE = (0.0003, 0.001, 0.002, 0.004, 0.008, 0.012)


def boxcox(x, lam: float):
    x = np.asarray(x, dtype=np.float64)
    return np.log(x) if lam == 0 else (x ** lam - 1.0) / lam


def inv_boxcox(z, lam: float):
    """Inverse transform; NaN where (lam * z + 1) <= 0 has no preimage."""
    z = np.asarray(z, dtype=np.float64)
    if lam == 0:
        return np.exp(z)
    base = lam * z + 1.0
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(base > 0, np.abs(base) ** (1.0 / lam), np.nan)


def age_group(age) -> np.ndarray:
    """Index into AGE_GROUPS."""
    return np.clip((np.asarray(age) - 30.0) // 10.0, 0, len(AGE_GROUPS) - 1).astype(np.intp)


@dataclass(frozen=True)
class Subgroup:
    """Box-Cox-scale multivariate normal for one sex x age group x smoking cell."""

    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=np.float64)
        cov = np.asarray(self.cov, dtype=np.float64)
        if mean.shape != (len(RISK_FACTORS),) or cov.shape != (len(RISK_FACTORS),) * 2:
            raise ValueError("subgroup needs a 5-vector mean and a 5x5 covariance")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)

    def factor(self) -> np.ndarray:
        """A matrix L with L L^T = cov (covariance may be singular, e.g. all zero)."""
        if not np.allclose(self.cov, self.cov.T, rtol=0, atol=1e-12):
            raise ValueError("covariance matrix is not symmetric")
        w, v = np.linalg.eigh(self.cov)
        if w.min() < -1e-10 * max(1.0, abs(w).max()):
            raise ValueError(f"covariance matrix is not positive semi-definite (eigenvalue {w.min():.3g})")
        return v * np.sqrt(np.clip(w, 0.0, None))


def _default_subgroups() -> dict[tuple[int, int, int], Subgroup]:
    out = {}
    for sex in (0, 1):
        for g in range(len(AGE_GROUPS)):
            for smoker in (0, 1):
                med = np.array(_MEDIANS[sex][g]) + smoker * np.array(_SMOKER_SHIFT)
                # medians map exactly; spreads by the delta method
                mean = np.array([boxcox(m, lam) for m, lam in zip(med, _BOXCOX)])
                sd = np.array([cv * m * m ** (lam - 1.0) for cv, m, lam in zip(_CV, med, _BOXCOX)])
                out[(sex, g, smoker)] = Subgroup(mean, _CORRELATION * np.outer(sd, sd))
    return out


def _default_histogram():
    return {0: np.array(_AGE_MEN, dtype=float), 1: np.array(_AGE_WOMEN, dtype=float)}


@dataclass(frozen=True)
class InitConfig:
    n: int = 100_000
    women_share: float = 0.5
    age_edges: tuple[float, ...] = AGE_BIN_EDGES
    age_weights: dict = field(default_factory=_default_histogram)
    smoking: dict = field(default_factory=lambda: dict(_SMOKING))
    boxcox: tuple[float, ...] = _BOXCOX
    subgroups: dict = field(default_factory=_default_subgroups)
    ranges: tuple[tuple[float, float], ...] = _RANGES
    parents_stroke: float = 0.10
    bp_med: dict = field(default_factory=lambda: dict(_BP_MED))
    high_glucose: tuple[float, ...] = _HIGH_GLUCOSE
    diabetes_prevalence: tuple[float, float] = (0.15, 0.10)   # men, women
    prior_stroke: tuple[float, ...] = _PRIOR_STROKE
    # elapsed time since a prior stroke, in days
    prior_stroke_weibull: tuple[float, float] = (0.4688712260311154, 1681.298085059192)

    def __post_init__(self):
        if self.n < 0:
            raise ValueError("population size must be >= 0")
        probs = [self.women_share, self.parents_stroke, *self.high_glucose, *self.diabetes_prevalence,
                 *self.prior_stroke]
        for sex in (0, 1):
            probs += list(self.smoking[sex]) + list(self.bp_med[sex])
        if any(not 0.0 <= p <= 1.0 for p in probs):
            raise ValueError("prevalences and probabilities must lie in [0, 1]")
        if min(self.age_edges) < 30:
            raise ValueError("every individual must be aged 30 or over")
        for sex in (0, 1):
            w = np.asarray(self.age_weights[sex], dtype=float)
            if w.shape[0] != len(self.age_edges) - 1 or (w < 0).any() or w.sum() <= 0:
                raise ValueError("age histogram must have one non-negative weight per bin")
        for key, sg in self.subgroups.items():
            try:
                sg.factor()
            except ValueError as exc:
                raise ValueError(f"subgroup {key}: {exc}") from None
        shape, scale = self.prior_stroke_weibull
        if shape <= 0 or scale <= 0:
            raise ValueError("prior-stroke Weibull needs shape > 0 and scale > 0")

    def with_size(self, n: int) -> "InitConfig":
        return replace(self, n=n)


def _sample_ages(u_bin, u_within, edges, weights):
    cdf = np.cumsum(weights) / np.sum(weights)
    b = np.minimum(np.searchsorted(cdf, u_bin, side="right"), len(weights) - 1)
    lo = np.asarray(edges[:-1], dtype=float)[b]
    hi = np.asarray(edges[1:], dtype=float)[b]
    return lo + u_within * (hi - lo)


def _risk_factors(cfg: InitConfig, psi: LatentDraws, ids, sex, group, smoker):
    """Draw (n, 5) risk factors; out-of-range rows are redrawn, then clamped."""
    n = ids.shape[0]
    out = np.empty((n, len(RISK_FACTORS)))
    lo = np.array([r[0] for r in cfg.ranges])
    hi = np.array([r[1] for r in cfg.ranges])
    for key, sg in cfg.subgroups.items():
        rows = np.flatnonzero((sex == key[0]) & (group == key[1]) & (smoker == key[2]))
        if rows.shape[0] == 0:
            continue
        chol = sg.factor()
        pending = rows
        for attempt in range(MAX_ATTEMPTS):
            z = np.column_stack([ndtri(psi.uniform(ids[pending], 0, "init-risk-factors", attempt * 8 + j))
                                 for j in range(len(RISK_FACTORS))])
            y = sg.mean + z @ chol.T
            x = np.column_stack([inv_boxcox(y[:, j], lam) for j, lam in enumerate(cfg.boxcox)])
            ok = np.all((x >= lo) & (x <= hi), axis=1)
            done = pending[ok]
            out[done] = x[ok]
            if attempt == MAX_ATTEMPTS - 1:
                left = pending[~ok]
                xl = x[~ok]
                # the lower bound of a range is the preimage of -inf for negative lambda
                out[left] = np.clip(np.nan_to_num(xl, nan=0.0), lo, hi)
            pending = pending[~ok]
            if pending.shape[0] == 0:
                break
    return out


def diabetes_logit(theta, cols) -> np.ndarray:
    lp = theta["diabetes_intercept"]
    for term in DIABETES_TERMS:
        lp = lp + theta[f"diabetes_{term}"] * cols[term]
    return np.asarray(lp, dtype=np.float64)


def prevalence_scale(risk, target: float, tol: float = 1e-12) -> float:
    """Constant c with mean(min(c * risk, 1)) == target, by bisection."""
    risk = np.asarray(risk, dtype=np.float64)
    if risk.shape[0] == 0 or target == 0.0:
        return 0.0
    if not risk.max() > 0:
        raise ValueError("cannot reach a positive prevalence when every risk is zero")
    if target >= np.mean(risk > 0):
        return 1.0 / risk[risk > 0].min()
    lo, hi = 0.0, 1.0
    while np.mean(np.minimum(hi * risk, 1.0)) < target:
        hi *= 2.0
    while hi - lo > tol * hi:
        mid = 0.5 * (lo + hi)
        if np.mean(np.minimum(mid * risk, 1.0)) < target:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def init_population(cfg: InitConfig, theta, seed: int) -> Population:
    """Generate the start population; ``theta`` supplies the diabetes risk model."""
    domain = health_domain()
    n = cfg.n
    if n == 0:
        return Population.empty(domain)
    psi = LatentDraws(seed)
    ids = np.arange(n, dtype=np.uint64)

    def u(tag, index=0):
        return psi.uniform(ids, 0, f"init-{tag}", index)

    sex = (u("sex") < cfg.women_share).astype(np.float64)
    age = np.empty(n)
    for s in (0, 1):
        rows = sex == s
        age[rows] = _sample_ages(u("age", 0)[rows], u("age", 1)[rows], cfg.age_edges, cfg.age_weights[s])
    group = age_group(age)
    sex_i = sex.astype(np.intp)

    smoking_p = np.array([[*cfg.smoking[0]], [*cfg.smoking[1]]])[sex_i, group]
    smoking = (u("smoking") < smoking_p).astype(np.float64)
    rf = _risk_factors(cfg, psi, ids, sex_i, group, smoking.astype(np.intp))
    cols = {name: rf[:, j] for j, name in enumerate(RISK_FACTORS)}
    cols.update(sex=sex, age=age, smoking=smoking)
    cols["parents_stroke"] = (u("parents-stroke") < cfg.parents_stroke).astype(np.float64)
    bp_p = np.array([[*cfg.bp_med[0]], [*cfg.bp_med[1]]])[sex_i, group]
    cols["bp_med"] = (u("bp-med") < bp_p).astype(np.float64)
    cols["high_glucose"] = (u("high-glucose") < np.asarray(cfg.high_glucose)[group]).astype(np.float64)

    risk = expit(diabetes_logit(theta, cols))
    diabetes = np.zeros(n)
    ud = u("diabetes")
    for s in (0, 1):
        rows = sex == s
        c = prevalence_scale(risk[rows], cfg.diabetes_prevalence[s])
        diabetes[rows] = (ud[rows] < np.minimum(c * risk[rows], 1.0)).astype(np.float64)
    cols["diabetes"] = diabetes
    cols["diabetes_day"] = np.zeros(n)

    stroke = (u("prior-stroke") < np.asarray(cfg.prior_stroke)[group]).astype(np.float64)
    # days since the stroke, truncated so that it happened at age 30 or later
    dist = Weibull(*cfg.prior_stroke_weibull)
    max_days = np.maximum((age - 30.0) * DAYS_PER_YEAR, 0.0)
    elapsed = np.floor(dist.ppf(u("prior-stroke", 1) * dist.cdf(max_days)))
    cols["stroke"] = stroke
    cols["stroke_day"] = np.where(stroke == 1.0, -elapsed, 0.0)

    cols["alive"] = np.ones(n)
    for name in ("death_stroke", "death_other", "salt_complier", "death_day"):
        cols[name] = np.zeros(n)
    return Population(domain, cols, ids)
