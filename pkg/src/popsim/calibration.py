"""Calibration of simulator parameters against external target tables.

Each objective evaluation reconfigures the start state, reruns the simulator
with the *same* seed (common random numbers) and compares the output with the
targets, so the objective is a deterministic function of the free
parameters.  Minimisation is derivative free (Nelder-Mead).
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from .domain import State, configure
from .engine import RunPlan, SimulationRecord, Simulator, run

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TargetTable:
    """A keyed series of targets plus named scalar targets, each with a weight.

    In CSV form scalar targets carry a leading ``*`` on their key.
    """

    keys: tuple[str, ...]
    values: np.ndarray
    weights: np.ndarray
    scalars: Mapping[str, tuple[float, float]] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "keys", tuple(str(k) for k in self.keys))
        object.__setattr__(self, "values", np.asarray(self.values, dtype=np.float64))
        object.__setattr__(self, "weights", np.asarray(self.weights, dtype=np.float64))
        object.__setattr__(self, "scalars", {k: (float(v), float(w)) for k, (v, w) in self.scalars.items()})
        if not (len(self.keys) == self.values.shape[0] == self.weights.shape[0]):
            raise ValueError("keys, values and weights must have equal length")
        if (self.weights < 0).any() or any(w < 0 for _, w in self.scalars.values()):
            raise ValueError("target weights must be >= 0")

    @property
    def names(self) -> tuple[str, ...]:
        return self.keys + tuple(self.scalars)

    def vector(self) -> np.ndarray:
        return np.concatenate([self.values, [v for v, _ in self.scalars.values()]])

    def weight_vector(self) -> np.ndarray:
        return np.concatenate([self.weights, [w for _, w in self.scalars.values()]])

    def scaled(self, factor: float) -> "TargetTable":
        return TargetTable(self.keys, self.values, self.weights * factor,
                           {k: (v, w * factor) for k, (v, w) in self.scalars.items()})

    def with_values(self, vector) -> "TargetTable":
        vector = np.asarray(vector, dtype=np.float64)
        n = len(self.keys)
        return TargetTable(self.keys, vector[:n], self.weights,
                           {k: (float(vector[n + i]), w) for i, (k, (_, w)) in enumerate(self.scalars.items())})

    @classmethod
    def from_csv(cls, path) -> "TargetTable":
        keys, values, weights, scalars = [], [], [], {}
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            missing = {"key", "value", "weight"} - set(reader.fieldnames or ())
            if missing:
                raise ValueError(f"{path}: missing column(s) {sorted(missing)}")
            for row in reader:
                key = row["key"].strip()
                value, weight = float(row["value"]), float(row["weight"])
                if key.startswith("*"):
                    scalars[key[1:]] = (value, weight)
                else:
                    keys.append(key)
                    values.append(value)
                    weights.append(weight)
        return cls(tuple(keys), np.array(values), np.array(weights), scalars)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["key", "value", "weight"])
            for k, v, wt in zip(self.keys, self.values, self.weights):
                w.writerow([k, repr(float(v)), repr(float(wt))])
            for k, (v, wt) in self.scalars.items():
                w.writerow(["*" + k, repr(v), repr(wt)])


def objective_wlsq_log(Y: TargetTable, Yhat) -> float:
    """sum_k w_k (log yhat_k - log y_k)^2 over series and scalar targets.

    ``Yhat`` is a vector ordered like ``Y.names`` or a mapping keyed by name.
    """
    if isinstance(Yhat, Mapping):
        Yhat = [Yhat[k] for k in Y.names]
    yhat = np.asarray(Yhat, dtype=np.float64)
    y = Y.vector()
    if yhat.shape != y.shape:
        raise ValueError(f"prediction has {yhat.shape[0]} entries, targets have {y.shape[0]}")
    if not (y > 0).all():
        raise ValueError(f"non-positive target for {Y.names[int(np.argmin(y > 0))]!r}")
    if not (yhat > 0).all():
        raise ValueError(f"non-positive prediction for {Y.names[int(np.argmin(yhat > 0))]!r}")
    return float(np.sum(Y.weight_vector() * (np.log(yhat) - np.log(y)) ** 2))


# -- Nelder-Mead -------------------------------------------------------------

@dataclass(frozen=True)
class NelderMeadOptions:
    scale: float = 0.05       # initial step as a fraction of |x0_i|
    min_step: float = 0.01    # ... but never smaller than this
    alpha: float = 1.0        # reflection
    gamma: float = 2.0        # expansion
    rho: float = 0.5          # contraction
    sigma: float = 0.5        # shrink
    tol: float = 1e-12        # stop when max f - min f over the simplex drops below
    xtol: float = 1e-8        # ... and the simplex diameter is below xtol * max(1, |x_best|)
    max_evals: int = 2000


@dataclass
class NelderMeadResult:
    x: np.ndarray
    fun: float
    nfev: int
    converged: bool
    trace: list[tuple[int, np.ndarray, float]]

    @property
    def best_so_far(self) -> np.ndarray:
        return np.minimum.accumulate(np.array([f for _, _, f in self.trace])) if self.trace else np.array([])


class _Budget(Exception):
    pass


def nelder_mead(f: Callable[[np.ndarray], float], x0, opts: NelderMeadOptions = NelderMeadOptions(),
                bounds: Sequence[tuple[float, float]] | None = None) -> NelderMeadResult:
    """Minimise ``f`` from ``x0``.

    Non-finite values at trial points count as +inf, so such moves are
    rejected; a non-finite value at ``x0`` is an error.  With ``bounds``,
    every trial point is clamped coordinate-wise before evaluation.
    """
    x0 = np.atleast_1d(np.asarray(x0, dtype=np.float64)).copy()
    n = x0.shape[0]
    lo = hi = None
    if bounds is not None:
        lo = np.array([-np.inf if b[0] is None else b[0] for b in bounds], dtype=np.float64)
        hi = np.array([np.inf if b[1] is None else b[1] for b in bounds], dtype=np.float64)
    trace: list[tuple[int, np.ndarray, float]] = []

    def clamp(x):
        return np.clip(x, lo, hi) if lo is not None else x

    def evaluate(x):
        if len(trace) >= opts.max_evals:
            raise _Budget
        try:
            v = float(f(x.copy()))
        except (ArithmeticError, ValueError) as exc:
            log.debug("objective failed at %s: %s", x, exc)
            v = math.inf
        if not math.isfinite(v):
            v = math.inf
        trace.append((len(trace), x.copy(), v))
        return v

    x0 = clamp(x0)
    f0 = evaluate(x0)
    if not math.isfinite(f0):
        raise ValueError(f"objective is not finite at the starting point {x0}")
    simplex = [x0]
    values = [f0]
    converged = False
    try:
        for i in range(n):
            x = x0.copy()
            x[i] += max(opts.scale * abs(x0[i]), opts.min_step)
            x = clamp(x)
            simplex.append(x)
            values.append(evaluate(x))
        while True:
            order = np.argsort(values, kind="stable")
            simplex = [simplex[i] for i in order]
            values = [values[i] for i in order]
            if values[-1] - values[0] < opts.tol:
                # equal values at distinct points (e.g. either side of a minimum) are not convergence
                diam = max(np.max(np.abs(x - simplex[0])) for x in simplex[1:])
                if diam <= opts.xtol * max(1.0, float(np.max(np.abs(simplex[0])))):
                    converged = True
                    break
            centroid = np.mean(simplex[:-1], axis=0)
            worst = simplex[-1]
            xr = clamp(centroid + opts.alpha * (centroid - worst))
            fr = evaluate(xr)
            if values[0] <= fr < values[-2]:
                simplex[-1], values[-1] = xr, fr
                continue
            if fr < values[0]:
                xe = clamp(centroid + opts.gamma * (xr - centroid))
                fe = evaluate(xe)
                if fe < fr:
                    simplex[-1], values[-1] = xe, fe
                else:
                    simplex[-1], values[-1] = xr, fr
                continue
            if fr < values[-1]:
                xc = clamp(centroid + opts.rho * (xr - centroid))
                fc = evaluate(xc)
                if fc <= fr:
                    simplex[-1], values[-1] = xc, fc
                    continue
            else:
                xc = clamp(centroid + opts.rho * (worst - centroid))
                fc = evaluate(xc)
                if fc < values[-1]:
                    simplex[-1], values[-1] = xc, fc
                    continue
            best = simplex[0]
            for j in range(1, n + 1):
                simplex[j] = clamp(best + opts.sigma * (simplex[j] - best))
                values[j] = evaluate(simplex[j])
    except _Budget:
        pass
    # a budget stop can leave the best evaluated point outside the simplex
    k = int(np.argmin([f for _, _, f in trace]))
    return NelderMeadResult(trace[k][1].copy(), float(trace[k][2]), len(trace), converged, trace)


# -- calibration problems ----------------------------------------------------

@dataclass(frozen=True)
class CalibrationProblem:
    """Fit ``free`` parameters so ``output(record)`` matches ``targets``."""

    simulator: Simulator
    start: State
    free: tuple[str, ...]
    plan: RunPlan
    output: Callable[[SimulationRecord], Sequence[float]]
    targets: TargetTable
    bounds: Mapping[str, tuple[float | None, float | None]] = field(default_factory=dict)
    options: NelderMeadOptions = NelderMeadOptions(max_evals=200, tol=1e-8)
    objective: Callable[[TargetTable, Sequence[float]], float] = objective_wlsq_log

    def __post_init__(self):
        object.__setattr__(self, "free", tuple(self.free))
        unknown = [p for p in self.free if p not in self.start.domain.parameter_names]
        if unknown:
            raise ValueError(f"free parameter(s) {unknown} are not declared by the domain")

    def theta_at(self, x) -> dict[str, float]:
        theta = dict(self.start.theta)
        theta.update({k: float(v) for k, v in zip(self.free, np.atleast_1d(x))})
        return theta

    def evaluate(self, x) -> float:
        """Objective at free-parameter vector ``x`` (same seed every time)."""
        record = run(self.simulator, configure(self.start, self.theta_at(x)), self.plan)
        return self.objective(self.targets, self.output(record))


@dataclass
class CalibrationResult:
    theta: dict[str, float]
    fun: float
    free: tuple[str, ...]
    trace: list[tuple[int, np.ndarray, float]]
    converged: bool

    @property
    def best_so_far(self) -> np.ndarray:
        return np.minimum.accumulate(np.array([f for _, _, f in self.trace]))

    def write_trace(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["eval_index", *self.free, "f", "best_f"])
            best = math.inf
            for i, x, f in self.trace:
                best = min(best, f)
                w.writerow([i, *(repr(float(v)) for v in np.atleast_1d(x)), repr(f), repr(best)])


def calibrate(problem: CalibrationProblem) -> CalibrationResult:
    x0 = np.array([problem.start.theta[p] for p in problem.free], dtype=np.float64)

    def f(x):
        try:
            return problem.evaluate(x)
        except Exception as exc:  # a failed candidate is rejected, not fatal
            log.warning("calibration candidate %s rejected: %s", dict(zip(problem.free, x)), exc)
            return math.inf

    if not problem.free:
        value = f(x0)
        return CalibrationResult(dict(problem.start.theta), value, (), [(0, x0, value)], True)
    bounds = None
    if problem.bounds:
        bounds = [problem.bounds.get(p, (None, None)) for p in problem.free]
    res = nelder_mead(f, x0, problem.options, bounds)
    return CalibrationResult(problem.theta_at(res.x), res.fun, problem.free, res.trace, res.converged)


def write_theta(path, theta: Mapping[str, float]) -> None:
    Path(path).write_text("parameter,value\n" + "".join(f"{k},{float(v)!r}\n" for k, v in theta.items()))
