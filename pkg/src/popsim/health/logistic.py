"""Maximum-likelihood logistic regression by iteratively reweighted least squares."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Mapping

import numpy as np
from scipy.special import expit, log_expit

Z95 = 1.959963984540054


class SeparationError(ValueError):
    """The likelihood has no finite maximiser because ``column`` separates the outcome."""

    def __init__(self, column: str, detail: str):
        super().__init__(f"outcome is separated by {column!r}: {detail}")
        self.column = column


class RankError(ValueError):
    def __init__(self, column: str):
        super().__init__(f"design matrix is rank deficient: {column!r} is a linear combination of earlier columns")
        self.column = column


@dataclass(frozen=True)
class LogisticFit:
    terms: tuple[str, ...]
    coef: np.ndarray
    se: np.ndarray
    iterations: int
    n: int

    @property
    def odds_ratio(self) -> np.ndarray:
        return np.exp(self.coef)

    @property
    def ci(self) -> tuple[np.ndarray, np.ndarray]:
        return np.exp(self.coef - Z95 * self.se), np.exp(self.coef + Z95 * self.se)

    def __getitem__(self, term: str) -> float:
        return float(self.coef[self.terms.index(term)])

    def table(self) -> list[dict]:
        lo, hi = self.ci
        return [{"term": t, "estimate": float(b), "se": float(s), "OR": float(o), "CI_low": float(a),
                 "CI_high": float(c)} for t, b, s, o, a, c in zip(self.terms, self.coef, self.se,
                                                                  self.odds_ratio, lo, hi)]

    def to_csv(self, path) -> None:
        rows = self.table()
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(rows[0]) if rows else ["term"], lineterminator="\n")
            w.writeheader()
            w.writerows(rows)


def _check_rank(X: np.ndarray, names: list[str]) -> None:
    # add columns one by one; the first that does not raise the rank is the culprit
    scale = np.maximum(np.abs(X).max(axis=0), 1e-300)
    Xs = X / scale
    for j in range(X.shape[1]):
        if np.linalg.matrix_rank(Xs[:, : j + 1]) <= j:
            raise RankError(names[j])


def _check_binary_separation(y: np.ndarray, X: np.ndarray, names: list[str]) -> None:
    # an empty cell in the 2x2 table of a binary covariate against the outcome
    for j, name in enumerate(names):
        x = X[:, j]
        if name == "intercept" or not np.all((x == 0.0) | (x == 1.0)):
            continue
        for xv in (0.0, 1.0):
            at = x == xv
            if at.any() and np.all(y[at] == y[at][0]):
                raise SeparationError(name, f"every row with {name}={xv:g} has outcome {y[at][0]:g}")


def fit_logistic(y, covariates: Mapping[str, np.ndarray], max_iter: int = 100, tol: float = 1e-10,
                 intercept: bool = True) -> LogisticFit:
    """Fit P(y = 1) = expit(b0 + sum b_k x_k).

    Newton-Raphson (equivalently IRLS) with step halving whenever the
    log-likelihood would fall.  Standard errors come from the inverse
    observed information; confidence intervals are Wald intervals on the
    log-odds scale.
    """
    y = np.asarray(y, dtype=np.float64)
    if not np.all((y == 0.0) | (y == 1.0)):
        raise ValueError("outcome must be binary")
    names = (["intercept"] if intercept else []) + list(covariates)
    cols = ([np.ones_like(y)] if intercept else []) + [np.asarray(covariates[k], dtype=np.float64)
                                                        for k in covariates]
    if not cols:
        raise ValueError("no terms in the model")
    X = np.column_stack(cols)
    if X.shape[0] != y.shape[0]:
        raise ValueError("covariates and outcome differ in length")
    if not np.isfinite(X).all():
        raise ValueError("covariates contain non-finite values")
    if y.shape[0] == 0:
        raise ValueError("no observations")
    if np.all(y == y[0]):
        raise SeparationError("intercept", f"every outcome equals {y[0]:g}")
    _check_rank(X, names)
    _check_binary_separation(y, X, names)

    def loglik(b):
        eta = X @ b
        return float(np.sum(y * log_expit(eta) + (1.0 - y) * log_expit(-eta)))

    beta = np.zeros(X.shape[1])
    if intercept:
        beta[0] = np.log(y.mean() / (1.0 - y.mean()))
    ll = loglik(beta)
    for it in range(1, max_iter + 1):
        p = expit(X @ beta)
        w = p * (1.0 - p)
        info = X.T @ (X * w[:, None])
        step = np.linalg.solve(info, X.T @ (y - p))
        scale = 1.0
        while True:
            trial = beta + scale * step
            ll_trial = loglik(trial)
            if ll_trial >= ll - 1e-12 * abs(ll) or scale < 1e-10:
                break
            scale *= 0.5
        beta, ll = trial, ll_trial
        if np.max(np.abs(scale * step) / (1.0 + np.abs(beta))) < tol:
            break
        if np.max(np.abs(beta)) > 1e3 or w.min() == 0.0:
            k = int(np.argmax(np.abs(beta[1:])) + 1) if intercept and len(beta) > 1 else int(np.argmax(np.abs(beta)))
            raise SeparationError(names[k], "coefficients diverge")
    else:
        k = int(np.argmax(np.abs(beta)))
        raise SeparationError(names[k], f"no convergence within {max_iter} iterations")
    p = expit(X @ beta)
    info = X.T @ (X * (p * (1.0 - p))[:, None])
    se = np.sqrt(np.diag(np.linalg.inv(info)))
    return LogisticFit(tuple(names), beta, se, it, int(y.shape[0]))
