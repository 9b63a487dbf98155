import numpy as np
import pytest
from scipy.optimize import minimize
from scipy.special import expit, log_expit

from popsim.health.logistic import RankError, SeparationError, fit_logistic


def simulated(n=100_000, beta=(-1.0, 0.5), seed=2):
    rng = np.random.default_rng(seed)
    x = rng.normal(0, 1, n)
    y = (rng.uniform(size=n) < expit(beta[0] + beta[1] * x)).astype(float)
    return x, y


def test_known_coefficients_recovered():
    x, y = simulated()
    fit = fit_logistic(y, {"x": x})
    assert abs(fit["intercept"] + 1.0) <= 0.03 and abs(fit["x"] - 0.5) <= 0.03


def test_matches_generic_optimiser():
    x, y = simulated(5000, seed=8)
    X = np.column_stack([np.ones_like(x), x])

    def nll(b):
        eta = X @ b
        return -np.sum(y * log_expit(eta) + (1 - y) * log_expit(-eta))

    ref = minimize(nll, np.zeros(2), method="BFGS", options={"gtol": 1e-10})
    fit = fit_logistic(y, {"x": x})
    assert np.allclose(fit.coef, ref.x, atol=1e-5)
    # Wald SEs from the inverse information at the optimum
    p = expit(X @ fit.coef)
    cov = np.linalg.inv(X.T @ (X * (p * (1 - p))[:, None]))
    assert np.allclose(fit.se, np.sqrt(np.diag(cov)), rtol=1e-8)


def test_intercept_only_closed_form():
    y = np.array([1.0] * 25 + [0.0] * 75)
    fit = fit_logistic(y, {})
    assert abs(fit["intercept"] - np.log(1 / 3)) <= 1e-6


def test_confidence_interval_brackets_odds_ratio():
    x, y = simulated(2000)
    fit = fit_logistic(y, {"x": x})
    lo, hi = fit.ci
    assert np.all(lo < fit.odds_ratio) and np.all(fit.odds_ratio < hi)


def test_separation_names_column():
    z = np.array([0, 0, 1, 1, 0, 1, 0, 1], dtype=float)
    noise = np.arange(8, dtype=float)
    with pytest.raises(SeparationError) as err:
        fit_logistic(z, {"noise": noise, "flag": z})
    assert err.value.column == "flag"


def test_constant_outcome():
    with pytest.raises(SeparationError):
        fit_logistic(np.zeros(10), {"x": np.arange(10.0)})


def test_rank_deficiency_names_column():
    x, y = simulated(500)
    with pytest.raises(RankError) as err:
        fit_logistic(y, {"x": x, "x2": 2 * x})
    assert err.value.column == "x2"


def test_non_binary_outcome():
    with pytest.raises(ValueError, match="binary"):
        fit_logistic(np.array([0.0, 0.5, 1.0]), {})


def test_csv_table(tmp_path):
    x, y = simulated(500)
    fit = fit_logistic(y, {"x": x})
    fit.to_csv(tmp_path / "fit.csv")
    lines = (tmp_path / "fit.csv").read_text().splitlines()
    assert lines[0] == "term,estimate,se,OR,CI_low,CI_high" and len(lines) == 3
