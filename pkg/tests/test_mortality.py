import mpmath
import numpy as np
import pytest

from popsim.health.mortality import (LATE_TARGETS, alpha0_for, daily_fatality, fit_late_survival,
                                     fit_survival_weibull, late_cumulative_risk)

mpmath.mp.dps = 30


def mp_late_risk(a1, a2, a3, day, early_survival):
    """Cumulative risk by an explicit product of daily survivals."""
    a1, a2, a3 = mpmath.mpf(a1), mpmath.mpf(a2), mpmath.mpf(a3)
    log_s = mpmath.mpf(0)
    for k in range(1, day - 28 + 1):
        log_s += -mpmath.log1p(mpmath.exp(-(a1 + a2 * mpmath.exp(a3 * k))))
    return float(1 - mpmath.mpf(early_survival) * mpmath.exp(log_s))


def test_cumulative_risk_against_explicit_product():
    got = late_cumulative_risk(7.0, 0.5, -0.001, [28, 29, 400, 2000], 0.72)
    want = [mp_late_risk(7.0, 0.5, -0.001, d, 0.72) for d in (28, 29, 400, 2000)]
    assert np.allclose(got, want, rtol=1e-12, atol=0)
    assert got[0] == pytest.approx(0.28)


def test_round_trip_recovers_parameters():
    truth = (7.0, 0.5, -0.001)
    early = (1 - daily_fatality(0.28)) ** 28
    days = [d for d, _ in LATE_TARGETS]
    targets = list(zip(days, late_cumulative_risk(*truth, days, early)))
    fit = fit_late_survival(targets, x0=(6.0, 1.0, -2.0))
    for got, want in zip(fit.params, truth):
        assert abs(got - want) <= 0.02 * abs(want)


def test_default_targets_within_two_points():
    fit = fit_late_survival()
    early = (1 - daily_fatality(0.28)) ** 28
    days = [d for d, _ in LATE_TARGETS]
    pred = late_cumulative_risk(*fit.params, days, early)
    assert np.all(np.abs(pred - [r for _, r in LATE_TARGETS]) <= 0.02)
    assert fit.rss < 1e-4 and not fit.underdetermined


def test_single_target_is_flagged():
    fit = fit_late_survival([(365, 0.41)])
    assert fit.underdetermined


def test_alpha0_changes_early_survival():
    a = fit_late_survival(alpha0=alpha0_for(0.28))
    b = fit_late_survival()
    assert a.params == pytest.approx(b.params, rel=1e-9)


@pytest.mark.parametrize("targets", [[(365, 0.5), (100, 0.6)], [(365, 0.5), (700, 0.4)], [(20, 0.1)]])
def test_invalid_targets(targets):
    with pytest.raises(ValueError):
        fit_late_survival(targets)


def test_survival_weibull_reproduces_exact_curve():
    shape, scale = 0.6, 2000.0
    targets = [(d, 1 - np.exp(-(d / scale) ** shape)) for d, _ in LATE_TARGETS]
    got = fit_survival_weibull(targets)
    assert got == pytest.approx((shape, scale), rel=1e-5)
