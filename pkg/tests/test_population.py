from dataclasses import replace

import numpy as np
import pytest
from scipy.special import expit

from popsim.health.population import (AGE_GROUPS, RISK_FACTORS, InitConfig, Subgroup, age_group, boxcox,
                                      init_population, inv_boxcox, prevalence_scale)


@pytest.fixture(scope="module")
def big(theta):
    cfg = InitConfig(n=100_000)
    return cfg, init_population(cfg, theta, seed=3)


def test_empty(theta):
    assert init_population(InitConfig(n=0), theta, 1).n == 0


def test_degenerate_config_gives_identical_rows(theta):
    point = np.array([24.0, 88.0, 5.2, 1.3, 128.0])
    lams = (-0.5, 0.0, 0.5, 0.0, -1.0)
    sg = Subgroup(np.array([boxcox(x, lam) for x, lam in zip(point, lams)]), np.zeros((5, 5)))
    cfg = InitConfig(n=50, women_share=0.0, age_edges=(52.0, 52.0), age_weights={0: [1.0], 1: [1.0]},
                     subgroups={(s, g, k): sg for s in (0, 1) for g in range(len(AGE_GROUPS)) for k in (0, 1)},
                     smoking={0: (0.0,) * 6, 1: (0.0,) * 6}, parents_stroke=0.0,
                     bp_med={0: (0.0,) * 6, 1: (0.0,) * 6}, high_glucose=(0.0,) * 6,
                     diabetes_prevalence=(0.0, 0.0), prior_stroke=(0.0,) * 6)
    pop = init_population(cfg, theta, 9)
    for name in pop:
        assert np.unique(pop[name]).shape[0] == 1, name
    assert np.allclose([pop[k][0] for k in RISK_FACTORS], point, rtol=1e-12)
    assert pop["age"][0] == 52.0


def test_deterministic(theta):
    a = init_population(InitConfig(n=500), theta, 4)
    b = init_population(InitConfig(n=500), theta, 4)
    assert a.identical(b)
    assert not a.identical(init_population(InitConfig(n=500), theta, 5))


def test_non_psd_covariance_rejected():
    cov = np.eye(5)
    cov[0, 0] = -1.0
    bad = dict(InitConfig().subgroups)
    bad[(0, 0, 0)] = Subgroup(np.zeros(5), cov)
    with pytest.raises(ValueError, match="positive semi-definite"):
        InitConfig(subgroups=bad)


@pytest.mark.parametrize("field,value", [("women_share", 1.5), ("parents_stroke", -0.1), ("n", -1),
                                         ("age_edges", (20.0, 30.0)), ("prior_stroke_weibull", (0.0, 1.0))])
def test_invalid_config(field, value):
    with pytest.raises(ValueError):
        replace(InitConfig(), **{field: value})


def test_basic_shape(big):
    cfg, pop = big
    assert pop["age"].min() >= 30.0
    assert abs(pop["sex"].mean() - 0.5) < 0.01
    for j, name in enumerate(RISK_FACTORS):
        lo, hi = cfg.ranges[j]
        assert pop[name].min() >= lo and pop[name].max() <= hi


def test_subgroup_means_on_transformed_scale(big):
    cfg, pop = big
    group = age_group(pop["age"])
    j = RISK_FACTORS.index("sbp")
    lam = cfg.boxcox[j]
    z = boxcox(pop["sbp"], lam)
    checked = 0
    for (sex, g, smoker), sg in cfg.subgroups.items():
        rows = (pop["sex"] == sex) & (group == g) & (pop["smoking"] == smoker)
        n = int(rows.sum())
        if n < 30:
            continue
        sd = np.sqrt(sg.cov[j, j])
        assert abs(z[rows].mean() - sg.mean[j]) <= 3 * sd / np.sqrt(n), (sex, g, smoker)
        checked += 1
    assert checked >= 20


def test_diabetes_prevalence_by_sex(big):
    cfg, pop = big
    for sex, target in enumerate(cfg.diabetes_prevalence):
        rows = pop["sex"] == sex
        p = pop["diabetes"][rows].mean()
        assert abs(p - target) < 4 * np.sqrt(target * (1 - target) / rows.sum())


def test_prior_strokes_happened_after_thirty(big):
    _, pop = big
    had = pop["stroke"] == 1.0
    assert had.any()
    assert np.all(pop["stroke_day"][had] <= 0)
    age_at_stroke = pop["age"][had] + pop["stroke_day"][had] / 365.0
    assert age_at_stroke.min() >= 30.0 - 1 / 365


def test_boxcox_round_trip():
    x = np.linspace(0.5, 300, 50)
    for lam in (-1.0, -0.5, 0.0, 0.5, 1.0):
        assert np.allclose(inv_boxcox(boxcox(x, lam), lam), x, rtol=1e-12)


def test_prevalence_scale_hits_target():
    risk = expit(np.random.default_rng(1).normal(-2, 1, 10_000))
    c = prevalence_scale(risk, 0.15)
    assert np.mean(np.minimum(c * risk, 1.0)) == pytest.approx(0.15, rel=1e-9)
