import mpmath
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from popsim.domain import ManipulationEvent, Population, RowUpdate, SimulationDomain, State, Variable
from popsim.engine import Simulator
from popsim.health.study import nonparticipation_coefficients, nonparticipation_prob
from popsim.sampler import (Design, MaskedValueError, MeasurementError, MissingnessMechanism, Sample,
                            apply_error, apply_missingness, draw_sample, follow_up)
from popsim.streams import LatentDraws

# expit of the hand-summed linear predictors, at 30 digits
mpmath.mp.dps = 30
MAN_NONPARTICIPATION = float(1 / (1 + mpmath.exp(mpmath.mpf("0.64"))))
WOMAN_NONPARTICIPATION = float(1 / (1 + mpmath.exp(mpmath.mpf("0.95"))))


def people(n, seed=0):
    rng = np.random.default_rng(seed)
    d = SimulationDomain((Variable("alive", "binary"), Variable("sex", "binary"), Variable("age", "real"),
                          Variable("x", "real")))
    return Population(d, {"alive": np.ones(n), "sex": (np.arange(n) % 2).astype(float),
                          "age": rng.uniform(30, 90, n), "x": rng.normal(0, 1, n)})


class TestDraw:
    def test_everyone(self):
        pop = people(30)
        assert np.array_equal(draw_sample(pop, Design(n=30), LatentDraws(1)), pop.ids)

    def test_single(self):
        pop = people(1)
        assert draw_sample(pop, Design(n=1), LatentDraws(1)).tolist() == [0]

    def test_stratified_counts(self):
        pop = people(100)
        ids = draw_sample(pop, Design(strata="sex", sizes={0: 5, 1: 5}), LatentDraws(1))
        sex = pop["sex"][ids.astype(int)]
        assert (sex == 0).sum() == 5 and (sex == 1).sum() == 5

    def test_oversampling_stratum(self):
        with pytest.raises(ValueError, match="stratum"):
            draw_sample(people(10), Design(strata="sex", sizes={0: 6}), LatentDraws(1))

    def test_oversampling_population(self):
        with pytest.raises(ValueError):
            draw_sample(people(10), Design(n=11), LatentDraws(1))

    def test_exclusion_before_sampling(self):
        pop = people(50)
        ids = draw_sample(pop, Design(n=25, exclude=lambda p: p["sex"] == 1.0), LatentDraws(2))
        assert np.all(pop["sex"][ids.astype(int)] == 0.0) and ids.shape[0] == 25

    @given(st.permutations(list(range(20))), st.integers(0, 20))
    @settings(max_examples=25, deadline=None)
    def test_row_order_does_not_matter(self, perm, k):
        pop = people(20)
        a = draw_sample(pop, Design(n=k), LatentDraws(5))
        b = draw_sample(pop.take(np.array(perm)), Design(n=k), LatentDraws(5))
        assert np.array_equal(a, b) and np.unique(a).shape[0] == k


class TestNonparticipation:
    def test_zero_coefficients(self):
        assert nonparticipation_prob({"sex": 1, "age": 50, "bmi": 30, "smoking": 0, "waist": 80}, [0] * 6) == 0.5

    def test_default_coefficients(self):
        rho = nonparticipation_coefficients()
        man = {"sex": 0, "age": 60, "bmi": 25, "smoking": 1, "waist": 95}
        assert nonparticipation_prob(man, rho) == pytest.approx(MAN_NONPARTICIPATION, rel=1e-12)
        assert abs(nonparticipation_prob(man, rho) - 0.3452) < 1e-4
        woman = dict(man, sex=1)
        assert nonparticipation_prob(woman, rho) == pytest.approx(WOMAN_NONPARTICIPATION, rel=1e-12)

    def test_increasing_in_age(self):
        rho = nonparticipation_coefficients()
        row = {"sex": 1, "bmi": 27, "smoking": 0, "waist": 88}
        probs = [nonparticipation_prob(dict(row, age=a), rho) for a in range(30, 100, 5)]
        assert np.all(np.diff(probs) > 0)


class TestMissingness:
    def sample(self, n=10_000):
        return Sample.from_population(people(n, 3), np.arange(n, dtype=np.uint64))

    def test_mcar_zero_and_one(self):
        s = self.sample(100)
        none = apply_missingness(s, MissingnessMechanism("MCAR", 0.0), ["x"], LatentDraws(1))
        every = apply_missingness(s, MissingnessMechanism("MCAR", 1.0), ["x"], LatentDraws(1))
        assert not none.mask["x"].any() and every.mask["x"].all() and not every.mask["age"].any()

    def test_mcar_fraction(self):
        s = apply_missingness(self.sample(), MissingnessMechanism("MCAR", 0.3), ["x"], LatentDraws(2))
        assert abs(s.mask["x"].mean() - 0.3) <= 0.014

    def test_mcar_independent_of_data(self):
        s = apply_missingness(self.sample(), MissingnessMechanism("MCAR", 0.3), ["x"], LatentDraws(4))
        m = s.mask["x"].astype(float)
        for col in ("x", "age", "sex"):
            r = np.corrcoef(m, s.values[col])[0, 1]
            assert abs(r) < 3 / np.sqrt(s.n)

    def test_mar_depends_on_predictor(self):
        mech = MissingnessMechanism("MAR", intercept=-6.0, coefficients={"age": 0.1})
        s = apply_missingness(self.sample(), mech, ["x"], LatentDraws(4))
        old = s.values["age"] > 60
        assert s.mask["x"][old].mean() > s.mask["x"][~old].mean() + 0.2

    def test_mar_cannot_mask_its_predictor(self):
        mech = MissingnessMechanism("MAR", intercept=-1.0, coefficients={"x": 0.5})
        with pytest.raises(ValueError, match="MNAR"):
            apply_missingness(self.sample(10), mech, ["x"], LatentDraws(1))
        MissingnessMechanism("MNAR", intercept=-1.0, coefficients={"x": 0.5})  # allowed as MNAR

    def test_mar_needs_observed_predictor(self):
        s = apply_missingness(self.sample(100), MissingnessMechanism("MCAR", 0.5), ["age"], LatentDraws(1))
        mech = MissingnessMechanism("MAR", intercept=-1.0, coefficients={"age": 0.01})
        with pytest.raises(ValueError, match="fully observed"):
            apply_missingness(s, mech, ["x"], LatentDraws(1))

    def test_unit_nonresponse_masks_rows(self):
        mech = MissingnessMechanism("MCAR", 0.4, scope="row")
        s = apply_missingness(self.sample(1000), mech, None, LatentDraws(6))
        lost = ~s.participated
        assert 0.3 < lost.mean() < 0.5
        for k in s.columns:
            assert np.array_equal(s.mask[k], lost)
        assert s.n == 1000  # invitees are kept

    def test_masked_cells_are_unreadable_but_kept(self):
        s = self.sample(50)
        masked = apply_missingness(s, MissingnessMechanism("MCAR", 0.5), ["x"], LatentDraws(7))
        i = int(np.flatnonzero(masked.mask["x"])[0])
        with pytest.raises(MaskedValueError):
            masked.value("x", i)
        assert np.isnan(masked.observed("x")[i])
        assert np.array_equal(masked.unmasked()["x"], s.values["x"])

    def test_deterministic(self):
        mech = MissingnessMechanism("MCAR", 0.3)
        a = apply_missingness(self.sample(500), mech, ["x"], LatentDraws(9))
        b = apply_missingness(self.sample(500), mech, ["x"], LatentDraws(9))
        assert np.array_equal(a.mask["x"], b.mask["x"])


class TestError:
    def sample(self, x):
        x = np.asarray(x, dtype=float)
        ids = np.arange(x.shape[0], dtype=np.uint64)
        return Sample(ids, {"x": x}, {"x": np.zeros(x.shape[0], bool)}, np.ones(x.shape[0], bool))

    def test_none(self):
        s = self.sample([1.0, 2.0])
        assert apply_error(s, "x", MeasurementError(), LatentDraws(0)) is s

    def test_rounding(self):
        s = apply_error(self.sample([3.7, 2.5, -0.5, 1.2]), "x", MeasurementError("round", 1.0), LatentDraws(0))
        assert s.values["x"].tolist() == [4.0, 3.0, 0.0, 1.0]

    def test_normal_error_moments(self):
        s = apply_error(self.sample(np.full(10_000, 10.0)), "x", MeasurementError("normal", 2.0), LatentDraws(3))
        x = s.values["x"]
        assert abs(x.mean() - 10.0) <= 0.06
        assert abs(x.std(ddof=1) - 2.0) <= 0.05

    def test_masked_cells_untouched(self):
        s = self.sample(np.full(100, 10.0))
        s = Sample(s.ids, s.values, {"x": np.arange(100) % 2 == 0}, s.participated)
        out = apply_error(s, "x", MeasurementError("normal", 1.0), LatentDraws(3))
        assert np.all(out.values["x"][::2] == 10.0) and np.all(out.values["x"][1::2] != 10.0)


class TestFollowUp:
    def setup_method(self):
        d = SimulationDomain((Variable("alive", "binary"), Variable("stroke", "binary"),
                              Variable("stroke_day", "integer")))
        self.pop = Population(d, {"alive": np.ones(3), "stroke": np.zeros(3), "stroke_day": np.zeros(3)})

        def forced(rows, theta, draws, t):
            if t != 100:
                return {}
            hit = np.flatnonzero(rows.ids == 1)
            return {"stroke": RowUpdate(hit, 1.0), "stroke_day": RowUpdate(hit, 100.0)}

        self.sim = Simulator(d, (ManipulationEvent("forced", forced),), seed=1)

    def test_forced_stroke_is_recorded(self):
        base = Sample.from_population(self.pop, [0, 1])
        out = follow_up(self.sim, State(self.pop, {}), base, ["stroke", "stroke_day"], 150)
        assert out.values["stroke_end"].tolist() == [0.0, 1.0]
        assert out.values["stroke_day_end"].tolist() == [0.0, 100.0]

    def test_zero_invitees(self):
        base = Sample.from_population(self.pop, [])
        out = follow_up(self.sim, State(self.pop, {}), base, ["stroke"], 5)
        assert out.n == 0 and "stroke_end" in out.values

    def test_nonparticipants_have_masked_outcomes(self):
        base = Sample.from_population(self.pop, [0, 1, 2])
        base = Sample(base.ids, base.values, base.mask, np.array([True, False, True]))
        out = follow_up(self.sim, State(self.pop, {}), base, ["stroke"], 120)
        assert out.mask["stroke_end"].tolist() == [False, True, False]
        assert out.unmasked()["stroke_end"][1] == 1.0
