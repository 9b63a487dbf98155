"""The follow-up study with selective non-participation, and the salt scenarios."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from ..domain import Population, State
from ..engine import RunPlan, SimulationRecord, Simulator, run
from ..interventions import Scenario, advice_intervention, industry_intervention, run_counterfactuals
from ..sampler import (OUTCOME_SUFFIX, Design, MissingnessMechanism, Sample, apply_missingness, draw_sample,
                       follow_up, logistic_probability)
from .logistic import LogisticFit, fit_logistic
from .model import DATA, STROKE_TERMS, read_coefficients

NONPARTICIPATION_TERMS = ("sex", "age", "bmi", "smoking", "waist")
BASELINE_COLUMNS = ("sex", "age", "bmi", "waist", "chol", "hdl", "sbp", "smoking", "diabetes",
                    "parents_stroke", "bp_med", "high_glucose")
OUTCOMES = ("stroke", "stroke_day", "alive", "death_day", "death_stroke")
REFERENCE_POPULATION = 3_600_000
REFERENCE_INVITEES = 10_000
PER = 100_000.0


def nonparticipation_coefficients(path=None) -> dict[str, float]:
    coefs = read_coefficients(path or DATA / "nonparticipation.csv")
    expected = {"intercept", *NONPARTICIPATION_TERMS}
    if set(coefs) != expected:
        raise ValueError(f"non-participation coefficients need exactly {sorted(expected)}")
    return coefs


def nonparticipation_prob(row: Mapping[str, float], rho) -> float:
    """P(non-participation) for one row; ``rho`` is a mapping or (intercept, sex, age, bmi, smoking, waist)."""
    if not isinstance(rho, Mapping):
        rho = dict(zip(("intercept",) + NONPARTICIPATION_TERMS, rho, strict=True))
    terms = {k: rho[k] for k in NONPARTICIPATION_TERMS}
    return logistic_probability(row, rho["intercept"], terms)


def nonparticipation_mechanism(coefs: Mapping[str, float] | None = None) -> MissingnessMechanism:
    """Unit nonresponse at baseline from the logistic model on sex (1 = woman), age, BMI, smoking and waist."""
    coefs = dict(coefs or nonparticipation_coefficients())
    intercept = coefs.pop("intercept")
    return MissingnessMechanism("MAR", intercept=intercept, coefficients=coefs, scope="row",
                                tag="nonparticipation")


def scaled_invitees(population_size: int, invitees: int = REFERENCE_INVITEES,
                    reference: int = REFERENCE_POPULATION) -> int:
    """Invitation count keeping the reference sampling fraction."""
    return int(round(invitees * population_size / reference))


def prior_stroke(pop: Population) -> np.ndarray:
    return pop["stroke"] == 1.0


@dataclass(frozen=True)
class StudyDesign:
    invitees: int
    horizon: int = 3650
    nonparticipation: Mapping[str, float] = field(default_factory=nonparticipation_coefficients)
    exclude_prior_stroke: bool = True

    def sampling_design(self) -> Design:
        return Design(n=self.invitees, exclude=prior_stroke if self.exclude_prior_stroke else None)


def days_at_risk(final: Population, horizon: int) -> np.ndarray:
    """Days from the start until the first stroke, death or the end of follow-up."""
    end = np.full(final.n, float(horizon))
    died = final["alive"] == 0.0
    end = np.where(died, np.minimum(end, final["death_day"]), end)
    struck = (final["stroke"] == 1.0) & (final["stroke_day"] > 0)
    return np.where(struck, np.minimum(end, final["stroke_day"]), end)


def incidence(new_stroke: np.ndarray, days: np.ndarray) -> float:
    """New strokes per 100 000 person-years."""
    years = float(np.sum(days)) / 365.0
    return PER * float(np.count_nonzero(new_stroke)) / years if years > 0 else float("nan")


@dataclass
class StudyResult:
    sample: Sample
    population_incidence: float
    sample_incidence: float
    invited_incidence: float
    start: Population
    final: Population

    @property
    def participants(self) -> int:
        return int(self.sample.participated.sum())


def _positions(ids: np.ndarray, wanted: np.ndarray) -> np.ndarray:
    return np.searchsorted(ids, wanted)


def run_study(sim: Simulator, start: State, design: StudyDesign, record: SimulationRecord | None = None,
              partitions: int = 1) -> StudyResult:
    """Invite, measure at baseline, lose non-participants and follow everyone up.

    Incidence is computed among those stroke-free at baseline, for the whole
    population, for the participants and for all invitees.
    """
    pop = start.population
    psi = sim.psi
    invitees = draw_sample(pop, design.sampling_design(), psi)
    baseline = Sample.from_population(pop, invitees, BASELINE_COLUMNS)
    coefs = dict(design.nonparticipation)
    if coefs:
        baseline = apply_missingness(baseline, nonparticipation_mechanism(coefs), None, psi)
    if record is None:
        record = run(sim, start, RunPlan(design.horizon, partitions=partitions))
    sample = follow_up(sim, start, baseline, OUTCOMES, design.horizon, record=record)
    final = record.final.population
    at_start = final.ids < pop.next_id
    free = at_start & ~np.isin(final.ids, pop.ids[prior_stroke(pop)])
    new = free & (final["stroke"] == 1.0)
    days = days_at_risk(final, design.horizon)
    pos = _positions(final.ids, sample.ids)
    part = sample.participated
    return StudyResult(sample, incidence(new[free], days[free]), incidence(new[pos][part], days[pos][part]),
                       incidence(new[pos], days[pos]), pop, final)


# -- odds-ratio comparison -----------------------------------------------------

COLUMNS = {"A": "sample with baseline non-response", "B": "sample without non-participation",
           "C": "entire synthetic population"}


def _stroke_fit(base: Mapping[str, np.ndarray], outcome: np.ndarray, sex: int) -> LogisticFit:
    keep = base["sex"] == sex
    return fit_logistic(outcome[keep], {k: base[k][keep] for k in STROKE_TERMS})


def odds_ratio_fits(result: StudyResult, sex: int) -> dict[str, LogisticFit]:
    """10-year stroke models for one sex (0 = man, 1 = woman) fitted to A, B and C."""
    s = result.sample
    stroke_end = s.values["stroke" + OUTCOME_SUFFIX]
    base_all = {k: s.values[k] for k in BASELINE_COLUMNS}
    fits = {"A": None, "B": _stroke_fit(base_all, stroke_end, sex)}
    _, base_a = s.complete(BASELINE_COLUMNS + ("stroke" + OUTCOME_SUFFIX,))
    fits["A"] = _stroke_fit(base_a, base_a["stroke" + OUTCOME_SUFFIX], sex)
    start, final = result.start, result.final
    free = ~prior_stroke(start)
    pos = _positions(final.ids, start.ids[free])
    base_c = {k: start[k][free] for k in BASELINE_COLUMNS}
    fits["C"] = _stroke_fit(base_c, final["stroke"][pos], sex)
    return fits


def odds_ratio_table(fits: Mapping[str, LogisticFit], truth: Mapping[str, float] | None = None) -> list[dict]:
    """One row per term: true OR (if given) and OR with CI for each fitted column."""
    rows = []
    for term in STROKE_TERMS:
        row = {"term": term}
        if truth is not None:
            row["true_OR"] = float(np.exp(truth[term]))
        for col, fit in fits.items():
            i = fit.terms.index(term)
            lo, hi = fit.ci
            row[f"{col}_OR"] = float(fit.odds_ratio[i])
            row[f"{col}_CI_low"] = float(lo[i])
            row[f"{col}_CI_high"] = float(hi[i])
        rows.append(row)
    return rows


# -- salt interventions --------------------------------------------------------

SALT_SCENARIOS = ("baseline", "industry", "advice")


def salt_scenarios(horizon: int, names: Sequence[str] = SALT_SCENARIOS, partitions: int = 1) -> list[Scenario]:
    plan = RunPlan(horizon, partitions=partitions)
    library = {"baseline": (), "industry": (industry_intervention(0),), "advice": (advice_intervention(0),)}
    unknown = [k for k in names if k not in library]
    if unknown:
        raise ValueError(f"unknown scenario(s) {unknown}; available: {sorted(library)}")
    return [Scenario(k, plan, library[k]) for k in names]


def new_strokes(start: Population, record: SimulationRecord) -> int:
    return int(np.count_nonzero(record.final.population["stroke"])) - int(np.count_nonzero(start["stroke"]))


def compare_salt(sim: Simulator, start: State, horizon: int, replications: int,
                 names: Sequence[str] = SALT_SCENARIOS, first_seed: int | None = None,
                 partitions: int = 1) -> list[tuple[str, np.ndarray]]:
    """Total new strokes per scenario and replication, in the order of ``names``.

    Every replication starts from the same population; replication r uses
    the simulator seed ``first_seed + r`` for all scenarios alike.
    """
    first_seed = sim.seed if first_seed is None else first_seed
    scenarios = salt_scenarios(horizon, names, partitions)
    counts = np.empty((len(scenarios), replications), dtype=np.int64)
    for r in range(replications):
        records = run_counterfactuals(sim.with_seed(first_seed + r), start, scenarios)
        for j, rec in enumerate(records):
            counts[j, r] = new_strokes(start.population, rec)
    return [(sc.name, counts[j]) for j, sc in enumerate(scenarios)]
