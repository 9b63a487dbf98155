"""Interventions and counterfactual twin runs.

Three kinds:

* ``population-change`` - apply events (manipulation or accumulation) once at
  the scheduled step(s);
* ``policy`` - replace some parameters through the configuration function;
* ``do`` - force a variable to a constant on a target subset and keep it there.

Counterfactual runs reuse the simulator's seed, so every scenario sees the
same latent draws for the same (id, t, tag) and differences come only from
the interventions.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from .domain import (AccumulationEvent, DomainError, ManipulationEvent, Population, State,
                     apply_accumulation, apply_manipulation, configure)
from .engine import RunPlan, SimulationRecord, Simulator, run
from .streams import LatentDraws

KINDS = ("population-change", "policy", "do")


@dataclass(frozen=True)
class Intervention:
    kind: str
    at: int | tuple[int, ...] = 0
    events: tuple = ()
    theta: Mapping[str, float] = field(default_factory=dict)
    variable: str | None = None
    value: float = 0.0
    target: Callable[[Population], np.ndarray] | None = None
    name: str = ""

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown intervention kind {self.kind!r}")
        at = (self.at,) if isinstance(self.at, int) else tuple(int(s) for s in self.at)
        if any(s < 0 for s in at):
            raise ValueError("intervention steps must be >= 0")
        object.__setattr__(self, "at", at)
        object.__setattr__(self, "events", tuple(self.events))
        if self.kind == "do" and self.variable is None:
            raise ValueError("do-intervention needs a variable")
        if self.kind == "do" and len(at) != 1:
            raise ValueError("do-intervention takes a single start step")

    def check(self, domain, horizon: int | None = None) -> None:
        if horizon is not None and any(s > horizon for s in self.at):
            raise ValueError(f"intervention {self.name or self.kind!r} scheduled beyond horizon {horizon}")
        if self.kind == "do":
            domain.kind(self.variable)
        if self.kind == "policy":
            unknown = [k for k in self.theta if k not in domain.parameter_names]
            if unknown:
                raise DomainError(f"policy changes undeclared parameter(s) {unknown}")

    def activate(self) -> "_Active":
        return _Active(self)


def _target_mask(iv: Intervention, pop: Population) -> np.ndarray:
    if iv.target is None:
        return np.ones(pop.n, dtype=bool)
    mask = np.asarray(iv.target(pop), dtype=bool)
    if mask.shape != (pop.n,):
        raise DomainError("do-intervention target predicate must return one flag per row")
    return mask


def intervene(state: State, iv: Intervention, psi: LatentDraws, t: int) -> State:
    """Apply ``iv`` to ``state`` at step ``t`` (which must be on its schedule)."""
    if t not in iv.at:
        raise ValueError(f"intervention {iv.name or iv.kind!r} is not scheduled at step {t}")
    iv.check(state.domain)
    if iv.kind == "policy":
        return configure(state, {**state.theta, **iv.theta})
    pop = state.population
    if iv.kind == "do":
        mask = _target_mask(iv, pop)
        col = pop[iv.variable].copy()
        col[mask] = iv.value
        return State(pop.replace({iv.variable: col}), state.theta)
    for ev in iv.events:
        if isinstance(ev, AccumulationEvent):
            pop = apply_accumulation(ev, pop, state.theta, psi, t)
        elif isinstance(ev, ManipulationEvent):
            pop = apply_manipulation(ev, pop, state.theta, psi, t)
        else:
            raise TypeError(f"not an event: {ev!r}")
    return State(pop, state.theta)


class _Active:
    """Per-run bookkeeping; the do-kind remembers which ids it targets."""

    def __init__(self, iv: Intervention):
        self.iv = iv
        self.targets: np.ndarray | None = None

    def due(self, t: int) -> bool:
        return t in self.iv.at

    def apply(self, state: State, psi: LatentDraws, t: int) -> State:
        if self.iv.kind == "do":
            self.targets = np.sort(state.population.ids[_target_mask(self.iv, state.population)])
        return intervene(state, self.iv, psi, t)

    def reassert(self, pop: Population, t: int) -> Population:
        if self.iv.kind != "do" or self.targets is None or t <= self.iv.at[0] or pop.n == 0:
            return pop
        mask = np.isin(pop.ids, self.targets, assume_unique=True)
        col = pop[self.iv.variable]
        if not mask.any() or np.all(col[mask] == self.iv.value):
            return pop
        col = col.copy()
        col[mask] = self.iv.value
        return pop.replace({self.iv.variable: col})


@dataclass(frozen=True)
class Scenario:
    name: str
    plan: RunPlan
    interventions: tuple[Intervention, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "interventions", tuple(self.interventions))


def run_scenario(sim: Simulator, start: State, scenario: Scenario) -> SimulationRecord:
    for iv in scenario.interventions:
        iv.check(start.domain, scenario.plan.horizon)
    return run(sim, start, scenario.plan, [iv.activate() for iv in scenario.interventions])


def run_counterfactuals(sim: Simulator, start: State, scenarios: Sequence[Scenario]) -> list[SimulationRecord]:
    """Run every scenario from the same start state with the same latent draws."""
    return [run_scenario(sim, start, sc) for sc in scenarios]


# -- salt interventions ----------------------------------------------------

def _alive_mask(rows: Population) -> np.ndarray:
    alive = rows.domain.alive
    return rows[alive] == 1.0 if alive else np.ones(rows.n, dtype=bool)


def salt_industry_event(reduction: float = 0.97, sbp: str = "sbp") -> ManipulationEvent:
    """Lower salt content in food: everyone's systolic pressure drops by ``reduction`` mmHg."""

    def mechanism(rows, theta, draws, t):
        return {sbp: np.where(_alive_mask(rows), rows[sbp] - reduction, rows[sbp])}

    return ManipulationEvent("salt-industry", mechanism, description="1 g/day lower sodium intake for all")


def salt_advice_event(reduction: float = 2.0, threshold: float = 140.0, compliance: float = 0.5,
                      sbp: str = "sbp", complier: str | None = "salt_complier") -> ManipulationEvent:
    """Advice to stop adding salt, given to people with SBP >= ``threshold``.

    Compliance is a single Bernoulli draw per individual (tag ``salt-advice``)
    and is stored in ``complier`` when the domain declares it.
    """

    def mechanism(rows, theta, draws, t):
        u = draws.uniform()
        complies = _alive_mask(rows) & (rows[sbp] >= threshold) & (u < compliance)
        out = {sbp: np.where(complies, rows[sbp] - reduction, rows[sbp])}
        if complier is not None and rows.domain.has(complier):
            out[complier] = np.where(complies, 1.0, rows[complier])
        return out

    return ManipulationEvent("salt-advice", mechanism,
                             description="stop adding salt; applies to compliers with high blood pressure")


def salt_industry(state: State, reduction: float = 0.97) -> State:
    ev = salt_industry_event(reduction)
    return State(apply_manipulation(ev, state.population, state.theta, LatentDraws(0), 0), state.theta)


def salt_advice(state: State, psi: LatentDraws, t: int = 0, reduction: float = 2.0) -> State:
    ev = salt_advice_event(reduction)
    return State(apply_manipulation(ev, state.population, state.theta, psi, t), state.theta)


def industry_intervention(at: int = 0, reduction: float = 0.97) -> Intervention:
    return Intervention("population-change", at, events=(salt_industry_event(reduction),), name="industry")


def advice_intervention(at: int = 0, reduction: float = 2.0, compliance: float = 0.5,
                        threshold: float = 140.0) -> Intervention:
    return Intervention("population-change", at,
                        events=(salt_advice_event(reduction, threshold, compliance),), name="advice")
