"""Simulation runs: sequences of transitions over a partitioned population."""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from .domain import (AccumulationEvent, DomainError, EventOrder, ManipulationEvent, Population,
                     SimulationDomain, SimulationError, State, accumulate, concat, manipulate)
from .streams import LatentDraws

log = logging.getLogger(__name__)

# a tracker maps (rows, t) to a number that can be summed over chunks
Tracker = Callable[[Population, int], float]


@dataclass(frozen=True)
class Simulator:
    domain: SimulationDomain
    manipulations: tuple[ManipulationEvent, ...]
    accumulations: tuple[AccumulationEvent, ...] = ()
    order: EventOrder = EventOrder()
    seed: int = 0
    trackers: Mapping[str, Tracker] = field(default_factory=dict)
    draws: LatentDraws | None = None

    def __post_init__(self):
        object.__setattr__(self, "manipulations", tuple(self.manipulations))
        object.__setattr__(self, "accumulations", tuple(self.accumulations))
        names = [e.name for e in self.manipulations] + [e.name for e in self.accumulations]
        if len(set(names)) != len(names):
            raise DomainError(f"event names must be unique: {names}")

    @property
    def psi(self) -> LatentDraws:
        return self.draws if self.draws is not None else LatentDraws(self.seed)

    def with_seed(self, seed: int) -> "Simulator":
        return Simulator(self.domain, self.manipulations, self.accumulations, self.order, seed,
                         self.trackers, None)


@dataclass(frozen=True)
class RunPlan:
    """``snapshot`` is ``"none"``, ``"final"`` or an int k (every k steps, step 0 included)."""

    horizon: int
    snapshot: str | int = "none"
    partitions: int = 1
    threads: int | None = None

    def __post_init__(self):
        if self.horizon < 0:
            raise ValueError("horizon must be >= 0")
        if self.partitions < 1:
            raise ValueError("partition count must be >= 1")
        if not (self.snapshot in ("none", "final") or (isinstance(self.snapshot, int) and self.snapshot >= 1)):
            raise ValueError(f"bad snapshot policy {self.snapshot!r}")

    def snapshot_due(self, t: int) -> bool:
        if isinstance(self.snapshot, int):
            return t % self.snapshot == 0 or t == self.horizon
        return self.snapshot == "final" and t == self.horizon


@dataclass
class SimulationRecord:
    final: State
    snapshots: list[tuple[int, State]] = field(default_factory=list)
    trackers: dict[str, np.ndarray] = field(default_factory=dict)

    def snapshot(self, t: int) -> State:
        for s, state in self.snapshots:
            if s == t:
                return state
        raise KeyError(f"no snapshot at step {t}")


def partition(pop: Population, chunks: int) -> list[Population]:
    """Split into ``chunks`` contiguous blocks whose sizes differ by at most one."""
    if chunks < 1:
        raise ValueError("chunk count must be >= 1")
    if chunks == 1:
        return [pop]
    base, extra = divmod(pop.n, chunks)
    edges = np.cumsum([0] + [base + (i < extra) for i in range(chunks)])
    return [pop.take(slice(int(a), int(b))) for a, b in zip(edges[:-1], edges[1:])]


def merge(chunks: Sequence[Population], domain: SimulationDomain | None = None) -> Population:
    """Concatenate chunks and sort by id."""
    chunks = list(chunks)
    pop = concat(chunks, domain)
    if pop.n:
        if np.unique(pop.ids).shape[0] != pop.n:
            raise DomainError("duplicate ids across chunks")
        if pop.n > 1 and np.any(pop.ids[1:] < pop.ids[:-1]):
            pop = pop.take(np.argsort(pop.ids, kind="stable"))
    return pop.with_next_id(max([c.next_id for c in chunks] + [pop.next_id]))


def _due(interventions, t):
    return [iv for iv in interventions if iv.due(t)]


def _still_owned(owned: set, before: Population, after: Population) -> set:
    return {name for name in owned if after[name] is before[name]}


def run(sim: Simulator, start: State, plan: RunPlan, interventions: Sequence = ()) -> SimulationRecord:
    """Run ``plan.horizon`` transitions from ``start``.

    ``interventions`` are objects with ``due(t)``, ``apply(state, psi, t)``
    and ``reassert(population, t)``; see :mod:`popsim.interventions`.
    Interventions scheduled at step t act on S_t, i.e. after the t-th
    transition (t = 0 acts on the start state).
    """
    psi = sim.psi
    domain = start.domain
    interventions = [iv.activate() if hasattr(iv, "activate") else iv for iv in interventions]
    state = start
    for iv in _due(interventions, 0):
        state = iv.apply(state, psi, 0)
    theta = state.theta
    record = SimulationRecord(final=state)
    if plan.snapshot_due(0):
        record.snapshots.append((0, state))
    T = plan.horizon
    values = {name: np.zeros(T) for name in sim.trackers}
    chunks = partition(state.population, plan.partitions)
    # columns each chunk holds privately (created during this run, not exposed)
    owned = [set() for _ in chunks]
    next_id = state.population.next_id
    workers = plan.threads if plan.threads is not None else plan.partitions
    pool = ThreadPoolExecutor(max_workers=workers) if workers > 1 and len(chunks) > 1 else None
    try:
        for t in range(1, T + 1):
            if sim.accumulations:
                try:
                    new = accumulate(sim.accumulations, domain, theta, psi, t, next_id)
                except SimulationError:
                    raise
                except Exception as exc:
                    raise SimulationError(str(exc), t=t) from exc
                if new.n:
                    next_id = new.next_id
                    chunks[-1] = concat([chunks[-1], new])
                    owned[-1] = set()
                    chunks = [c.with_next_id(next_id) for c in chunks]

            def step(i, t=t, theta=theta):
                return manipulate(chunks[i], sim.manipulations, theta, psi, t, sim.order, owned[i])

            idx = range(len(chunks))
            chunks = list(pool.map(step, idx)) if pool else [step(i) for i in idx]
            for iv in interventions:
                for i, c in enumerate(chunks):
                    chunks[i] = iv.reassert(c, t)
                    owned[i] = _still_owned(owned[i], c, chunks[i])
            due = _due(interventions, t)
            if due:
                merged = State(merge(chunks, domain), theta)
                for iv in due:
                    merged = iv.apply(merged, psi, t)
                theta = merged.theta
                next_id = merged.population.next_id
                chunks = partition(merged.population, plan.partitions)
                owned = [set() for _ in chunks]
            for name, fn in sim.trackers.items():
                values[name][t - 1] = sum(fn(c, t) for c in chunks)
            if plan.snapshot_due(t):
                record.snapshots.append((t, State(merge(chunks, domain), theta)))
                owned = [set() for _ in chunks]
    finally:
        if pool:
            pool.shutdown()
    record.final = State(merge(chunks, domain), theta)
    record.trackers = values
    return record
