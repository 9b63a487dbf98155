"""Populations, events and the transition function.

A population is stored column-wise: one read-only float64 array per status
variable plus a uint64 id column.  Events never mutate arrays in place; they
return replacement columns and the population object is rebuilt around them,
so unchanged columns are shared between successive states.
"""

from __future__ import annotations

from dataclasses import dataclass
from types import MappingProxyType
from typing import Callable, Iterable, Mapping, Sequence

import numba
import numpy as np

from .streams import LatentDraws, DrawView

KINDS = ("real", "integer", "binary")


class DomainError(ValueError):
    """A name or value that does not conform to the simulation domain."""


class SimulationError(RuntimeError):
    """An event failed while the simulation was running."""

    def __init__(self, message: str, *, t: int | None = None, event: str | None = None, id: int | None = None):
        self.t = t
        self.event = event
        self.id = id
        ctx = []
        if t is not None:
            ctx.append(f"t={t}")
        if event is not None:
            ctx.append(f"event={event!r}")
        if id is not None:
            ctx.append(f"id={id}")
        super().__init__(f"{message} ({', '.join(ctx)})" if ctx else message)


@dataclass(frozen=True)
class Variable:
    name: str
    kind: str = "real"

    def __post_init__(self):
        if self.kind not in KINDS:
            raise DomainError(f"variable {self.name!r}: unknown kind {self.kind!r}")


def categorical(name: str, levels: Iterable[str]) -> list[Variable]:
    """Binary indicator columns ``name_level`` for a categorical variable."""
    return [Variable(f"{name}_{level}", "binary") for level in levels]


@dataclass(frozen=True)
class SimulationDomain:
    variables: tuple[Variable, ...]
    parameter_names: tuple[str, ...] = ()
    latent_spec: str = "uniform(seed, id, t, tag, index)"
    alive: str | None = "alive"

    def __post_init__(self):
        object.__setattr__(self, "variables", tuple(
            v if isinstance(v, Variable) else Variable(*v) if isinstance(v, tuple) else Variable(v)
            for v in self.variables))
        object.__setattr__(self, "parameter_names", tuple(self.parameter_names))
        names = [v.name for v in self.variables]
        if len(set(names)) != len(names):
            dup = sorted({n for n in names if names.count(n) > 1})
            raise DomainError(f"duplicate variable names: {dup}")
        if len(set(self.parameter_names)) != len(self.parameter_names):
            raise DomainError("duplicate parameter names")
        if "id" in names:
            raise DomainError("'id' is reserved for the identifier column")
        if self.alive is not None and self.alive not in names:
            object.__setattr__(self, "alive", None)
        object.__setattr__(self, "_kinds", {v.name: v.kind for v in self.variables})

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(v.name for v in self.variables)

    def kind(self, name: str) -> str:
        try:
            return self._kinds[name]
        except KeyError:
            raise DomainError(f"undeclared variable {name!r}") from None

    def has(self, name: str) -> bool:
        return name in self._kinds

    def check_theta(self, theta: Mapping[str, float]) -> None:
        missing = [p for p in self.parameter_names if p not in theta]
        extra = [p for p in theta if p not in self.parameter_names]
        if missing or extra:
            raise DomainError(f"parameter vector mismatch: missing={missing}, extra={extra}")


def _readonly(a: np.ndarray) -> np.ndarray:
    a.flags.writeable = False
    return a


class Population:
    """n individuals x m status variables, plus a stable id column.

    Behaves as a read-only mapping from variable name to column array.
    ``next_id`` is the id the next accumulated individual will receive; it
    only ever grows, so ids are never reused within a run.
    """

    __slots__ = ("domain", "ids", "_cols", "next_id")

    def __init__(self, domain: SimulationDomain, columns: Mapping[str, np.ndarray],
                 ids=None, next_id: int | None = None, validate: bool = True):
        self.domain = domain
        cols = {}
        n = None
        for name in domain.names:
            if name not in columns:
                raise DomainError(f"missing column {name!r}")
            a = columns[name]
            if not (isinstance(a, np.ndarray) and a.dtype == np.float64 and not a.flags.writeable):
                a = _readonly(np.array(a, dtype=np.float64))
            if a.ndim != 1:
                raise DomainError(f"column {name!r} must be one-dimensional")
            if n is None:
                n = a.shape[0]
            elif a.shape[0] != n:
                raise DomainError(f"column {name!r} has length {a.shape[0]}, expected {n}")
            cols[name] = a
        if validate:
            extra = [k for k in columns if k not in cols]
            if extra:
                raise DomainError(f"undeclared variable(s) {extra}")
        if n is None:
            n = 0 if ids is None else len(ids)
        if ids is None:
            ids = np.arange(n, dtype=np.uint64)
        if not (isinstance(ids, np.ndarray) and ids.dtype == np.uint64 and not ids.flags.writeable):
            ids = _readonly(np.array(ids, dtype=np.uint64))
        if ids.shape[0] != n:
            raise DomainError(f"id column has length {ids.shape[0]}, expected {n}")
        if next_id is None:
            next_id = int(ids.max()) + 1 if n else 0
        self.ids = ids
        self._cols = cols
        self.next_id = int(next_id)
        if validate:
            self.validate()

    # mapping protocol
    def __getitem__(self, name: str) -> np.ndarray:
        try:
            return self._cols[name]
        except KeyError:
            raise DomainError(f"undeclared variable {name!r}") from None

    def __contains__(self, name) -> bool:
        return name in self._cols

    def __iter__(self):
        return iter(self._cols)

    def __len__(self) -> int:
        return self.ids.shape[0]

    @property
    def n(self) -> int:
        return self.ids.shape[0]

    @property
    def columns(self) -> Mapping[str, np.ndarray]:
        return MappingProxyType(self._cols)

    def __repr__(self) -> str:
        return f"Population(n={self.n}, m={len(self._cols)})"

    @classmethod
    def empty(cls, domain: SimulationDomain, next_id: int = 0) -> "Population":
        return cls(domain, {v: np.empty(0) for v in domain.names}, ids=np.empty(0, dtype=np.uint64),
                   next_id=next_id)

    def validate(self) -> None:
        if self.n and np.unique(self.ids).shape[0] != self.n:
            raise DomainError("duplicate individual ids")
        if self.n and int(self.ids.max()) >= self.next_id:
            raise DomainError("next_id must exceed every existing id")
        for name, a in self._cols.items():
            check_values(self.domain, name, a, self.ids)

    def row(self, i: int) -> dict[str, float]:
        out = {"id": int(self.ids[i])}
        out.update({k: float(v[i]) for k, v in self._cols.items()})
        return out

    def replace(self, updates: Mapping[str, np.ndarray]) -> "Population":
        """New population with some columns swapped; others are shared."""
        if not updates:
            return self
        cols = dict(self._cols)
        for k, v in updates.items():
            if k not in cols:
                raise DomainError(f"undeclared variable {k!r}")
            cols[k] = v
        return Population(self.domain, cols, self.ids, self.next_id, validate=False)

    def take(self, idx) -> "Population":
        if not isinstance(idx, slice):
            idx = np.asarray(idx)
        return Population(self.domain, {k: v[idx] for k, v in self._cols.items()}, self.ids[idx],
                          self.next_id, validate=False)

    def with_next_id(self, next_id: int) -> "Population":
        if next_id == self.next_id:
            return self
        if self.n and next_id <= int(self.ids.max()):
            raise DomainError("next_id must exceed every existing id")
        return Population(self.domain, self._cols, self.ids, next_id, validate=False)

    def identical(self, other: "Population") -> bool:
        """Bit-level equality of ids and every column."""
        if self.n != other.n or tuple(self._cols) != tuple(other._cols):
            return False
        if not np.array_equal(self.ids, other.ids):
            return False
        return all(self._cols[k].tobytes() == other._cols[k].tobytes() for k in self._cols)

    def with_theta(self, theta: Mapping[str, float]) -> "State":
        return State(self, theta)


def concat(pops: Sequence[Population], domain: SimulationDomain | None = None) -> Population:
    pops = list(pops)
    if not pops:
        if domain is None:
            raise ValueError("cannot concatenate zero populations without a domain")
        return Population.empty(domain)
    domain = domain or pops[0].domain
    if len(pops) == 1:
        return pops[0]
    cols = {k: _readonly(np.concatenate([p[k] for p in pops])) for k in domain.names}
    ids = _readonly(np.concatenate([p.ids for p in pops]))
    return Population(domain, cols, ids, max(p.next_id for p in pops), validate=False)


def check_values(domain: SimulationDomain, name: str, values: np.ndarray, ids: np.ndarray) -> None:
    bad = ~np.isfinite(values)
    if bad.any():
        i = int(np.flatnonzero(bad)[0])
        raise DomainError(f"non-finite value {values[i]!r} in {name!r} for id {int(ids[i])}")
    kind = domain.kind(name)
    if kind == "binary":
        bad = (values != 0.0) & (values != 1.0)
    elif kind == "integer":
        bad = values != np.round(values)
    else:
        return
    if bad.any():
        i = int(np.flatnonzero(bad)[0])
        raise DomainError(f"{kind} variable {name!r} holds {values[i]!r} for id {int(ids[i])}")


@dataclass(frozen=True)
class State:
    population: Population
    theta: Mapping[str, float]

    def __post_init__(self):
        theta = MappingProxyType({k: float(v) for k, v in self.theta.items()})
        self.population.domain.check_theta(theta)
        object.__setattr__(self, "theta", theta)

    @property
    def domain(self) -> SimulationDomain:
        return self.population.domain


def configure(state: State, theta_new: Mapping[str, float]) -> State:
    """Swap the parameter vector; the population is carried over untouched."""
    return State(state.population, theta_new)


# -- events ------------------------------------------------------------------

@dataclass(frozen=True)
class RowUpdate:
    """Sparse event output: rows at positions ``idx`` of one column take ``values``.

    Equivalent to returning the whole column with those entries replaced;
    it lets the engine avoid copying columns when few rows change.
    """

    idx: np.ndarray
    values: np.ndarray | float

    def dense(self, old: np.ndarray) -> np.ndarray:
        col = old.copy()
        col[self.idx] = self.values
        return col


Mechanism = Callable[[Population, Mapping[str, float], DrawView, int], Mapping[str, "np.ndarray | RowUpdate"]]


@dataclass(frozen=True)
class ManipulationEvent:
    """A row-pure rewrite of status variables.

    ``mechanism(rows, theta, draws, t)`` returns replacement arrays for the
    columns it changes.  Omitted columns are left as they were.
    """

    name: str
    mechanism: Mechanism
    parameters: tuple[str, ...] = ()
    description: str = ""
    touches_dead: bool = False


@dataclass(frozen=True)
class AccumulationEvent:
    """Adds ``count(theta, draws)`` individuals built by ``generator(theta, draws, k)``.

    The generator's draw view is bound to the ids the new rows will get.
    """

    name: str
    count: Callable[[Mapping[str, float], DrawView], int]
    generator: Callable[[Mapping[str, float], DrawView, int], Mapping[str, np.ndarray]]
    parameters: tuple[str, ...] = ()
    description: str = ""


@numba.njit(cache=True, nogil=True)
def _scan(values, old, alive, kind, guard_dead):
    """First offending row of an event output, or -1.

    codes: 1 non-finite, 2 not binary, 3 not integral, 4 dead row changed.
    """
    bad = -1
    code = 0
    for i in range(values.shape[0]):
        v = values[i]
        ok = v - v == 0.0
        if kind == 2:
            ok2 = (v == 0.0) | (v == 1.0)
        elif kind == 1:
            ok2 = v == np.floor(v)
        else:
            ok2 = True
        dead_ok = (not guard_dead) | (alive[i] != 0.0) | (v == old[i])
        if not (ok & ok2 & dead_ok):
            bad = i
            code = 1 if not ok else (2 if kind == 2 else 3) if not ok2 else 4
            break
    return bad, code


_KIND_CODE = {"real": 0, "integer": 1, "binary": 2}


def _raise_bad(event, pop, name, values, ids, i, code):
    ident = int(ids[i])
    if code == 1:
        raise DomainError(f"event {event.name!r}: non-finite value {values[i]!r} in {name!r} for id {ident}")
    if code == 4:
        raise DomainError(f"event {event.name!r} changed {name!r} of dead individual id {ident}")
    raise DomainError(f"event {event.name!r}: {pop.domain.kind(name)} variable {name!r} "
                      f"holds {values[i]!r} for id {ident}")


def _check_output(event: ManipulationEvent, pop: Population, out) -> dict:
    """Validate an event's output; returns name -> dense array or RowUpdate."""
    checked = {}
    alive_name = pop.domain.alive
    guard = alive_name is not None and not event.touches_dead
    alive = pop[alive_name] if alive_name is not None else np.ones(pop.n)
    for name, values in out.items():
        if not pop.domain.has(name):
            raise DomainError(f"event {event.name!r} wrote undeclared variable {name!r}")
        old = pop[name]
        kind = _KIND_CODE[pop.domain.kind(name)]
        if isinstance(values, RowUpdate):
            idx = np.asarray(values.idx, dtype=np.intp)
            if idx.ndim != 1 or (idx.shape[0] and (idx.min() < 0 or idx.max() >= pop.n)):
                raise DomainError(f"event {event.name!r} updated rows outside the population in {name!r}")
            vals = np.ascontiguousarray(np.broadcast_to(np.asarray(values.values, dtype=np.float64), idx.shape))
            if idx.shape[0] == 0:
                continue
            i, code = _scan(vals, old[idx], alive[idx], kind, guard)
            if code:
                _raise_bad(event, pop, name, vals, pop.ids[idx], i, code)
            checked[name] = RowUpdate(idx, vals)
            continue
        if values is old:
            continue
        values = np.ascontiguousarray(values, dtype=np.float64)
        if values.shape != (pop.n,):
            raise DomainError(f"event {event.name!r} returned {values.shape} values for {name!r}, expected ({pop.n},)")
        i, code = _scan(values, old, alive, kind, guard)
        if code:
            _raise_bad(event, pop, name, values, pop.ids, i, code)
        checked[name] = values
    return checked


def _commit(pop: Population, checked: Mapping, owned: set | None) -> Population:
    """Write checked outputs.

    Columns listed in ``owned`` are private to the caller (no other state
    references them) and take sparse updates in place; other columns are
    copied first, after which the copy is private and joins ``owned``.
    """
    cols = {}
    for name, upd in checked.items():
        if isinstance(upd, RowUpdate):
            if owned is not None and name in owned:
                a = pop[name]
                a.flags.writeable = True
                a[upd.idx] = upd.values
                a.flags.writeable = False
                continue
            cols[name] = _readonly(upd.dense(pop[name]))
            if owned is not None:
                owned.add(name)
        else:
            cols[name] = _readonly(upd)
            if owned is not None:
                owned.discard(name)
    return pop.replace(cols)


def apply_manipulation(event: ManipulationEvent, pop: Population, theta: Mapping[str, float],
                       psi: LatentDraws, t: int, owned: set | None = None) -> Population:
    if pop.n == 0:
        return pop
    out = event.mechanism(pop, theta, psi.view(pop.ids, t, event.name), t)
    return _commit(pop, _check_output(event, pop, out or {}), owned)


def _apply_on_rows(event, pop, idx, theta, psi, t, owned=None) -> Population:
    """Apply ``event`` to the rows ``idx`` only and scatter the result back."""
    if idx.shape[0] == 0:
        return pop
    if idx.shape[0] == pop.n:
        return apply_manipulation(event, pop, theta, psi, t, owned)
    sub = pop.take(idx)
    out = event.mechanism(sub, theta, psi.view(sub.ids, t, event.name), t)
    out = _check_output(event, sub, out or {})
    scattered = {name: RowUpdate(idx[u.idx], u.values) if isinstance(u, RowUpdate) else RowUpdate(idx, u)
                 for name, u in out.items()}
    return _commit(pop, scattered, owned)


def accumulate(events: Sequence[AccumulationEvent], domain: SimulationDomain, theta: Mapping[str, float],
               psi: LatentDraws, t: int, next_id: int) -> Population:
    """Rows produced by all accumulation events at step ``t`` (listed order)."""
    parts = []
    for ev in events:
        k = int(ev.count(theta, psi.view(np.empty(0, dtype=np.uint64), t, ev.name)))
        if k < 0:
            raise DomainError(f"accumulation event {ev.name!r} asked for {k} rows")
        if k == 0:
            continue
        ids = np.arange(next_id, next_id + k, dtype=np.uint64)
        rows = ev.generator(theta, psi.view(ids, t, ev.name), k)
        cols = {}
        for name in domain.names:
            if name not in rows:
                raise DomainError(f"accumulation event {ev.name!r} did not generate {name!r}")
            a = np.broadcast_to(np.asarray(rows[name], dtype=np.float64), np.shape(rows[name]))
            if a.shape != (k,):
                raise DomainError(f"accumulation event {ev.name!r} generated {a.shape[0] if a.ndim else 1} "
                                  f"rows for {name!r}, expected {k}")
            cols[name] = a
        extra = [name for name in rows if not domain.has(name)]
        if extra:
            raise DomainError(f"accumulation event {ev.name!r} wrote undeclared variable(s) {extra}")
        next_id += k
        parts.append(Population(domain, cols, ids, next_id))
    if not parts:
        return Population.empty(domain, next_id)
    return concat(parts, domain)


def apply_accumulation(event: AccumulationEvent, pop: Population, theta: Mapping[str, float],
                       psi: LatentDraws, t: int) -> Population:
    new = accumulate([event], pop.domain, theta, psi, t, pop.next_id)
    if new.n == 0:
        return pop
    return concat([pop, new]).with_next_id(new.next_id)


@dataclass(frozen=True)
class EventOrder:
    """How manipulation events are ordered within a step.

    ``shared``: one permutation for every row - the listed order, an explicit
    ``permutation``, or a fresh random one per step when ``shuffle`` is set.
    ``per-individual``: each id gets its own random permutation per step.
    """

    mode: str = "shared"
    tag: str = "event-order"
    shuffle: bool = False
    permutation: tuple[int, ...] | None = None

    def __post_init__(self):
        if self.mode not in ("shared", "per-individual"):
            raise ValueError(f"unknown event order mode {self.mode!r}")


def make_event_order(order: EventOrder, r: int, ids, psi: LatentDraws, t: int) -> np.ndarray:
    """0-based permutation(s) of ``range(r)``: shape (r,) when shared, (n, r) per individual."""
    if r < 0:
        raise ValueError("r must be >= 0")
    ids = np.asarray(ids, dtype=np.uint64)
    if order.mode == "shared":
        if order.permutation is not None:
            perm = np.asarray(order.permutation, dtype=np.int64)
            if sorted(perm.tolist()) != list(range(r)):
                raise ValueError(f"{order.permutation} is not a permutation of range({r})")
            return perm
        if not order.shuffle or r <= 1:
            return np.arange(r)
        view = psi.view(ids, t, order.tag)
        keys = np.array([view.event_uniform(j) for j in range(r)])
        return np.argsort(keys, kind="stable")
    if r <= 1 or ids.shape[0] == 0:
        return np.tile(np.arange(r), (ids.shape[0], 1))
    keys = np.column_stack([psi.uniform(ids, t, order.tag, j) for j in range(r)])
    return np.argsort(keys, axis=1, kind="stable")


def manipulate(pop: Population, events: Sequence[ManipulationEvent], theta: Mapping[str, float],
               psi: LatentDraws, t: int, order: EventOrder, owned: set | None = None) -> Population:
    """The manipulation phase of one step.

    ``owned`` (engine use) names columns of ``pop`` that nothing else
    references, so they may be updated in place; it is updated as columns
    are copied or replaced.
    """
    r = len(events)
    if r == 0 or pop.n == 0:
        return pop
    perm = make_event_order(order, r, pop.ids, psi, t)
    if perm.ndim == 1:
        for j in perm:
            pop = _run(events[j], pop, None, theta, psi, t, owned)
        return pop
    for pos in range(r):
        col = perm[:, pos]
        for j in range(r):
            pop = _run(events[j], pop, np.flatnonzero(col == j), theta, psi, t, owned)
    return pop


def _run(event, pop, idx, theta, psi, t, owned):
    try:
        if idx is None:
            return apply_manipulation(event, pop, theta, psi, t, owned)
        return _apply_on_rows(event, pop, idx, theta, psi, t, owned)
    except SimulationError:
        raise
    except Exception as exc:
        raise SimulationError(str(exc), t=t, event=event.name, id=_id_from(exc)) from exc


def _id_from(exc: Exception) -> int | None:
    msg = str(exc)
    marker = "id "
    if marker in msg:
        tail = msg.rsplit(marker, 1)[1].split()[0].strip(",)")
        if tail.isdigit():
            return int(tail)
    return None


def transition(state: State, psi: LatentDraws, t: int, manipulations: Sequence[ManipulationEvent],
               accumulations: Sequence[AccumulationEvent] = (), order: EventOrder = EventOrder()) -> State:
    """One step: accumulation phase first, then ordered manipulation phase."""
    pop = state.population
    if accumulations:
        try:
            new = accumulate(accumulations, pop.domain, state.theta, psi, t, pop.next_id)
        except Exception as exc:
            raise SimulationError(str(exc), t=t) from exc
        if new.n:
            pop = concat([pop, new]).with_next_id(new.next_id)
    pop = manipulate(pop, manipulations, state.theta, psi, t, order)
    return State(pop, state.theta)
