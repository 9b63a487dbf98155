import numpy as np
import pytest

from popsim.domain import ManipulationEvent, Population, SimulationDomain, State, Variable
from popsim.health.model import default_theta
from popsim.health.population import InitConfig, init_population


def toy_domain(params=("rate",)):
    return SimulationDomain((Variable("alive", "binary"), Variable("x", "real"), Variable("k", "integer")), params)


def toy_population(n, x=0.0, domain=None):
    domain = domain or toy_domain()
    return Population(domain, {"alive": np.ones(n), "x": np.full(n, float(x)), "k": np.zeros(n)})


def increment(name="inc", by=1.0):
    return ManipulationEvent(name, lambda rows, theta, draws, t: {"x": rows["x"] + by})


def doubling(name="dbl"):
    return ManipulationEvent(name, lambda rows, theta, draws, t: {"x": rows["x"] * 2.0})


def random_walk(name="walk"):
    def mech(rows, theta, draws, t):
        live = rows["alive"] == 1.0
        step = np.where(live, draws.uniform() - 0.5, 0.0)
        return {"x": rows["x"] + step, "k": rows["k"] + (live & (draws.uniform(1) < theta["rate"]))}
    return ManipulationEvent(name, mech, ("rate",))


@pytest.fixture(scope="session")
def theta():
    return default_theta()


@pytest.fixture(scope="session")
def small_health(theta):
    """A 3000-person start state shared by the quick health tests."""
    return State(init_population(InitConfig(n=3000), theta, seed=11), theta)


_CRITERIA: dict[int, str] = {}


@pytest.fixture(scope="session")
def criterion():
    """Record one PASS/FAIL line per acceptance criterion; returns whether it passed."""

    def record(number: int, ok: bool, detail: str) -> bool:
        line = f"{'PASS' if ok else 'FAIL'} criterion {number:>2}: {detail}"
        _CRITERIA[number] = line
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for number in sorted(_CRITERIA):
            terminalreporter.write_line(_CRITERIA[number])
