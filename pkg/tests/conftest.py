import numpy as np
import pytest

from dpmnl import simgen
from dpmnl.choice_data import Alternative, AttributeSpec, ChoiceTask, Dataset


def random_dataset(rng, N=6, T=3, J=3, P=3, attributes=None, unavailable=False):
    """Small random panel; optional random unavailability keeps >= 2 alternatives."""
    attributes = attributes or tuple(AttributeSpec(f"x{p}") for p in range(P))
    P = len(attributes)
    X = rng.normal(size=(N * T, J, P))
    avail = np.ones((N * T, J), dtype=bool)
    if unavailable and J > 2:
        drop = rng.random(N * T) < 0.5
        avail[drop, J - 1] = False
    chosen = np.array([rng.choice(np.flatnonzero(a)) for a in avail])
    ids = tuple(f"p{n}" for n in range(N))
    return Dataset(tuple(attributes), ids, tuple(f"t{r}" for r in range(N * T)),
                   tuple(tuple(f"a{j}" for j in range(J)) for _ in range(N * T)),
                   np.repeat(np.arange(N), T), X, avail, chosen)


def tiny_tasks():
    attrs = (AttributeSpec("time"), AttributeSpec("cost", "cost", "strictly-negative"))
    tasks = [ChoiceTask("a", "1", (Alternative("x", True, (1.0, 2.0)),
                                   Alternative("y", True, (2.0, 1.0))), "x"),
             ChoiceTask("b", "1", (Alternative("x", True, (0.5, 1.0)),
                                   Alternative("y", True, (1.5, 0.5))), "y")]
    return attrs, tasks


@pytest.fixture(scope="session")
def exp1_small():
    return simgen.simulate(simgen.experiment("I"), simgen.SimConfig(150, 6, 3, 3))


@pytest.fixture(scope="session")
def exp3_small():
    return simgen.simulate(simgen.experiment("III"), simgen.SimConfig(300, 8, 3, 4))
