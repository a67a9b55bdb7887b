import sys

import numpy as np
import pytest

from softlogic.grounding import GroundModel


def random_model(rng, n_y=None, n_pot=None, n_con=None, n_g=0, alpha=None, n_part=None, eps_margin=True):
    """Tiny random model whose constraints are feasible at a hidden interior point."""
    n_y = n_y or int(rng.integers(1, 5))
    n_pot = n_pot if n_pot is not None else int(rng.integers(1, 7))
    n_con = n_con if n_con is not None else int(rng.integers(0, 3))
    n_part = n_part or int(rng.integers(1, 4))
    pot_y = np.zeros((n_pot, n_y))
    for j in range(n_pot):
        k = int(rng.integers(1, n_y + 1))
        cols = rng.choice(n_y, size=k, replace=False)
        pot_y[j, cols] = rng.choice([-1.0, 1.0], size=k) * rng.uniform(0.5, 1.5, size=k)
    pot_const = rng.uniform(-1.0, 1.0, size=n_pot)
    pot_alpha = np.full(n_pot, alpha) if alpha else rng.integers(1, 3, size=n_pot)
    pot_partition = rng.integers(0, n_part, size=n_pot)
    weights = rng.uniform(0.2, 2.0, size=n_part)
    anchor = rng.uniform(0.1, 0.9, size=n_y)
    con_y = np.zeros((n_con, n_y))
    con_const = np.zeros(n_con)
    con_eq = rng.random(n_con) < 0.5
    for i in range(n_con):
        k = int(rng.integers(1, n_y + 1))
        cols = rng.choice(n_y, size=k, replace=False)
        con_y[i, cols] = rng.choice([-1.0, 1.0], size=k)
        slack = 0.0 if con_eq[i] else rng.uniform(0.0, 0.3)
        con_const[i] = -(con_y[i] @ anchor) - slack
    pot_g = con_g = None
    if n_g:
        pot_g = rng.uniform(-1.0, 1.0, size=(n_pot, n_g)) * (rng.random((n_pot, n_g)) < 0.6)
        con_g = np.zeros((n_con, n_g))
    return GroundModel.from_arrays(
        pot_y, pot_const, pot_alpha, pot_partition, weights,
        con_y=con_y, con_const=con_const, con_eq=con_eq, pot_g=pot_g, con_g=con_g,
    )


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    acceptance = sys.modules.get("test_acceptance")
    lines = getattr(acceptance, "REPORT", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
