import numpy as np
import pytest

from gridtrade.model import EnergyUser, GridParams, Scenario


def make_scenario(surpluses, deficiency, total_price=175.0, p_min=8.45, p_max=175.0,
                  cost_linear=0.01, cost_const=1.0, seed=0):
    users = tuple(
        EnergyUser(id=i, surplus=float(s), aggregation_count=20)
        for i, s in enumerate(surpluses)
    )
    n = len(users)
    grid = GridParams(
        deficiency=float(deficiency),
        total_price=float(total_price),
        p_min=float(p_min),
        p_max=float(p_max),
        cost_linear=np.full(n, float(cost_linear)),
        cost_const=np.full(n, float(cost_const)),
    )
    return Scenario(users=users, grid=grid, seed=seed)


@pytest.fixture
def peak_scenario():
    """A five-seller instance at experiment scale with a binding budget."""
    rng = np.random.default_rng(5)
    surpluses = rng.uniform(64.0, 240.0, 5)
    return make_scenario(surpluses, 0.5 * surpluses.sum(), seed=5)
