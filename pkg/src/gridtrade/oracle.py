"""Independent verifiers for the follower equilibrium.

Used only by tests and acceptance audits, never by the production path.
`ve_oracle` maximizes the joint seller utility directly by projected
gradient ascent, sharing nothing with the extragradient solver except the
projection primitive (which is itself grid-verified for small N).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import FeasibleSet, Scenario, joint_utility
from .projection import project_box_budget


@dataclass(frozen=True)
class OracleReport:
    """Outcome of a sampling audit: the largest utility excess found."""

    max_abs_gap: float
    argmax_case: str
    trials: int


def ve_oracle(scenario: Scenario, p, grad_tol: float = 1e-10,
              max_iterations: int = 20_000) -> np.ndarray:
    """Maximize the joint utility over the allocation set directly.

    Projected gradient ascent with a diminishing step schedule floored at
    one half (the objective has unit curvature, so any step in (0, 1] keeps
    linear convergence; a floor is required to reach the gradient-mapping
    tolerance at all). Stops when the gradient mapping norm falls below
    grad_tol.
    """
    p = np.asarray(p, dtype=float)
    surpluses = scenario.surpluses
    fset = FeasibleSet(surpluses, scenario.grid.deficiency)
    x = np.zeros(fset.dim)
    for k in range(max_iterations):
        step = max(0.5, 0.95 / (1.0 + 0.05 * k))
        grad = surpluses - x + p
        x_next = project_box_budget(x + step * grad, fset).point
        mapping = float(np.linalg.norm(x - x_next)) / step
        x = x_next
        if mapping <= grad_tol:
            break
    return x


def social_optimality_audit(scenario: Scenario, x_star, p, samples: int,
                            seed: int = 0) -> OracleReport:
    """Sample random feasible allocations and report the largest joint
    utility excess over x_star (0 when nothing beats it).

    Points are drawn uniformly in the box and rescaled onto the budget face
    when they overshoot it, covering both constraint regimes.
    """
    x_star = np.asarray(x_star, dtype=float)
    p = np.asarray(p, dtype=float)
    if samples <= 0:
        return OracleReport(max_abs_gap=0.0, argmax_case="", trials=0)
    surpluses = scenario.surpluses
    budget = scenario.grid.deficiency
    rng = np.random.default_rng([seed, scenario.seed])

    base = joint_utility(x_star, scenario, p)
    pts = rng.uniform(0.0, surpluses, size=(samples, surpluses.size))
    sums = pts.sum(axis=1)
    over = sums > budget
    pts[over] *= (budget / sums[over])[:, None]
    utilities = (surpluses * pts - 0.5 * pts * pts + p * pts).sum(axis=1)
    idx = int(np.argmax(utilities))
    gap = float(utilities[idx] - base)
    return OracleReport(
        max_abs_gap=max(gap, 0.0),
        argmax_case=f"seed={scenario.seed}/sample={idx}",
        trials=samples,
    )
