"""Follower-side equilibrium solver.

For a fixed price vector the sellers' coupled best-response problem is a
variational inequality VI(X, F) over the box-plus-budget set X with the
affine operator

    F(x) = x - surpluses - prices,

the stacked negative marginal utilities. F has an identity Jacobian, hence is
strongly monotone, and the VI has a unique solution; because F is a shifted
identity that solution is also the projection of (surpluses + prices) onto X,
which `ve_closed_form` exposes as an independent cross-check.

`solve_ve` runs the hyperplane-projection (extragradient) method: per
iteration one projection builds the natural residual map r(x), an Armijo
backtracking search places a trial point z on the segment [x, r(x)], and the
iterate is projected onto X intersected with the separating halfspace
{w : <F(z), w - z> <= 0}, which always contains the solution. Distances to
the solution are therefore nonincreasing along the iteration.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .model import FeasibleSet
from .projection import project_box_budget, project_halfspace_then_set


class ArmijoSearchError(RuntimeError):
    """Backtracking ran out of steps; impossible for a strongly monotone
    operator with exact projections, so it indicates a broken setup."""


@dataclass(frozen=True)
class PseudoGradient:
    """The affine operator F(x) = x - surpluses - prices."""

    surpluses: np.ndarray
    prices: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "surpluses", np.asarray(self.surpluses, dtype=float))
        object.__setattr__(self, "prices", np.asarray(self.prices, dtype=float))
        if self.surpluses.shape != self.prices.shape:
            raise ValueError("surpluses and prices must have matching shapes")

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return x - self.surpluses - self.prices

    def mu(self, x: np.ndarray) -> np.ndarray:
        """Slack values surpluses - x + prices (= -F(x))."""
        return self.surpluses - x + self.prices


@dataclass(frozen=True)
class SolverConfig:
    """Tuning knobs for the extragradient solver.

    gamma is the initial Armijo step in (0, 1], beta the backtracking ratio
    and delta the acceptance coefficient, both in (0, 1). Convergence is
    declared on the natural residual ||x - r(x)||.
    """

    gamma: float = 0.95
    beta: float = 0.5
    delta: float = 0.04
    residual_tol: float = 1e-9
    max_iterations: int = 10_000
    max_backtracks: int = 60

    def __post_init__(self):
        if not (0.0 < self.gamma <= 1.0):
            raise ValueError(f"gamma must be in (0, 1], got {self.gamma}")
        if not (0.0 < self.beta < 1.0):
            raise ValueError(f"beta must be in (0, 1), got {self.beta}")
        if not (0.0 < self.delta < 1.0):
            raise ValueError(f"delta must be in (0, 1), got {self.delta}")
        if not self.residual_tol > 0.0:
            raise ValueError("residual_tol must be positive")
        if self.max_iterations < 1 or self.max_backtracks < 1:
            raise ValueError("iteration limits must be at least 1")


@dataclass(frozen=True)
class IterationRecord:
    """State of one solver iteration, captured before the step is taken."""

    iteration: int
    x: np.ndarray
    residual: float
    step: float
    z: np.ndarray
    mu: np.ndarray


@dataclass
class SolverTrace:
    """Per-iteration history of a solve, plus how the solve ended."""

    records: list[IterationRecord] = field(default_factory=list)
    stop_reason: str = "unstarted"

    @property
    def converged(self) -> bool:
        return self.stop_reason == "residual"

    @property
    def iterations(self) -> int:
        return len(self.records)

    @property
    def residuals(self) -> list[float]:
        return [r.residual for r in self.records]

    def to_csv_rows(self) -> list[tuple]:
        """Rows (iteration, residual, step, mu_spread) for trace export."""
        rows = []
        for rec in self.records:
            spread = float(rec.mu.max() - rec.mu.min()) if rec.mu.size else 0.0
            rows.append((rec.iteration, rec.residual, rec.step, spread))
        return rows


def _tidy_iterate(x: np.ndarray, ub: np.ndarray, budget: float) -> np.ndarray:
    """Snap ulp-level bound drift and budget overshoot out of an iterate.

    A component left one ulp off its box bound carries a large deviation in
    the separating-halfspace normal, so the cut spends itself on rounding
    noise and the iteration freezes; the same happens when sum(x) exceeds
    the budget by an ulp. Both corrections move x by O(eps * scale), far
    below every tolerance in play.
    """
    snap = 4.0 * np.finfo(float).eps * np.maximum(1.0, ub)
    x = np.where(ub - x <= snap, ub, x)
    x = np.where(x <= snap, 0.0, x)
    excess = math.fsum(x) - budget
    if excess > 0.0:
        interior = x < ub
        j = int(np.argmax(np.where(interior, x, -np.inf))) if interior.any() \
            else int(np.argmax(x))
        for _ in range(4):
            x[j] -= excess
            excess = math.fsum(x) - budget
            if excess <= 0.0:
                break
    return x


def natural_residual(x, F: PseudoGradient, fset: FeasibleSet) -> tuple[np.ndarray, float]:
    """The projected point r = P_X(x - F(x)) and the norm ||x - r||.

    The norm vanishes exactly at solutions of VI(X, F). When the budget binds
    at r, rounding that leaves sum(r) a few ulps below the budget is pushed
    back up; together with iterates kept weakly inside the budget this
    guarantees sum(x - r) <= 0, which the step acceptance rule relies on.
    """
    x = np.asarray(x, dtype=float)
    proj = project_box_budget(x - F(x), fset)
    r = proj.point
    if proj.active_budget:
        # The step acceptance rule needs sum(x - r) <= 0 in exact arithmetic;
        # comparing separately rounded sums leaves an ulp of the budget in
        # play, which the face multiplier amplifies past the Armijo margin.
        # The compensation must land on a component that is strictly inside
        # its box (where the marginal value equals the face multiplier), or
        # it would itself tilt the acceptance inner product.
        free = (r > 0.0) & (r < fset.upper_bounds)
        if free.any():
            r = r.copy()
            headroom = np.where(free, fset.upper_bounds - r, -np.inf)
            j = int(np.argmax(headroom))
            for _ in range(6):
                excess = math.fsum(np.concatenate((x, -r)))
                if excess <= 0.0:
                    break
                r[j] = np.nextafter(r[j] + excess, np.inf)
    return r, float(np.linalg.norm(x - r))


def ve_closed_form(F: PseudoGradient, fset: FeasibleSet) -> np.ndarray:
    """The unique equilibrium, computed directly.

    Because F(x) = x - c with c = surpluses + prices, the VI solution is
    exactly P_X(c). Kept separate from the iterative path so it can serve as
    a verification oracle.
    """
    return project_box_budget(F.surpluses + F.prices, fset).point


def mu_vector(x, F: PseudoGradient) -> np.ndarray:
    """Per-user slack surpluses - x + prices; equalized across users that are
    strictly inside their boxes at a budget-bound equilibrium."""
    return F.mu(np.asarray(x, dtype=float))


def solve_ve(F: PseudoGradient, fset: FeasibleSet, cfg: SolverConfig | None = None,
             x0=None, on_iteration=None) -> tuple[np.ndarray, SolverTrace]:
    """Run the extragradient iteration from x0 (default: the zero vector).

    Per iteration: compute r(x) and stop if the natural residual is within
    tolerance; otherwise backtrack for the largest step t = gamma * beta**m
    whose trial point z = x - t*(x - r) satisfies
    <F(z), x - r> >= delta * ||x - r||**2, then project x onto X intersected
    with {w : <F(z), w - z> <= 0}.

    `on_iteration(record, residual_converged)` is invoked once per iteration
    when given; returning True halts the solve after that record (used by the
    round-based game driver). Non-convergence after max_iterations is
    reported through trace.stop_reason, never raised.
    """
    if cfg is None:
        cfg = SolverConfig()
    x = np.zeros(fset.dim) if x0 is None else np.asarray(x0, dtype=float)
    if not fset.contains(x, tol=1e-9):
        raise ValueError("initial iterate is not feasible")

    trace = SolverTrace()
    trace.stop_reason = "max_iterations"
    for iteration in range(1, cfg.max_iterations + 1):
        r, residual = natural_residual(x, F, fset)
        mu = F.mu(x)
        if residual <= cfg.residual_tol:
            record = IterationRecord(iteration, x, residual, 0.0, x, mu)
            trace.records.append(record)
            trace.stop_reason = "residual"
            if on_iteration is not None:
                on_iteration(record, True)
            break

        d = x - r
        dn2 = residual * residual
        t = cfg.gamma
        z = x - t * d
        backtracks = 0
        while math.fsum(F(z) * d) < cfg.delta * dn2:
            backtracks += 1
            if backtracks > cfg.max_backtracks:
                raise ArmijoSearchError(
                    f"no acceptable step within {cfg.max_backtracks} backtracks "
                    f"at iteration {iteration} (residual {residual:.3e})"
                )
            t *= cfg.beta
            z = x - t * d

        record = IterationRecord(iteration, x, residual, t, z, mu)
        trace.records.append(record)
        if on_iteration is not None and on_iteration(record, False):
            trace.stop_reason = "caller"
            break
        if iteration == cfg.max_iterations:
            break
        # x - z equals t*d analytically; passing it keeps the halfspace gap
        # resolvable when d is small.
        x = project_halfspace_then_set(x, F(z), z, fset, offset_gap=t * d)
        x = _tidy_iterate(x, fset.upper_bounds, fset.budget)
    final = trace.records[-1]
    return final.x, trace
