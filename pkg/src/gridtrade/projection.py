"""Exact Euclidean projections onto the coupled allocation set.

Two set shapes are needed by the equilibrium solver:

* the box-plus-budget set  X = {x : 0 <= x_i <= ub_i, sum(x) <= budget}, and
* X intersected with a separating halfspace {w : <n, w - z> <= 0}.

Both projections reduce to one-dimensional duals. For X, the projection of v
is clamp(v - lam, 0, ub) where the budget multiplier lam solves a monotone
scalar equation; the map lam -> sum(clamp(v - lam, 0, ub)) is continuous and
nonincreasing, so bisection brackets lam and an exact active-set solve pins
it down. For X intersected with a halfspace, a scalar multiplier beta on the
halfspace constraint plays the same role: w(beta) = P_X(x - beta*n), with
beta >= 0 chosen so the constraint holds with complementary slackness.

Numerical discipline matters more than usual here. The outer solver drives
the halfspace gap <n, w(beta) - z> to the square of its own residual, far
below the rounding noise of recomputed budget sums, so the gap is assembled
in difference form from exactly representable moves: free components shift
by -beta*(n_i - mean(n_free)) - lam_x with both pieces exactly rounded
(math.fsum), and clamped components move to their bounds. Without this the
beta search cannot see which side of the cut it is on and the outer
iteration stalls three orders of magnitude short of its tolerance.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .model import FeasibleSet


class ProjectionError(RuntimeError):
    """The dual search failed to converge; signals a numerical problem."""


@dataclass(frozen=True)
class ProjectionResult:
    """Projection onto the box-plus-budget set with its KKT certificate."""

    point: np.ndarray
    multiplier: float
    active_budget: bool
    iterations: int


def _exact_multiplier(v, ub, budget, lam_guess):
    """Multiplier solved on the active set identified at lam_guess.

    fsum keeps the small difference of budget-sized sums exactly rounded.
    """
    shifted = v - lam_guess
    free = (shifted > 0.0) & (shifted < ub)
    n_free = int(free.sum())
    if n_free == 0:
        return max(lam_guess, 0.0)
    at_upper = shifted >= ub
    terms = list(v[free]) + list(ub[at_upper]) + [-budget]
    lam = math.fsum(terms) / n_free
    return max(lam, 0.0)


def _box_budget_core(v, ub, budget):
    """Projection onto the box-plus-budget set: returns (point, lam, iters)."""
    x0 = np.clip(v, 0.0, ub)
    if x0.sum() <= budget:
        return x0, 0.0, 0

    # clamp(v - lam) carries an eps*|v| error per component, which bounds the
    # achievable sum accuracy for far-away inputs.
    floor = 16.0 * np.finfo(float).eps * v.size * max(1.0, float(np.abs(v).max()))
    tol_sum = 1e-12 * max(1.0, budget) + floor
    lo, hi = 0.0, float(v.max())
    lam = hi
    iterations = 0
    for _ in range(120):
        lam = 0.5 * (lo + hi)
        iterations += 1
        s = np.clip(v - lam, 0.0, ub).sum()
        close = abs(s - budget) <= tol_sum
        narrow = (hi - lo) <= 1e-9 * max(1.0, hi)
        if close or (iterations >= 30 and narrow):
            lam_exact = _exact_multiplier(v, ub, budget, lam)
            x = np.clip(v - lam_exact, 0.0, ub)
            if abs(x.sum() - budget) <= tol_sum:
                return x, lam_exact, iterations
            if close:
                # Active set shifts exactly at the root; the bisected
                # multiplier already meets the tolerance.
                return np.clip(v - lam, 0.0, ub), lam, iterations
        if s > budget:
            lo = lam
        else:
            hi = lam
        if (hi - lo) <= 1e-17 * max(1.0, hi):
            break
    x = np.clip(v - lam, 0.0, ub)
    if abs(x.sum() - budget) > 10.0 * tol_sum:
        raise ProjectionError(
            f"budget bisection stalled: residual {x.sum() - budget:.3e} after {iterations} steps"
        )
    return x, lam, iterations


def project_box_budget(v, fset: FeasibleSet) -> ProjectionResult:
    """Euclidean projection of v onto the box-plus-budget set.

    If the box-clamped point already satisfies the budget the multiplier is
    zero; otherwise the budget binds and the multiplier is bracketed by
    bisection over [0, max(v)] and then solved exactly on the active set.
    """
    v = np.asarray(v, dtype=float)
    ub = fset.upper_bounds
    if v.shape != ub.shape:
        raise ValueError(f"vector shape {v.shape} does not match set dimension {ub.shape}")
    if not np.all(np.isfinite(v)):
        raise ValueError("cannot project a non-finite vector")
    point, lam, iterations = _box_budget_core(v, ub, fset.budget)
    return ProjectionResult(point=point, multiplier=float(lam),
                            active_budget=lam > 0.0, iterations=iterations)


def _shifted_move(x, n, beta, ub, budget, sum_x, equality=False):
    """The move P_X(x - beta*n) - x for feasible x, in difference form.

    Solves for the budget multiplier directly in move coordinates
    m(lam) = clamp(-beta*n - lam, -x, ub - x), targeting
    fsum(m) = budget - sum(x). Bisection only identifies the active set; the
    accepted move is reassembled as -beta*(n_i - mean(n_free)) - c on free
    components, which keeps every piece exactly rounded at its own scale.
    Computing clamp(-beta*n - lam) directly would round at the beta*||n||
    scale, orders of magnitude above the physical move near convergence.

    With equality=True the budget is treated as the equality sum(w) = sum(x)
    and the multiplier may take either sign; the caller uses this to keep
    iterates on the budget face when that is where the geometry lives.
    Otherwise a genuine slack below the face tolerance is snapped to zero:
    an ulp of slack opens a spurious off-face segment in the dual whose root
    sits within rounding of zero, freezing the caller's iteration.
    """
    s = -beta * n
    lo_b = -x
    hi_b = ub - x
    target = budget - sum_x
    face_tol = 64.0 * np.finfo(float).eps * max(1.0, budget)
    if equality or (0.0 <= target <= face_tol):
        target = 0.0

    m0 = np.clip(s, lo_b, hi_b)
    if not equality and math.fsum(m0) <= target:
        free = (m0 > lo_b) & (m0 < hi_b)
        return m0, 0.0, free

    s_scale = float(np.abs(s).max())

    def assemble(lam):
        """Decomposed move for the active set identified at lam.

        The mean of n over the free set rounds once; its residue is folded
        into the constant term so the move sums to the target exactly. Any
        guessed active set sums to the target by construction, so the
        assembly is accepted only if it also satisfies the KKT set
        conditions at its own exact multiplier.
        """
        mm = np.clip(s - lam, lo_b, hi_b)
        lower = mm <= lo_b
        upper = mm >= hi_b
        free = ~(lower | upper)
        k = int(free.sum())
        if k == 0:
            ok = abs(math.fsum(mm) - target) <= 1e-12 * max(1.0, abs(target))
            return mm, lam, free, ok
        nbar = math.fsum(n[free]) / k
        residue = math.fsum(list(n[free]) + [-k * nbar])
        c = math.fsum(list(hi_b[upper]) + list(lo_b[lower]) + [-target]) / k
        c_adj = c - beta * residue / k
        m_free = -beta * (n - nbar) - c_adj
        m = np.where(lower, lo_b, np.where(upper, hi_b, m_free))
        lam_exact = -beta * nbar + c_adj
        tol_c = 64.0 * np.finfo(float).eps * (s_scale + abs(lam_exact)) + 1e-300
        shifted = s - lam_exact
        ok = bool(
            (equality or lam_exact >= -tol_c)
            and np.all(m[free] >= lo_b[free] - tol_c)
            and np.all(m[free] <= hi_b[free] + tol_c)
            and np.all(shifted[lower] <= lo_b[lower] + tol_c)
            and np.all(shifted[upper] >= hi_b[upper] - tol_c)
        )
        m = np.clip(m, lo_b, hi_b)
        if not equality:
            lam_exact = max(lam_exact, 0.0)
        return m, lam_exact, free, ok

    lam_hi = s_scale + abs(min(target, 0.0)) + float(x.max()) + 1e-300
    lam_lo = -(lam_hi + float(np.abs(ub).max())) if equality else 0.0
    if equality:
        for _ in range(200):
            if math.fsum(np.clip(s - lam_lo, lo_b, hi_b)) >= target:
                break
            lam_lo *= 2.0
    for _ in range(200):
        if math.fsum(np.clip(s - lam_hi, lo_b, hi_b)) <= target:
            break
        lam_hi *= 2.0
    lam = lam_hi
    best = None
    for _ in range(200):
        lam = 0.5 * (lam_lo + lam_hi)
        m, lam_exact, free, ok = assemble(lam)
        if ok:
            return m, lam_exact, free
        if math.fsum(np.clip(s - lam, lo_b, hi_b)) > target:
            lam_lo = lam
        else:
            lam_hi = lam
        if (lam_hi - lam_lo) <= 1e-17 * max(1.0, lam_hi):
            break
    # Breakpoint-straddling final state: accept the better side within the
    # representability floor of clamp(s - lam) at the |s| scale, repairing
    # the residual sum gap over the free components so the returned point
    # does not drift off the budget face and poison later iterations.
    for lam_try in (lam, lam_lo, lam_hi):
        m = np.clip(s - lam_try, lo_b, hi_b)
        gap_try = math.fsum(m) - target
        if best is None or abs(gap_try) < abs(best[0]):
            best = (gap_try, m, lam_try)
    gap_best, m, lam = best
    m = m.copy()
    for _ in range(3):
        free = (m > lo_b) & (m < hi_b)
        k = int(free.sum())
        if k == 0 or gap_best == 0.0:
            break
        m[free] -= gap_best / k
        m = np.clip(m, lo_b, hi_b)
        gap_best = math.fsum(m) - target
    floor = 128.0 * np.finfo(float).eps * x.size * s_scale
    if abs(gap_best) > max(1e-9 * max(1.0, budget), floor):
        raise ProjectionError(f"shifted-move multiplier search stalled (gap {gap_best:.3e})")
    free = (m > lo_b) & (m < hi_b)
    return m, max(lam, 0.0), free


def project_halfspace_then_set(x, normal, offset_point, fset: FeasibleSet,
                               max_evals: int = 10_000, offset_gap=None) -> np.ndarray:
    """Euclidean projection of x onto X intersected with the halfspace
    {w : <normal, w - offset_point> <= 0}, for feasible x.

    The halfspace constraint carries a single dual beta >= 0 with
    w(beta) = P_X(x - beta*normal); its gap g(beta) = <normal, w - offset>
    is continuous, nonincreasing and piecewise linear in beta, so a Newton
    step off the current linear piece usually lands on the root and a
    bracketed regula-falsi finishes. Raises ProjectionError when no bracket
    exists within max_evals gap evaluations (empty or degenerate
    intersection).

    offset_gap, when given, supplies x - offset_point directly; pass it when
    that difference is known analytically, because forming it by subtraction
    of nearly equal vectors destroys the gap signal.
    """
    x = np.asarray(x, dtype=float)
    n = np.asarray(normal, dtype=float)
    if not n.any():
        raise ValueError("halfspace normal must be nonzero")
    gap = (x - np.asarray(offset_point, dtype=float)) if offset_gap is None \
        else np.asarray(offset_gap, dtype=float)
    ub = fset.upper_bounds
    budget = fset.budget
    sum_x = math.fsum(x)

    # When x and the offset point both sit on the budget face, their sums
    # differ only by rounding jitter, yet that jitter enters the gap scaled
    # by the large all-ones component of the normal and can erase or invert
    # the cut. Centering the normal removes the all-ones component; on the
    # face the centered halfspace is the exact-arithmetic one, and the dual
    # path P_X(x - beta*n) is unchanged where the budget binds.
    eps = np.finfo(float).eps
    on_face = (budget - sum_x) <= 64.0 * eps * max(1.0, budget)
    face_mode = on_face and abs(math.fsum(gap)) <= 256.0 * eps * max(1.0, budget)
    if face_mode:
        # Shifting the normal by a multiple of the all-ones vector leaves the
        # halfspace unchanged on the face. Centering on the gap's support
        # (where the normal's dominant component is constant) stops the
        # ulp-level facial jitter from being amplified into the gap.
        support = gap != 0.0
        base = n[support] if support.any() else n
        n = n - math.fsum(base) / base.size
        if not np.any(np.abs(n) > 8.0 * eps * max(1.0, float(np.abs(normal).max()))):
            # Normal was (numerically) a pure budget direction; on the face
            # the constraint is a constant and cannot cut.
            return project_box_budget(x, fset).point
    nn = math.fsum(n * n)

    g_lin = math.fsum(n * gap)
    evals = 0

    def g_of(beta: float):
        nonlocal evals
        evals += 1
        delta, lam, free = _shifted_move(x, n, beta, ub, budget, sum_x, equality=face_mode)
        g = math.fsum(n * delta) + g_lin
        # Magnitude of the current linear piece's (negative) slope: free
        # components move against n, centered when the budget binds.
        nf = n[free]
        if nf.size == 0:
            slope = 0.0
        elif face_mode or lam > 0.0:
            nbar = math.fsum(nf) / nf.size
            slope = math.fsum((nf - nbar) ** 2)
        else:
            slope = math.fsum(nf * nf)
        return g, delta, slope

    g0, delta0, _ = g_of(0.0)
    if g0 <= 0.0:
        return np.clip(x + delta0, 0.0, ub)

    # g is piecewise linear and nonincreasing, so a Newton step along the
    # current piece either lands on the root, crosses into the next piece
    # (at most one crossing per step), or overshoots and brackets the root.
    # The first probe g0/<n, n> cannot overshoot: no piece is steeper.
    lo, g_lo = 0.0, g0
    hi = g0 / nn
    g_hi = g0
    delta_hi = delta0
    while evals < max_evals:
        g_hi, delta_hi, slope_hi = g_of(hi)
        if g_hi <= 0.0:
            break
        lo, g_lo = hi, g_hi
        hi = hi + g_hi / slope_hi if slope_hi > 0.0 else 8.0 * hi
        if hi <= lo:
            hi = 2.0 * lo
        if hi > 1e300:
            raise ProjectionError("halfspace dual bracket diverged; intersection may be empty")
    else:
        raise ProjectionError(f"no halfspace dual bracket within {max_evals} evaluations")

    if g_hi == 0.0:
        return np.clip(x + delta_hi, 0.0, ub)

    move_tol = 1e-13 * (1.0 + float(np.abs(x).max()))
    width_tol = max(move_tol / math.sqrt(nn), 4.0 * np.finfo(float).eps * (1.0 + hi))

    best_delta = delta_hi
    side = 0
    while (hi - lo) > width_tol and evals < max_evals:
        denom = g_lo - g_hi
        beta = lo + g_lo * (hi - lo) / denom if denom > 0.0 else 0.5 * (lo + hi)
        if not (lo < beta < hi):
            beta = 0.5 * (lo + hi)
        g, delta, _ = g_of(beta)
        if g > 0.0:
            lo, g_lo = beta, g
            if side == -1:
                g_hi *= 0.5
            side = -1
        elif g < 0.0:
            hi, g_hi = beta, g
            best_delta = delta
            if side == 1:
                g_lo *= 0.5
            side = 1
        else:
            return np.clip(x + delta, 0.0, ub)
    if evals >= max_evals:
        raise ProjectionError(f"halfspace dual search exceeded {max_evals} evaluations")

    denom = g_lo - g_hi
    if denom > 0.0:
        beta_star = lo + g_lo * (hi - lo) / denom
        g_star, delta_star, _ = g_of(beta_star)
        if g_star <= 0.0:
            best_delta = delta_star
    return np.clip(x + best_delta, 0.0, ub)
