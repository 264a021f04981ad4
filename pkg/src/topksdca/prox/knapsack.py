"""Continuous quadratic knapsack: projection onto a box cut by a budget."""

from dataclasses import dataclass

import numpy as np


@dataclass
class KnapsackProblem:
    """Project ``b`` onto ``{lo <= x <= hi, sum(x) = r}`` (or ``<= r``)."""

    b: np.ndarray
    r: float
    lo: object = 0.0
    hi: object = np.inf
    equality: bool = True


def _broadcast_bounds(b, lo, hi):
    lo = np.broadcast_to(np.asarray(lo, dtype=float), b.shape)
    hi = np.broadcast_to(np.asarray(hi, dtype=float), b.shape)
    if np.any(lo > hi):
        raise ValueError("knapsack bounds violate lo <= hi")
    return lo, hi


def knapsack(b, r, lo=0.0, hi=np.inf):
    """Solve ``min ||x - b||^2`` s.t. ``lo <= x <= hi``, ``sum(x) = r``.

    Variable fixing in the style of Kiwiel: solve the budget equation over
    the free coordinates, then fix whichever bound side carries the larger
    violation and repeat.  No sorting is needed.

    Returns ``(x, t)`` with ``x = clip(b - t, lo, hi)``.
    """
    b = np.asarray(b, dtype=float)
    lo, hi = _broadcast_bounds(b, lo, hi)
    # a few ulps of slack: sums like k * (r / k) may round below r
    slack = 8 * np.finfo(float).eps * abs(r)
    if not (lo.sum() - slack <= r <= hi.sum() + slack):
        raise ValueError(
            f"infeasible knapsack: need sum(lo)={lo.sum():.6g} <= r={r:.6g}"
            f" <= sum(hi)={hi.sum():.6g}")
    if b.size == 0:
        return b.copy(), 0.0

    free = np.ones(b.shape, dtype=bool)
    fixed_low = np.zeros(b.shape, dtype=bool)
    budget = float(r)
    # relative to the data scale: budgets can be tiny (r = 1/(lambda n))
    tol = 16 * np.finfo(float).eps * max(np.abs(b).max(), abs(r))
    t = 0.0
    while free.any():
        bf = b[free]
        t = (bf.sum() - budget) / bf.size
        xf = bf - t
        lo_f = lo[free]
        hi_f = hi[free]
        below = xf < lo_f
        above = xf > hi_f
        grad = np.sum(lo_f[below] - xf[below])
        delta = np.sum(xf[above] - hi_f[above])
        if abs(grad - delta) <= tol * bf.size:
            break
        idx = np.flatnonzero(free)
        if grad > delta:
            fix = idx[below]
            budget -= lo[fix].sum()
            fixed_low[fix] = True
        else:
            fix = idx[above]
            budget -= hi[fix].sum()
        free[fix] = False
    else:
        # everything got fixed: any t keeping each side at its bound works
        t_lo = np.max((b - lo)[fixed_low], initial=-np.inf)
        t_hi = np.min((b - hi)[~fixed_low], initial=np.inf)
        if np.isfinite(t_lo) and np.isfinite(t_hi):
            t = 0.5 * (t_lo + t_hi)
        elif np.isfinite(t_lo):
            t = t_lo
        else:
            t = t_hi
    return np.clip(b - t, lo, hi), float(t)


def solve_knapsack(problem):
    """Euclidean projection for a :class:`KnapsackProblem`."""
    b = np.asarray(problem.b, dtype=float)
    lo, hi = _broadcast_bounds(b, problem.lo, problem.hi)
    if problem.r < 0:
        raise ValueError("knapsack budget r must be nonnegative")
    if not problem.equality:
        if lo.sum() > problem.r:
            raise ValueError(
                f"infeasible knapsack: sum(lo)={lo.sum():.6g} exceeds budget"
                f" r={problem.r:.6g}")
        x = np.clip(b, lo, hi)
        if x.sum() <= problem.r:
            return x
    x, _ = knapsack(b, problem.r, lo, hi)
    return x
