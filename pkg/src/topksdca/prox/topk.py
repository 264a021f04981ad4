"""Biased Euclidean projections onto the top-k simplices.

Both solvers minimize ``||x - b||^2 + rho * <1, x>^2`` over

* alpha: ``{<1,x> <= r, 0 <= x_i <= <1,x>/k}``
* beta:  ``{<1,x> <= r, 0 <= x_i <= r/k}``

The budget is usually tight, so the equality-constrained knapsack is solved
first and accepted when its budget multiplier is nonnegative.  Otherwise the
budget is slack and the solution is recovered from a partition search over
the coordinates pinned at the upper bound (alpha) or from a monotone
one-dimensional root (beta).
"""

import logging

import numpy as np

from .knapsack import knapsack

log = logging.getLogger(__name__)

__all__ = ["project_topk_alpha", "project_topk_beta", "increasing_pl_root"]


def increasing_pl_root(func, breakpoints):
    """Root of an increasing, piecewise-linear ``func``.

    ``func`` must be linear between consecutive ``breakpoints`` (and beyond
    the extreme ones).  Binary search over the sorted breakpoints followed by
    exact linear interpolation.
    """
    bp = np.unique(np.asarray(breakpoints, dtype=float))
    if bp.size == 0:
        bp = np.array([0.0])
    vals_lo = func(bp[0])
    if vals_lo >= 0.0:
        lo, hi = bp[0] - 1.0, bp[0]
        f_lo, f_hi = func(lo), vals_lo
        # extend to the left until bracketed; slope is constant out here
        if f_lo >= 0.0:
            slope = f_hi - f_lo
            if slope <= 0.0:
                return bp[0]
            return hi - f_hi / slope
    else:
        f_last = func(bp[-1])
        if f_last < 0.0:
            lo, hi = bp[-1], bp[-1] + 1.0
            f_lo, f_hi = f_last, func(hi)
            slope = f_hi - f_lo
            if slope <= 0.0:
                raise ArithmeticError("function does not cross zero")
            return lo - f_lo / slope
        i, j = 0, bp.size - 1
        f_i, f_j = vals_lo, f_last
        while j - i > 1:
            mid = (i + j) // 2
            f_mid = func(bp[mid])
            if f_mid < 0.0:
                i, f_i = mid, f_mid
            else:
                j, f_j = mid, f_mid
        lo, hi, f_lo, f_hi = bp[i], bp[j], f_i, f_j
    if f_hi == f_lo:
        return hi
    return lo - f_lo * (hi - lo) / (f_hi - f_lo)


def _objective(x, b, rho):
    d = x - b
    s = x.sum()
    return d @ d + rho * s * s


def _tol(b, r):
    return 1e-12 * max(np.max(np.abs(b), initial=0.0), r)


def _budget_tight(b, k, r, rho, alpha):
    """Try the solution with ``<1,x> = r``; return it if KKT holds."""
    if b.size < k:
        return None
    x, t = knapsack(b, r, 0.0, r / k)
    lam = t - rho * r
    if alpha:
        pinned = b - t - r / k
        lam += np.sum(pinned[pinned > 0.0]) / k
    if lam >= -_tol(b, r):
        return x
    return None


def project_topk_beta(b, k, r=1.0, rho=0.0):
    """Biased projection onto the beta top-k simplex of radius ``r``."""
    b = np.asarray(b, dtype=float)
    _check_args(k, r, rho)
    x = _budget_tight(b, k, r, rho, alpha=False)
    if x is not None:
        return x
    cap = r / k
    if rho == 0.0:
        return np.clip(b, 0.0, cap)

    def phi(t):
        return t - rho * np.clip(b - t, 0.0, cap).sum()

    t = increasing_pl_root(phi, np.concatenate([b, b - cap]))
    return np.clip(b - t, 0.0, cap)


def project_topk_alpha(b, k, r=1.0, rho=0.0):
    """Biased projection onto the alpha top-k simplex of radius ``r``."""
    b = np.asarray(b, dtype=float)
    _check_args(k, r, rho)
    x = _budget_tight(b, k, r, rho, alpha=True)
    if x is not None:
        return x

    m = b.size
    if m < k:
        # only x = 0 satisfies x_i <= sum(x)/k with fewer than k coordinates
        return np.zeros_like(b)
    if m == k:
        # every feasible point has equal coordinates
        s = np.clip(b.sum() / (1.0 + k * rho), 0.0, r)
        return np.full(m, s / k)

    tol = _tol(b, r)
    order = np.argsort(-b, kind="stable")
    b_sorted = b[order]
    candidates = []
    for u in range(min(k, m)):
        x_sorted = _alpha_slack_partition(b_sorted, u, k, rho)
        s = x_sorted.sum()
        cap = s / k
        rest = b_sorted[u:]
        # t is recoverable from the partition equations
        t = _alpha_threshold(b_sorted, u, k, rho, s)
        ok = s <= r + tol and np.all(rest - t <= cap + tol)
        if u > 0:
            ok = ok and np.all(b_sorted[:u] - t >= cap - tol)
        if ok:
            return _unsort(x_sorted, order)
        candidates.append(x_sorted)

    # |U| = k: the top k coordinates share the mass, the rest are zero
    x_sorted = np.zeros(m)
    s = np.clip(b_sorted[:k].sum() / (1.0 + k * rho), 0.0, r)
    x_sorted[:k] = s / k
    if m == k or np.all(b_sorted[k:] - _alpha_threshold(b_sorted, k, k, rho, s)
                        <= s / k + tol):
        return _unsort(x_sorted, order)
    candidates.append(x_sorted)
    log.debug("top-k alpha projection fell back to candidate comparison")
    feasible = [c for c in candidates if _in_alpha(c, k, r, tol)]
    best = min(feasible, key=lambda c: _objective(c, b_sorted, rho))
    return _unsort(best, order)


def _alpha_threshold(b_sorted, u, k, rho, s):
    # from d/ds of the Lagrangian with a slack budget
    if u >= k:
        return -np.inf
    a_sum = b_sorted[:u].sum() / k
    return ((rho + u / k**2) * s - a_sum) / (1.0 - u / k)


def _alpha_slack_partition(b_sorted, u, k, rho):
    """Solution with the top ``u`` coordinates pinned at ``s/k``, slack budget."""
    m = b_sorted.size
    frac = 1.0 - u / k
    c1 = (rho + u / k**2) / frac
    c0 = b_sorted[:u].sum() / k / frac
    rest = b_sorted[u:]
    x = np.zeros(m)
    if c1 == 0.0:
        s = np.maximum(rest, 0.0).sum()
    else:
        def h(s):
            return frac * s - np.maximum(rest - (c1 * s - c0), 0.0).sum()
        if h(0.0) >= 0.0:
            s = 0.0
        else:
            s = max(increasing_pl_root(h, (rest + c0) / c1), 0.0)
    t = c1 * s - c0
    x[:u] = s / k
    x[u:] = np.maximum(rest - t, 0.0)
    return x


def _in_alpha(x, k, r, tol):
    s = x.sum()
    return s <= r + tol and np.all(x >= -tol) and np.all(x <= s / k + tol)


def _unsort(x_sorted, order):
    x = np.empty_like(x_sorted)
    x[order] = x_sorted
    return x


def _check_args(k, r, rho):
    if k < 1:
        raise ValueError("k must be >= 1")
    if r <= 0:
        raise ValueError("radius r must be positive")
    if rho < 0:
        raise ValueError("bias rho must be nonnegative")
