"""Entropic proximal maps built on ``V(t) = W(exp(t))``.

Three problems are solved here:

* the top-k entropy dual update (softmax when ``k = 1``), which minimizes
  ``alpha/2 (<x,x> + s^2) - <b,x> + <x, log x> + (1-s) log(1-s)`` over the
  alpha top-k simplex with ``s = <1,x>``;
* the top-k entropy loss itself, a maximization of the same entropy
  without the quadratic term, which has a closed form per partition;
* the multilabel cross-entropy dual update, an entropic projection of two
  blocks that share one normalization.
"""

from typing import NamedTuple

import numpy as np
from scipy.optimize import brentq

from ..lambert import lambert_v

__all__ = [
    "solve_entropic_root",
    "prox_topk_entropy_dual",
    "solve_topk_entropy_primal",
    "prox_ml_entropy",
    "TopkEntropyDual",
    "TopkEntropyPrimal",
]

ROOT_TOL = 1e-12
ACCEPT_TOL = 1e-8
_MAX_ITER = 100


class TopkEntropyDual(NamedTuple):
    x: np.ndarray
    s: float
    t: float
    n_upper: int
    residual: float


class TopkEntropyPrimal(NamedTuple):
    loss: float
    x: np.ndarray
    s: float
    t: float
    upper: np.ndarray
    middle: np.ndarray


def logsumexp(x):
    # max-shifted; scipy's version carries heavy per-call overhead
    top = x.max()
    return top + np.log(np.sum(np.exp(x - top)))


def _v_derivs(z):
    v = lambert_v(z)
    w = 1.0 + v
    d1 = v / w
    d2 = v / w**3
    d3 = v * (1.0 - 2.0 * v) / w**5
    return v, d1, d2, d3


def solve_entropic_root(z, total):
    """Find ``t`` with ``sum_j V(z_j - t) = total`` (``total > 0``).

    The left side is strictly decreasing in ``t``.  Fourth-order Householder
    steps are taken inside a bracket that is tightened on every evaluation;
    a step leaving the bracket is replaced by bisection.
    """
    z = np.asarray(z, dtype=float)
    if total <= 0:
        raise ValueError("total must be positive")
    n = z.size
    zmax = z.max()
    # V(u) >= total once u >= total + log(total); V(u) < exp(u)
    lo = zmax - total - np.log(total) - 1.0
    hi = zmax - np.log(total / n) + 1.0
    t = 0.5 * (lo + hi)
    # start from the dominant-term estimate when it falls inside the bracket
    guess = zmax - total - np.log(total)
    if lo < guess < hi:
        t = guess
    for _ in range(_MAX_ITER):
        v, d1, d2, d3 = _v_derivs(z - t)
        f = v.sum() - total
        if abs(f) <= ROOT_TOL * max(1.0, total):
            return t
        if f > 0.0:
            lo = t
        else:
            hi = t
        f1 = -d1.sum()
        f2 = d2.sum()
        f3 = -d3.sum()
        num = f * (2.0 * f1 * f1 - f * f2)
        den = -6.0 * f1**3 + 6.0 * f * f1 * f2 - f * f * f3
        step = 3.0 * num / den if den != 0.0 else -f / f1
        t_new = t + step
        if not (lo < t_new < hi) or not np.isfinite(t_new):
            t_new = 0.5 * (lo + hi)
        if t_new == t or hi - lo <= 4.0 * np.finfo(float).eps * max(1.0, abs(t)):
            return t_new
        t = t_new
    return t


def _inv_v(v):
    return v + np.log(v)


def _partition_system(s, t, b_mid, rho, a_mean, alpha, k):
    v_mid = lambert_v(b_mid - t)
    g1 = alpha * (1.0 - rho) * s - v_mid.sum()
    g2 = ((1.0 - rho) * t + _inv_v(alpha * (1.0 - s))
          - rho * _inv_v(alpha * s / k) + a_mean - alpha)
    return np.array([g1, g2]), v_mid


def _solve_partition_newton(b_mid, rho, a_mean, alpha, k, s0, t0):
    """Damped Newton on the 2x2 system; returns (s, t) or None."""
    s, t = s0, t0
    g, v_mid = _partition_system(s, t, b_mid, rho, a_mean, alpha, k)
    merit = g @ g
    for _ in range(_MAX_ITER):
        if np.max(np.abs(g)) <= ROOT_TOL * max(1.0, alpha):
            return s, t
        dv = v_mid / (1.0 + v_mid)
        # d/ds V^{-1}(c s) = c + 1/s
        jac = np.array([
            [alpha * (1.0 - rho), dv.sum()],
            [-alpha - 1.0 / (1.0 - s) - rho * (alpha / k + 1.0 / s), 1.0 - rho],
        ])
        try:
            step = np.linalg.solve(jac, -g)
        except np.linalg.LinAlgError:
            return None
        eta = 1.0
        accepted = False
        for _ in range(60):
            s_new = s + eta * step[0]
            t_new = t + eta * step[1]
            if 0.0 < s_new < 1.0:
                g_new, v_new = _partition_system(
                    s_new, t_new, b_mid, rho, a_mean, alpha, k)
                merit_new = g_new @ g_new
                if merit_new <= (1.0 - 1e-4 * eta) * merit or merit_new == 0.0:
                    accepted = True
                    break
            eta *= 0.5
        if not accepted:
            return None
        s, t, g, v_mid, merit = s_new, t_new, g_new, v_new, merit_new
    return None


def _solve_partition_bisect(b_mid, rho, a_mean, alpha, k):
    """Safeguarded fallback: reduce the system to a monotone equation in t."""
    denom = alpha * (1.0 - rho)

    def s_of_t(t):
        return lambert_v(b_mid - t).sum() / denom

    def h(t):
        s = s_of_t(t)
        if s >= 1.0:
            return -np.inf
        if s <= 0.0:
            return np.inf
        return ((1.0 - rho) * t + _inv_v(alpha * (1.0 - s))
                - rho * _inv_v(alpha * s / k) + a_mean - alpha)

    # s(t) = 1 at t_one; h -> -inf there and increases with t
    t_one = solve_entropic_root(b_mid, denom)
    lo = t_one
    hi = t_one + 1.0
    while h(hi) <= 0.0:
        hi = lo + 2.0 * (hi - lo)
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if mid == lo or mid == hi:
            break
        if h(mid) < 0.0:
            lo = mid
        else:
            hi = mid
    t = 0.5 * (lo + hi)
    return s_of_t(t), t


def _dual_objective(x, b, alpha):
    s = x.sum()
    xlogx = np.sum(x[x > 0] * np.log(x[x > 0]))
    rest = (1.0 - s) * np.log(1.0 - s) if s < 1.0 else 0.0
    return 0.5 * alpha * (x @ x + s * s) - b @ x + xlogx + rest


def prox_topk_entropy_dual(b, alpha, k):
    """Entropic prox over the alpha top-k simplex.

    Returns a :class:`TopkEntropyDual` with the minimizer ``x``, its mass
    ``s``, the threshold ``t`` with ``x_j = min(V(b_j - t)/alpha, s/k)``,
    the number of coordinates at the upper bound, and the residual of the
    defining equations.
    """
    b = np.asarray(b, dtype=float)
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    if k < 1:
        raise ValueError("k must be >= 1")
    m = b.size
    if m < k:
        return TopkEntropyDual(np.zeros(m), 0.0, np.inf, 0, 0.0)

    order = np.argsort(-b, kind="stable")
    bs = b[order]
    tol = ACCEPT_TOL

    # U empty: one equation in t
    z = np.concatenate(([alpha], bs))
    t = solve_entropic_root(z, alpha)
    v = lambert_v(bs - t)
    s = v.sum() / alpha
    x_sorted = v / alpha
    residual = abs(lambert_v(alpha - t) + v.sum() - alpha)
    if k == 1 or (m > k and x_sorted[0] <= s / k * (1.0 + tol)):
        return TopkEntropyDual(_unsort(x_sorted, order), s, t, 0, residual)

    # with m == k every coordinate sits at s/k, so skip straight to that case
    s_prev, t_prev = s, t
    for u in range(1, min(k, m) if m > k else 1):
        rho = u / k
        a_mean = bs[:u].sum() / k
        b_mid = bs[u:]
        sol = _solve_partition_newton(b_mid, rho, a_mean, alpha, k,
                                      min(max(s_prev, 1e-12), 1 - 1e-12),
                                      t_prev)
        if sol is None:
            sol = _solve_partition_bisect(b_mid, rho, a_mean, alpha, k)
        s, t = sol
        g, v_mid = _partition_system(s, t, b_mid, rho, a_mean, alpha, k)
        cap = s / k
        x_mid = v_mid / alpha
        upper_ok = np.all(lambert_v(bs[:u] - t) / alpha >= cap * (1.0 - tol))
        mid_ok = x_mid.size == 0 or x_mid[0] <= cap * (1.0 + tol)
        if upper_ok and mid_ok:
            x_sorted = np.concatenate((np.full(u, cap), x_mid))
            return TopkEntropyDual(_unsort(x_sorted, order), s, t, u,
                                   float(np.max(np.abs(g))))
        s_prev, t_prev = s, t

    # |U| = k: only possible when nothing is left below the bound
    s, resid = _solve_all_upper(bs[:k].sum() / k, alpha, k)
    x_sorted = np.zeros(m)
    x_sorted[:k] = s / k
    return TopkEntropyDual(_unsort(x_sorted, order), s, np.nan, k, resid)


def _solve_all_upper(a_mean, alpha, k):
    # alpha s (1 + 1/k) - a_mean + log(s/k) - log(1-s) = 0, increasing in s
    def g(s):
        return alpha * s * (1.0 + 1.0 / k) - a_mean + np.log(s / k) - np.log1p(-s)

    lo, hi = 1e-300, 1.0 - 1e-16
    if g(lo) >= 0.0:
        return lo, 0.0
    if g(hi) <= 0.0:
        return hi, 0.0
    s = brentq(g, lo, hi, xtol=1e-300, rtol=4 * np.finfo(float).eps)
    return s, abs(g(s))


def solve_topk_entropy_primal(a, k):
    """Evaluate the top-k entropy loss at ``a`` (ground truth removed).

    Scans partitions with the ``u = 0, 1, ..., k-1`` largest entries pinned at
    ``s/k``; each partition has a closed form for ``s`` and ``t``.  All sums
    of exponentials are evaluated in the log domain.
    """
    a = np.asarray(a, dtype=float)
    if k < 1:
        raise ValueError("k must be >= 1")
    m = a.size
    if m < k:
        # fewer coordinates than k: the feasible set is {0}
        return TopkEntropyPrimal(0.0, np.zeros(m), 0.0, np.nan,
                                 np.array([], int), np.arange(m))
    order = np.argsort(-a, kind="stable")
    a_s = a[order]
    for u in range(0, min(k, m) + 1):
        rho = u / k
        if u == k and m > k:
            break
        a_mean = a_s[:u].sum() / k
        mid = a_s[u:]
        if rho < 1.0:
            log_z = logsumexp(mid)
            log_q = ((1.0 - rho) * np.log(1.0 - rho) - rho * np.log(k)
                     - (1.0 - rho) * log_z - a_mean)
        else:
            log_z = -np.inf
            log_q = -np.log(k) - a_mean
        log1p_q = np.logaddexp(0.0, log_q)
        s = np.exp(-log1p_q)
        log_one_minus_s = log_q - log1p_q
        if rho < 1.0:
            t = log_z + log1p_q - np.log(1.0 - rho)
            thresh = np.log(s / k) + t
            ok = mid.size == 0 or mid[0] <= thresh + 1e-12 * (1 + abs(thresh))
            if u > 0:
                ok = ok and a_s[u - 1] >= thresh - 1e-12 * (1 + abs(thresh))
        else:
            t = np.nan
            ok = True
        if not ok:
            continue
        one_minus_s = np.exp(log_one_minus_s)
        entropy_rest = one_minus_s * log_one_minus_s
        tt = 0.0 if rho == 1.0 else t
        loss = (a_mean + (1.0 - rho) * tt - rho * np.log(s / k)) * s - entropy_rest
        x_sorted = np.empty(m)
        x_sorted[:u] = s / k
        if rho < 1.0:
            x_sorted[u:] = np.exp(mid - t)
        x = _unsort(x_sorted, order)
        return TopkEntropyPrimal(float(loss), x, float(s), float(t),
                                 np.sort(order[:u]), np.sort(order[u:]))
    raise ArithmeticError("no consistent partition found for top-k entropy")


def prox_ml_entropy(b, b_bar, alpha):
    """Multilabel cross-entropy prox.

    Minimizes ``alpha/2 ||x - b||^2 + <x, log x> + alpha/2 ||y - b_bar||^2
    + <y, log y>`` subject to ``<1,x> + <1,y> = 1``.  The solution is
    ``x_j = V(alpha b_j - t)/alpha`` (same for ``y``) with a scalar ``t``.
    Returns ``(p, p_bar, t)``.
    """
    b = np.asarray(b, dtype=float)
    b_bar = np.asarray(b_bar, dtype=float)
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    z = alpha * np.concatenate((b, b_bar))
    t = solve_entropic_root(z, alpha)
    v = lambert_v(z - t) / alpha
    return v[: b.size], v[b.size:], t


def _unsort(x_sorted, order):
    x = np.empty_like(x_sorted)
    x[order] = x_sorted
    return x
