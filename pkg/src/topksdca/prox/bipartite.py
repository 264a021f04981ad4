"""Euclidean projection onto the bipartite simplex.

    B(r) = {(x, y) : x >= 0, y >= 0, <1, x> = <1, y> <= r}
"""

import numpy as np

from .knapsack import knapsack

__all__ = ["project_bipartite", "in_bipartite"]


def in_bipartite(x, y, r, tol=1e-10):
    """Membership test for ``B(r)`` up to ``tol``."""
    sx, sy = np.sum(x), np.sum(y)
    return bool(np.all(np.asarray(x) >= -tol) and np.all(np.asarray(y) >= -tol)
                and abs(sx - sy) <= tol and sx <= r + tol)


def project_bipartite(b, b_bar, r):
    """Project ``(b, b_bar)`` onto ``B(r)`` by variable fixing.

    First the two blocks are projected independently onto simplices of mass
    ``r``.  If the resulting thresholds ``t'``, ``s'`` satisfy ``t' + s' >= 0``
    that is already optimal.  Otherwise the mass constraint is slack and a
    single shared threshold ``t`` (``x = max(0, b - t)``,
    ``y = max(0, b_bar + t)``) balances the two blocks; coordinates that are
    clipped on the side with the larger deficit are fixed at zero until the
    clipped sums agree.
    """
    b = np.asarray(b, dtype=float)
    b_bar = np.asarray(b_bar, dtype=float)
    if r < 0:
        raise ValueError("bipartite simplex radius must be nonnegative")
    if r == 0 or b.size == 0 or b_bar.size == 0:
        return np.zeros_like(b), np.zeros_like(b_bar)

    p, t1 = knapsack(b, r)
    p_bar, s1 = knapsack(b_bar, r)
    if t1 + s1 >= 0.0:
        return p, p_bar

    free_x = np.ones(b.size, dtype=bool)
    free_y = np.ones(b_bar.size, dtype=bool)
    scale = 1e-14 * (1.0 + np.abs(b).sum() + np.abs(b_bar).sum())
    while True:
        n_free = free_x.sum() + free_y.sum()
        if n_free == 0:
            return np.zeros_like(b), np.zeros_like(b_bar)
        t = (b[free_x].sum() - b_bar[free_y].sum()) / n_free
        xt = b - t
        yt = b_bar + t
        low_x = free_x & (xt <= 0.0)
        low_y = free_y & (yt <= 0.0)
        # deficits: how far the clipped coordinates fall below zero
        def_x = -xt[low_x].sum()
        def_y = -yt[low_y].sum()
        if abs(def_x - def_y) <= scale:
            return np.maximum(xt, 0.0), np.maximum(yt, 0.0)
        if def_x > def_y:
            free_x &= ~low_x
        else:
            free_y &= ~low_y
