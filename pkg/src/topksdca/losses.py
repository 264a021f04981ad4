"""Loss functions, their convex conjugates, gradients and SDCA dual updates.

Multiclass losses are written in terms of the score differences
``a = u - u_y`` and the margin vector ``c = 1 - e_y``.  Most of them only look
at ``z = (a + c)`` with the ground-truth coordinate removed.

Dual variables follow the convention ``v = -lambda * n * a_i``: the conjugate
is evaluated at ``v`` while SDCA stores ``a_i``.
"""

from dataclasses import dataclass

import numpy as np
from scipy.special import expit, logsumexp, xlogy

from .prox import (
    in_bipartite,
    project_bipartite,
    project_topk_alpha,
    project_topk_beta,
    prox_ml_entropy,
    prox_topk_entropy_dual,
    solve_topk_entropy_primal,
)

__all__ = [
    "FAMILIES",
    "MULTILABEL_FAMILIES",
    "LossSpec",
    "ScoreContext",
    "loss_value",
    "conjugate_value",
    "conjugate_maximizer",
    "dual_update",
    "solve_dual_block",
    "grad_smooth_topk_hinge",
    "grad_truncated_topk_entropy",
]

FAMILIES = (
    "ova-hinge",
    "ova-logistic",
    "multi-svm",
    "softmax",
    "topk-svm-alpha",
    "topk-svm-beta",
    "topk-svm-alpha-smooth",
    "topk-svm-beta-smooth",
    "topk-entropy",
    "topk-entropy-truncated",
    "ml-svm",
    "ml-svm-smooth",
    "ml-entropy",
)
MULTILABEL_FAMILIES = ("ml-svm", "ml-svm-smooth", "ml-entropy")
OVA_FAMILIES = ("ova-hinge", "ova-logistic")
HINGE_FAMILIES = ("multi-svm", "topk-svm-alpha", "topk-svm-beta",
                  "topk-svm-alpha-smooth", "topk-svm-beta-smooth")
ENTROPY_FAMILIES = ("softmax", "topk-entropy")

_ALIASES = {
    "topk-svm-a": "topk-svm-alpha",
    "topk-svm-b": "topk-svm-beta",
    "topk-svm-α": "topk-svm-alpha",
    "topk-svm-β": "topk-svm-beta",
    "topk-svm-a-smooth": "topk-svm-alpha-smooth",
    "topk-svm-b-smooth": "topk-svm-beta-smooth",
    "topk-svm-α-smooth": "topk-svm-alpha-smooth",
    "topk-svm-β-smooth": "topk-svm-beta-smooth",
    "multiclass-svm": "multi-svm",
    "svm-multi": "multi-svm",
    "lr-multi": "softmax",
}

# dual feasibility slack when evaluating conjugates
FEAS_TOL = 1e-9


@dataclass(frozen=True)
class LossSpec:
    """Which loss to use, with its top-k parameter and smoothing."""

    family: str
    k: int = 1
    gamma: float = 0.0

    def __post_init__(self):
        family = _ALIASES.get(self.family, self.family)
        if family not in FAMILIES:
            raise ValueError(f"unknown loss family {self.family!r}; "
                             f"choose from {', '.join(FAMILIES)}")
        object.__setattr__(self, "family", family)
        if int(self.k) != self.k or self.k < 1:
            raise ValueError("k must be an integer >= 1")
        object.__setattr__(self, "k", int(self.k))
        if not np.isfinite(self.gamma) or self.gamma < 0:
            raise ValueError("smoothing gamma must be finite and >= 0")
        object.__setattr__(self, "gamma", float(self.gamma))
        # the smoothing parameter picks the smooth or nonsmooth member
        if family.endswith("-smooth") and self.gamma == 0:
            object.__setattr__(self, "family", family[:-len("-smooth")])
        elif family in ("topk-svm-alpha", "topk-svm-beta", "ml-svm") and self.gamma > 0:
            object.__setattr__(self, "family", family + "-smooth")
        elif family == "multi-svm" and self.gamma > 0:
            raise ValueError("multi-svm is nonsmooth; use topk-svm-alpha with "
                             "k=1 and gamma > 0 for its smooth version")

    @property
    def multilabel(self):
        return self.family in MULTILABEL_FAMILIES

    @property
    def top_k(self):
        """The k actually used by the loss (1 for plain multiclass families)."""
        if self.family in ("multi-svm", "softmax") or self.family in OVA_FAMILIES:
            return 1
        return self.k

    @property
    def variant(self):
        return "beta" if "beta" in self.family else "alpha"

    @property
    def convex(self):
        return self.family != "topk-entropy-truncated"

    def __str__(self):
        extra = []
        if self.top_k > 1:
            extra.append(f"k={self.k}")
        if self.gamma > 0:
            extra.append(f"gamma={self.gamma:g}")
        return self.family + (f"({', '.join(extra)})" if extra else "")


class ScoreContext:
    """Scores ``u`` for one example together with its label(s).

    ``y`` is either an integer class index or a collection of indexes (a
    label set).  Multiclass views ``a`` and ``c`` need an integer label.
    """

    def __init__(self, u, y):
        self.u = np.asarray(u, dtype=float)
        self.m = self.u.size
        if np.ndim(y) == 0:
            y = int(y)
            if not 0 <= y < self.m:
                raise ValueError(f"label {y} out of range for {self.m} classes")
            self.y = y
            self.labels = np.array([y])
        else:
            labels = np.unique(np.asarray(y, dtype=int))
            if labels.size and (labels[0] < 0 or labels[-1] >= self.m):
                raise ValueError("label set has indexes out of range")
            self.y = None
            self.labels = labels

    @property
    def multiclass(self):
        return self.y is not None

    @property
    def mask(self):
        mask = np.zeros(self.m, dtype=bool)
        mask[self.labels] = True
        return mask

    @property
    def a(self):
        return self.u - self.u[self._need_y()]

    @property
    def c(self):
        c = np.ones(self.m)
        c[self._need_y()] = 0.0
        return c

    def without_y(self, vec):
        y = self._need_y()
        return np.delete(np.asarray(vec), y)

    def _need_y(self):
        if self.y is None:
            raise ValueError("this loss needs a single ground-truth label")
        return self.y


def _check_label_kind(spec, ctx):
    if spec.multilabel:
        n_pos = ctx.labels.size
        if n_pos == 0 or n_pos == ctx.m:
            raise ValueError("multilabel losses need a label set that is "
                             "neither empty nor the full set of classes")
    elif spec.family not in OVA_FAMILIES:
        ctx._need_y()


def _project(variant, b, k, r, rho=0.0):
    if variant == "beta":
        return project_topk_beta(b, k, r, rho)
    return project_topk_alpha(b, k, r, rho)


def _signs(ctx):
    return np.where(ctx.mask, 1.0, -1.0)


def _smooth_hinge(z, gamma):
    # Moreau envelope of max(0, 1 - z)
    if gamma == 0:
        return np.maximum(0.0, 1.0 - z)
    d = 1.0 - z
    return np.where(d <= 0.0, 0.0,
                    np.where(d >= gamma, d - 0.5 * gamma, 0.5 * d * d / gamma))


def _topk_hinge(z, k, variant):
    srt = np.sort(z)[::-1]
    if variant == "beta":
        return np.maximum(srt[:k], 0.0).sum() / k
    if z.size < k:
        return 0.0
    return max(0.0, srt[:k].sum() / k)


def _bipartite_inputs(ctx):
    mask = ctx.mask
    return 0.5 - ctx.u[mask], 0.5 + ctx.u[~mask]


def loss_value(spec, ctx):
    """Loss of one example; always nonnegative."""
    _check_label_kind(spec, ctx)
    fam = spec.family
    u = ctx.u
    if fam == "ova-hinge":
        return float(_smooth_hinge(_signs(ctx) * u, spec.gamma).sum())
    if fam == "ova-logistic":
        return float(np.logaddexp(0.0, -_signs(ctx) * u).sum())
    if fam in HINGE_FAMILIES:
        z = ctx.without_y(ctx.a + ctx.c)
        k = spec.top_k
        if spec.gamma == 0:
            return float(_topk_hinge(z, k, spec.variant))
        p = _project(spec.variant, z, k, spec.gamma)
        return float((z @ p - 0.5 * p @ p) / spec.gamma)
    if fam == "softmax":
        return float(logsumexp(u) - u[ctx.y])
    if fam == "topk-entropy":
        return solve_topk_entropy_primal(ctx.without_y(ctx.a), spec.k).loss
    if fam == "topk-entropy-truncated":
        a = ctx.without_y(ctx.a)
        keep = _truncated_support(a, spec.k)
        return float(np.logaddexp(0.0, logsumexp(a[keep])) if keep.size else 0.0)
    if fam == "ml-svm":
        mask = ctx.mask
        return float(max(0.0, 1.0 + u[~mask].max() - u[mask].min()))
    if fam == "ml-svm-smooth":
        b, b_bar = _bipartite_inputs(ctx)
        p, p_bar = project_bipartite(b, b_bar, spec.gamma)
        return float((b @ p - 0.5 * p @ p + b_bar @ p_bar - 0.5 * p_bar @ p_bar)
                     / spec.gamma)
    if fam == "ml-entropy":
        return float(logsumexp(u) - u[ctx.mask].mean())
    raise AssertionError(fam)


def _truncated_support(a_rest, k):
    """Indexes of the (m - k) smallest non-ground-truth scores, ties by index."""
    order = np.argsort(a_rest, kind="stable")
    return order[: max(a_rest.size - (k - 1), 0)]


def _in_topk_simplex(x, k, variant, tol=FEAS_TOL):
    s = x.sum()
    if np.any(x < -tol) or s > 1.0 + tol:
        return False
    cap = s / k if variant == "alpha" else 1.0 / k
    return bool(np.all(x <= cap + tol))


def conjugate_value(spec, v, ctx):
    """Convex conjugate ``L*(v)``; ``np.inf`` outside its effective domain."""
    _check_label_kind(spec, ctx)
    v = np.asarray(v, dtype=float)
    fam = spec.family
    tol = FEAS_TOL
    if fam == "topk-entropy-truncated":
        raise ValueError("the truncated top-k entropy is nonconvex and has no "
                         "useful conjugate")
    if fam == "ova-hinge":
        s = _signs(ctx) * v
        if np.any(s < -1.0 - tol) or np.any(s > tol):
            return np.inf
        s = np.clip(s, -1.0, 0.0)
        return float(np.sum(s + 0.5 * spec.gamma * s * s))
    if fam == "ova-logistic":
        beta = -_signs(ctx) * v
        if np.any(beta < -tol) or np.any(beta > 1.0 + tol):
            return np.inf
        beta = np.clip(beta, 0.0, 1.0)
        return float(np.sum(xlogy(beta, beta) + xlogy(1.0 - beta, 1.0 - beta)))
    if spec.multilabel:
        mask = ctx.mask
        vy, vn = v[mask], v[~mask]
        if fam == "ml-entropy":
            k = vy.size
            py = vy + 1.0 / k
            if (np.any(py < -tol) or np.any(vn < -tol)
                    or abs(py.sum() + vn.sum() - 1.0) > tol):
                return np.inf
            py, pn = np.maximum(py, 0.0), np.maximum(vn, 0.0)
            return float(xlogy(py, py).sum() + xlogy(pn, pn).sum())
        if not in_bipartite(-vy, vn, 1.0, tol):
            return np.inf
        if fam == "ml-svm":
            return float(-vn.sum())
        return float(0.5 * (vy.sum() - vn.sum()) + 0.5 * spec.gamma * v @ v)
    if abs(v.sum()) > tol * max(1.0, np.abs(v).max()):
        return np.inf
    x = ctx.without_y(v)
    if fam in HINGE_FAMILIES:
        if not _in_topk_simplex(x, spec.top_k, spec.variant, tol):
            return np.inf
        return float(0.5 * spec.gamma * x @ x - x.sum())
    # softmax and top-k entropy
    if not _in_topk_simplex(x, spec.top_k, "alpha", tol):
        return np.inf
    x = np.maximum(x, 0.0)
    rest = max(1.0 + v[ctx.y], 0.0)
    return float(xlogy(x, x).sum() + xlogy(rest, rest))


def conjugate_maximizer(spec, ctx):
    """A dual vector ``v`` attaining ``L(u) + L*(v) = <u, v>``.

    For smooth losses this is the gradient; for the nonsmooth hinge families
    it is one subgradient.
    """
    _check_label_kind(spec, ctx)
    fam = spec.family
    u = ctx.u
    if fam == "ova-hinge":
        sgn = _signs(ctx)
        d = 1.0 - sgn * u
        if spec.gamma > 0:
            s = -np.clip(d / spec.gamma, 0.0, 1.0)
        else:
            s = -(d > 0).astype(float)
        return sgn * s
    if fam == "ova-logistic":
        sgn = _signs(ctx)
        return -sgn * expit(-sgn * u)
    if fam in HINGE_FAMILIES:
        if spec.gamma > 0:
            return grad_smooth_topk_hinge(ctx, spec.top_k, spec.gamma, spec.variant)
        return _hinge_subgradient(ctx, spec.top_k, spec.variant)
    if fam == "softmax":
        v = np.exp(u - logsumexp(u))
        v[ctx.y] -= 1.0
        return v
    if fam == "topk-entropy":
        res = solve_topk_entropy_primal(ctx.without_y(ctx.a), spec.k)
        return _embed(ctx, res.x)
    if fam == "topk-entropy-truncated":
        return grad_truncated_topk_entropy(ctx, spec.k)
    mask = ctx.mask
    v = np.zeros(ctx.m)
    if fam == "ml-entropy":
        v = np.exp(u - logsumexp(u))
        v[mask] -= 1.0 / mask.sum()
        return v
    if fam == "ml-svm":
        if 1.0 + u[~mask].max() - u[mask].min() > 0:
            v[np.flatnonzero(mask)[np.argmin(u[mask])]] = -1.0
            v[np.flatnonzero(~mask)[np.argmax(u[~mask])]] = 1.0
        return v
    b, b_bar = _bipartite_inputs(ctx)
    p, p_bar = project_bipartite(b, b_bar, spec.gamma)
    v[mask] = -p / spec.gamma
    v[~mask] = p_bar / spec.gamma
    return v


def _embed(ctx, x):
    """Put ``x`` at the non-ground-truth coordinates and ``-sum(x)`` at y."""
    v = np.empty(ctx.m)
    rest = np.arange(ctx.m) != ctx.y
    v[rest] = x
    v[ctx.y] = -x.sum()
    return v


def _hinge_subgradient(ctx, k, variant):
    z = ctx.without_y(ctx.a + ctx.c)
    order = np.argsort(-z, kind="stable")
    x = np.zeros(z.size)
    top = order[:k]
    if variant == "beta":
        x[top[z[top] > 0]] = 1.0 / k
    elif z.size >= k and z[top].sum() > 0:
        x[top] = 1.0 / k
    return _embed(ctx, x)


def grad_smooth_topk_hinge(ctx, k, gamma, variant="alpha"):
    """Gradient of the smooth top-k hinge loss with respect to the scores."""
    if gamma <= 0:
        raise ValueError("the top-k hinge is only differentiable for gamma > 0")
    z = ctx.without_y(ctx.a + ctx.c)
    p = _project(variant, z, k, gamma)
    return _embed(ctx, p / gamma)


def grad_truncated_topk_entropy(ctx, k):
    """Gradient of the truncated top-k entropy on its current support.

    The ``k - 1`` largest non-ground-truth scores are excluded and get zero
    gradient; at ties the support is fixed by (score, index).
    """
    a = ctx.without_y(ctx.a)
    keep = _truncated_support(a, k)
    g_rest = np.zeros(a.size)
    if keep.size:
        # softmax over {y} and the kept coordinates, with a_y = 0
        log_norm = np.logaddexp(0.0, logsumexp(a[keep]))
        g_rest[keep] = np.exp(a[keep] - log_norm)
    return _embed(ctx, g_rest)


# ---------------------------------------------------------------------------
# SDCA dual updates


def solve_dual_block(spec, q, kii, lam_n, y, a_old=None):
    """Maximize the dual objective over one example's dual vector.

    ``q`` is the example's score vector with its own contribution removed
    (``W^T x_i - K_ii a_i``), ``kii`` its squared norm, ``lam_n = lambda * n``
    and ``y`` its label or label set.  Returns the new dual vector.
    """
    q = np.asarray(q, dtype=float)
    m = q.size
    fam = spec.family
    c_box = 1.0 / lam_n
    if fam == "ova-hinge":
        sgn = _label_signs(y, m)
        beta = np.clip((1.0 - sgn * q) / (kii + spec.gamma * lam_n), 0.0, c_box)
        return sgn * beta
    if fam == "ova-logistic":
        sgn = _label_signs(y, m)
        beta = _logistic_dual(sgn * q, kii / lam_n,
                              None if a_old is None else sgn * a_old * lam_n)
        return sgn * beta / lam_n
    if fam in HINGE_FAMILIES:
        rest = np.arange(m) != y
        denom = kii + spec.gamma * lam_n
        b = (q[rest] + (1.0 - q[y])) / denom
        rho = kii / denom
        x = _project(spec.variant, b, spec.top_k, c_box, rho)
        a = np.empty(m)
        a[rest] = -x
        a[y] = x.sum()
        return a
    if fam in ENTROPY_FAMILIES:
        rest = np.arange(m) != y
        res = prox_topk_entropy_dual(q[rest] - q[y], kii / lam_n, spec.top_k)
        a = np.empty(m)
        a[rest] = -res.x / lam_n
        a[y] = res.s / lam_n
        return a
    if fam in ("ml-svm", "ml-svm-smooth"):
        mask = _label_mask(y, m)
        rho = 1.0 / (kii + spec.gamma * lam_n)
        p, p_bar = project_bipartite(rho * (0.5 - q[mask]), rho * (0.5 + q[~mask]),
                                     c_box)
        a = np.empty(m)
        a[mask] = p
        a[~mask] = -p_bar
        return a
    if fam == "ml-entropy":
        mask = _label_mask(y, m)
        k = mask.sum()
        alpha = kii / lam_n
        p, p_bar, _ = prox_ml_entropy(q[mask] / alpha + 1.0 / k, q[~mask] / alpha,
                                      alpha)
        a = np.empty(m)
        a[mask] = -(p - 1.0 / k) / lam_n
        a[~mask] = -p_bar / lam_n
        return a
    raise ValueError(f"{fam} cannot be trained by dual coordinate ascent")


def dual_update(spec, i, state):
    """New dual vector for example ``i`` of a solver state.

    ``state`` must expose ``reduced_scores(i)`` (the vector ``q``),
    ``sq_norms``, ``lam_n``, ``labels`` and the dual matrix ``A``.
    Returns ``None`` for zero-norm examples, whose update is skipped.
    """
    kii = state.sq_norms[i]
    if kii <= 0.0:
        return None
    return solve_dual_block(spec, state.reduced_scores(i), kii, state.lam_n,
                            state.labels[i], state.A[i])


def _label_mask(y, m):
    mask = np.zeros(m, dtype=bool)
    mask[np.asarray(y, dtype=int)] = True
    return mask


def _label_signs(y, m):
    return np.where(_label_mask(y, m), 1.0, -1.0)


def _logistic_dual(sq, kappa, beta0=None):
    """Solve ``logit(beta) + kappa beta + sq = 0`` coordinatewise, beta in (0, 1).

    Works in ``z = logit(beta)``: ``g(z) = z + kappa expit(z) + sq`` is
    increasing with its root in ``[-sq - kappa, -sq]``.  Newton steps are
    kept inside that bracket.
    """
    sq = np.asarray(sq, dtype=float)
    lo = -sq - kappa
    hi = -sq.copy()
    if beta0 is not None:
        b0 = np.clip(beta0, 1e-12, 1.0 - 1e-12)
        z = np.clip(np.log(b0) - np.log1p(-b0), lo, hi)
    else:
        z = 0.5 * (lo + hi)
    for _ in range(100):
        sig = expit(z)
        g = z + kappa * sig + sq
        lo = np.where(g < 0, z, lo)
        hi = np.where(g > 0, z, hi)
        z_new = z - g / (1.0 + kappa * sig * (1.0 - sig))
        outside = (z_new <= lo) | (z_new >= hi)
        z_new = np.where(outside, 0.5 * (lo + hi), z_new)
        if np.all(np.abs(z_new - z) <= 1e-13 * (1.0 + np.abs(z))):
            z = z_new
            break
        z = z_new
    return expit(z)
