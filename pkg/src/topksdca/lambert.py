"""Lambert W function of the exponent, ``V(t) = W(exp(t))``.

``V(t)`` is the unique positive root ``x`` of ``x + log(x) = t``.  It shows up
in every entropic proximal map used by the solver, so it is evaluated with a
fifth-order Householder iteration started from the two asymptotic regimes
(``exp(t)`` for small ``t`` and ``t - log(t)`` for large ``t``).
"""

import math

import numpy as np

__all__ = ["lambert_v", "lambert_v_prime", "lambert_v_inverse"]

# Below this the initial guess exp(t) is already exact to double precision
# (the relative correction is ~exp(t)).
_TINY_T = -40.0
_SWITCH_T = 1.0
# extra-step trigger: a few ulps of t, well inside the 1e-12 contract
_RESIDUAL_TOL = 1e-14
_MAX_EXTRA_STEPS = 4
_EPS = float(np.finfo(float).eps)
# below this size a scalar loop beats numpy's per-call overhead
_SMALL = 16


def _householder5(x, t):
    # f(x) = x + log(x) - t and its first four derivatives.
    f = x + np.log(x) - t
    inv = 1.0 / x
    f1 = 1.0 + inv
    f2 = -inv * inv
    f3 = 2.0 * inv * inv * inv
    f4 = -6.0 * inv * inv * inv * inv
    # x + 4 (1/f)''' / (1/f)'''' written without negative powers of f
    num = -6.0 * f1**3 + 6.0 * f * f1 * f2 - f * f * f3
    den = (24.0 * f1**4 - 36.0 * f * f1 * f1 * f2 + 6.0 * f * f * f2 * f2
           + 8.0 * f * f * f1 * f3 - f**3 * f4)
    step = 4.0 * f * num / den
    x_new = x + step
    # keep iterates positive; the true root is > 0
    return np.where(x_new > 0.0, x_new, 0.5 * x)


def _householder5_scalar(x, t):
    # same step as above in scalar arithmetic, for the many tiny calls
    f = x + math.log(x) - t
    inv = 1.0 / x
    f1 = 1.0 + inv
    f2 = -inv * inv
    f3 = 2.0 * inv * inv * inv
    f4 = -6.0 * f2 * f2
    num = -6.0 * f1**3 + 6.0 * f * f1 * f2 - f * f * f3
    den = (24.0 * f1**4 - 36.0 * f * f1 * f1 * f2 + 6.0 * f * f * f2 * f2
           + 8.0 * f * f * f1 * f3 - f**3 * f4)
    x_new = x + 4.0 * f * num / den
    return x_new if x_new > 0.0 else 0.5 * x


def _lambert_scalar(t):
    if t < _TINY_T:
        return math.exp(t)
    x = math.exp(t) if t < _SWITCH_T else t - math.log(t)
    x = _householder5_scalar(x, t)
    x = _householder5_scalar(x, t)
    tol = _RESIDUAL_TOL + 4.0 * _EPS * abs(t)
    for _ in range(_MAX_EXTRA_STEPS):
        if abs(x + math.log(x) - t) <= tol:
            break
        x = _householder5_scalar(x, t)
    return x


def _check_finite(t):
    if not np.all(np.isfinite(t)):
        raise ValueError("lambert_v requires finite arguments")


def lambert_v(t):
    """Return ``V(t) = W(exp(t))`` for scalar or array ``t``.

    The defining residual ``|V + log(V) - t|`` is below 1e-12 whenever
    ``exp(t)`` does not underflow.  For ``t`` below about -745 the result
    underflows to 0, which callers treat as an inactive variable.
    """
    t_arr = np.asarray(t, dtype=float)
    _check_finite(t_arr)
    scalar = t_arr.ndim == 0
    t_arr = np.atleast_1d(t_arr)
    if t_arr.size <= _SMALL:
        out = np.array([_lambert_scalar(v) for v in t_arr.ravel().tolist()])
        return float(out[0]) if scalar else out.reshape(t_arr.shape)
    out = np.empty_like(t_arr)

    tiny = t_arr < _TINY_T
    out[tiny] = np.exp(t_arr[tiny])

    work = ~tiny
    if np.any(work):
        tw = t_arr[work]
        low = tw < _SWITCH_T
        x = np.where(low, np.exp(np.minimum(tw, _SWITCH_T)),
                     tw - np.log(np.maximum(tw, _SWITCH_T)))
        x = _householder5(x, tw)
        x = _householder5(x, tw)
        for _ in range(_MAX_EXTRA_STEPS):
            res = np.abs(x + np.log(x) - tw)
            bad = res > _RESIDUAL_TOL + 4.0 * _EPS * np.abs(tw)
            if not np.any(bad):
                break
            x[bad] = _householder5(x[bad], tw[bad])
        out[work] = x

    return float(out[0]) if scalar else out


def lambert_v_prime(t):
    """Derivative ``V'(t) = V(t) / (1 + V(t))``, always in (0, 1)."""
    v = lambert_v(t)
    return v / (1.0 + v)


def lambert_v_inverse(v):
    """Inverse map ``v + log(v)`` for ``v > 0``."""
    v_arr = np.asarray(v, dtype=float)
    if not np.all(np.isfinite(v_arr)) or np.any(v_arr <= 0.0):
        raise ValueError("lambert_v_inverse requires finite v > 0")
    res = v_arr + np.log(v_arr)
    return float(res) if res.ndim == 0 else res
