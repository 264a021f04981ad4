"""Stochastic dual coordinate ascent over the regularized primal/dual pair.

    P(W) = 1/n sum_i L(y_i, W^T x_i) + lambda/2 ||W||^2
    D(A) = -1/n sum_i L*(y_i, -lambda n a_i) - lambda/2 tr(A^T K A)

The dual matrix ``A`` has one row ``a_i`` per example and ``W = X^T A``.
In kernel mode ``W`` is never formed; the score matrix ``K A`` is cached
and updated with the same rank-1 corrections.
"""

import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import NamedTuple

import numpy as np
import scipy.sparse as sp

from .data import linear_gram, rbf_gram
from .losses import (
    LossSpec,
    ScoreContext,
    conjugate_value,
    dual_update,
    grad_truncated_topk_entropy,
    loss_value,
)

log = logging.getLogger(__name__)

__all__ = [
    "NumericalError",
    "TrainConfig",
    "DualState",
    "GapRecord",
    "Model",
    "sdca_train",
    "train_path",
    "primal_objective",
    "dual_objective",
    "duality_gap",
    "finetune_truncated_entropy",
    "truncated_objective",
    "predict_scores",
    "save_model",
    "load_model",
    "FORMAT_VERSION",
]

FORMAT_VERSION = 1


class NumericalError(ArithmeticError):
    """The optimizer produced a non-finite or inconsistent objective."""


@dataclass(frozen=True)
class TrainConfig:
    """Regularization and stopping rules.

    Give exactly one of ``lam`` and ``c``; ``c = 1 / (lam * n)``.
    """

    lam: float = None
    c: float = None
    eps: float = 1e-3
    max_epochs: int = 1000
    seed: int = 0
    gap_check_period: int = 1

    def __post_init__(self):
        if (self.lam is None) == (self.c is None):
            raise ValueError("give exactly one of lam and c")
        value = self.lam if self.lam is not None else self.c
        if not (np.isfinite(value) and value > 0):
            raise ValueError("the regularization parameter must be positive")
        if not self.eps > 0:
            raise ValueError("eps must be positive")
        if self.max_epochs < 1 or self.gap_check_period < 1:
            raise ValueError("max_epochs and gap_check_period must be >= 1")

    def lambda_for(self, n):
        return self.lam if self.lam is not None else 1.0 / (self.c * n)


class GapRecord(NamedTuple):
    epoch: int
    primal: float
    dual: float
    gap: float
    rel_gap: float


class DualState:
    """Dual matrix plus the primal quantities maintained alongside it."""

    def __init__(self, features, labels, lam, gram=None, A=None, m=None):
        self.labels = labels
        self.n = len(labels)
        self.lam = float(lam)
        self.lam_n = self.lam * self.n
        self.kernel = gram is not None
        if m is None:
            m = A.shape[1]
        self.m = m
        self.A = np.zeros((self.n, m)) if A is None else np.array(A, dtype=float)
        if self.kernel:
            self.gram = np.asarray(gram, dtype=float)
            if self.gram.shape != (self.n, self.n):
                raise ValueError("Gram matrix must be n x n")
            self.X = None
            self.sq_norms = np.diag(self.gram).copy()
            self.scores = self.gram @ self.A
            self.W = None
        else:
            self.gram = None
            self.X = sp.csr_matrix(features) if sp.issparse(features) \
                else np.asarray(features, dtype=float)
            self.sq_norms = (np.asarray(self.X.multiply(self.X).sum(axis=1)).ravel()
                             if sp.issparse(self.X)
                             else np.einsum("ij,ij->i", self.X, self.X))
            self.W = np.asarray(self.X.T @ self.A)
            self.scores = None
        self.skipped = 0

    def row_scores(self, i):
        if self.kernel:
            return self.scores[i].copy()
        x = self.X[i]
        if sp.issparse(x):
            return x.data @ self.W[x.indices]
        return x @ self.W

    def reduced_scores(self, i):
        """``q = W^T x_i - K_ii a_i``: scores without example i's own push."""
        return self.row_scores(i) - self.sq_norms[i] * self.A[i]

    def set_row(self, i, a_new):
        delta = a_new - self.A[i]
        if self.kernel:
            self.scores += np.outer(self.gram[:, i], delta)
        else:
            x = self.X[i]
            if sp.issparse(x):
                self.W[x.indices] += np.outer(x.data, delta)
            else:
                self.W += np.outer(x, delta)
        self.A[i] = a_new

    def all_scores(self):
        if self.kernel:
            return self.scores
        return np.asarray(self.X @ self.W)

    def sq_norm_w(self):
        if self.kernel:
            return float(np.sum(self.A * self.scores))
        return float(np.sum(self.W * self.W))

    def recompute(self):
        """Refresh the maintained quantities from ``A`` (drift control)."""
        if self.kernel:
            self.scores = self.gram @ self.A
        else:
            self.W = np.asarray(self.X.T @ self.A)


def _contexts(state, scores):
    return [ScoreContext(scores[i], state.labels[i]) for i in range(state.n)]


def primal_objective(spec, state):
    scores = state.all_scores()
    total = sum(loss_value(spec, ctx) for ctx in _contexts(state, scores))
    return total / state.n + 0.5 * state.lam * state.sq_norm_w()


def dual_objective(spec, state):
    total = 0.0
    for i in range(state.n):
        ctx = ScoreContext(np.zeros(state.m), state.labels[i])
        total += conjugate_value(spec, -state.lam_n * state.A[i], ctx)
        if not np.isfinite(total):
            return -np.inf
    return -total / state.n - 0.5 * state.lam * state.sq_norm_w()


def duality_gap(spec, state):
    p = primal_objective(spec, state)
    d = dual_objective(spec, state)
    return p, d, p - d


@dataclass(frozen=True)
class Model:
    """A trained classifier.

    Linear models keep ``W`` (d x m).  Kernel models keep the dual matrix
    ``A`` (n_train x m), the kernel name and, for ``rbf``/``linear``
    kernels, the training features needed to evaluate it.
    """

    spec: LossSpec
    lam: float
    classes: tuple
    W: np.ndarray = None
    A: np.ndarray = None
    kernel: str = None
    theta: float = 0.0
    X_train: np.ndarray = None
    multilabel: bool = False
    info: dict = field(default_factory=dict, compare=False)

    @property
    def m(self):
        return len(self.classes)

    @property
    def d(self):
        if self.W is not None:
            return self.W.shape[0]
        if self.X_train is not None:
            return self.X_train.shape[1]
        return self.A.shape[0]  # precomputed: columns of the cross-Gram

    @property
    def kind(self):
        return "linear" if self.kernel is None else "kernel"


def _check_labels(spec, data):
    if spec.multilabel and not data.multilabel:
        raise ValueError(f"{spec.family} needs multilabel data")
    if not spec.multilabel and data.multilabel and spec.family not in (
            "ova-hinge", "ova-logistic"):
        raise ValueError(f"{spec.family} needs multiclass data")


def _train_gram(data, kernel, theta, gram):
    if kernel is None:
        return None
    if kernel == "precomputed":
        if gram is None:
            raise ValueError("precomputed kernel needs a Gram matrix")
        return np.asarray(gram, dtype=float)
    if kernel == "rbf":
        return rbf_gram(data.features, theta)
    if kernel == "linear":
        return linear_gram(data.features)
    raise ValueError(f"unknown kernel {kernel!r}")


def sdca_train(data, spec, cfg, kernel=None, theta=0.0, gram=None, init_A=None,
               on_update=None):
    """Train by SDCA until the relative duality gap is at most ``cfg.eps``.

    Examples are visited in a fresh seeded permutation every epoch.  Returns
    ``(model, history)`` where ``history`` is a list of :class:`GapRecord`.
    ``init_A`` warm-starts from a dual matrix that is feasible for this
    regularization.  ``on_update(i, state)`` is called after each update.
    """
    spec = spec if isinstance(spec, LossSpec) else LossSpec(**spec)
    if not spec.convex:
        raise ValueError("the truncated top-k entropy is nonconvex; train a "
                         "softmax model and use finetune_truncated_entropy")
    if data.n == 0:
        raise ValueError("cannot train on an empty dataset")
    _check_labels(spec, data)
    lam = cfg.lambda_for(data.n)
    labels = data.labels if not data.multilabel else data.label_sets()
    K = _train_gram(data, kernel, theta, gram)
    state = DualState(data.features, labels, lam, gram=K, A=init_A, m=data.m)
    rng = np.random.default_rng(cfg.seed)
    history = []
    zero_norm = np.flatnonzero(state.sq_norms <= 0)
    if zero_norm.size:
        log.warning("%d examples have zero norm; their updates are skipped",
                    zero_norm.size)
    for epoch in range(1, cfg.max_epochs + 1):
        for i in rng.permutation(data.n):
            a_new = dual_update(spec, i, state)
            if a_new is None:
                state.skipped += 1
                continue
            if not np.all(np.isfinite(a_new)):
                raise NumericalError(f"non-finite dual update at example {i}")
            state.set_row(i, a_new)
            if on_update is not None:
                on_update(i, state)
        last = epoch == cfg.max_epochs
        if epoch % cfg.gap_check_period == 0 or last:
            state.recompute()
            rec = _gap_record(spec, state, epoch)
            history.append(rec)
            log.debug("epoch %d  P=%.10g  D=%.10g  rel_gap=%.3g",
                      epoch, rec.primal, rec.dual, rec.rel_gap)
            if rec.rel_gap <= cfg.eps:
                break
    model = Model(spec, lam, tuple(data.classes), A=state.A.copy(),
                  W=None if state.kernel else state.W.copy(),
                  kernel=kernel, theta=theta,
                  X_train=(_dense(data.features) if kernel in ("rbf", "linear")
                           else None),
                  multilabel=data.multilabel,
                  info={"epochs": history[-1].epoch,
                        "converged": history[-1].rel_gap <= cfg.eps})
    return model, history


def train_path(data, spec, cs, eps=1e-3, max_epochs=1000, seed=0,
               gap_check_period=1, **kwargs):
    """Train one model per value of ``c``, warm-starting each from the last.

    ``cs`` is visited in increasing order.  Going from ``c_old`` to ``c_new``
    the dual matrix is scaled by ``c_new / c_old``, which keeps every row
    feasible because ``lambda * n * a_i`` is unchanged.  Returns a list of
    ``(c, model, history)`` in that order.
    """
    out = []
    A, c_prev = None, None
    for c in sorted(float(c) for c in cs):
        cfg = TrainConfig(c=c, eps=eps, max_epochs=max_epochs, seed=seed,
                          gap_check_period=gap_check_period)
        init = None if A is None else A * (c / c_prev)
        model, hist = sdca_train(data, spec, cfg, init_A=init, **kwargs)
        out.append((c, model, hist))
        A, c_prev = model.A, c
    return out


def _dense(X):
    return X.toarray() if sp.issparse(X) else np.asarray(X, dtype=float)


def _gap_record(spec, state, epoch):
    p = primal_objective(spec, state)
    d = dual_objective(spec, state)
    if not (np.isfinite(p) and np.isfinite(d)):
        raise NumericalError(f"objective not finite at epoch {epoch}: P={p}, D={d}")
    gap = p - d
    if gap < -1e-9 * max(1.0, abs(p)):
        raise NumericalError(f"weak duality violated at epoch {epoch}: "
                             f"P={p:.12g} < D={d:.12g}")
    rel = gap / p if p > 0 else gap
    return GapRecord(epoch, p, d, gap, rel)


# ---------------------------------------------------------------------------
# nonconvex fine-tuning


def truncated_objective(scores, labels, k, lam_term):
    """Mean truncated top-k entropy plus a given regularization term."""
    total = sum(loss_value(LossSpec("topk-entropy-truncated", k=k),
                           ScoreContext(scores[i], labels[i]))
                for i in range(len(labels)))
    return total / len(labels) + lam_term


def _truncated_grad_matrix(scores, labels, k):
    return np.stack([grad_truncated_topk_entropy(ScoreContext(scores[i], labels[i]), k)
                     for i in range(len(labels))])


def finetune_truncated_entropy(data, k, lam, init, max_iter=500, gram=None,
                               tol=1e-6, return_trace=False):
    """Gradient descent with Armijo backtracking on the truncated top-k entropy.

    Starts from ``init`` (normally a softmax model).  The objective is
    nonconvex, so the result is a local solution.  Kernel models take steps
    along ``-(G / n + lam A)``, the gradient in the kernel's own geometry.
    """
    labels = data.labels
    n = data.n
    kernel_mode = init.kernel is not None
    if kernel_mode:
        K = gram if gram is not None else _train_gram(data, init.kernel,
                                                       init.theta, None)
        param = init.A.copy()

        def scores_of(p):
            return K @ p

        def reg(p, s):
            return 0.5 * lam * float(np.sum(p * s))
    else:
        X = data.features
        param = init.W.copy()

        def scores_of(p):
            return np.asarray(X @ p)

        def reg(p, s):
            return 0.5 * lam * float(np.sum(p * p))

    scores = scores_of(param)
    obj = truncated_objective(scores, labels, k, reg(param, scores))
    trace = [obj]
    step = 1.0
    for _ in range(max_iter):
        G = _truncated_grad_matrix(scores, labels, k) / n
        if kernel_mode:
            direction = -(G + lam * param)
            slope = -float(np.sum(direction * (K @ direction)))
            gnorm = float(np.sqrt(-slope))
        else:
            grad = np.asarray(X.T @ G) + lam * param
            direction = -grad
            slope = -float(np.sum(grad * grad))
            gnorm = float(np.sqrt(-slope))
        if gnorm <= tol * (1.0 + abs(obj)):
            break
        step = min(step * 2.0, 1e6)
        while True:
            cand = param + step * direction
            cand_scores = scores_of(cand)
            cand_obj = truncated_objective(cand_scores, labels, k,
                                           reg(cand, cand_scores))
            if cand_obj <= obj + 1e-4 * step * slope:
                break
            step *= 0.5
            if step < 1e-20:
                cand = None
                break
        if cand is None:
            break
        param, scores, obj = cand, cand_scores, cand_obj
        trace.append(obj)
    spec = LossSpec("topk-entropy-truncated", k=k)
    info = {"iterations": len(trace) - 1, "objective": obj}
    model = replace(init, spec=spec, lam=lam, info=info,
                    **({"A": param} if kernel_mode else {"W": param}))
    return (model, trace) if return_trace else model


# ---------------------------------------------------------------------------
# prediction and serialization


def predict_scores(model, features):
    """Scores ``f(x)`` for each row; for precomputed kernels pass the
    test-by-train Gram matrix instead of features."""
    if model.kernel is None:
        if features.shape[1] != model.W.shape[0]:
            raise ValueError(f"model expects {model.W.shape[0]} features, "
                             f"got {features.shape[1]}")
        return np.asarray(features @ model.W)
    if model.kernel == "precomputed":
        K = np.asarray(features, dtype=float)
        if K.shape[1] != model.A.shape[0]:
            raise ValueError("cross-Gram needs one column per training example")
    else:
        if features.shape[1] != model.X_train.shape[1]:
            raise ValueError(f"model expects {model.X_train.shape[1]} features, "
                             f"got {features.shape[1]}")
        if model.kernel == "rbf":
            K = rbf_gram(features, model.theta, model.X_train)
        else:
            K = linear_gram(features, model.X_train)
    return K @ model.A


def save_model(model, path):
    """Text header, an ``END`` line, then little-endian float64 arrays.

    The header is ``key: value`` lines; values are JSON.  ``payload`` lists
    the arrays that follow, in order, with their shapes (row-major).
    """
    arrays = []
    if model.kernel is None:
        arrays.append(("W", model.W))
    else:
        arrays.append(("A", model.A))
        if model.X_train is not None:
            arrays.append(("X_train", model.X_train))
    header = {
        "format": "topksdca-model",
        "version": FORMAT_VERSION,
        "family": model.spec.family,
        "k": model.spec.k,
        "gamma": model.spec.gamma,
        "lambda": model.lam,
        "m": model.m,
        "d": model.d,
        "classes": list(model.classes),
        "multilabel": model.multilabel,
        "kind": model.kind,
        "kernel": model.kernel,
        "theta": model.theta,
        "payload": [[name, list(arr.shape)] for name, arr in arrays],
    }
    with Path(path).open("wb") as fh:
        for key, val in header.items():
            fh.write(f"{key}: {json.dumps(val)}\n".encode())
        fh.write(b"END\n")
        for _, arr in arrays:
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_model(path):
    raw = Path(path).read_bytes()
    marker = raw.find(b"\nEND\n")
    if marker < 0:
        raise ValueError(f"{path}: not a model file (no END marker)")
    header = {}
    for line in raw[:marker].decode().splitlines():
        key, val = line.split(":", 1)
        header[key.strip()] = json.loads(val)
    if header.get("format") != "topksdca-model":
        raise ValueError(f"{path}: not a model file")
    if header["version"] > FORMAT_VERSION:
        raise ValueError(f"{path}: format version {header['version']} is newer "
                         "than this library")
    offset = marker + len(b"\nEND\n")
    arrays = {}
    for name, shape in header["payload"]:
        count = int(np.prod(shape))
        arr = np.frombuffer(raw, dtype="<f8", count=count, offset=offset)
        arrays[name] = arr.reshape(shape).astype(float)
        offset += 8 * count
    spec = LossSpec(header["family"], k=header["k"], gamma=header["gamma"])
    return Model(spec, header["lambda"], tuple(header["classes"]),
                 W=arrays.get("W"), A=arrays.get("A"), kernel=header["kernel"],
                 theta=header["theta"], X_train=arrays.get("X_train"),
                 multilabel=header["multilabel"])
