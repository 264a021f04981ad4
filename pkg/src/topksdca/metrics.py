"""Evaluation measures for multiclass and multilabel predictions.

Scores are an ``(n, m)`` array; labels are either an integer array (one
class per example) or a list of integer arrays (label sets).
"""

import logging
from dataclasses import dataclass, field

import numpy as np

log = logging.getLogger(__name__)

__all__ = [
    "topk_error",
    "topk_accuracy",
    "bayes_topk_error",
    "ranking_metrics",
    "partition_metrics",
    "default_threshold_grid",
    "tune_threshold",
    "cardinality_threshold",
    "MetricsReport",
    "evaluate",
    "PARTITION_KEYS",
]

PARTITION_KEYS = ("f1_instance", "f1_macro", "f1_micro", "accuracy",
                  "subset_accuracy", "hamming_loss")
_LOWER_IS_BETTER = {"hamming_loss", "rank_loss"}


def _ranks(scores, labels):
    """Number of classes scoring strictly above the ground truth."""
    scores = np.atleast_2d(scores)
    labels = np.atleast_1d(np.asarray(labels, dtype=int))
    own = scores[np.arange(scores.shape[0]), labels]
    return (scores > own[:, None]).sum(axis=1)


def topk_error(scores, y, k):
    """1 when at least ``k`` classes score strictly above the ground truth.

    Works on one score vector with an integer label or on a score matrix
    with a label array (then an array of 0/1 values is returned).
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    err = (_ranks(scores, y) >= k).astype(int)
    return int(err[0]) if np.ndim(scores) == 1 else err


def topk_accuracy(scores, y, ks):
    ranks = _ranks(scores, y)
    return {k: float(np.mean(ranks < k)) for k in ks}


def bayes_topk_error(p, k):
    """Best achievable top-k error for the conditional distribution ``p``."""
    p = np.asarray(p, dtype=float)
    if np.any(p < 0) or abs(p.sum() - 1.0) > 1e-12 * max(1, p.size):
        raise ValueError("p must be a probability vector")
    return float(1.0 - np.sort(p)[::-1][:k].sum())


def _as_sets(labels, n):
    if isinstance(labels, np.ndarray) and labels.ndim == 1 and \
            np.issubdtype(labels.dtype, np.integer):
        return [labels[i:i + 1] for i in range(n)]
    return [np.asarray(y, dtype=int) for y in labels]


def _indicator(label_sets, m):
    Y = np.zeros((len(label_sets), m), dtype=bool)
    for i, ys in enumerate(label_sets):
        Y[i, ys] = True
    return Y


def ranking_metrics(scores, labels, ks=(1,)):
    """Rank loss, precision/recall at k and mean average precision.

    A relevant label counts as retrieved at ``k`` when fewer than ``k``
    labels score strictly above it, the same convention as
    :func:`topk_error`; precision at ``k`` is capped at 1 for ties.
    Examples with an empty or full label set are left out of the rank loss.
    Average precision uses the raw precision at each positive, examples
    ordered by decreasing score with ties broken by position.
    """
    scores = np.asarray(scores, dtype=float)
    n, m = scores.shape
    Y = _indicator(_as_sets(labels, n), m)
    n_pos = Y.sum(axis=1)

    valid = (n_pos > 0) & (n_pos < m)
    excluded = int(n - valid.sum())
    if excluded:
        log.warning("%d examples with empty or full label sets left out of "
                    "the rank loss", excluded)
    rloss = []
    for i in np.flatnonzero(valid):
        pos, neg = scores[i, Y[i]], scores[i, ~Y[i]]
        rloss.append(np.mean(pos[:, None] <= neg[None, :]))
    rank_loss = float(np.mean(rloss)) if rloss else float("nan")

    # strictly-higher counts for every (example, class)
    higher = (scores[:, None, :] > scores[:, :, None]).sum(axis=2)
    precision, recall = {}, {}
    has_pos = n_pos > 0
    for k in ks:
        hits = (Y & (higher < k)).sum(axis=1)
        precision[k] = float(np.mean(np.minimum(hits, k) / k))
        recall[k] = float(np.mean(hits[has_pos] / n_pos[has_pos]))

    aps = []
    for j in range(m):
        col = Y[:, j]
        if not col.any():
            continue
        order = np.argsort(-scores[:, j], kind="stable")
        rel = col[order]
        prec = np.cumsum(rel) / np.arange(1, n + 1)
        aps.append(prec[rel].mean())
    mean_ap = float(np.mean(aps)) if aps else float("nan")
    return rank_loss, precision, recall, mean_ap


def _f1(tp, fp, fn):
    denom = 2 * tp + fp + fn
    return np.divide(2 * tp, denom, out=np.zeros_like(denom, dtype=float),
                     where=denom > 0)


def partition_metrics(scores, labels, delta):
    """Threshold-based metrics for the prediction ``{j : f_j >= delta}``.

    F1 cells with a zero denominator count as 0; an example whose predicted
    and true label sets are both empty has accuracy 1.
    """
    scores = np.asarray(scores, dtype=float)
    n, m = scores.shape
    Y = _indicator(_as_sets(labels, n), m)
    H = scores >= delta
    tp = (H & Y).astype(float)
    fp = (H & ~Y).astype(float)
    fn = (~H & Y).astype(float)
    inter = tp.sum(axis=1)
    union = (H | Y).sum(axis=1)
    acc = np.divide(inter, union, out=np.ones(n), where=union > 0)
    return {
        "f1_instance": float(np.mean(_f1(tp.mean(1), fp.mean(1), fn.mean(1)))),
        "f1_macro": float(np.mean(_f1(tp.mean(0), fp.mean(0), fn.mean(0)))),
        "f1_micro": float(_f1(np.array(tp.mean()), np.array(fp.mean()),
                              np.array(fn.mean()))),
        "accuracy": float(acc.mean()),
        "subset_accuracy": float(np.mean(np.all(H == Y, axis=1))),
        "hamming_loss": float(np.mean(H != Y)),
    }


def default_threshold_grid():
    """0 and +-10^e for e = -5.9, -5.7, ..., 0.9 (71 values)."""
    mags = 10.0 ** np.round(np.arange(-5.9, 0.95, 0.2), 1)
    return np.concatenate((-mags[::-1], [0.0], mags))


def _better(metric, new, best):
    if metric in _LOWER_IS_BETTER:
        return new < best
    return new > best


def tune_threshold(scores, labels, metric="f1_instance", grid=None):
    """Grid threshold optimizing a partition metric; ties go to smaller |delta|."""
    if metric not in PARTITION_KEYS:
        raise ValueError(f"unknown metric {metric!r}; choose from "
                         f"{', '.join(PARTITION_KEYS)}")
    grid = default_threshold_grid() if grid is None else np.asarray(grid, float)
    order = np.argsort(np.abs(grid), kind="stable")
    best_delta, best_val = None, None
    for delta in grid[order]:
        val = partition_metrics(scores, labels, delta)[metric]
        if best_val is None or _better(metric, val, best_val):
            best_delta, best_val = float(delta), val
    return best_delta


def cardinality_threshold(scores, cardinality, grid=None):
    """Grid threshold whose mean predicted set size is closest to ``cardinality``."""
    grid = default_threshold_grid() if grid is None else np.asarray(grid, float)
    sizes = np.array([(scores >= d).sum(axis=1).mean() for d in grid])
    return float(grid[np.argmin(np.abs(sizes - cardinality))])


@dataclass
class MetricsReport:
    """All ranking and partition scores at one threshold."""

    topk_acc: dict = field(default_factory=dict)
    rank_loss: float = float("nan")
    precision_at_k: dict = field(default_factory=dict)
    recall_at_k: dict = field(default_factory=dict)
    mAP: float = float("nan")
    f1_instance: float = float("nan")
    f1_macro: float = float("nan")
    f1_micro: float = float("nan")
    accuracy: float = float("nan")
    subset_accuracy: float = float("nan")
    hamming_loss: float = float("nan")
    delta: float = 0.0
    n: int = 0

    def items(self):
        """Flat ``(key, value)`` pairs in a fixed order."""
        out = [("n", self.n), ("delta", self.delta)]
        out += [(f"top{k}_acc", v) for k, v in sorted(self.topk_acc.items())]
        out.append(("rank_loss", self.rank_loss))
        out += [(f"precision_at_{k}", v) for k, v in sorted(self.precision_at_k.items())]
        out += [(f"recall_at_{k}", v) for k, v in sorted(self.recall_at_k.items())]
        out.append(("mAP", self.mAP))
        out += [(key, getattr(self, key)) for key in PARTITION_KEYS]
        return out

    def to_text(self):
        lines = []
        for key, val in self.items():
            lines.append(f"{key}\t{val}" if isinstance(val, int)
                         else f"{key}\t{val:.10g}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text):
        rep = cls()
        for line in text.splitlines():
            if not line.strip():
                continue
            key, val = line.split("\t")
            if key == "n":
                rep.n = int(val)
            elif key.startswith("top") and key.endswith("_acc"):
                rep.topk_acc[int(key[3:-4])] = float(val)
            elif key.startswith("precision_at_"):
                rep.precision_at_k[int(key[13:])] = float(val)
            elif key.startswith("recall_at_"):
                rep.recall_at_k[int(key[10:])] = float(val)
            else:
                setattr(rep, key, float(val))
        return rep


def evaluate(scores, labels, ks=(1, 2, 3, 4, 5), delta=0.0):
    """Compute a full :class:`MetricsReport`.

    ``ks`` larger than the number of classes are dropped.  Top-k accuracy is
    reported for multiclass labels only.
    """
    scores = np.asarray(scores, dtype=float)
    n, m = scores.shape
    ks = tuple(k for k in ks if 1 <= k <= m)
    rank_loss, prec, rec, mean_ap = ranking_metrics(scores, labels, ks)
    rep = MetricsReport(rank_loss=rank_loss, precision_at_k=prec,
                        recall_at_k=rec, mAP=mean_ap, delta=float(delta), n=n)
    if isinstance(labels, np.ndarray) and labels.ndim == 1:
        rep.topk_acc = topk_accuracy(scores, labels, ks)
    for key, val in partition_metrics(scores, labels, delta).items():
        setattr(rep, key, val)
    return rep
