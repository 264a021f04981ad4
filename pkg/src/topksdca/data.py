"""Datasets: LibSVM/CSV ingestion, the synthetic circle benchmark, kernels, folds."""

import csv
import hashlib
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp

log = logging.getLogger(__name__)

__all__ = [
    "DataError",
    "Dataset",
    "read_libsvm",
    "write_libsvm",
    "read_csv",
    "write_gram",
    "read_gram",
    "CircleSpec",
    "gen_circle",
    "circle_posterior",
    "circle_bayes_topk_error",
    "rbf_gram",
    "linear_gram",
    "make_folds",
    "largest_label_filter",
]


class DataError(ValueError):
    """Malformed or inconsistent input data."""


@dataclass
class Dataset:
    """Feature matrix plus labels.

    ``labels`` is an integer array for multiclass data and a list of sorted
    integer arrays (label sets) for multilabel data.  ``classes`` maps the
    internal index to the external label string.
    """

    features: object
    labels: object
    classes: list
    multilabel: bool = False
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.multilabel:
            self.labels = np.asarray(self.labels, dtype=int)

    @property
    def n(self):
        return self.features.shape[0]

    @property
    def d(self):
        return self.features.shape[1]

    @property
    def m(self):
        return len(self.classes)

    def label_sets(self):
        if self.multilabel:
            return [np.asarray(y, dtype=int) for y in self.labels]
        return [np.array([y]) for y in self.labels]

    def label_matrix(self):
        """Dense 0/1 indicator matrix of shape (n, m)."""
        out = np.zeros((self.n, self.m), dtype=bool)
        for i, ys in enumerate(self.label_sets()):
            out[i, ys] = True
        return out

    def subset(self, idx):
        idx = np.asarray(idx, dtype=int)
        labels = ([self.labels[i] for i in idx] if self.multilabel
                  else self.labels[idx])
        return Dataset(self.features[idx], labels, list(self.classes),
                       self.multilabel, dict(self.meta))

    def validate(self):
        if self.n == 0:
            raise DataError("dataset is empty")
        if len(self.labels) != self.n:
            raise DataError("number of labels does not match number of rows")
        values = self.features.data if sp.issparse(self.features) else self.features
        if not np.all(np.isfinite(values)):
            raise DataError("features contain non-finite values")
        for i, ys in enumerate(self.label_sets()):
            if ys.size == 0:
                raise DataError(f"example {i} has an empty label set")
            if ys.min() < 0 or ys.max() >= self.m:
                raise DataError(f"example {i} has a label index out of range")
        return self


def _sort_key(label):
    try:
        return (0, float(label), label)
    except ValueError:
        return (1, 0.0, label)


def _class_map(raw_labels):
    classes = sorted({lab for labs in raw_labels for lab in labs}, key=_sort_key)
    return classes, {c: i for i, c in enumerate(classes)}


def read_libsvm(path, multilabel=False, n_features=None, classes=None):
    """Parse ``label[,label...] idx:val ...`` lines into a sparse Dataset.

    Feature indexes are 1-based in the file and 0-based in memory.  Labels
    are remapped to ``0..m-1`` in sorted (numeric when possible) order unless
    an explicit ``classes`` list is given, e.g. to reuse a training map.
    """
    path = Path(path)
    rows, cols, vals, raw_labels = [], [], [], []
    max_idx = 0
    with path.open() as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            head = parts[0]
            if ":" in head:
                labs = []  # no label, only features
                feats = parts
            else:
                labs = [lab for lab in head.split(",") if lab]
                feats = parts[1:]
            if not multilabel and len(labs) != 1:
                raise DataError(f"{path}:{lineno}: expected exactly one label")
            seen = set()
            r = len(raw_labels)
            for tok in feats:
                try:
                    idx_s, val_s = tok.split(":")
                    idx = int(idx_s)
                    val = float(val_s)
                except ValueError:
                    raise DataError(f"{path}:{lineno}: malformed feature {tok!r}") from None
                if idx < 1:
                    raise DataError(f"{path}:{lineno}: feature index must be >= 1")
                if idx in seen:
                    raise DataError(f"{path}:{lineno}: duplicate feature index {idx}")
                seen.add(idx)
                rows.append(r)
                cols.append(idx - 1)
                vals.append(val)
                max_idx = max(max_idx, idx)
            raw_labels.append(labs)
    if not raw_labels:
        raise DataError(f"{path}: no examples found")
    d = max_idx if n_features is None else n_features
    if max_idx > d:
        raise DataError(f"{path}: feature index {max_idx} exceeds n_features={d}")
    if classes is None:
        classes, index = _class_map(raw_labels)
    else:
        classes = [str(c) for c in classes]
        index = {c: i for i, c in enumerate(classes)}
    try:
        mapped = [sorted({index[lab] for lab in labs}) for labs in raw_labels]
    except KeyError as exc:
        raise DataError(f"{path}: label {exc.args[0]!r} not in the class map") from None
    X = sp.csr_matrix((vals, (rows, cols)), shape=(len(raw_labels), d), dtype=float)
    if multilabel:
        labels = [np.array(ys, dtype=int) for ys in mapped]
    else:
        labels = np.array([ys[0] for ys in mapped], dtype=int)
    return Dataset(X, labels, classes, multilabel)


def write_libsvm(dataset, path):
    """Write a Dataset in LibSVM format with round-trip exact values."""
    X = sp.csr_matrix(dataset.features)
    with Path(path).open("w") as fh:
        for i, ys in enumerate(dataset.label_sets()):
            row = X.getrow(i)
            labels = ",".join(dataset.classes[y] for y in ys)
            feats = " ".join(f"{j + 1}:{v!r}" for j, v in
                             sorted(zip(row.indices, row.data.tolist())))
            fh.write(f"{labels} {feats}".rstrip() + "\n")


def read_csv(path, label_column="label", multilabel=False, classes=None):
    """Dense CSV with a header row; the label column may hold ``a;b`` sets."""
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        if label_column not in header:
            raise DataError(f"{path}: no {label_column!r} column in header")
        li = header.index(label_column)
        feats, raw_labels = [], []
        for lineno, row in enumerate(reader, 2):
            if not row:
                continue
            if len(row) != len(header):
                raise DataError(f"{path}:{lineno}: expected {len(header)} fields")
            labs = [lab for lab in row[li].split(";") if lab]
            if not multilabel and len(labs) != 1:
                raise DataError(f"{path}:{lineno}: expected exactly one label")
            try:
                feats.append([float(v) for j, v in enumerate(row) if j != li])
            except ValueError:
                raise DataError(f"{path}:{lineno}: non-numeric feature") from None
            raw_labels.append(labs)
    if not raw_labels:
        raise DataError(f"{path}: no examples found")
    if classes is None:
        classes, index = _class_map(raw_labels)
    else:
        classes = [str(c) for c in classes]
        index = {c: i for i, c in enumerate(classes)}
    mapped = [sorted({index[lab] for lab in labs}) for labs in raw_labels]
    labels = ([np.array(ys) for ys in mapped] if multilabel
              else np.array([ys[0] for ys in mapped]))
    return Dataset(np.array(feats, dtype=float), labels, classes, multilabel)


def write_gram(path, K):
    """Raw little-endian float64, row-major, plus a ``.meta`` text sidecar."""
    K = np.ascontiguousarray(K, dtype="<f8")
    payload = K.tobytes()
    Path(path).write_bytes(payload)
    Path(str(path) + ".meta").write_text(
        f"rows: {K.shape[0]}\ncols: {K.shape[1]}\n"
        f"sha256: {hashlib.sha256(payload).hexdigest()}\n")


def read_gram(path):
    payload = Path(path).read_bytes()
    meta_path = Path(str(path) + ".meta")
    if not meta_path.exists():
        raise DataError(f"{path}: missing sidecar {meta_path.name}")
    meta = {}
    for line in meta_path.read_text().splitlines():
        if ":" in line:
            key, val = line.split(":", 1)
            meta[key.strip()] = val.strip()
    try:
        rows, cols = int(meta["rows"]), int(meta["cols"])
    except (KeyError, ValueError):
        raise DataError(f"{meta_path}: needs integer rows and cols") from None
    if len(payload) != 8 * rows * cols:
        raise DataError(f"{path}: size does not match {rows}x{cols} float64")
    digest = meta.get("sha256")
    if digest and digest != hashlib.sha256(payload).hexdigest():
        raise DataError(f"{path}: checksum mismatch")
    return np.frombuffer(payload, dtype="<f8").reshape(rows, cols).astype(float)


# ---------------------------------------------------------------------------
# synthetic circle data

_SEGMENT_LENGTHS = (1.0, 1.0, 1.0, 3.0, 1.0)
_SEGMENT_WEIGHTS = (
    (0.0, 1.0, 0.4, 0.3, 0.0),
    (1.0, 0.0, 0.1, 0.7, 0.0),
    (0.0, 0.0, 0.5, 0.0, 1.0),
)


@dataclass(frozen=True)
class CircleSpec:
    n_train: int = 200
    n_val: int = 200
    n_test: int = 200_000
    seed: int = 0
    lengths: tuple = _SEGMENT_LENGTHS
    weights: tuple = _SEGMENT_WEIGHTS

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        if np.any(w < 0) or np.any(w.sum(axis=1) <= 0):
            raise ValueError("segment weights must be nonnegative and not all zero")
        if w.shape[1] != len(self.lengths):
            raise ValueError("one weight per segment is required")

    @property
    def bounds(self):
        edges = np.concatenate(([0.0], np.cumsum(self.lengths)))
        return edges[:-1], edges[1:]

    @property
    def segment_probs(self):
        w = np.asarray(self.weights, dtype=float)
        return w / w.sum(axis=1, keepdims=True)


def _circle_split(spec, n, rng):
    m = len(spec.weights)
    counts = np.full(m, n // m)
    counts[: n % m] += 1
    starts, ends = spec.bounds
    probs = spec.segment_probs
    labels = np.repeat(np.arange(m), counts)
    seg = np.empty(n, dtype=int)
    for c in range(m):
        sel = labels == c
        seg[sel] = rng.choice(len(spec.lengths), size=sel.sum(), p=probs[c])
    pos = rng.uniform(starts[seg], ends[seg])
    perm = rng.permutation(n)
    labels, seg, pos = labels[perm], seg[perm], pos[perm]
    v = pos / ends[-1]
    X = np.column_stack((np.cos(2 * np.pi * v), np.sin(2 * np.pi * v)))
    classes = [str(c + 1) for c in range(m)]
    return Dataset(X, labels, classes, meta={"segment": seg, "position": pos})


def gen_circle(spec=CircleSpec()):
    """Train/validation/test splits of the three-class circle benchmark.

    Positions on ``[0, 7]`` are drawn per class from the segment weights,
    rescaled to ``[0, 1]`` and mapped to the angle ``2 pi v``.  Each split
    draws from its own child stream of ``numpy.random.SeedSequence(seed)``
    (PCG64), so the splits do not depend on each other's sizes.
    """
    streams = np.random.SeedSequence(spec.seed).spawn(3)
    sizes = (spec.n_train, spec.n_val, spec.n_test)
    return tuple(_circle_split(spec, n, np.random.Generator(np.random.PCG64(s)))
                 for n, s in zip(sizes, streams))


def circle_posterior(spec=CircleSpec()):
    """Class posteriors per segment (rows: segments), equal class priors."""
    dens = spec.segment_probs / np.asarray(spec.lengths)[None, :]
    return (dens / dens.sum(axis=0, keepdims=True)).T


def circle_bayes_topk_error(k, spec=CircleSpec()):
    """Exact Bayes top-k error of the circle distribution."""
    post = circle_posterior(spec)
    # marginal probability of each segment under equal priors
    seg_mass = spec.segment_probs.mean(axis=0)
    top = -np.sort(-post, axis=1)[:, :k].sum(axis=1)
    return float(np.sum(seg_mass * (1.0 - top)))


# ---------------------------------------------------------------------------
# kernels


def _sq_norms(X):
    if sp.issparse(X):
        return np.asarray(X.multiply(X).sum(axis=1)).ravel()
    return np.einsum("ij,ij->i", X, X)


def linear_gram(X, Y=None):
    """``K_ij = <x_i, y_j>`` as a dense array."""
    Y = X if Y is None else Y
    K = X @ Y.T
    return K.toarray() if sp.issparse(K) else np.asarray(K)


def rbf_gram(X, theta, Y=None):
    """``K_ij = exp(-theta ||x_i - y_j||^2)``; unit diagonal when ``Y`` is None."""
    if theta <= 0:
        raise ValueError("RBF parameter theta must be positive")
    same = Y is None
    Y = X if same else Y
    d2 = _sq_norms(X)[:, None] + _sq_norms(Y)[None, :] - 2.0 * linear_gram(X, Y)
    np.maximum(d2, 0.0, out=d2)
    if same:
        np.fill_diagonal(d2, 0.0)
    return np.exp(-theta * d2)


# ---------------------------------------------------------------------------
# splits


def make_folds(labels, folds, seed=0):
    """Fold index per example, stratified by class when possible.

    ``labels`` is either the number of examples (no stratification) or an
    integer label array.  Classes are dealt round-robin over the folds after
    a seeded shuffle.
    """
    if folds < 2:
        raise ValueError("need at least 2 folds")
    rng = np.random.default_rng(seed)
    if np.ndim(labels) == 0:
        n = int(labels)
        labels = None
    else:
        labels = np.asarray(labels, dtype=int)
        n = labels.size
    if folds > n:
        raise ValueError(f"cannot make {folds} folds from {n} examples")
    assign = np.empty(n, dtype=int)
    if labels is not None:
        counts = np.bincount(labels)
        if np.any((counts > 0) & (counts < folds)):
            log.warning("a class has fewer members than folds; "
                        "falling back to unstratified folds")
            labels = None
    if labels is None:
        perm = rng.permutation(n)
        assign[perm] = np.arange(n) % folds
        return assign
    offset = 0
    for c in np.unique(labels):
        idx = rng.permutation(np.flatnonzero(labels == c))
        assign[idx] = (np.arange(idx.size) + offset) % folds
        offset = (offset + idx.size) % folds
    return assign


def largest_label_filter(dataset, sizes):
    """Keep only the label with the largest annotated size per example.

    ``sizes[i]`` lists one size per entry of ``dataset.labels[i]``.  Ties go
    to the smaller class index.
    """
    if not dataset.multilabel:
        raise DataError("largest_label_filter expects a multilabel dataset")
    if len(sizes) != dataset.n:
        raise DataError("need one size list per example")
    keep = np.empty(dataset.n, dtype=int)
    for i, (ys, sz) in enumerate(zip(dataset.label_sets(), sizes)):
        sz = np.asarray(sz, dtype=float)
        if sz.shape != ys.shape:
            raise DataError(f"example {i}: sizes do not match its labels")
        best = sz.max()
        keep[i] = ys[sz == best].min()
    return Dataset(dataset.features, keep, list(dataset.classes), False,
                   dict(dataset.meta))
