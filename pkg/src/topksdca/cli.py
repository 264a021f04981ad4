"""Command-line front end: ``python -m topksdca <command> ...``.

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 numerical failure.
"""

import argparse
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .data import (CircleSpec, DataError, gen_circle, make_folds, read_csv,
                   read_gram, read_libsvm, write_libsvm)
from .losses import LossSpec
from .metrics import PARTITION_KEYS, evaluate, tune_threshold
from .solver import (NumericalError, TrainConfig, finetune_truncated_entropy,
                     load_model, predict_scores, save_model, sdca_train)

log = logging.getLogger("topksdca")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# ---------------------------------------------------------------------------
# argument helpers


def _parse_kernel(text):
    """``none``, ``linear``, ``rbf:THETA`` or ``precomputed:PATH``."""
    if text in (None, "none"):
        return None, 0.0, None
    if text == "linear":
        return "linear", 0.0, None
    name, _, arg = text.partition(":")
    if name == "rbf":
        try:
            theta = float(arg)
        except ValueError:
            raise UsageError(f"bad RBF parameter in {text!r}") from None
        if theta <= 0:
            raise UsageError("RBF parameter must be positive")
        return "rbf", theta, None
    if name == "precomputed" and arg:
        return "precomputed", 0.0, arg
    raise UsageError(f"unknown kernel {text!r}; use none, linear, rbf:THETA "
                     "or precomputed:PATH")


def _parse_grid(text):
    """Comma list of numbers; ``2^a..2^b`` expands to powers of two."""
    values = []
    for part in text.split(","):
        part = part.strip()
        if ".." in part:
            lo, hi = part.split("..")
            if not (lo.startswith("2^") and hi.startswith("2^")):
                raise UsageError(f"ranges must look like 2^a..2^b, got {part!r}")
            a, b = int(lo[2:]), int(hi[2:])
            values.extend(2.0 ** e for e in range(a, b + 1))
        elif part.startswith("2^"):
            values.append(2.0 ** float(part[2:]))
        else:
            values.append(float(part))
    if not values:
        raise UsageError("empty grid")
    return values


def _load_data(path, multilabel=False, classes=None, n_features=None):
    path = Path(path)
    if not path.exists():
        raise DataError(f"{path}: no such file")
    if path.suffix.lower() == ".csv":
        data = read_csv(path, multilabel=multilabel, classes=classes)
        if n_features is not None and data.d != n_features:
            raise DataError(f"{path}: expected {n_features} features, got {data.d}")
    else:
        data = read_libsvm(path, multilabel=multilabel, classes=classes,
                           n_features=n_features)
    return data.validate()


def _load_train(path, spec):
    data = _load_data(path, spec.multilabel)
    if spec.multilabel and all(len(ys) == 1 for ys in data.labels):
        raise DataError(f"{path}: {spec.family} needs multilabel data, but every "
                        "example has a single label")
    return data


def _loss_spec(args):
    try:
        return LossSpec(args.loss, k=args.k, gamma=args.gamma)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def _train_config(args):
    if args.c is not None and args.lam is not None:
        raise UsageError("give either --c or --lambda, not both")
    try:
        c = args.c if args.c is not None or args.lam is not None else 1.0
        return TrainConfig(lam=args.lam, c=c, eps=args.eps,
                           max_epochs=args.max_epochs, seed=args.seed)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def _fit(data, spec, cfg, kernel, theta, gram):
    """Train one model; the truncated entropy starts from a softmax solution."""
    if spec.family == "topk-entropy-truncated":
        base, history = sdca_train(data, LossSpec("softmax"), cfg, kernel=kernel,
                                   theta=theta, gram=gram)
        model = finetune_truncated_entropy(data, spec.k, base.lam, base, gram=gram)
        return model, history
    return sdca_train(data, spec, cfg, kernel=kernel, theta=theta, gram=gram)


def _scores(model, data, gram_path):
    """Scores on ``data``; precomputed kernels read the test-by-train Gram."""
    feats = data.features
    if model.kernel == "precomputed":
        if gram_path is None:
            raise UsageError("a precomputed-kernel model needs --gram with the "
                             "test-by-train Gram matrix")
        feats = read_gram(gram_path)
        if feats.shape[0] != data.n:
            raise DataError("cross-Gram rows do not match the number of examples")
    try:
        return predict_scores(model, feats)
    except ValueError as exc:
        raise DataError(str(exc)) from None


def _read_model_data(model, path):
    n_features = model.W.shape[0] if model.W is not None else (
        model.X_train.shape[1] if model.X_train is not None else None)
    if n_features is None:
        # precomputed kernel: features are not used, but labels are
        return _load_data(path, model.multilabel, classes=model.classes)
    return _load_data(path, model.multilabel, classes=model.classes,
                      n_features=n_features)


def _load_model(path):
    try:
        return load_model(path)
    except (ValueError, KeyError) as exc:
        raise DataError(str(exc)) from None


def _check_metric(name, m):
    """Metric names accepted by ``cv --metric`` for ``m`` classes."""
    known = {"rank_loss", "mAP", *PARTITION_KEYS}
    for k in range(1, m + 1):
        known |= {f"top{k}_acc", f"precision_at_{k}", f"recall_at_{k}"}
    if name not in known:
        raise UsageError(f"unknown metric {name!r}; choose from "
                         f"{', '.join(sorted(known))}")


def _labels(data):
    return data.label_sets() if data.multilabel else data.labels


# ---------------------------------------------------------------------------
# commands


def cmd_gen(args):
    spec = CircleSpec(n_train=args.n_train, n_val=args.n_val, n_test=args.n_test,
                      seed=args.seed)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for name, split in zip(("train", "val", "test"), gen_circle(spec)):
        write_libsvm(split, out / f"circle_{name}.libsvm")
    log.info("wrote circle splits to %s", out)
    return EXIT_OK


def cmd_train(args):
    spec = _loss_spec(args)
    cfg = _train_config(args)
    kernel, theta, gram_path = _parse_kernel(args.kernel)
    data = _load_train(args.train, spec)
    gram = read_gram(gram_path) if gram_path else None
    try:
        model, history = _fit(data, spec, cfg, kernel, theta, gram)
    except ValueError as exc:
        raise DataError(str(exc)) from None
    save_model(model, args.model)
    if args.gap_log:
        with open(args.gap_log, "w") as fh:
            fh.write("epoch\tprimal\tdual\tgap\trel_gap\n")
            for rec in history:
                fh.write(f"{rec.epoch}\t{rec.primal!r}\t{rec.dual!r}\t"
                         f"{rec.gap!r}\t{rec.rel_gap!r}\n")
    last = history[-1]
    status = "converged" if last.rel_gap <= cfg.eps else "epoch limit reached"
    print(f"{status}: epochs={last.epoch} primal={last.primal:.10g} "
          f"dual={last.dual:.10g} rel_gap={last.rel_gap:.3g}")
    return EXIT_OK


def cmd_predict(args):
    model = _load_model(args.model)
    data = _read_model_data(model, args.data)
    scores = _scores(model, data, args.gram)
    k = min(args.top, model.m)
    order = np.argsort(-scores, axis=1, kind="stable")[:, :k]
    out = open(args.out, "w") if args.out else sys.stdout
    try:
        out.write("# top_labels\tscores (" + " ".join(model.classes) + ")\n")
        for row, top in zip(scores, order):
            labels = ",".join(model.classes[j] for j in top)
            out.write(labels + "\t" + " ".join(repr(float(v)) for v in row) + "\n")
    finally:
        if out is not sys.stdout:
            out.close()
    return EXIT_OK


def cmd_evaluate(args):
    model = _load_model(args.model)
    data = _read_model_data(model, args.data)
    delta = args.threshold
    if args.tune_threshold:
        if args.val is None:
            raise UsageError("--tune-threshold needs --val")
        if args.tune_threshold not in PARTITION_KEYS:
            raise UsageError(f"--tune-threshold must be one of {', '.join(PARTITION_KEYS)}")
        val = _read_model_data(model, args.val)
        val_scores = _scores(model, val, args.val_gram)
        delta = tune_threshold(val_scores, _labels(val), args.tune_threshold)
    scores = _scores(model, data, args.gram)
    ks = [int(k) for k in args.ks.split(",")]
    report = evaluate(scores, _labels(data), ks=ks, delta=delta)
    text = report.to_text()
    if args.report:
        Path(args.report).write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def _cv_job(job):
    data, spec, c, kernel, theta, gram, folds, fold, metric, eps, max_epochs, seed = job
    tr, te = np.flatnonzero(folds != fold), np.flatnonzero(folds == fold)
    cfg = TrainConfig(c=c, eps=eps, max_epochs=max_epochs, seed=seed)
    g_tr = gram[np.ix_(tr, tr)] if gram is not None else None
    model, _ = _fit(data.subset(tr), spec, cfg, kernel, theta, g_tr)
    feats = gram[np.ix_(te, tr)] if gram is not None else data.features[te]
    held = data.subset(te)
    report = evaluate(predict_scores(model, feats), _labels(held),
                      ks=range(1, data.m + 1))
    return dict(report.items())[metric]


def cmd_cv(args):
    spec_args = _loss_spec(args)
    kernel, theta0, gram_path = _parse_kernel(args.kernel)
    data = _load_train(args.train, spec_args)
    _check_metric(args.metric, data.m)
    if args.metric.startswith("top") and data.multilabel:
        raise UsageError("top-k accuracy needs multiclass data")
    gram = read_gram(gram_path) if gram_path else None
    c_grid = _parse_grid(args.c_grid)
    k_grid = [int(v) for v in _parse_grid(args.k_grid)] if args.k_grid else [args.k]
    theta_grid = _parse_grid(args.theta_grid) if args.theta_grid else [theta0]
    folds = make_folds(data.labels if not data.multilabel else data.n,
                       args.folds, seed=args.seed)
    lower_better = args.metric in ("rank_loss", "hamming_loss")
    points, jobs = [], []
    for k in k_grid:
        spec = LossSpec(spec_args.family, k=k, gamma=spec_args.gamma)
        for theta in theta_grid:
            for c in c_grid:
                points.append((k, theta, c))
                for fold in range(args.folds):
                    # seed derived from grid and fold index
                    seed = args.seed + 1000 * (len(points) - 1) + fold
                    jobs.append((data, spec, c, kernel, theta, gram, folds, fold,
                                 args.metric, args.eps, args.max_epochs, seed))
    if args.jobs > 1:
        with ProcessPoolExecutor(args.jobs) as pool:
            values = list(pool.map(_cv_job, jobs))
    else:
        values = [_cv_job(job) for job in jobs]
    values = np.asarray(values).reshape(len(points), args.folds).mean(axis=1)
    best = int(np.argmin(values) if lower_better else np.argmax(values))
    lines = ["k\ttheta\tc\t" + args.metric]
    lines += [f"{k}\t{float(t)!r}\t{float(c)!r}\t{float(v)!r}"
              for (k, t, c), v in zip(points, values)]
    text = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    k, t, c = points[best]
    print(f"best: k={k} theta={t!r} c={c!r} {args.metric}={values[best]:.6g}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def _add_train_flags(p):
    p.add_argument("--loss", required=True, help="loss family, e.g. topk-svm-a")
    p.add_argument("--k", type=int, default=1)
    p.add_argument("--gamma", type=float, default=0.0)
    p.add_argument("--c", type=float, default=None,
                   help="regularization as C = 1/(lambda n); default 1")
    p.add_argument("--lambda", dest="lam", type=float, default=None)
    p.add_argument("--eps", type=float, default=1e-3, help="relative gap target")
    p.add_argument("--max-epochs", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--kernel", default="none",
                   help="none, linear, rbf:THETA or precomputed:PATH")


def build_parser():
    parser = _Parser(prog="topksdca", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen", help="write the synthetic circle splits")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--n-train", type=int, default=200)
    p.add_argument("--n-val", type=int, default=200)
    p.add_argument("--n-test", type=int, default=200_000)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="train a model by SDCA")
    p.add_argument("--train", required=True)
    p.add_argument("--model", required=True, help="output model file")
    p.add_argument("--gap-log", help="write the duality gap history here")
    _add_train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="write scores and top labels")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--gram", help="test-by-train Gram matrix for precomputed kernels")
    p.add_argument("--top", type=int, default=5)
    p.add_argument("--out")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("evaluate", help="write the metrics report")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--gram")
    p.add_argument("--threshold", type=float, default=0.0)
    p.add_argument("--tune-threshold", metavar="METRIC")
    p.add_argument("--val")
    p.add_argument("--val-gram")
    p.add_argument("--ks", default="1,2,3,4,5")
    p.add_argument("--report")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("cv", help="cross-validated grid search")
    p.add_argument("--train", required=True)
    _add_train_flags(p)
    p.add_argument("--folds", type=int, default=10)
    p.add_argument("--c-grid", default="2^-3..2^3")
    p.add_argument("--k-grid")
    p.add_argument("--theta-grid")
    p.add_argument("--metric", default="top1_acc")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--out")
    p.set_defaults(func=cmd_cv)
    return parser


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.WARNING - 10 * args.verbose,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except BrokenPipeError:
        return EXIT_OK
    except (DataError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
