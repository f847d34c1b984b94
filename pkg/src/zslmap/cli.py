"""Command-line interface: ``zslmap {generate,train,refine,predict,evaluate}``.

Every command prints a small plain-text table and can write its numbers to
a JSON metrics file (``--metrics``). Failures print one ``error: ...`` line
to stderr and exit nonzero (2 for usage errors, 1 otherwise).
"""
from __future__ import annotations

import argparse
import json
import math
import sys
from itertools import product
from pathlib import Path

import numpy as np

from zslmap import daezsl, gzsl
from zslmap.aezsl import fit_aezsl
from zslmap.errors import ZslError
from zslmap.eszsl import argmax_rows, fit_eszsl
from zslmap.evalmetrics import flat_hit_at_k, hierarchical_precision_at_k, load_hierarchy, multiclass_accuracy
from zslmap.matio import (
    SyntheticSpec,
    ZslDataset,
    generate_synthetic,
    load_blocks,
    load_dataset,
    read_matrix,
    save_blocks,
    save_dataset,
    validation_problem,
    write_matrix,
)
from zslmap.refine import refine_labels, refine_one_step

CV_GRID = tuple(10.0**p for p in range(-3, 4))
GRAD_TOLERANCE = 1e-4
CHECK_GRAD_INSTANCES = 8


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _nonneg(text):
    v = float(text)
    if not (v >= 0 and math.isfinite(v)):
        raise argparse.ArgumentTypeError(f"expected a nonnegative number, got {text}")
    return v


def _pos(text):
    v = float(text)
    if not (v > 0 and math.isfinite(v)):
        raise argparse.ArgumentTypeError(f"expected a positive number, got {text}")
    return v


def _count(text):
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return v


def _table(rows) -> None:
    width = max((len(str(k)) for k, _ in rows), default=0)
    for key, value in rows:
        if isinstance(value, float):
            value = f"{value:.6g}"
        print(f"{str(key):<{width}}  {value}")


def _write_metrics(path, payload) -> None:
    if path is None:
        return
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _write_labels(path, labels) -> None:
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        for v in labels:
            fh.write(f"{int(v)}\n")


def _read_labels(path) -> np.ndarray:
    col = read_matrix(path, name=str(path))
    if col.shape[1] != 1:
        raise ZslError(f"{path} must hold one label per line")
    return col[:, 0].astype(np.int64)


# --------------------------------------------------------------------------
# generate
# --------------------------------------------------------------------------


def cmd_generate(args) -> dict:
    spec = SyntheticSpec(
        d=args.d,
        a=args.a,
        n_seen_classes=args.cs,
        n_unseen_classes=args.ct,
        per_category=args.per_cat,
        mapping_drift=args.drift,
        noise_sigma=args.noise,
        seed=args.seed,
    )
    ds = generate_synthetic(spec)
    manifest = save_dataset(ds, args.out)
    _table(
        [
            ("dataset", ds.name),
            ("manifest", str(manifest)),
            ("d", ds.d),
            ("a", ds.a),
            ("seen categories", ds.n_seen_classes),
            ("unseen categories", ds.n_unseen_classes),
            ("seen instances", ds.n_seen),
            ("unseen instances", ds.n_unseen),
        ]
    )
    return {"command": "generate", "name": ds.name, "n_seen": ds.n_seen, "n_unseen": ds.n_unseen}


# --------------------------------------------------------------------------
# train
# --------------------------------------------------------------------------


def _unseen_accuracy(ds: ZslDataset, scores) -> float | None:
    if ds.unseen_labels is None or ds.n_unseen == 0:
        return None
    return multiclass_accuracy(argmax_rows(scores), ds.unseen_label_indices)


def _fit_linear(ds: ZslDataset, method: str, hp: dict, max_sweeps: int, tol: float):
    """Fit and return ``(unseen classifiers d x C_t, model record)``."""
    if method == "eszsl":
        model = fit_eszsl(ds, hp["gamma"], hp["lambda"])
        return model.mapping @ ds.unseen_semantics, model
    l3 = 0.0 if method == "aezsl-sim" else hp["lambda3"]
    model = fit_aezsl(ds, lambda1=hp["lambda1"], lambda2=hp["lambda2"], lambda3=l3, max_sweeps=max_sweeps, tol=tol)
    return model.classifiers, model


def _grid_names(method: str) -> tuple:
    return {"eszsl": ("gamma", "lambda"), "aezsl": ("lambda1", "lambda2", "lambda3"), "aezsl-sim": ("lambda1", "lambda2")}[method]


def cross_validate(ds: ZslDataset, method: str, hp: dict, max_sweeps: int, tol: float) -> tuple[dict, float]:
    """Grid search on the inner validation problem; ties keep the first grid point."""
    inner = validation_problem(ds)
    names = _grid_names(method)
    best, best_acc = None, -1.0
    for values in product(CV_GRID, repeat=len(names)):
        trial = dict(hp, **dict(zip(names, values)))
        P, _ = _fit_linear(inner, method, trial, max_sweeps, tol)
        acc = _unseen_accuracy(inner, inner.unseen_features.T @ P)
        if acc > best_acc:
            best, best_acc = trial, acc
    return best, best_acc


def _check_grad(ds: ZslDataset, args) -> dict:
    n = min(CHECK_GRAD_INSTANCES, ds.n_seen)
    params = daezsl.init_params(ds.d, ds.a, args.hidden, args.rho, seed=args.seed, fixed_mask=args.fixed_mask)
    errors = daezsl.gradient_check(params, ds.seen_features[:, :n], ds.seen_label_indices[:n], ds.seen_semantics)
    worst = max(errors.values())
    _table([(f"rel. error {k}", v) for k, v in errors.items()] + [("max relative gradient error", worst)])
    if not worst < GRAD_TOLERANCE:
        raise ZslError(f"gradient check failed: max relative error {worst:.3e} >= {GRAD_TOLERANCE:g}")
    return {"command": "check-grad", "max_relative_error": worst, "per_parameter": errors}


def cmd_train(args) -> dict:
    ds = load_dataset(args.data)
    method = args.method
    if method == "daezsl":
        if args.cv == "grid":
            raise UsageError("--cv grid is available for eszsl, aezsl and aezsl-sim")
        if args.gzsl:
            raise UsageError("--gzsl is available for aezsl only")
        if args.check_grad:
            return _check_grad(ds, args)
        res = daezsl.train_daezsl(
            ds,
            epochs=args.epochs,
            batch_size=args.batch,
            learning_rate=args.rate,
            rho=args.rho,
            seed=args.seed,
            hidden_size=args.hidden,
            fixed_mask=args.fixed_mask,
            dropout=args.dropout,
        )
        daezsl.save_params(args.out, res.params)
        train_acc = multiclass_accuracy(
            daezsl.predict_daezsl(res.params, ds.seen_features, ds.seen_semantics), ds.seen_label_indices
        )
        report = {
            "command": "train",
            "method": method,
            "epochs": args.epochs,
            "final_epoch_loss": res.epoch_losses[-1] if res.epoch_losses else None,
            "train_accuracy": train_acc,
        }
        acc = _unseen_accuracy(ds, daezsl.diagonal_scores(res.params, ds.unseen_features, ds.unseen_semantics))
        if acc is not None:
            report["unseen_accuracy"] = acc
        _table([(k, v) for k, v in report.items() if k != "command"])
        return report
    if args.check_grad:
        raise UsageError("--check-grad applies to --method daezsl")
    if args.gzsl and method != "aezsl":
        raise UsageError("--gzsl is available for aezsl only")

    hp = {"gamma": args.gamma, "lambda": args.lam, "lambda1": args.lambda1, "lambda2": args.lambda2, "lambda3": args.lambda3}
    report = {"command": "train", "method": method}
    if args.cv == "grid":
        hp, val_acc = cross_validate(ds, method, hp, args.max_sweeps, args.tol)
        report["validation_accuracy"] = val_acc
    chosen = {k: hp[k] for k in _grid_names(method)}
    report["hyperparameters"] = chosen

    if args.gzsl:
        split = gzsl.gzsl_split(ds, args.holdout)
        model = gzsl.fit_aezsl_gzsl(split.train, hp["lambda1"], hp["lambda2"], hp["lambda3"], args.max_sweeps, args.tol)
        meta = {
            "gzsl": True,
            "holdout_fraction": args.holdout,
            "n_seen_classes": ds.n_seen_classes,
            "n_sweeps": model.n_sweeps,
            "converged": model.converged,
            **chosen,
        }
        save_blocks(args.out, "aezsl", meta, {"classifiers": model.classifiers})
        report.update(n_sweeps=model.n_sweeps, converged=model.converged)
    else:
        P, model = _fit_linear(ds, method, hp, args.max_sweeps, args.tol)
        if method == "eszsl":
            save_blocks(args.out, "eszsl", chosen, {"mapping": model.mapping})
            train_scores = ds.seen_features.T @ model.mapping @ ds.seen_semantics
            report["train_accuracy"] = multiclass_accuracy(argmax_rows(train_scores), ds.seen_label_indices)
        else:
            meta = {"gzsl": False, "n_sweeps": model.n_sweeps, "converged": model.converged, **chosen}
            meta["lambda3"] = hp["lambda3"] if method == "aezsl" else 0.0
            save_blocks(args.out, "aezsl", meta, {"classifiers": P})
            report.update(n_sweeps=model.n_sweeps, converged=model.converged)
            if model.objective_trace:
                report["final_objective"] = model.objective_trace[-1]
        acc = _unseen_accuracy(ds, ds.unseen_features.T @ P)
        if acc is not None:
            report["unseen_accuracy"] = acc

    rows = [(k, v) for k, v in report.items() if k not in ("command", "hyperparameters")]
    rows += [(k, v) for k, v in chosen.items()]
    _table(rows)
    return report


# --------------------------------------------------------------------------
# model loading helpers
# --------------------------------------------------------------------------


def _load_model(path):
    method, meta, blocks = load_blocks(path)
    needed = {"eszsl": ("mapping",), "aezsl": ("classifiers",), "daezsl": daezsl.PARAM_NAMES}
    if method not in needed:
        raise ZslError(f"unknown model method {method!r} in {path}")
    missing = [b for b in needed[method] if b not in blocks]
    if missing:
        raise ZslError(f"model file {path} lacks blocks: {', '.join(missing)}")
    return method, meta, blocks


def _unseen_scores(ds: ZslDataset, method, meta, blocks, features=None):
    """``n x C_t`` scores of ``features`` (default: unseen features) against the unseen categories."""
    X = ds.unseen_features if features is None else features
    if meta.get("gzsl"):
        raise ZslError("this model was trained with --gzsl; use predict --gzsl")
    if method == "eszsl":
        return X.T @ blocks["mapping"] @ ds.unseen_semantics
    if method == "aezsl":
        P = blocks["classifiers"]
        if P.shape != (ds.d, ds.n_unseen_classes):
            raise ZslError(f"model classifiers {P.shape} do not match dataset ({ds.d}, {ds.n_unseen_classes})")
        return X.T @ P
    if method == "daezsl":
        return daezsl.diagonal_scores(daezsl.load_params_from_blocks(meta, blocks), X, ds.unseen_semantics)
    raise ZslError(f"unknown model method {method!r}")


def _classifiers(ds: ZslDataset, method, meta, blocks) -> np.ndarray:
    if meta.get("gzsl"):
        raise ZslError("refinement needs a standard (non-GZSL) model")
    if method == "eszsl":
        return blocks["mapping"] @ ds.unseen_semantics
    if method == "aezsl":
        P = blocks["classifiers"]
        if P.shape != (ds.d, ds.n_unseen_classes):
            raise ZslError(f"model classifiers {P.shape} do not match dataset ({ds.d}, {ds.n_unseen_classes})")
        return P
    raise ZslError(f"refinement needs a linear classifier model, got {method}")


# --------------------------------------------------------------------------
# refine
# --------------------------------------------------------------------------


def cmd_refine(args) -> dict:
    ds = load_dataset(args.data)
    method, meta, blocks = _load_model(args.model)
    P0 = _classifiers(ds, method, meta, blocks)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    X = ds.unseen_features
    truth = ds.unseen_label_indices
    n, C = ds.n_unseen, ds.n_unseen_classes
    gammas = dict(gamma1=args.gamma1, gamma2=args.gamma2, gamma3=args.gamma3, k_nn=args.k_nn)
    initial = argmax_rows(X.T @ P0)

    if args.one_step:
        labels, _ = refine_one_step(X, P0, ds.unseen_semantics, **gammas)
        history = [initial, labels]
        sizes = [0, n]
        k = n
    else:
        k = args.k if args.k is not None else max(1, n // 10)
        res = refine_labels(X, P0, ds.unseen_semantics, k, **gammas)
        labels = res.labels
        history = res.label_history
        sizes = [0] + list(np.cumsum([len(m) for m in res.moved]))

    _write_labels(out / "labels.csv", labels)
    scores = np.zeros((n, C))
    scores[np.arange(n), labels] = 1.0
    write_matrix(out / "scores.csv", scores)

    trace = []
    with open(out / "trace.csv", "w", encoding="ascii", newline="\n") as fh:
        fh.write("iteration,n_confident,accuracy\n")
        for it, (lab, size) in enumerate(zip(history, sizes)):
            acc = multiclass_accuracy(lab, truth) if truth is not None and n else None
            trace.append({"iteration": it, "n_confident": int(size), "accuracy": acc})
            fh.write(f"{it},{int(size)},{'' if acc is None else repr(acc)}\n")

    print(f"{'iteration':>9}  {'confident':>9}  accuracy")
    for row in trace:
        acc = "-" if row["accuracy"] is None else f"{row['accuracy']:.4f}"
        print(f"{row['iteration']:>9}  {row['n_confident']:>9}  {acc}")
    report = {
        "command": "refine",
        "k": int(k),
        "one_step": bool(args.one_step),
        "n_iterations": len(history) - 1,
        "trace": trace,
        **{key: float(v) for key, v in gammas.items() if key != "k_nn"},
    }
    if truth is not None and n:
        report["initial_accuracy"] = trace[0]["accuracy"]
        report["final_accuracy"] = trace[-1]["accuracy"]
    return report


# --------------------------------------------------------------------------
# predict
# --------------------------------------------------------------------------


def _predict_gzsl(ds: ZslDataset, meta, blocks, args, out: Path) -> dict:
    split = gzsl.gzsl_split(ds, float(meta["holdout_fraction"]))
    P = blocks["classifiers"]
    if P.shape != (ds.d, ds.n_seen_classes + ds.n_unseen_classes):
        raise ZslError("GZSL model does not match the dataset's joint label space")
    scores = split.test_features.T @ P
    report = {"command": "predict", "gzsl": True}
    if args.gamma_cal == "auto":
        cal = gzsl.calibrate_threshold(
            split.train, float(meta["lambda1"]), float(meta["lambda2"]), float(meta["lambda3"]), split.holdout
        )
        gamma_cal = cal.gamma_cal
        report["validation_ausuc"] = cal.ausuc
        report["validation_operating_point"] = list(cal.operating_point)
    else:
        gamma_cal = float(args.gamma_cal)
    labels = gzsl.calibrated_stack(scores, split.seen_mask, gamma_cal)
    report["gamma_cal"] = gamma_cal
    _write_labels(out / "labels.csv", labels)
    write_matrix(out / "scores.csv", scores)
    known = split.test_labels >= 0
    if known.all() and known.size:
        seen_acc, unseen_acc = gzsl.split_accuracies(labels, split.test_labels, split.seen_mask)
        report.update(seen_accuracy=seen_acc, unseen_accuracy=unseen_acc)
        h = 0.0 if seen_acc + unseen_acc == 0 else 2 * seen_acc * unseen_acc / (seen_acc + unseen_acc)
        report["harmonic_mean"] = h
        curve = gzsl.select_gamma_ausuc(scores, split.test_labels, split.seen_mask)
        report["test_ausuc"] = curve.ausuc
    _table([(k, v) for k, v in report.items() if k not in ("command", "validation_operating_point")])
    return report


def cmd_predict(args) -> dict:
    ds = load_dataset(args.data)
    method, meta, blocks = _load_model(args.model)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if args.gzsl:
        if not meta.get("gzsl"):
            raise ZslError("--gzsl needs a model trained with train --gzsl")
        return _predict_gzsl(ds, meta, blocks, args, out)
    if args.gamma_cal is not None:
        raise UsageError("--gamma-cal applies to --gzsl")
    scores = _unseen_scores(ds, method, meta, blocks)
    labels = argmax_rows(scores)
    _write_labels(out / "labels.csv", labels)
    write_matrix(out / "scores.csv", scores)
    report = {"command": "predict", "gzsl": False, "method": method, "n": int(labels.size)}
    if ds.unseen_labels is not None and ds.n_unseen:
        report["accuracy"] = multiclass_accuracy(labels, ds.unseen_label_indices)
    _table([(k, v) for k, v in report.items() if k != "command"])
    return report


# --------------------------------------------------------------------------
# evaluate
# --------------------------------------------------------------------------


def cmd_evaluate(args) -> dict:
    ds = load_dataset(args.data)
    scores = read_matrix(args.scores, name=str(args.scores))
    if args.labels is not None:
        truth = _read_labels(args.labels)
    elif ds.unseen_labels is not None:
        truth = ds.unseen_label_indices
    else:
        raise ZslError("no ground-truth labels: the dataset has none and --labels was not given")
    if scores.shape != (truth.size, ds.n_unseen_classes):
        raise ZslError(f"scores have shape {scores.shape}, expected ({truth.size}, {ds.n_unseen_classes})")
    if (args.hierarchy is None) != (args.test_categories is None):
        raise UsageError("--hierarchy and --test-categories go together")
    ks = args.hit_k or [1]
    for K in ks:
        if K > ds.n_unseen_classes:
            raise UsageError(f"--hit-k {K} exceeds the {ds.n_unseen_classes} unseen categories")

    report = {"command": "evaluate", "accuracy": multiclass_accuracy(argmax_rows(scores), truth)}
    rows = [("accuracy", report["accuracy"])]
    report["flat_hit"] = {}
    for K in ks:
        report["flat_hit"][str(K)] = flat_hit_at_k(scores, truth, K)
        rows.append((f"flat hit@{K}", report["flat_hit"][str(K)]))
    if args.hierarchy is not None:
        hierarchy = load_hierarchy(args.hierarchy, args.test_categories)
        report["hierarchical_precision"] = {}
        for K in ks:
            v = hierarchical_precision_at_k(scores, truth, K, hierarchy, ds.unseen_categories)
            report["hierarchical_precision"][str(K)] = v
            rows.append((f"hierarchical precision@{K}", v))
    _table(rows)
    return report


# --------------------------------------------------------------------------
# parser
# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="zslmap", description="Category-specific visual-semantic mappings for zero-shot classification.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("generate", help="write a synthetic dataset")
    g.add_argument("--d", type=_count, default=30, help="feature dimension")
    g.add_argument("--a", type=_count, default=15, help="semantic dimension")
    g.add_argument("--cs", type=_count, default=20, help="seen categories")
    g.add_argument("--ct", type=_count, default=5, help="unseen categories")
    g.add_argument("--per-cat", type=_count, default=25, help="instances per category")
    g.add_argument("--drift", type=_nonneg, default=0.3, help="per-category mapping perturbation")
    g.add_argument("--noise", type=_nonneg, default=0.3, help="feature noise standard deviation")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", default="data", help="output directory")
    g.add_argument("--metrics")
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="fit a model on the seen categories")
    t.add_argument("--data", required=True, help="dataset manifest")
    t.add_argument("--method", required=True, choices=("eszsl", "aezsl", "aezsl-sim", "daezsl"))
    t.add_argument("--out", default="model.txt")
    t.add_argument("--gamma", type=_pos, default=1.0)
    t.add_argument("--lambda", dest="lam", type=_pos, default=1.0)
    t.add_argument("--lambda1", type=_pos, default=1.0)
    t.add_argument("--lambda2", type=_pos, default=1.0)
    t.add_argument("--lambda3", type=_nonneg, default=1.0)
    t.add_argument("--max-sweeps", type=_count, default=100)
    t.add_argument("--tol", type=_pos, default=1e-6)
    t.add_argument("--cv", choices=("none", "grid"), default="none")
    t.add_argument("--gzsl", action="store_true", help="learn mappings for seen and unseen categories")
    t.add_argument("--holdout", type=_pos, default=0.2, help="seen instances held out for GZSL testing")
    t.add_argument("--epochs", type=int, default=50)
    t.add_argument("--batch", type=_count, default=16)
    t.add_argument("--rate", type=_nonneg, default=0.01)
    t.add_argument("--rho", type=_nonneg, default=0.5)
    t.add_argument("--hidden", type=_count, default=None)
    t.add_argument("--fixed-mask", action="store_true")
    t.add_argument("--dropout", type=_nonneg, default=0.0)
    t.add_argument("--check-grad", action="store_true")
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--metrics")
    t.set_defaults(func=cmd_train)

    r = sub.add_parser("refine", help="progressively refine unseen labels")
    r.add_argument("--data", required=True)
    r.add_argument("--model", required=True)
    r.add_argument("--k", type=_count, default=None, help="instances moved per iteration (default n/10)")
    r.add_argument("--gamma1", type=_nonneg, default=3.0)
    r.add_argument("--gamma2", type=_nonneg, default=0.01)
    r.add_argument("--gamma3", type=_nonneg, default=0.01)
    r.add_argument("--k-nn", type=_count, default=7)
    r.add_argument("--one-step", action="store_true")
    r.add_argument("--out-dir", default="refined")
    r.add_argument("--metrics")
    r.set_defaults(func=cmd_refine)

    pr = sub.add_parser("predict", help="score and label test instances")
    pr.add_argument("--data", required=True)
    pr.add_argument("--model", required=True)
    pr.add_argument("--gzsl", action="store_true")
    pr.add_argument("--gamma-cal", default=None, help="'auto' or a number")
    pr.add_argument("--out-dir", default="predictions")
    pr.add_argument("--metrics")
    pr.set_defaults(func=cmd_predict)

    e = sub.add_parser("evaluate", help="accuracy, hit@K and hierarchical precision@K")
    e.add_argument("--data", required=True)
    e.add_argument("--scores", required=True)
    e.add_argument("--labels", help="one true label per line (default: the dataset's unseen labels)")
    e.add_argument("--hit-k", type=_count, action="append")
    e.add_argument("--hierarchy", help="edge list, one 'parent child' per line")
    e.add_argument("--test-categories", help="one test category per line")
    e.add_argument("--metrics")
    e.set_defaults(func=cmd_evaluate)
    return p


def _validate(args) -> None:
    if getattr(args, "gamma_cal", None) not in (None, "auto"):
        try:
            float(args.gamma_cal)
        except ValueError:
            raise UsageError(f"--gamma-cal must be 'auto' or a number, got {args.gamma_cal}") from None
    if getattr(args, "dropout", 0.0) >= 1:
        raise UsageError("--dropout must be below 1")
    if getattr(args, "holdout", 0.5) >= 1:
        raise UsageError("--holdout must be below 1")
    if getattr(args, "epochs", 0) < 0:
        raise UsageError("--epochs must be nonnegative")


def _one_line(message) -> str:
    return " ".join(str(message).split())


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        _validate(args)
        report = args.func(args)
        _write_metrics(args.metrics, report)
    except UsageError as exc:
        print(f"error: {_one_line(exc)}", file=sys.stderr)
        return 2
    except (ZslError, ValueError, OSError) as exc:
        print(f"error: {_one_line(exc)}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
