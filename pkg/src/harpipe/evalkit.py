"""Metrics, bootstrap confidence intervals, confusion deltas, linear evaluation,
and embedding export.

Weighted F1 is the headline metric; macro F1 averages only over classes that
actually occur in the true labels, so small test sets are not diluted by
absent classes. Confidence intervals use the percentile bootstrap (1000
resamples, 2.5/97.5 percentiles with linear interpolation).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from . import model as md
from .errors import DataError, DimensionError

DEFAULT_RESAMPLES = 1000


def _check_pair(true, predicted):
    true = np.asarray(true, dtype=np.int64)
    predicted = np.asarray(predicted, dtype=np.int64)
    if true.shape != predicted.shape:
        raise DimensionError(
            f"label arrays differ in length: {true.shape} vs {predicted.shape}")
    return true, predicted


def confusion_matrix(true, predicted, num_classes):
    """Counts matrix, rows = true class, columns = predicted class."""
    true, predicted = _check_pair(true, predicted)
    counts = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(counts, (true, predicted), 1)
    return counts


def _per_class_f1(counts):
    tp = np.diag(counts).astype(np.float64)
    fp = counts.sum(axis=0) - tp
    fn = counts.sum(axis=1) - tp
    denom = 2 * tp + fp + fn
    with np.errstate(invalid="ignore"):
        f1 = np.where(denom > 0, 2 * tp / np.maximum(denom, 1), 0.0)
    return f1, counts.sum(axis=1)  # (f1 per class, support per class)


def weighted_f1(true, predicted, num_classes):
    """Support-weighted mean of per-class F1 (0/0 counts as 0)."""
    counts = confusion_matrix(true, predicted, num_classes)
    f1, support = _per_class_f1(counts)
    total = support.sum()
    if total == 0:
        raise DataError("no labels to score")
    return float((f1 * support).sum() / total)


def macro_f1(true, predicted, num_classes):
    """Unweighted mean of per-class F1 over classes present in the true labels."""
    counts = confusion_matrix(true, predicted, num_classes)
    f1, support = _per_class_f1(counts)
    present = support > 0
    if not present.any():
        raise DataError("no labels to score")
    return float(f1[present].mean())


def cohens_kappa(true, predicted, num_classes):
    """(p_o - p_e) / (1 - p_e); defined as 0 when chance agreement is 1."""
    counts = confusion_matrix(true, predicted, num_classes)
    n = counts.sum()
    if n == 0:
        raise DataError("no labels to score")
    p_o = np.trace(counts) / n
    p_e = float((counts.sum(axis=1) * counts.sum(axis=0)).sum()) / (n * n)
    if p_e == 1.0:
        return 0.0
    return float((p_o - p_e) / (1.0 - p_e))


def bootstrap_ci(true, predicted, metric, n_resamples=DEFAULT_RESAMPLES,
                 level=0.95, seed=0):
    """Percentile bootstrap interval for metric(true, predicted).

    Each resample draws its indices from an rng stream keyed by (seed, resample
    index), so resamples are reproducible and order-independent.
    """
    true, predicted = _check_pair(true, predicted)
    n = len(true)
    if n == 0:
        raise DataError("cannot bootstrap an empty test set")
    values = np.empty(n_resamples)
    for i in range(n_resamples):
        rng = np.random.default_rng([seed, i])
        idx = rng.integers(0, n, size=n)
        values[i] = metric(true[idx], predicted[idx])
    alpha = 100.0 * (1.0 - level) / 2.0
    lo, hi = np.percentile(values, [alpha, 100.0 - alpha])
    return float(lo), float(hi)


def delta_confusion(a, b):
    """Signed elementwise difference a - b of two confusion matrices."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise DimensionError(f"confusion shapes differ: {a.shape} vs {b.shape}")
    return a.astype(np.int64) - b.astype(np.int64)


@dataclass
class MetricsReport:
    weighted_f1: float
    macro_f1: float
    kappa: float
    confusion: np.ndarray
    intervals: dict = field(default_factory=dict)  # metric -> (lo, hi)
    n_test: int = 0
    n_resamples: int = DEFAULT_RESAMPLES
    seed: int = 0

    def to_dict(self):
        out = {}
        for name, point in (("weighted_f1", self.weighted_f1),
                            ("macro_f1", self.macro_f1),
                            ("kappa", self.kappa)):
            lo, hi = self.intervals.get(name, (point, point))
            out[name] = {"point": point, "ci_lo": lo, "ci_hi": hi}
        out["confusion"] = self.confusion.tolist()
        out["n_test"] = self.n_test
        out["n_resamples"] = self.n_resamples
        out["seed"] = self.seed
        return out


def evaluate_predictions(true, predicted, num_classes,
                         n_resamples=DEFAULT_RESAMPLES, seed=0):
    """Full MetricsReport with bootstrap intervals for every metric."""
    true, predicted = _check_pair(true, predicted)
    metrics = {
        "weighted_f1": lambda t, p: weighted_f1(t, p, num_classes),
        "macro_f1": lambda t, p: macro_f1(t, p, num_classes),
        "kappa": lambda t, p: cohens_kappa(t, p, num_classes),
    }
    intervals = {name: bootstrap_ci(true, predicted, fn, n_resamples=n_resamples,
                                    seed=seed)
                 for name, fn in metrics.items()}
    return MetricsReport(
        weighted_f1=metrics["weighted_f1"](true, predicted),
        macro_f1=metrics["macro_f1"](true, predicted),
        kappa=metrics["kappa"](true, predicted),
        confusion=confusion_matrix(true, predicted, num_classes),
        intervals=intervals,
        n_test=len(true),
        n_resamples=n_resamples,
        seed=seed,
    )


def evaluate_model(params, test, n_resamples=DEFAULT_RESAMPLES, seed=0):
    """Predict on a labeled test dataset and score."""
    if np.any(test.labels < 0):
        raise DataError("test dataset contains unlabeled windows")
    probs = md.predict_har(params, test.values)
    predicted = probs.argmax(axis=1)
    return evaluate_predictions(test.labels, predicted,
                                len(test.label_vocabulary),
                                n_resamples=n_resamples, seed=seed)


def linear_evaluate(core_source, train, validation, test, schedule=None, seed=0,
                    n_resamples=DEFAULT_RESAMPLES):
    """Representation-quality probe: frozen core + fresh linear softmax head.

    Only the head trains (categorical cross-entropy, Adam); the score proxies
    how linearly separable the core's 96-dim features are.
    """
    from . import pipeline  # deferred: pipeline imports this module

    if schedule is None:
        schedule = pipeline.TrainingSchedule()
    params = md.build_linear_model(core_source, len(train.label_vocabulary),
                                   seed=seed)
    params, history = pipeline.train_supervised(
        params, train, validation, schedule,
        epochs=schedule.finetune_epochs, seed=seed)
    report = evaluate_model(params, test, n_resamples=n_resamples, seed=seed)
    return report, params, history


def export_embeddings(params, dataset, path):
    """One CSV row per window: user_id, label name (blank if unlabeled), features."""
    feats = md.core_features(params, dataset.values)
    width = feats.shape[1] if len(dataset) else params.arch.feature_dim()
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["user_id", "label"] + [f"f{i}" for i in range(width)])
        for i in range(len(dataset)):
            name = (dataset.label_vocabulary[dataset.labels[i]]
                    if dataset.labels[i] >= 0 else "")
            writer.writerow([dataset.user_ids[i], name]
                            + [f"{v:.9g}" for v in feats[i]])
    return path
