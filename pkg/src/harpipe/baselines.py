"""Classical semi-supervised baseline: En-Co-Training over statistical features.

Windows are reduced to 27-value feature vectors (seven statistics per axis,
three inter-axis correlations, three reserved slots), then an ensemble of a
decision tree, Gaussian naive Bayes, and a 3-nearest-neighbor classifier
co-trains by moving unanimously-agreed unlabeled samples into the labeled
pool.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
from sklearn.naive_bayes import GaussianNB
from sklearn.neighbors import KNeighborsClassifier
from sklearn.tree import DecisionTreeClassifier

from .errors import ConfigurationError, DataError

AXES = ("x", "y", "z")
STAT_NAMES = ("mean", "iqr", "mad", "rms", "std", "var", "spectral_energy")
FEATURE_NAMES = (
    [f"{stat}_{axis}" for stat in STAT_NAMES for axis in AXES]
    + ["corr_xy", "corr_xz", "corr_yz"]
    + ["reserved_0", "reserved_1", "reserved_2"]
)
NUM_FEATURES = 27


def _spectral_energy(axis):
    # squared DFT magnitudes excluding the zero-frequency bin (that information
    # is already the mean), normalized by window length
    spectrum = np.fft.fft(axis)
    return float((np.abs(spectrum[1:]) ** 2).sum() / len(axis))


def _correlation(a, b):
    # guarded Pearson correlation: 0 when either axis is constant
    sa, sb = a.std(), b.std()
    if sa == 0.0 or sb == 0.0:
        return 0.0
    return float(((a - a.mean()) * (b - b.mean())).mean() / (sa * sb))


def extract_features(window):
    """27-value feature vector for one window (see FEATURE_NAMES for layout)."""
    window = np.asarray(window, dtype=np.float64)
    if not np.all(np.isfinite(window)):
        raise DataError("window contains non-finite values")
    stats = {
        "mean": lambda v: float(v.mean()),
        "iqr": lambda v: float(np.percentile(v, 75) - np.percentile(v, 25)),
        "mad": lambda v: float(np.abs(v - v.mean()).mean()),
        "rms": lambda v: float(np.sqrt((v ** 2).mean())),
        "std": lambda v: float(v.std()),
        "var": lambda v: float(v.var()),
        "spectral_energy": _spectral_energy,
    }
    features = [stats[stat](window[:, axis])
                for stat in STAT_NAMES for axis in range(3)]
    features += [_correlation(window[:, 0], window[:, 1]),
                 _correlation(window[:, 0], window[:, 2]),
                 _correlation(window[:, 1], window[:, 2])]
    features += [0.0, 0.0, 0.0]
    return np.array(features)


def extract_feature_matrix(dataset):
    if len(dataset) == 0:
        return np.zeros((0, NUM_FEATURES))
    return np.stack([extract_features(w) for w in dataset.values])


def export_features_csv(dataset, path):
    """Feature matrix as CSV for external inspection."""
    matrix = extract_feature_matrix(dataset)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(FEATURE_NAMES)
        writer.writerows([f"{v:.9g}" for v in row] for row in matrix)
    return path


@dataclass(frozen=True)
class EnCoConfig:
    pool_fraction: float = 0.1
    iterations: int = 20
    transfer_cap: int | None = None  # max samples moved per iteration
    tree_max_depth: int = 10
    tree_min_leaf: int = 2
    nb_var_floor: float = 1e-9
    n_neighbors: int = 3
    seed: int = 0

    def __post_init__(self):
        if self.iterations < 1:
            raise ConfigurationError("iterations must be >= 1")
        if not 0.0 < self.pool_fraction <= 1.0:
            raise ConfigurationError("pool_fraction must be in (0, 1]")


class EnCoEnsemble:
    """Decision tree + Gaussian NB + k-NN voting ensemble with co-training.

    The k-NN sees z-scored features (statistics from the current labeled
    pool); the tree and NB see raw features. Prediction is majority vote,
    falling back to summed class posteriors (lowest index wins ties).
    """

    def __init__(self, config=EnCoConfig(), num_classes=None):
        self.config = config
        self.num_classes = num_classes
        self._scaler = None
        self._classifiers = None
        self.labeled_pool_sizes = []

    def _fresh_classifiers(self):
        c = self.config
        return [
            DecisionTreeClassifier(criterion="gini", max_depth=c.tree_max_depth,
                                   min_samples_leaf=c.tree_min_leaf,
                                   random_state=c.seed),
            GaussianNB(var_smoothing=c.nb_var_floor),
            KNeighborsClassifier(n_neighbors=c.n_neighbors, metric="euclidean"),
        ]

    def _fit_pool(self, features, labels):
        mean = features.mean(axis=0)
        std = np.maximum(features.std(axis=0), 1e-8)
        self._scaler = (mean, std)
        self._classifiers = self._fresh_classifiers()
        tree, nb, knn = self._classifiers
        tree.fit(features, labels)
        nb.fit(features, labels)
        knn.fit((features - mean) / std, labels)

    def _views(self, features):
        mean, std = self._scaler
        return [features, features, (features - mean) / std]

    def _predict_each(self, features):
        return np.stack([clf.predict(view)
                         for clf, view in zip(self._classifiers, self._views(features))])

    def fit(self, labeled_features, labels, unlabeled_features=None):
        labels = np.asarray(labels, dtype=np.int64)
        k = self.num_classes if self.num_classes is not None else labels.max() + 1
        missing = sorted(set(range(k)) - set(labels.tolist()))
        if missing:
            raise ConfigurationError(f"classes missing from labeled data: {missing}")
        self.num_classes = k

        pool_x = np.array(labeled_features, dtype=np.float64)
        pool_y = labels.copy()
        self.n_original = len(pool_y)
        remaining = (np.array(unlabeled_features, dtype=np.float64)
                     if unlabeled_features is not None and len(unlabeled_features)
                     else np.zeros((0, pool_x.shape[1])))
        rng = np.random.default_rng(self.config.seed)
        pool_size = max(1, int(round(self.config.pool_fraction * len(remaining))))

        self.labeled_pool_sizes = [len(pool_y)]
        self._fit_pool(pool_x, pool_y)
        for _ in range(self.config.iterations):
            if len(remaining) == 0:
                break
            draw = rng.choice(len(remaining), size=min(pool_size, len(remaining)),
                              replace=False)
            batch = remaining[draw]
            votes = self._predict_each(batch)
            agreed = (votes[0] == votes[1]) & (votes[1] == votes[2])
            transfer = np.where(agreed)[0]
            if self.config.transfer_cap is not None:
                transfer = transfer[:self.config.transfer_cap]
            if len(transfer):
                pool_x = np.concatenate([pool_x, batch[transfer]])
                pool_y = np.concatenate([pool_y, votes[0][transfer]])
                remaining = np.delete(remaining, draw[transfer], axis=0)
                self._fit_pool(pool_x, pool_y)
            self.labeled_pool_sizes.append(len(pool_y))
        self.original_labels = pool_y[:self.n_original]
        return self

    def predict(self, features):
        features = np.asarray(features, dtype=np.float64)
        votes = self._predict_each(features)
        proba = np.zeros((len(features), self.num_classes))
        for clf, view in zip(self._classifiers, self._views(features)):
            p = clf.predict_proba(view)
            proba[:, clf.classes_] += p
        out = np.empty(len(features), dtype=np.int64)
        for i in range(len(features)):
            classes, counts = np.unique(votes[:, i], return_counts=True)
            if counts.max() >= 2:
                out[i] = classes[np.argmax(counts)]
            else:
                out[i] = int(np.argmax(proba[i]))  # lowest index wins ties
        return out


def en_co_train(labeled, unlabeled, config=EnCoConfig()):
    """Fit the co-trained ensemble on datasets (features extracted here)."""
    if np.any(labeled.labels < 0):
        raise DataError("labeled dataset contains unlabeled windows")
    ensemble = EnCoEnsemble(config, num_classes=len(labeled.label_vocabulary))
    ensemble.fit(extract_feature_matrix(labeled), labeled.labels,
                 extract_feature_matrix(unlabeled) if unlabeled is not None else None)
    return ensemble


def supervised_ensemble(labeled, config=EnCoConfig()):
    """The same ensemble trained without any unlabeled data (reference point)."""
    return en_co_train(labeled, None, config)
