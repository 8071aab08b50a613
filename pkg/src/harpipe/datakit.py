"""Dataset ingestion, normalization, windowing, splits, subsampling, synthesis.

A Dataset stores its windows as one stacked (N, 400, 3) array with parallel
per-window metadata. Hard labels use -1 for "unlabeled"; soft labels are an
optional (N, num_classes) probability matrix.

CSV contract (UTF-8, header required):
    user_id,timestamp_ms,x,y,z[,label]
Timestamps must be strictly increasing within a user. The label column is
optional; a missing column means the file holds unlabeled data.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConfigurationError, DataError, ParseError

WINDOW_LEN = 400
NUM_CHANNELS = 3
STD_FLOOR = 1e-8


@dataclass
class RawRecording:
    """One user's time-ordered sensor stream in device units."""

    user_id: str
    timestamps: np.ndarray           # (n,) milliseconds, strictly increasing
    samples: np.ndarray              # (n, 3)
    labels: list | None = None       # per-sample activity names, or None
    sampling_rate: float | None = None

    def __post_init__(self):
        if len(self.timestamps) > 1 and not np.all(np.diff(self.timestamps) > 0):
            raise DataError(f"user {self.user_id}: timestamps not strictly increasing")


@dataclass
class Window:
    """One 400x3 segment: the atomic sample."""

    values: np.ndarray
    user_id: str
    label: int | None = None
    soft_label: np.ndarray | None = None


@dataclass
class Dataset:
    values: np.ndarray               # (N, 400, 3)
    user_ids: np.ndarray             # (N,) object
    labels: np.ndarray               # (N,) int64, -1 = unlabeled
    label_vocabulary: list = field(default_factory=list)
    soft_labels: np.ndarray | None = None      # (N, k)
    transform_labels: np.ndarray | None = None  # (N, 8)
    role: str = "D"

    def __len__(self):
        return self.values.shape[0]

    def window(self, i):
        label = int(self.labels[i]) if self.labels[i] >= 0 else None
        soft = self.soft_labels[i] if self.soft_labels is not None else None
        return Window(values=self.values[i], user_id=self.user_ids[i],
                      label=label, soft_label=soft)

    def __iter__(self):
        return (self.window(i) for i in range(len(self)))

    def users(self):
        return sorted(set(self.user_ids.tolist()))

    def subset(self, indices, role=None):
        indices = np.asarray(indices, dtype=np.int64)
        return Dataset(
            values=self.values[indices],
            user_ids=self.user_ids[indices],
            labels=self.labels[indices],
            label_vocabulary=list(self.label_vocabulary),
            soft_labels=None if self.soft_labels is None else self.soft_labels[indices],
            transform_labels=(None if self.transform_labels is None
                              else self.transform_labels[indices]),
            role=role if role is not None else self.role,
        )

    def strip_labels(self, role="W"):
        """Remove all activity labels (hard and soft); used to build the mixed pool."""
        return replace(
            self,
            labels=np.full(len(self), -1, dtype=np.int64),
            soft_labels=None,
            role=role,
        )

    def one_hot_labels(self):
        if np.any(self.labels < 0):
            raise DataError("dataset contains unlabeled windows")
        k = len(self.label_vocabulary)
        out = np.zeros((len(self), k))
        out[np.arange(len(self)), self.labels] = 1.0
        return out

    def class_counts(self):
        k = len(self.label_vocabulary)
        return np.bincount(self.labels[self.labels >= 0], minlength=k)

    @classmethod
    def empty(cls, label_vocabulary=(), role="D"):
        return cls(
            values=np.zeros((0, WINDOW_LEN, NUM_CHANNELS)),
            user_ids=np.zeros(0, dtype=object),
            labels=np.zeros(0, dtype=np.int64),
            label_vocabulary=list(label_vocabulary),
            role=role,
        )

    @classmethod
    def concatenate(cls, parts, role=None):
        parts = [p for p in parts if len(p) > 0]
        if not parts:
            return cls.empty()
        vocab = parts[0].label_vocabulary
        for p in parts[1:]:
            if p.label_vocabulary != vocab:
                raise ConfigurationError("cannot concatenate datasets with different vocabularies")
        has_soft = all(p.soft_labels is not None for p in parts)
        return cls(
            values=np.concatenate([p.values for p in parts]),
            user_ids=np.concatenate([p.user_ids for p in parts]),
            labels=np.concatenate([p.labels for p in parts]),
            label_vocabulary=list(vocab),
            soft_labels=np.concatenate([p.soft_labels for p in parts]) if has_soft else None,
            role=role if role is not None else parts[0].role,
        )


@dataclass(frozen=True)
class ChannelStats:
    mean: np.ndarray  # (3,)
    std: np.ndarray   # (3,)

    def to_dict(self):
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}


@dataclass(frozen=True)
class SplitSpec:
    test_user_fraction: float = 0.2
    validation_fraction: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if not 0.20 <= self.test_user_fraction <= 0.25:
            raise ConfigurationError("test_user_fraction must be in [0.20, 0.25]")
        if not 0.0 <= self.validation_fraction < 1.0:
            raise ConfigurationError("validation_fraction must be in [0, 1)")


# ---------------------------------------------------------------------------
# normalization and segmentation
# ---------------------------------------------------------------------------

def compute_channel_stats(dataset):
    if len(dataset) == 0:
        raise ConfigurationError("cannot compute normalization stats from an empty partition")
    flat = dataset.values.reshape(-1, NUM_CHANNELS)
    return ChannelStats(mean=flat.mean(axis=0),
                        std=np.maximum(flat.std(axis=0), STD_FLOOR))


def apply_normalization(dataset, stats):
    return replace(dataset, values=(dataset.values - stats.mean) / stats.std)


def znormalize(dataset, stats_source):
    """Z-normalize using statistics computed from the training partition only."""
    stats = compute_channel_stats(stats_source)
    return apply_normalization(dataset, stats), stats


def _session_bounds(timestamps, gap_factor=3.0):
    """Split a stream into contiguous runs at timestamp discontinuities.

    A gap larger than ``gap_factor`` times the median inter-sample interval is
    treated as a session boundary (recording pauses, battery swaps, ...).
    """
    n = len(timestamps)
    if n < 2:
        return [(0, n)]
    deltas = np.diff(timestamps)
    threshold = gap_factor * np.median(deltas)
    breaks = np.where(deltas > threshold)[0] + 1
    edges = [0, *breaks.tolist(), n]
    return list(zip(edges[:-1], edges[1:]))


def segment(recording, window_len=WINDOW_LEN, overlap=0.5, vocab=None):
    """Sliding windows with 50% overlap; trailing partial windows are discarded.

    Windowing restarts at timestamp discontinuities so windows never span a
    recording pause. When the recording carries per-sample labels, a window
    takes the label covering a strict majority of its samples and is dropped
    otherwise; the returned labels are indices into ``vocab``.
    """
    if window_len < 1:
        raise ConfigurationError("window_len must be >= 1")
    step = max(1, int(round(window_len * (1.0 - overlap))))
    windows = []
    for lo, hi in _session_bounds(recording.timestamps):
        for start in range(lo, hi - window_len + 1, step):
            values = np.asarray(recording.samples[start:start + window_len],
                                dtype=np.float64)
            label = None
            if recording.labels is not None:
                names, counts = np.unique(
                    np.asarray(recording.labels[start:start + window_len], dtype=object),
                    return_counts=True)
                best = int(np.argmax(counts))
                if counts[best] * 2 <= window_len:
                    continue  # no strict-majority label
                if vocab is None:
                    raise ConfigurationError("labeled recording requires a vocabulary")
                label = vocab.index(names[best])
            windows.append(Window(values=values, user_id=recording.user_id, label=label))
    return windows


def dataset_from_windows(windows, vocab=(), role="D"):
    if not windows:
        return Dataset.empty(vocab, role=role)
    return Dataset(
        values=np.stack([w.values for w in windows]),
        user_ids=np.array([w.user_id for w in windows], dtype=object),
        labels=np.array([w.label if w.label is not None else -1 for w in windows],
                        dtype=np.int64),
        label_vocabulary=list(vocab),
        role=role,
    )


def build_dataset(recordings, window_len=WINDOW_LEN, overlap=0.5, role="D"):
    """Segment recordings into one Dataset; vocabulary from sorted unique labels."""
    names = sorted({lab for rec in recordings if rec.labels is not None
                    for lab in rec.labels})
    windows = []
    for rec in recordings:
        windows.extend(segment(rec, window_len=window_len, overlap=overlap, vocab=names))
    return dataset_from_windows(windows, vocab=names, role=role)


# ---------------------------------------------------------------------------
# splits and subsets
# ---------------------------------------------------------------------------

def split_by_users(dataset, spec):
    """(train, validation, test): test users held out entirely; validation is a
    user-stratified fraction of the remaining training windows."""
    users = dataset.users()
    if len(users) < 3:
        raise ConfigurationError(f"need at least 3 distinct users, got {len(users)}")
    rng = np.random.default_rng(spec.seed)
    n_test = max(1, int(round(spec.test_user_fraction * len(users))))
    test_users = set(rng.choice(users, size=n_test, replace=False).tolist())

    is_test = np.array([u in test_users for u in dataset.user_ids])
    test = dataset.subset(np.where(is_test)[0], role="test")
    train_idx = np.where(~is_test)[0]

    val_mask = np.zeros(len(train_idx), dtype=bool)
    if spec.validation_fraction > 0:
        train_users = dataset.user_ids[train_idx]
        for user in sorted(set(train_users.tolist())):
            member = np.where(train_users == user)[0]
            n_val = int(round(spec.validation_fraction * len(member)))
            if n_val > 0:
                val_mask[rng.choice(member, size=n_val, replace=False)] = True
    validation = dataset.subset(train_idx[val_mask], role="validation")
    train = dataset.subset(train_idx[~val_mask], role="train")
    return train, validation, test


def subsample_labeled(train, n_per_class, seed=0):
    """Exactly n_per_class windows per class, sampled uniformly without replacement."""
    rng = np.random.default_rng(seed)
    chosen = []
    for c, name in enumerate(train.label_vocabulary):
        members = np.where(train.labels == c)[0]
        if len(members) < n_per_class:
            raise DataError(
                f"class '{name}' has only {len(members)} windows, need {n_per_class}")
        chosen.append(np.sort(rng.choice(members, size=n_per_class, replace=False)))
    return train.subset(np.sort(np.concatenate(chosen)))


def intensity_proxy(dataset):
    """Per-window mean (over time) of the triaxial magnitude."""
    return np.linalg.norm(dataset.values, axis=2).mean(axis=1)


def subset_by_intensity(unlabeled, mode, target_size):
    """Tercile-based intensity subsets of an unlabeled pool.

    'inactive' draws from the lowest-proxy tercile, 'active' from the highest,
    'balanced' takes (as close as possible to) equal counts from all three.
    Ties in the proxy break by dataset index.
    """
    if len(unlabeled) == 0:
        raise DataError("unlabeled dataset is empty")
    if mode not in ("inactive", "balanced", "active"):
        raise ConfigurationError(f"unknown intensity mode '{mode}'")
    proxy = intensity_proxy(unlabeled)
    order = np.argsort(proxy, kind="stable")
    terciles = np.array_split(order, 3)

    if mode == "inactive":
        pool = terciles[0]
        if target_size > len(pool):
            raise DataError(f"inactive tercile holds {len(pool)} windows, need {target_size}")
        picked = pool[:target_size]
    elif mode == "active":
        pool = terciles[2]
        if target_size > len(pool):
            raise DataError(f"active tercile holds {len(pool)} windows, need {target_size}")
        picked = pool[-target_size:]
    else:
        base, extra = divmod(target_size, 3)
        counts = [base + (1 if i < extra else 0) for i in range(3)]
        for tercile, count in zip(terciles, counts):
            if count > len(tercile):
                raise DataError(
                    f"tercile holds {len(tercile)} windows, need {count} for balanced subset")
        picked = np.concatenate([t[:c] for t, c in zip(terciles, counts)])
    return unlabeled.subset(np.sort(picked), role=unlabeled.role)


# ---------------------------------------------------------------------------
# synthetic generator
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SynthConfig:
    """Desk-scale synthetic HAR data.

    Classes are sums of sinusoids with class-specific frequencies and
    amplitudes (amplitude grows with class index, so signal intensity is
    class-correlated). Each user contributes a random device orientation
    (3D rotation), per-channel gain and frequency jitter, which is what makes
    held-out-user generalization non-trivial.
    """

    classes: int = 6
    users: int = 10
    windows_per_user_per_class: int = 10
    unlabeled_users: int = 0
    unlabeled_windows_per_user: int = 0
    noise_sigma: float = 0.35
    sampling_rate: float = 50.0
    seed: int = 0

    def __post_init__(self):
        if self.classes < 2:
            raise ConfigurationError("need at least 2 classes")
        if self.users < 3:
            raise ConfigurationError("need at least 3 users")

    def to_dict(self):
        return {
            "classes": self.classes,
            "users": self.users,
            "windows_per_user_per_class": self.windows_per_user_per_class,
            "unlabeled_users": self.unlabeled_users,
            "unlabeled_windows_per_user": self.unlabeled_windows_per_user,
            "noise_sigma": self.noise_sigma,
            "sampling_rate": self.sampling_rate,
            "seed": self.seed,
        }


def _synth_user(rng):
    from .signals import random_rotation_matrix  # local import avoids a cycle at module load

    return {
        "rotation": random_rotation_matrix(rng),
        "gain": rng.uniform(0.7, 1.3, size=NUM_CHANNELS),
        "freq_jitter": rng.uniform(0.92, 1.08),
    }


def _synth_window(rng, user, class_index, config):
    t = np.arange(WINDOW_LEN) / config.sampling_rate
    base_freq = (0.7 + 0.55 * class_index) * user["freq_jitter"]
    amplitude = 0.6 + 0.3 * class_index
    phase = rng.uniform(0, 2 * np.pi)
    channels = np.stack([
        np.sin(2 * np.pi * base_freq * t + phase),
        0.8 * np.cos(2 * np.pi * base_freq * t + phase),
        0.6 * np.sin(2 * np.pi * 2 * base_freq * t + phase)
        + 0.3 * np.cos(2 * np.pi * base_freq * t),
    ], axis=1)
    window = amplitude * channels * user["gain"]
    window = window @ user["rotation"].T
    window += rng.normal(0.0, config.noise_sigma, window.shape)
    return window


def synthesize(config):
    """Deterministic labeled + unlabeled synthetic datasets with disjoint users."""
    vocab = [f"activity_{c}" for c in range(config.classes)]
    root = np.random.SeedSequence(config.seed)
    labeled_seed, unlabeled_seed = root.spawn(2)

    def generate(prefix, n_users, class_schedule, seed_seq, labeled):
        values, user_ids, labels = [], [], []
        user_seqs = seed_seq.spawn(n_users)
        for u in range(n_users):
            rng = np.random.default_rng(user_seqs[u])
            user = _synth_user(rng)
            uid = f"{prefix}{u:03d}"
            for c in class_schedule:
                values.append(_synth_window(rng, user, c, config))
                user_ids.append(uid)
                labels.append(c if labeled else -1)
        if not values:
            return Dataset.empty(vocab, role="D" if labeled else "U")
        return Dataset(
            values=np.stack(values),
            user_ids=np.array(user_ids, dtype=object),
            labels=np.array(labels, dtype=np.int64),
            label_vocabulary=vocab,
            role="D" if labeled else "U",
        )

    # Labeled users contribute windows_per_user_per_class of each class;
    # unlabeled users contribute unlabeled_windows_per_user windows total,
    # cycling through the classes.
    labeled_schedule = [c for c in range(config.classes)
                        for _ in range(config.windows_per_user_per_class)]
    unlabeled_schedule = [i % config.classes
                          for i in range(config.unlabeled_windows_per_user)]
    labeled = generate("user", config.users, labeled_schedule, labeled_seed, labeled=True)
    unlabeled = generate("pool", config.unlabeled_users, unlabeled_schedule,
                         unlabeled_seed, labeled=False)
    return labeled, unlabeled


# ---------------------------------------------------------------------------
# CSV ingestion / export
# ---------------------------------------------------------------------------

REQUIRED_COLUMNS = ("user_id", "timestamp_ms", "x", "y", "z")


def ingest_csv(path):
    """Parse the CSV contract into RawRecordings grouped by user."""
    by_user = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError(f"{path}: missing header") from None
        header = [h.strip() for h in header]
        if tuple(header[:5]) != REQUIRED_COLUMNS:
            raise ParseError(f"{path}: header must start with {','.join(REQUIRED_COLUMNS)}")
        has_label = len(header) > 5 and header[5] == "label"
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) < 5:
                raise ParseError(f"{path}:{lineno}: expected at least 5 columns")
            try:
                ts = float(row[1])
                xyz = (float(row[2]), float(row[3]), float(row[4]))
            except ValueError as exc:
                raise ParseError(f"{path}:{lineno}: {exc}") from None
            label = row[5].strip() if has_label and len(row) > 5 and row[5].strip() else None
            entry = by_user.setdefault(row[0], {"ts": [], "xyz": [], "labels": []})
            entry["ts"].append(ts)
            entry["xyz"].append(xyz)
            entry["labels"].append(label)

    recordings = []
    for user_id, entry in by_user.items():
        labels = entry["labels"] if has_label and any(l is not None for l in entry["labels"]) \
            else None
        recordings.append(RawRecording(
            user_id=user_id,
            timestamps=np.array(entry["ts"]),
            samples=np.array(entry["xyz"]),
            labels=labels,
        ))
    return recordings


def export_csv(dataset, path, sample_period_ms=20.0):
    """Write a Dataset back out in the ingestion format, one row per timestep.

    Windows of one user get synthetic increasing timestamps with a gap between
    consecutive windows, so re-ingesting and re-segmenting reproduces exactly
    the exported windows (segmentation restarts at the gaps). Values keep 9
    significant digits so the round trip is lossless.
    """
    labeled = bool(np.any(dataset.labels >= 0))
    next_ts = {}
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(list(REQUIRED_COLUMNS) + (["label"] if labeled else []))
        for i in range(len(dataset)):
            user = dataset.user_ids[i]
            start = next_ts.get(user, 0.0)
            name = (dataset.label_vocabulary[dataset.labels[i]]
                    if labeled and dataset.labels[i] >= 0 else "")
            for t in range(dataset.values.shape[1]):
                row = [user, f"{start + t * sample_period_ms:.9g}"]
                row.extend(f"{v:.9g}" for v in dataset.values[i, t])
                if labeled:
                    row.append(name)
                writer.writerow(row)
            # leave a >3x-interval gap so segmentation treats each exported
            # window as its own session
            next_ts[user] = start + (dataset.values.shape[1] + 10) * sample_period_ms
    return path
