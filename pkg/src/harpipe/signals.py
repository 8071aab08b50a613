"""The eight signal transformations and construction of the nine-way multi-task dataset.

Each transformation maps a 400x3 accelerometer window to a window of the same
shape. A source dataset of N windows expands to 9N records: the untransformed
original (all transformation flags zero) plus one record per transformation
with exactly that flag set. No transformations are ever composed.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import IntEnum

import numpy as np

from . import datakit
from .errors import ConfigurationError, DataError

NUM_TRANSFORMS = 8


class TransformKind(IntEnum):
    """Stable ordinals; the ordinal doubles as the transformation-label index."""

    NOISE = 0
    SCALE = 1
    ROTATE3D = 2
    INVERT = 3
    TIME_REVERSE = 4
    SCRAMBLE = 5
    TIME_WARP = 6
    CHANNEL_SHUFFLE = 7


@dataclass(frozen=True)
class TransformParams:
    noise_sigma: float = 0.05
    scale_low: float = 0.9
    scale_high: float = 1.1
    scramble_segments: int = 4
    warp_knots: int = 4
    warp_sigma: float = 0.2
    seed: int = 0

    def __post_init__(self):
        if self.noise_sigma <= 0:
            raise ConfigurationError("noise_sigma must be > 0")
        if self.scale_low >= self.scale_high:
            raise ConfigurationError("scale_low must be < scale_high")
        if self.scramble_segments < 2:
            raise ConfigurationError("scramble_segments must be >= 2")
        if self.warp_knots < 2:
            raise ConfigurationError("warp_knots must be >= 2")

    def to_dict(self):
        return {
            "noise_sigma": self.noise_sigma,
            "scale_low": self.scale_low,
            "scale_high": self.scale_high,
            "scramble_segments": self.scramble_segments,
            "warp_knots": self.warp_knots,
            "warp_sigma": self.warp_sigma,
            "seed": self.seed,
        }


def random_rotation_matrix(rng):
    """Uniform rotation over SO(3) via a normalized Gaussian quaternion."""
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def _non_identity_permutation(rng, n):
    perm = rng.permutation(n)
    while np.array_equal(perm, np.arange(n)):
        perm = rng.permutation(n)
    return perm


def _time_warp(window, params, rng):
    # Smooth monotone time distortion: positive rate anchors at the knots,
    # linearly interpolated, cumulated, then rescaled to span the window.
    steps = window.shape[0]
    knots = np.linspace(0, steps - 1, params.warp_knots)
    multipliers = np.maximum(rng.normal(1.0, params.warp_sigma, params.warp_knots), 0.05)
    rate = np.interp(np.arange(steps), knots, multipliers)
    warped = np.concatenate([[0.0], np.cumsum(rate[:-1])])
    warped *= (steps - 1) / warped[-1]
    out = np.empty_like(window)
    for c in range(window.shape[1]):
        out[:, c] = np.interp(warped, np.arange(steps), window[:, c])
    return out


def apply_transform(window, kind, params, rng):
    """Apply one transformation; output has the same shape as the input."""
    window = np.asarray(window, dtype=np.float64)
    if not np.all(np.isfinite(window)):
        raise DataError("window contains non-finite values")
    kind = TransformKind(kind)

    if kind == TransformKind.NOISE:
        return window + rng.normal(0.0, params.noise_sigma, window.shape)
    if kind == TransformKind.SCALE:
        return window * rng.uniform(params.scale_low, params.scale_high)
    if kind == TransformKind.ROTATE3D:
        return window @ random_rotation_matrix(rng).T
    if kind == TransformKind.INVERT:
        return -window
    if kind == TransformKind.TIME_REVERSE:
        return window[::-1].copy()
    if kind == TransformKind.SCRAMBLE:
        chunks = np.array_split(np.arange(window.shape[0]), params.scramble_segments)
        perm = _non_identity_permutation(rng, len(chunks))
        order = np.concatenate([chunks[i] for i in perm])
        return window[order]
    if kind == TransformKind.TIME_WARP:
        return _time_warp(window, params, rng)
    if kind == TransformKind.CHANNEL_SHUFFLE:
        perm = _non_identity_permutation(rng, window.shape[1])
        return window[:, perm]
    raise ConfigurationError(f"unknown transformation {kind!r}")


def transform_label(kind=None):
    """8-flag label vector: all zeros for originals, exactly one flag otherwise."""
    label = np.zeros(NUM_TRANSFORMS, dtype=np.int8)
    if kind is not None:
        label[int(kind)] = 1
    return label


def build_multitask_dataset(selected, params, require_soft_labels=True):
    """Expand each window into 9 records: the original plus one per transformation.

    Activity (soft) labels are duplicated from the source window. Each source
    window draws its randomness from a stream keyed by (params.seed, window
    index), so the output is bitwise reproducible and parallelizable.
    """
    n = len(selected)
    if require_soft_labels and n > 0 and selected.soft_labels is None:
        raise DataError("selected windows must carry soft activity labels")

    values = np.empty((9 * n, selected.values.shape[1], selected.values.shape[2]))
    flags = np.zeros((9 * n, NUM_TRANSFORMS), dtype=np.int8)
    user_ids = np.empty(9 * n, dtype=object)
    soft = None
    if selected.soft_labels is not None:
        soft = np.empty((9 * n, selected.soft_labels.shape[1]))

    for i in range(n):
        rng = np.random.default_rng([params.seed, i])
        window = selected.values[i]
        base = 9 * i
        values[base] = window
        for kind in TransformKind:
            values[base + 1 + int(kind)] = apply_transform(window, kind, params, rng)
            flags[base + 1 + int(kind)] = transform_label(kind)
        user_ids[base:base + 9] = selected.user_ids[i]
        if soft is not None:
            soft[base:base + 9] = selected.soft_labels[i]

    return datakit.Dataset(
        values=values,
        user_ids=user_ids,
        labels=np.full(9 * n, -1, dtype=np.int64),
        label_vocabulary=list(selected.label_vocabulary),
        soft_labels=soft,
        transform_labels=flags,
        role="D_prime",
    )
