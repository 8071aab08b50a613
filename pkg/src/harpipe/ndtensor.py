"""Minimal dense-tensor kernel: explicit forward/backward ops, Adam, gradient checks.

All tensors are float64 numpy arrays. Per-sample operations take a single
window/vector; the ``*_batch`` variants vectorize over a leading batch axis and
are what the training loops actually call. Both compute the same thing.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigurationError, DataError, DimensionError

PROB_FLOOR = 1e-12


@dataclass
class LayerGradients:
    """Parameter gradients for one layer plus the gradient w.r.t. its input."""

    param_grads: dict
    input_grad: np.ndarray


@dataclass
class ParameterSet:
    """Named parameter tensors with per-layer frozen flags.

    Keys follow ``<layer>/<part>`` where part is ``W`` (weights) or ``b``
    (bias). A layer listed in ``frozen`` receives no optimizer updates.
    """

    tensors: dict
    frozen: set = field(default_factory=set)

    @staticmethod
    def layer_of(name):
        return name.rsplit("/", 1)[0]

    def is_trainable(self, name):
        return self.layer_of(name) not in self.frozen

    def trainable_names(self):
        return [n for n in self.tensors if self.is_trainable(n)]

    def weight_names(self):
        return [n for n in self.tensors if n.endswith("/W")]

    def parameter_count(self):
        return int(sum(t.size for t in self.tensors.values()))

    def copy(self):
        return ParameterSet(
            tensors={k: v.copy() for k, v in self.tensors.items()},
            frozen=set(self.frozen),
        )


@dataclass
class AdamState:
    """Adam optimizer state: step count and per-parameter moment tensors."""

    step: int
    m: dict
    v: dict
    learning_rate: float = 0.0003
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    @classmethod
    def for_params(cls, params, learning_rate=0.0003, beta1=0.9, beta2=0.999,
                   epsilon=1e-8):
        return cls(
            step=0,
            m={k: np.zeros_like(t) for k, t in params.tensors.items()},
            v={k: np.zeros_like(t) for k, t in params.tensors.items()},
            learning_rate=learning_rate,
            beta1=beta1,
            beta2=beta2,
            epsilon=epsilon,
        )


@dataclass(frozen=True)
class RegularizationConfig:
    """Weight-decay settings; the L2 factor multiplies the squared weight norm."""

    l2_factor: float = 0.0001

    def __post_init__(self):
        if self.l2_factor < 0:
            raise ConfigurationError(f"l2_factor must be >= 0, got {self.l2_factor}")


def _as_f64(x):
    return np.asarray(x, dtype=np.float64)


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------

def _check_conv_shapes(x, kernels, bias=None):
    if x.ndim != 2:
        raise DimensionError(f"conv input must be 2-D (time, channels), got shape {x.shape}")
    if kernels.ndim != 3:
        raise DimensionError(
            f"kernels must be 3-D (filters, width, channels), got shape {kernels.shape}"
        )
    time, channels = x.shape
    filters, width, kchannels = kernels.shape
    if kchannels != channels:
        raise DimensionError(
            f"channel axis mismatch: input has {channels}, kernels have {kchannels}"
        )
    if time < width:
        raise DimensionError(f"time axis too short: {time} < kernel width {width}")
    if bias is not None and bias.shape != (filters,):
        raise DimensionError(
            f"bias axis mismatch: expected ({filters},), got {bias.shape}"
        )


def conv1d_forward(x, kernels, bias):
    """Valid (no padding) 1-D convolution, stride 1.

    output[t, f] = bias[f] + sum_{w,c} x[t+w, c] * kernels[f, w, c]
    """
    x, kernels, bias = _as_f64(x), _as_f64(kernels), _as_f64(bias)
    _check_conv_shapes(x, kernels, bias)
    return conv1d_forward_batch(x[None], kernels, bias)[0]


def conv1d_forward_batch(x, kernels, bias):
    """Batched valid convolution: (B, T, C) -> (B, T - W + 1, F).

    Accumulates one contiguous matmul per kernel offset instead of building an
    im2col matrix; the shifted input slices are views, so no large copies.
    """
    batch, time, channels = x.shape
    filters, width, _ = kernels.shape
    length = time - width + 1
    out = np.empty((batch, length, filters))
    out[:] = bias
    for w in range(width):
        out += x[:, w:w + length, :] @ kernels[:, w, :].T
    return out


def conv1d_backward(x, kernels, upstream):
    """Gradients of a valid convolution w.r.t. kernels, bias and input."""
    x, kernels, upstream = _as_f64(x), _as_f64(kernels), _as_f64(upstream)
    _check_conv_shapes(x, kernels)
    expected = (x.shape[0] - kernels.shape[1] + 1, kernels.shape[0])
    if upstream.shape != expected:
        raise DimensionError(
            f"upstream shape {upstream.shape} does not match conv output {expected}"
        )
    dk, db, dx = conv1d_backward_batch(x[None], kernels, upstream[None])
    return LayerGradients(param_grads={"W": dk, "b": db}, input_grad=dx[0])


def conv1d_backward_batch(x, kernels, upstream):
    """Batched conv gradients; returns (dkernels, dbias, dinput).

    Per kernel offset w: dK[:, w] pairs the upstream with the input shifted by
    w, and dX scatters the upstream through K[:, w] back onto the same shifted
    slice. Each step is one contiguous matmul over the (B*L) axis.
    """
    batch, time, channels = x.shape
    filters, width, _ = kernels.shape
    length = time - width + 1

    up_flat = upstream.reshape(batch * length, filters)
    dk = np.empty_like(kernels)
    dx = np.zeros_like(x)
    for w in range(width):
        xs = x[:, w:w + length, :].reshape(batch * length, channels)
        dk[:, w, :] = up_flat.T @ xs
        dx[:, w:w + length, :] += upstream @ kernels[:, w, :]
    db = up_flat.sum(axis=0)
    return dk, db, dx


# ---------------------------------------------------------------------------
# dense layers
# ---------------------------------------------------------------------------

def dense_forward(x, weights, bias):
    """output = weights @ x + bias for a single input vector."""
    x, weights, bias = _as_f64(x), _as_f64(weights), _as_f64(bias)
    if x.ndim != 1 or weights.ndim != 2:
        raise DimensionError("dense_forward expects a vector input and 2-D weights")
    if weights.shape[1] != x.shape[0]:
        raise DimensionError(
            f"input axis mismatch: weights expect {weights.shape[1]}, got {x.shape[0]}"
        )
    if bias.shape != (weights.shape[0],):
        raise DimensionError(f"bias axis mismatch: expected ({weights.shape[0]},)")
    return weights @ x + bias


def dense_forward_batch(x, weights, bias):
    return x @ weights.T + bias


def dense_backward(x, weights, upstream):
    x, weights, upstream = _as_f64(x), _as_f64(weights), _as_f64(upstream)
    if upstream.shape != (weights.shape[0],):
        raise DimensionError(
            f"upstream axis mismatch: expected ({weights.shape[0]},), got {upstream.shape}"
        )
    if weights.shape[1] != x.shape[0]:
        raise DimensionError(
            f"input axis mismatch: weights expect {weights.shape[1]}, got {x.shape[0]}"
        )
    return LayerGradients(
        param_grads={"W": np.outer(upstream, x), "b": upstream.copy()},
        input_grad=weights.T @ upstream,
    )


def dense_backward_batch(x, weights, upstream):
    """Batched dense gradients; returns (dweights, dbias, dinput)."""
    return upstream.T @ x, upstream.sum(axis=0), upstream @ weights


# ---------------------------------------------------------------------------
# activations and pooling
# ---------------------------------------------------------------------------

def relu(x):
    return np.maximum(_as_f64(x), 0.0)


def relu_backward(x, upstream):
    return np.where(_as_f64(x) > 0, upstream, 0.0)


def sigmoid(x):
    x = _as_f64(x)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid_backward(x, upstream):
    s = sigmoid(x)
    return upstream * s * (1.0 - s)


def softmax(x):
    """Numerically stable softmax over the last axis."""
    x = _as_f64(x)
    if x.shape[-1] < 1:
        raise DimensionError("softmax input must have length >= 1")
    shifted = x - x.max(axis=-1, keepdims=True)
    ex = np.exp(shifted)
    return ex / ex.sum(axis=-1, keepdims=True)


def global_max_pool(x):
    """Per-filter maximum over time; argmax indices kept for backward routing.

    Ties break toward the lowest time index.
    """
    x = _as_f64(x)
    if x.ndim != 2 or x.shape[0] < 1:
        raise DimensionError(f"pool input must be (time, filters) with time >= 1, got {x.shape}")
    return x.max(axis=0), x.argmax(axis=0)


def global_max_pool_backward(indices, upstream, time):
    out = np.zeros((time, upstream.shape[0]))
    out[indices, np.arange(upstream.shape[0])] = upstream
    return out


def dropout(x, rate, rng=None, training=True):
    """Inverted dropout: zero with probability ``rate``, scale survivors by 1/(1-rate).

    Returns (output, mask); mask is None when the op is an identity.
    """
    x = _as_f64(x)
    if not 0.0 <= rate < 1.0:
        raise ConfigurationError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x.copy(), None
    mask = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return x * mask, mask


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def categorical_cross_entropy(predicted, target):
    """-sum_a target[a] * log(predicted[a]); supports soft targets."""
    predicted, target = _as_f64(predicted), _as_f64(target)
    if predicted.shape != target.shape:
        raise DimensionError(
            f"distribution length mismatch: {predicted.shape} vs {target.shape}"
        )
    for name, dist in (("predicted", predicted), ("target", target)):
        if abs(dist.sum() - 1.0) > 1e-6:
            raise DataError(f"{name} distribution does not sum to 1 (sum={dist.sum():.9f})")
    clamped = np.clip(predicted, PROB_FLOOR, 1.0)
    return float(-(target * np.log(clamped)).sum())


def binary_cross_entropy(predicted, target):
    p = min(max(float(predicted), PROB_FLOOR), 1.0 - PROB_FLOOR)
    t = float(target)
    return float(-(t * np.log(p) + (1.0 - t) * np.log(1.0 - p)))


def l2_penalty(params, config):
    """L2 value over all weight tensors plus 2*beta*W gradients for trainable ones."""
    beta = config.l2_factor
    value = beta * sum(float((params.tensors[n] ** 2).sum()) for n in params.weight_names())
    grads = {
        n: 2.0 * beta * params.tensors[n]
        for n in params.weight_names()
        if params.is_trainable(n)
    }
    return value, grads


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

def adam_step(params, grads, state):
    """One Adam update with bias correction. Frozen layers are never touched.

    Mutates ``params`` and ``state`` in place and returns them.
    """
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    for name, tensor in params.tensors.items():
        if not params.is_trainable(name):
            continue
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(tensor)
        elif g.shape != tensor.shape:
            raise DimensionError(
                f"gradient shape {g.shape} does not match parameter {name} {tensor.shape}"
            )
        state.m[name] = b1 * state.m[name] + (1.0 - b1) * g
        state.v[name] = b2 * state.v[name] + (1.0 - b2) * g * g
        m_hat = state.m[name] / (1.0 - b1 ** t)
        v_hat = state.v[name] / (1.0 - b2 ** t)
        tensor -= state.learning_rate * m_hat / (np.sqrt(v_hat) + state.epsilon)
    return params, state


# ---------------------------------------------------------------------------
# gradient verification
# ---------------------------------------------------------------------------

def finite_difference_check(loss_and_grads, params, h=1e-5, max_checks_per_tensor=None,
                            rng=None):
    """Max relative error between analytic gradients and central differences.

    ``loss_and_grads(params)`` must return ``(loss, grads_dict)`` and be
    deterministic (dropout disabled). Checks every trainable entry unless
    ``max_checks_per_tensor`` caps the number of sampled entries per tensor.
    """
    _, grads = loss_and_grads(params)
    worst = 0.0
    for name in params.trainable_names():
        tensor = params.tensors[name]
        analytic = grads.get(name)
        if analytic is None:
            analytic = np.zeros_like(tensor)
        flat_idx = np.arange(tensor.size)
        if max_checks_per_tensor is not None and tensor.size > max_checks_per_tensor:
            flat_idx = rng.choice(tensor.size, size=max_checks_per_tensor, replace=False)
        flat = tensor.reshape(-1)
        aflat = analytic.reshape(-1)
        for i in flat_idx:
            original = flat[i]
            flat[i] = original + h
            plus = loss_and_grads(params)[0]
            flat[i] = original - h
            minus = loss_and_grads(params)[0]
            flat[i] = original
            numeric = (plus - minus) / (2.0 * h)
            denom = max(abs(aflat[i]), abs(numeric), 1e-6)
            worst = max(worst, abs(aflat[i] - numeric) / denom)
    return worst
