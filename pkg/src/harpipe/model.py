"""TPN model assembly: convolutional core, task heads, freezing, persistence.

The network is a 3-layer temporal convolution stack (valid padding, stride 1)
with ReLU activations, dropout after the first two conv activations, and a
global max pool producing a 96-dim feature vector. Heads:

* HAR head: dense 1024 (ReLU) -> dense num_classes (softmax)
* transformation-discrimination heads: dense 256 (ReLU) -> dense 1 (sigmoid),
  one head per transformation (or one shared hidden layer, see
  ``shared_td_hidden``)
* linear head: dense num_classes (softmax), no hidden layer
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, asdict

import numpy as np

from . import ndtensor as nd
from .errors import ConfigurationError, DimensionError, FormatError

WEIGHTS_MAGIC = b"HARPW"
WEIGHTS_VERSION = 1

NUM_TRANSFORM_TASKS = 8


@dataclass(frozen=True)
class Architecture:
    conv_filters: tuple = (32, 64, 96)
    conv_kernels: tuple = (24, 16, 8)
    dropout_rate: float = 0.1
    har_hidden: int = 1024
    td_hidden: int = 256
    shared_td_hidden: bool = False
    init_std: float = 0.01

    def feature_dim(self):
        return self.conv_filters[-1]

    def to_dict(self):
        d = asdict(self)
        d["conv_filters"] = list(self.conv_filters)
        d["conv_kernels"] = list(self.conv_kernels)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["conv_filters"] = tuple(d["conv_filters"])
        d["conv_kernels"] = tuple(d["conv_kernels"])
        return cls(**d)


@dataclass
class ModelParameters(nd.ParameterSet):
    """All trainable tensors of a TPN variant plus structural metadata."""

    arch: Architecture = field(default_factory=Architecture)
    num_classes: int = 0
    head_kind: str = "har"  # "har", "linear" or "none"
    has_td_heads: bool = False

    def copy(self):
        return ModelParameters(
            tensors={k: v.copy() for k, v in self.tensors.items()},
            frozen=set(self.frozen),
            arch=self.arch,
            num_classes=self.num_classes,
            head_kind=self.head_kind,
            has_td_heads=self.has_td_heads,
        )

    def core_layer_names(self):
        return [f"conv{i + 1}" for i in range(len(self.arch.conv_filters))]


def _init(rng, shape, std):
    return rng.normal(0.0, std, size=shape)


def _init_core(tensors, arch, rng, in_channels=3):
    channels = in_channels
    for i, (filters, width) in enumerate(zip(arch.conv_filters, arch.conv_kernels)):
        tensors[f"conv{i + 1}/W"] = _init(rng, (filters, width, channels), arch.init_std)
        tensors[f"conv{i + 1}/b"] = np.zeros(filters)
        channels = filters


def _init_har_head(tensors, arch, num_classes, rng):
    tensors["har_hidden/W"] = _init(rng, (arch.har_hidden, arch.feature_dim()), arch.init_std)
    tensors["har_hidden/b"] = np.zeros(arch.har_hidden)
    tensors["har_out/W"] = _init(rng, (num_classes, arch.har_hidden), arch.init_std)
    tensors["har_out/b"] = np.zeros(num_classes)


def _init_td_heads(tensors, arch, rng):
    if arch.shared_td_hidden:
        tensors["td_hidden/W"] = _init(rng, (arch.td_hidden, arch.feature_dim()), arch.init_std)
        tensors["td_hidden/b"] = np.zeros(arch.td_hidden)
    for i in range(NUM_TRANSFORM_TASKS):
        if not arch.shared_td_hidden:
            tensors[f"td{i}_hidden/W"] = _init(rng, (arch.td_hidden, arch.feature_dim()),
                                               arch.init_std)
            tensors[f"td{i}_hidden/b"] = np.zeros(arch.td_hidden)
        tensors[f"td{i}_out/W"] = _init(rng, (1, arch.td_hidden), arch.init_std)
        tensors[f"td{i}_out/b"] = np.zeros(1)


def build_har_model(num_classes, seed=0, arch=Architecture()):
    """Core + HAR head; Gaussian(0, init_std^2) weights, zero biases."""
    if num_classes < 2:
        raise ConfigurationError(f"need at least 2 activity classes, got {num_classes}")
    rng = np.random.default_rng(seed)
    tensors = {}
    _init_core(tensors, arch, rng)
    _init_har_head(tensors, arch, num_classes, rng)
    return ModelParameters(tensors=tensors, arch=arch, num_classes=num_classes,
                           head_kind="har")


def build_multitask_model(num_classes, seed=0, arch=Architecture()):
    """Shared core with 8 transformation heads plus one HAR head."""
    if num_classes < 2:
        raise ConfigurationError(f"need at least 2 activity classes, got {num_classes}")
    rng = np.random.default_rng(seed)
    tensors = {}
    _init_core(tensors, arch, rng)
    _init_har_head(tensors, arch, num_classes, rng)
    _init_td_heads(tensors, arch, rng)
    return ModelParameters(tensors=tensors, arch=arch, num_classes=num_classes,
                           head_kind="har", has_td_heads=True)


def build_td_model(seed=0, arch=Architecture()):
    """Core with the 8 transformation heads only (no activity head)."""
    rng = np.random.default_rng(seed)
    tensors = {}
    _init_core(tensors, arch, rng)
    _init_td_heads(tensors, arch, rng)
    return ModelParameters(tensors=tensors, arch=arch, num_classes=0,
                           head_kind="none", has_td_heads=True)


def build_linear_model(core_source, num_classes, seed=0):
    """Copy of a trained core plus a fresh linear softmax head, core frozen."""
    rng = np.random.default_rng(seed)
    arch = core_source.arch
    tensors = {}
    for name in core_tensor_names(core_source):
        tensors[name] = core_source.tensors[name].copy()
    tensors["linear/W"] = _init(rng, (num_classes, arch.feature_dim()), arch.init_std)
    tensors["linear/b"] = np.zeros(num_classes)
    params = ModelParameters(tensors=tensors, arch=arch, num_classes=num_classes,
                             head_kind="linear")
    return freeze_core_full(params)


def core_tensor_names(params):
    names = []
    for layer in params.core_layer_names():
        names.extend([f"{layer}/W", f"{layer}/b"])
    return names


def transfer_core(src, dst):
    """Copy core tensors from ``src`` into ``dst`` (bitwise)."""
    for name in core_tensor_names(src):
        if name not in dst.tensors or dst.tensors[name].shape != src.tensors[name].shape:
            raise DimensionError(f"core tensor {name} missing or shape-mismatched in target")
        dst.tensors[name] = src.tensors[name].copy()
    return dst


def freeze_for_finetune(params):
    """Freeze the first two conv layers; conv3 and all heads stay trainable."""
    params.frozen |= {"conv1", "conv2"}
    return params


def freeze_core_full(params):
    """Freeze the entire convolutional core (linear evaluation protocol)."""
    params.frozen |= set(params.core_layer_names())
    return params


def parameter_count(params):
    return params.parameter_count()


# ---------------------------------------------------------------------------
# forward / backward
# ---------------------------------------------------------------------------

def core_forward(params, x, training=False, rng=None):
    """Run the convolutional core on a batch (B, T, C). Returns (features, cache)."""
    arch = params.arch
    cache = {"inputs": [], "preacts": [], "acts": [], "masks": []}
    act = x
    n_layers = len(arch.conv_filters)
    for i in range(n_layers):
        w = params.tensors[f"conv{i + 1}/W"]
        b = params.tensors[f"conv{i + 1}/b"]
        cache["inputs"].append(act)
        pre = nd.conv1d_forward_batch(act, w, b)
        cache["preacts"].append(pre)
        act = nd.relu(pre)
        mask = None
        if i < n_layers - 1 and training and arch.dropout_rate > 0.0:
            mask = (rng.random(act.shape) >= arch.dropout_rate) / (1.0 - arch.dropout_rate)
            act = act * mask
        cache["masks"].append(mask)
        cache["acts"].append(act)
    feats = act.max(axis=1)
    cache["pool_idx"] = act.argmax(axis=1)
    cache["pool_time"] = act.shape[1]
    return feats, cache


def core_backward(params, cache, dfeats):
    """Backprop through pool and conv stack; returns parameter gradients dict."""
    grads = {}
    batch, filters = dfeats.shape
    dact = np.zeros((batch, cache["pool_time"], filters))
    rows = np.arange(batch)[:, None]
    cols = np.arange(filters)[None, :]
    dact[rows, cache["pool_idx"], cols] = dfeats

    n_layers = len(params.arch.conv_filters)
    for i in reversed(range(n_layers)):
        mask = cache["masks"][i]
        if mask is not None:
            dact = dact * mask
        dpre = nd.relu_backward(cache["preacts"][i], dact)
        w = params.tensors[f"conv{i + 1}/W"]
        dk, db, dx = nd.conv1d_backward_batch(cache["inputs"][i], w, dpre)
        grads[f"conv{i + 1}/W"] = dk
        grads[f"conv{i + 1}/b"] = db
        dact = dx
    return grads


def har_head_forward(params, feats):
    if params.head_kind == "linear":
        logits = nd.dense_forward_batch(feats, params.tensors["linear/W"],
                                        params.tensors["linear/b"])
        return nd.softmax(logits), {"feats": feats}
    z1 = nd.dense_forward_batch(feats, params.tensors["har_hidden/W"],
                                params.tensors["har_hidden/b"])
    h1 = nd.relu(z1)
    logits = nd.dense_forward_batch(h1, params.tensors["har_out/W"],
                                    params.tensors["har_out/b"])
    return nd.softmax(logits), {"feats": feats, "z1": z1, "h1": h1}


def _har_head_backward(params, cache, dlogits, grads):
    """dlogits = dL/dz at the softmax input. Returns dfeats."""
    if params.head_kind == "linear":
        dw, db, dfeats = nd.dense_backward_batch(cache["feats"], params.tensors["linear/W"],
                                                 dlogits)
        grads["linear/W"] = dw
        grads["linear/b"] = db
        return dfeats
    dw2, db2, dh1 = nd.dense_backward_batch(cache["h1"], params.tensors["har_out/W"], dlogits)
    grads["har_out/W"] = dw2
    grads["har_out/b"] = db2
    dz1 = nd.relu_backward(cache["z1"], dh1)
    dw1, db1, dfeats = nd.dense_backward_batch(cache["feats"], params.tensors["har_hidden/W"],
                                               dz1)
    grads["har_hidden/W"] = dw1
    grads["har_hidden/b"] = db1
    return dfeats


def td_heads_forward(params, feats):
    """Sigmoid outputs of all 8 transformation heads: (B, 8)."""
    outs, caches = [], []
    for i in range(NUM_TRANSFORM_TASKS):
        hidden_key = "td_hidden" if params.arch.shared_td_hidden else f"td{i}_hidden"
        z1 = nd.dense_forward_batch(feats, params.tensors[f"{hidden_key}/W"],
                                    params.tensors[f"{hidden_key}/b"])
        h1 = nd.relu(z1)
        z2 = nd.dense_forward_batch(h1, params.tensors[f"td{i}_out/W"],
                                    params.tensors[f"td{i}_out/b"])
        outs.append(nd.sigmoid(z2[:, 0]))
        caches.append({"z1": z1, "h1": h1})
    return np.stack(outs, axis=1), caches


def _td_heads_backward(params, feats, caches, dz2, grads):
    """dz2 (B, 8) = dL/dz at each sigmoid input. Returns dfeats."""
    dfeats = np.zeros_like(feats)
    for i in range(NUM_TRANSFORM_TASKS):
        hidden_key = "td_hidden" if params.arch.shared_td_hidden else f"td{i}_hidden"
        c = caches[i]
        dwo, dbo, dh1 = nd.dense_backward_batch(c["h1"], params.tensors[f"td{i}_out/W"],
                                                dz2[:, i:i + 1])
        grads[f"td{i}_out/W"] = dwo
        grads[f"td{i}_out/b"] = dbo
        dz1 = nd.relu_backward(c["z1"], dh1)
        dwh, dbh, dfe = nd.dense_backward_batch(feats, params.tensors[f"{hidden_key}/W"], dz1)
        key_w, key_b = f"{hidden_key}/W", f"{hidden_key}/b"
        grads[key_w] = grads.get(key_w, 0) + dwh
        grads[key_b] = grads.get(key_b, 0) + dbh
        dfeats += dfe
    return dfeats


def forward_backward(params, x, har_targets=None, td_targets=None,
                     reg=nd.RegularizationConfig(), training=True, rng=None):
    """Combined loss and gradients on one minibatch.

    ``har_targets`` is a (B, num_classes) distribution matrix (soft or one-hot);
    ``td_targets`` is a (B, 8) binary matrix. Loss terms are batch means; the 8
    transformation losses are summed; L2 is added per the regularization config.

    Returns (total_loss, grads, parts) with parts breaking out the terms.
    """
    batch = x.shape[0]
    feats, core_cache = core_forward(params, x, training=training, rng=rng)
    grads = {}
    dfeats = np.zeros_like(feats)
    parts = {}

    if har_targets is not None:
        probs, head_cache = har_head_forward(params, feats)
        clamped = np.clip(probs, nd.PROB_FLOOR, 1.0)
        parts["har"] = float(-(har_targets * np.log(clamped)).sum() / batch)
        dlogits = (probs - har_targets) / batch
        dfeats += _har_head_backward(params, head_cache, dlogits, grads)

    if td_targets is not None:
        preds, td_caches = td_heads_forward(params, feats)
        clamped = np.clip(preds, nd.PROB_FLOOR, 1.0 - nd.PROB_FLOOR)
        per_task = -(td_targets * np.log(clamped)
                     + (1.0 - td_targets) * np.log(1.0 - clamped)).mean(axis=0)
        parts["td"] = float(per_task.sum())
        dz2 = (preds - td_targets) / batch
        dfeats += _td_heads_backward(params, feats, td_caches, dz2, grads)

    core_grads = core_backward(params, core_cache, dfeats)
    grads.update(core_grads)

    l2_value, l2_grads = nd.l2_penalty(params, reg)
    parts["l2"] = l2_value
    for name, g in l2_grads.items():
        grads[name] = grads.get(name, 0) + g

    total = sum(parts.values())
    return total, grads, parts


def evaluate_loss(params, x, har_targets=None, td_targets=None,
                  reg=nd.RegularizationConfig(), chunk=256):
    """Deterministic (eval-mode) loss over a full dataset, computed in chunks."""
    n = x.shape[0]
    har_sum = 0.0
    td_sum = np.zeros(NUM_TRANSFORM_TASKS)
    for start in range(0, n, chunk):
        sl = slice(start, min(start + chunk, n))
        feats, _ = core_forward(params, x[sl], training=False)
        if har_targets is not None:
            probs, _ = har_head_forward(params, feats)
            clamped = np.clip(probs, nd.PROB_FLOOR, 1.0)
            har_sum += float(-(har_targets[sl] * np.log(clamped)).sum())
        if td_targets is not None:
            preds, _ = td_heads_forward(params, feats)
            clamped = np.clip(preds, nd.PROB_FLOOR, 1.0 - nd.PROB_FLOOR)
            td_sum += -(td_targets[sl] * np.log(clamped)
                        + (1.0 - td_targets[sl]) * np.log(1.0 - clamped)).sum(axis=0)
    parts = {}
    if har_targets is not None:
        parts["har"] = har_sum / n
    if td_targets is not None:
        parts["td"] = float(td_sum.sum() / n)
    parts["l2"] = nd.l2_penalty(params, reg)[0]
    return sum(parts.values()), parts


def predict_har(params, x, chunk=256):
    """Eval-mode class probabilities for a batch of windows."""
    outs = []
    for start in range(0, x.shape[0], chunk):
        feats, _ = core_forward(params, x[start:start + chunk], training=False)
        probs, _ = har_head_forward(params, feats)
        outs.append(probs)
    return np.concatenate(outs, axis=0) if outs else np.zeros((0, params.num_classes))


def core_features(params, x, chunk=256):
    """Pooled 96-dim features for a batch of windows (eval mode)."""
    outs = []
    for start in range(0, x.shape[0], chunk):
        feats, _ = core_forward(params, x[start:start + chunk], training=False)
        outs.append(feats)
    return np.concatenate(outs, axis=0) if outs else np.zeros((0, params.arch.feature_dim()))


def gradient_check(params, x, har_targets=None, td_targets=None,
                   reg=nd.RegularizationConfig(), h=1e-5, max_checks_per_tensor=None,
                   seed=0):
    """Finite-difference verification of the full network gradient (dropout off)."""

    def loss_and_grads(p):
        loss, grads, _ = forward_backward(p, x, har_targets=har_targets,
                                          td_targets=td_targets, reg=reg, training=False)
        return loss, grads

    rng = np.random.default_rng(seed)
    return nd.finite_difference_check(loss_and_grads, params, h=h,
                                      max_checks_per_tensor=max_checks_per_tensor, rng=rng)


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------

def save_weights(params, path, extra_descriptor=None):
    """Versioned binary weight file: magic, version, JSON descriptor, raw tensors."""
    descriptor = {
        "architecture": params.arch.to_dict(),
        "num_classes": params.num_classes,
        "head_kind": params.head_kind,
        "has_td_heads": params.has_td_heads,
        "frozen": sorted(params.frozen),
        "tensors": [{"name": n, "shape": list(t.shape)} for n, t in params.tensors.items()],
    }
    if extra_descriptor:
        descriptor.update(extra_descriptor)
    blob = json.dumps(descriptor, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(WEIGHTS_MAGIC)
        fh.write(struct.pack("<I", WEIGHTS_VERSION))
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for tensor in params.tensors.values():
            fh.write(np.ascontiguousarray(tensor, dtype="<f8").tobytes())


def load_weights(path):
    """Inverse of save_weights. Returns (ModelParameters, descriptor dict)."""
    with open(path, "rb") as fh:
        magic = fh.read(len(WEIGHTS_MAGIC))
        if magic != WEIGHTS_MAGIC:
            raise FormatError(f"{path}: bad magic bytes {magic!r}")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != WEIGHTS_VERSION:
            raise FormatError(f"{path}: unsupported format version {version}")
        (blob_len,) = struct.unpack("<I", fh.read(4))
        descriptor = json.loads(fh.read(blob_len).decode("utf-8"))
        tensors = {}
        for entry in descriptor["tensors"]:
            shape = tuple(entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            raw = fh.read(count * 8)
            if len(raw) != count * 8:
                raise FormatError(f"{path}: truncated tensor data for {entry['name']}")
            tensors[entry["name"]] = np.frombuffer(raw, dtype="<f8").reshape(shape).copy()
    return ModelParameters(
        tensors=tensors,
        frozen=set(descriptor["frozen"]),
        arch=Architecture.from_dict(descriptor["architecture"]),
        num_classes=descriptor["num_classes"],
        head_kind=descriptor["head_kind"],
        has_td_heads=descriptor["has_td_heads"],
    ), descriptor
