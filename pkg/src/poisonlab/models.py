"""Small feed-forward architectures used as surrogates and victims.

Three fixed architecture tags:

- ``mlp-small``: flatten, one hidden dense layer of 8 relu units, linear head.
- ``convnet-tiny``: five 3x3 stride-1 convolutions with relu, output widths
  (8, 16, 16, 32, 32); each of the last two convolutions is followed by a
  size-3 max pool; then a linear head.
- ``convnet64-scaled``: the same pattern with widths (16, 32, 32, 64, 64).

No normalization layers anywhere: every forward is a pure function of the
parameters, which keeps retraining checkpoints and gradient matching free of
running-statistics state.

Besides the ordinary tape forward (used for training, where parameters are
leaves), each layer exposes an explicit adjoint formula built from tape
operations.  Running those formulas on detached parameters materializes the
parameter gradient as ordinary tape values, so the crafting loss on that
gradient can be differentiated with respect to the input perturbation by a
single backward pass.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from . import diffcore as dc

ARCHITECTURES = ("mlp-small", "convnet-tiny", "convnet64-scaled")

_MAGIC = b"PLMD"
_VERSION = 1

_MLP_HIDDEN = 8
_CONV_WIDTHS = {
    "convnet-tiny": (8, 16, 16, 32, 32),
    "convnet64-scaled": (16, 32, 32, 64, 64),
}


@dataclass(frozen=True)
class ModelSpec:
    arch: str
    input_shape: tuple  # (h, w, c)
    classes: int
    seed: int = 0

    def __post_init__(self):
        if self.arch not in ARCHITECTURES:
            raise ValueError(f"unknown architecture {self.arch!r}")
        h, w, c = self.input_shape
        if min(h, w, c) < 1:
            raise ValueError("input extents must be positive")
        if self.classes < 2:
            raise ValueError("need at least two classes")
        object.__setattr__(self, "input_shape", (int(h), int(w), int(c)))


@dataclass
class ModelState:
    spec: ModelSpec
    params: list  # np arrays, layout order
    epochs_trained: int = 0

    def copy(self) -> "ModelState":
        return ModelState(self.spec, [p.copy() for p in self.params], self.epochs_trained)


class _Dense:
    n_params = 2

    def __init__(self, out_features: int):
        self.out_features = out_features

    def infer(self, in_shape):
        (n,) = in_shape
        self._in = n
        return [("w", (n, self.out_features)), ("b", (self.out_features,))], (self.out_features,)

    def forward(self, x, params, cache):
        cache["x"] = x
        return dc.add(dc.matmul(x, params[0]), params[1])

    def adjoint(self, d_out, params, cache):
        dw = dc.matmul(dc.transpose(cache["x"]), d_out)
        db = dc.reduce_sum(d_out, axis=0)
        d_in = dc.matmul(d_out, dc.transpose(params[0]))
        return d_in, [dw, db]


class _Conv3x3:
    n_params = 2

    def __init__(self, out_channels: int):
        self.out_channels = out_channels

    def infer(self, in_shape):
        h, w, c = in_shape
        self._in_shape = (h, w, c)
        return (
            [("w", (3, 3, c, self.out_channels)), ("b", (self.out_channels,))],
            (h, w, self.out_channels),
        )

    def forward(self, x, params, cache):
        cache["x"] = x
        return dc.conv2d(x, params[0], params[1], pad=1)

    def adjoint(self, d_out, params, cache):
        # Explicit formulas assume detached parameters: the flipped kernel is
        # captured as a constant.
        dw = dc.conv2d_wgrad(cache["x"], d_out, 3, 3, pad=1)
        db = dc.reduce_sum(d_out, axis=(0, 1, 2))
        w_flip = dc.constant(params[0].data[::-1, ::-1].transpose(0, 1, 3, 2).copy())
        d_in = dc.conv2d(d_out, w_flip, None, pad=1)
        return d_in, [dw, db]


class _ReLU:
    n_params = 0

    def infer(self, in_shape):
        return [], in_shape

    def forward(self, x, params, cache):
        cache["mask"] = x.data > 0
        return dc.relu(x)

    def adjoint(self, d_out, params, cache):
        return dc.mul(d_out, dc.constant(cache["mask"].astype(d_out.data.dtype))), []


class _MaxPool3:
    n_params = 0

    def infer(self, in_shape):
        h, w, c = in_shape
        oh, ow = (h - 3) // 3 + 1, (w - 3) // 3 + 1
        if oh < 1 or ow < 1:
            raise ValueError(f"input {in_shape} too small for size-3 max pool")
        return [], (oh, ow, c)

    def forward(self, x, params, cache):
        out, idx = dc.max_pool2d(x, 3)
        cache["idx"] = idx
        cache["in_shape"] = x.data.shape
        return out

    def adjoint(self, d_out, params, cache):
        return dc.scatter_add(d_out, cache["idx"], cache["in_shape"]), []


class _Flatten:
    n_params = 0

    def infer(self, in_shape):
        self._in_shape = in_shape
        return [], (int(np.prod(in_shape)),)

    def forward(self, x, params, cache):
        cache["in_shape"] = x.data.shape
        return dc.flatten_batch(x)

    def adjoint(self, d_out, params, cache):
        return dc.reshape(d_out, cache["in_shape"]), []


def _architecture(spec: ModelSpec):
    if spec.arch == "mlp-small":
        return [_Flatten(), _Dense(_MLP_HIDDEN), _ReLU(), _Dense(spec.classes)]
    widths = _CONV_WIDTHS[spec.arch]
    layers = []
    for i, width in enumerate(widths):
        layers.append(_Conv3x3(width))
        layers.append(_ReLU())
        if i >= len(widths) - 2:
            layers.append(_MaxPool3())
    layers.append(_Flatten())
    layers.append(_Dense(spec.classes))
    return layers


def layout(spec: ModelSpec):
    """Parameter layout: list of (name, offset, shape) in flattening order."""
    layers = _architecture(spec)
    shape = spec.input_shape
    entries, offset = [], 0
    for li, layer in enumerate(layers):
        shapes, shape = layer.infer(shape)
        for name, pshape in shapes:
            entries.append((f"layer{li}.{name}", offset, pshape))
            offset += int(np.prod(pshape))
    return entries


def param_count(spec: ModelSpec) -> int:
    return sum(int(np.prod(shape)) for _, _, shape in layout(spec))


def build(spec: ModelSpec) -> ModelState:
    """He fan-in initialization for weights, zeros for biases, seeded."""
    rng = np.random.default_rng(spec.seed)
    params = []
    for name, _, shape in layout(spec):
        if name.endswith(".b"):
            params.append(np.zeros(shape, dtype=dc.default_dtype()))
        else:
            fan_in = int(np.prod(shape[:-1]))
            std = np.sqrt(2.0 / fan_in)
            params.append((rng.standard_normal(shape) * std).astype(dc.default_dtype()))
    return ModelState(spec, params)


def flatten_params(arrays) -> np.ndarray:
    return np.concatenate([np.asarray(a).ravel() for a in arrays])


def unflatten_params(spec: ModelSpec, vec: np.ndarray):
    entries = layout(spec)
    total = sum(int(np.prod(s)) for _, _, s in entries)
    vec = np.asarray(vec)
    if vec.ndim != 1 or vec.size != total:
        raise ValueError(f"expected a flat vector of {total} values, got shape {vec.shape}")
    return [vec[off:off + int(np.prod(s))].reshape(s) for _, off, s in entries]


def wrap_params(state: ModelState, requires_grad: bool):
    return [dc.tensor(p, requires_grad=requires_grad) for p in state.params]


def logits_tape(spec: ModelSpec, params_t, x: dc.Tensor, caches=None):
    """Forward pass over the tape; ``caches`` (if given) collects per-layer state."""
    layers = _architecture(spec)
    # infer() fixes derived shapes; required before forward
    shape = spec.input_shape
    for layer in layers:
        _, shape = layer.infer(shape)
    if caches is None:
        caches = [dict() for _ in layers]
    cur, pi = x, 0
    for layer, cache in zip(layers, caches):
        cur = layer.forward(cur, params_t[pi:pi + layer.n_params], cache)
        pi += layer.n_params
    return cur, layers, caches


def loss_and_param_grads(state: ModelState, images: np.ndarray, labels: np.ndarray):
    """Cross-entropy loss and parameter gradients for one batch (training path)."""
    params_t = wrap_params(state, requires_grad=True)
    logits, _, _ = logits_tape(state.spec, params_t, dc.constant(images))
    loss = dc.cross_entropy(logits, labels)
    grads = dc.grad(loss, params_t)
    return float(loss.data), grads


def param_grad_tape(state: ModelState, x: dc.Tensor, labels: np.ndarray):
    """Parameter gradient of the mean cross-entropy as tape values.

    Parameters are detached constants; the returned gradient tensors remain
    differentiable with respect to whatever leaves feed ``x``.  Matches
    :func:`loss_and_param_grads` exactly on the same inputs.
    """
    params_t = [dc.constant(p) for p in state.params]
    logits, layers, caches = logits_tape(state.spec, params_t, x, caches=None)
    labels = np.asarray(labels)
    batch, classes = logits.data.shape
    onehot = np.zeros((batch, classes), dtype=logits.data.dtype)
    onehot[np.arange(batch), labels] = 1.0
    d = dc.scale(dc.sub(dc.softmax(logits), dc.constant(onehot)), 1.0 / batch)
    grads = [None] * len(params_t)
    pi = len(params_t)
    for layer, cache in zip(reversed(layers), reversed(caches)):
        d, pgrads = layer.adjoint(d, params_t[pi - layer.n_params:pi], cache)
        for k, g in enumerate(pgrads):
            grads[pi - layer.n_params + k] = g
        pi -= layer.n_params
    return grads, logits


def logits_of(state: ModelState, images: np.ndarray) -> np.ndarray:
    out, _, _ = logits_tape(state.spec, [dc.constant(p) for p in state.params],
                            dc.constant(images))
    return out.data


def predict(state: ModelState, images: np.ndarray) -> np.ndarray:
    """Predicted class per image; exact logit ties resolve to the lowest index."""
    images = np.asarray(images)
    if images.ndim == 3:
        images = images[None]
    return np.argmax(logits_of(state, images), axis=1)


def save_checkpoint(state: ModelState, path) -> None:
    spec = state.spec
    arch_b = spec.arch.encode()
    flat = flatten_params(state.params).astype(np.float64)
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", _VERSION))
        fh.write(struct.pack("<I", len(arch_b)))
        fh.write(arch_b)
        h, w, c = spec.input_shape
        fh.write(struct.pack("<IIIIQI", h, w, c, spec.classes, spec.seed, state.epochs_trained))
        fh.write(struct.pack("<Q", flat.size))
        fh.write(flat.astype("<f8").tobytes())


def load_checkpoint(path) -> ModelState:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != _MAGIC:
            raise ValueError(f"not a model checkpoint (magic {magic!r})")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != _VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        (alen,) = struct.unpack("<I", fh.read(4))
        arch = fh.read(alen).decode()
        h, w, c, classes, seed, epochs = struct.unpack("<IIIIQI", fh.read(28))
        spec = ModelSpec(arch, (h, w, c), classes, seed)
        (count,) = struct.unpack("<Q", fh.read(8))
        if count != param_count(spec):
            raise ValueError("checkpoint parameter count does not match architecture")
        raw = fh.read(count * 8)
        if len(raw) != count * 8:
            raise ValueError("checkpoint truncated")
        flat = np.frombuffer(raw, dtype="<f8").astype(dc.default_dtype())
    state = ModelState(spec, unflatten_params(spec, flat))
    state.epochs_trained = epochs
    return state
