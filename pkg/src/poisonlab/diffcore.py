"""Reverse-mode automatic differentiation over dense numpy arrays.

Every operation computes its value eagerly and records its operands plus a
local adjoint rule on the output node; the resulting node graph is the tape.
``backward`` replays the tape exactly once in reverse topological order and
accumulates gradients on every node that requires them.  Reduction and
accumulation orders are fixed, so identical inputs give bitwise-identical
gradients.

Element type is float64 by default; tests and acceptance runs stay at 64-bit.
``set_default_dtype(np.float32)`` switches on the fast mode for exploratory
runs.

Gradients of gradients are not taken through a second backward pass.  Callers
that need the derivative of a parameter gradient (the crafting loop) build the
parameter-gradient computation itself out of these primitives, layer by layer,
so one ordinary backward pass reaches the perturbation leaves.  The model
layers in :mod:`poisonlab.models` provide those unrolled adjoint formulas.
"""

from __future__ import annotations

import numpy as np

_DEFAULT_DTYPE = [np.float64]


class ShapeError(ValueError):
    """Operand shapes incompatible with the requested operation."""


class GraphUsageError(RuntimeError):
    """Tape misuse, e.g. a backward seed whose shape does not match."""


def set_default_dtype(dtype) -> None:
    if dtype not in (np.float32, np.float64):
        raise ValueError("supported dtypes are float32 and float64")
    _DEFAULT_DTYPE[0] = dtype


def default_dtype():
    return _DEFAULT_DTYPE[0]


class Tensor:
    """A dense array plus the tape bookkeeping needed for backward."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_rule", "op")

    def __init__(self, data, requires_grad=False, parents=(), rule=None, op="leaf"):
        self.data = np.asarray(data, dtype=default_dtype())
        self.grad = None
        self.requires_grad = bool(requires_grad) or any(p.requires_grad for p in parents)
        self._parents = tuple(parents)
        self._rule = rule
        self.op = op

    @property
    def shape(self):
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(op={self.op}, shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    def __rmul__(self, other):
        return mul(_as_tensor(other), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, _as_tensor(other))


def tensor(data, requires_grad=False) -> Tensor:
    """Create a leaf node."""
    return Tensor(data, requires_grad=requires_grad)


def constant(data) -> Tensor:
    """Create a node excluded from differentiation."""
    return Tensor(data, requires_grad=False)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _accum(node: Tensor, g: np.ndarray) -> None:
    if not node.requires_grad:
        return
    if node.grad is None:
        node.grad = np.array(g, dtype=node.data.dtype, copy=True)
    else:
        node.grad += g


def _topo(root: Tensor) -> list:
    """Iterative post-order over the subgraph that requires gradients."""
    order, visiting, seen = [], [(root, False)], set()
    while visiting:
        node, expanded = visiting.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen or not node.requires_grad:
            continue
        seen.add(id(node))
        visiting.append((node, True))
        for p in node._parents:
            visiting.append((p, False))
    return order


def backward(output: Tensor, seed=None) -> None:
    """Run one reverse pass from ``output``, populating ``.grad`` fields."""
    if not output.requires_grad:
        raise GraphUsageError("backward on a graph with no differentiable leaves")
    if seed is None:
        seed = np.ones_like(output.data)
    else:
        seed = np.asarray(seed, dtype=output.data.dtype)
        if seed.shape != output.data.shape:
            raise GraphUsageError(
                f"seed shape {seed.shape} does not match output shape {output.data.shape}"
            )
    order = _topo(output)
    for node in order:
        node.grad = None
    output.grad = np.array(seed, copy=True)
    for node in reversed(order):
        if node._rule is not None and node.grad is not None:
            node._rule(node.grad)


def grad(output: Tensor, wrt, seed=None) -> list:
    """Backward pass returning gradients for ``wrt``; zeros for unused leaves."""
    backward(output, seed)
    return [
        t.grad if t.grad is not None else np.zeros_like(t.data)
        for t in wrt
    ]


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Reduce a broadcast gradient back to ``shape``."""
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.data.shape, b.data.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.data.shape} and {b.data.shape} do not broadcast")


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "add")
    out = Tensor(a.data + b.data, parents=(a, b), op="add")

    def rule(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(g, b.data.shape))

    out._rule = rule
    return out


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "sub")
    out = Tensor(a.data - b.data, parents=(a, b), op="sub")

    def rule(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(-g, b.data.shape))

    out._rule = rule
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "mul")
    out = Tensor(a.data * b.data, parents=(a, b), op="mul")

    def rule(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(g * a.data, b.data.shape))

    out._rule = rule
    return out


def div(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "div")
    out = Tensor(a.data / b.data, parents=(a, b), op="div")

    def rule(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g / b.data, a.data.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    out._rule = rule
    return out


def neg(a: Tensor) -> Tensor:
    out = Tensor(-a.data, parents=(a,), op="neg")

    def rule(g):
        _accum(a, -g)

    out._rule = rule
    return out


def scale(a: Tensor, s: float) -> Tensor:
    """Multiply by a python scalar."""
    s = float(s)
    out = Tensor(a.data * s, parents=(a,), op="scale")

    def rule(g):
        _accum(a, g * s)

    out._rule = rule
    return out


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError("matmul: both operands must be rank-2")
    if a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul: inner dims {a.data.shape} @ {b.data.shape}")
    out = Tensor(a.data @ b.data, parents=(a, b), op="matmul")

    def rule(g):
        if a.requires_grad:
            _accum(a, g @ b.data.T)
        if b.requires_grad:
            _accum(b, a.data.T @ g)

    out._rule = rule
    return out


def transpose(a: Tensor, axes=None) -> Tensor:
    axes = tuple(axes) if axes is not None else tuple(reversed(range(a.data.ndim)))
    inverse = tuple(np.argsort(axes))
    out = Tensor(np.transpose(a.data, axes), parents=(a,), op="transpose")

    def rule(g):
        _accum(a, np.transpose(g, inverse))

    out._rule = rule
    return out


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    if int(np.prod(a.data.shape, dtype=np.int64)) != int(abs(np.prod(shape, dtype=np.int64))) and -1 not in shape:
        raise ShapeError(f"reshape: cannot view {a.data.shape} as {shape}")
    out = Tensor(a.data.reshape(shape), parents=(a,), op="reshape")
    src_shape = a.data.shape

    def rule(g):
        _accum(a, g.reshape(src_shape))

    out._rule = rule
    return out


def concat(parts) -> Tensor:
    """Concatenate rank-1 tensors into one rank-1 tensor."""
    parts = [_as_tensor(p) for p in parts]
    for p in parts:
        if p.data.ndim != 1:
            raise ShapeError("concat: all parts must be rank-1")
    out = Tensor(np.concatenate([p.data for p in parts]), parents=tuple(parts), op="concat")
    sizes = [p.data.size for p in parts]

    def rule(g):
        off = 0
        for p, n in zip(parts, sizes):
            _accum(p, g[off:off + n])
            off += n

    out._rule = rule
    return out


def pad2d(a: Tensor, pad: int) -> Tensor:
    """Zero-pad the two spatial axes of a (B, H, W, C) tensor."""
    if a.data.ndim != 4:
        raise ShapeError("pad2d: expected a rank-4 (B, H, W, C) tensor")
    if pad < 0:
        raise ShapeError("pad2d: pad must be non-negative")
    p = int(pad)
    out_data = np.pad(a.data, ((0, 0), (p, p), (p, p), (0, 0)))
    out = Tensor(out_data, parents=(a,), op="pad2d")
    h, w = a.data.shape[1], a.data.shape[2]

    def rule(g):
        _accum(a, g[:, p:p + h, p:p + w, :])

    out._rule = rule
    return out


def take(a: Tensor, idx) -> Tensor:
    """Gather ``a.flat[idx]``; the output has the shape of ``idx``.

    The adjoint scatter-adds back through the same index map, so repeated
    indices accumulate.
    """
    idx = np.asarray(idx)
    if idx.dtype.kind not in "iu":
        raise ShapeError("take: index array must be integral")
    size = a.data.size
    if idx.size and (idx.min() < 0 or idx.max() >= size):
        raise ShapeError("take: index out of range")
    flat_idx = idx.ravel()
    out = Tensor(a.data.ravel()[flat_idx].reshape(idx.shape), parents=(a,), op="take")
    src_shape = a.data.shape

    def rule(g):
        if a.requires_grad:
            acc = np.bincount(flat_idx, weights=g.ravel(), minlength=size)
            _accum(a, acc.astype(g.dtype).reshape(src_shape))

    out._rule = rule
    return out


def scatter_add(a: Tensor, idx, out_shape) -> Tensor:
    """Scatter-add values of ``a`` into a zero tensor of ``out_shape``.

    ``idx`` holds flat destination indices and must match ``a``'s shape.
    Exact adjoint of :func:`take` under the same index map.
    """
    idx = np.asarray(idx)
    if idx.shape != a.data.shape:
        raise ShapeError("scatter_add: index shape must match value shape")
    out_shape = tuple(out_shape)
    size = int(np.prod(out_shape, dtype=np.int64))
    if idx.size and (idx.min() < 0 or idx.max() >= size):
        raise ShapeError("scatter_add: index out of range")
    flat_idx = idx.ravel()
    data = np.bincount(flat_idx, weights=a.data.ravel(), minlength=size)
    out = Tensor(data.astype(a.data.dtype).reshape(out_shape), parents=(a,), op="scatter_add")
    src_shape = a.data.shape

    def rule(g):
        if a.requires_grad:
            _accum(a, g.ravel()[flat_idx].reshape(src_shape))

    out._rule = rule
    return out


def relu(a: Tensor) -> Tensor:
    out = Tensor(np.maximum(a.data, 0.0), parents=(a,), op="relu")
    mask = a.data > 0

    def rule(g):
        _accum(a, g * mask)

    out._rule = rule
    return out


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(s, parents=(a,), op="softmax")

    def rule(g):
        inner = (g * s).sum(axis=axis, keepdims=True)
        _accum(a, (g - inner) * s)

    out._rule = rule
    return out


def reduce_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = Tensor(a.data.sum(axis=axis, keepdims=keepdims), parents=(a,), op="reduce_sum")
    src_shape = a.data.shape

    def rule(g):
        if axis is None:
            _accum(a, np.broadcast_to(g, src_shape).copy())
            return
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        if not keepdims:
            for ax in sorted(ax % len(src_shape) for ax in axes):
                g = np.expand_dims(g, ax)
        _accum(a, np.broadcast_to(g, src_shape).copy())

    out._rule = rule
    return out


def reduce_mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = a.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([a.data.shape[ax] for ax in axes]))
    return scale(reduce_sum(a, axis=axis, keepdims=keepdims), 1.0 / count)


def sqrt(a: Tensor) -> Tensor:
    root = np.sqrt(a.data)
    out = Tensor(root, parents=(a,), op="sqrt")

    def rule(g):
        _accum(a, g * 0.5 / root)

    out._rule = rule
    return out


def dot(a: Tensor, b: Tensor) -> Tensor:
    """Inner product of two rank-1 tensors (composite)."""
    if a.data.ndim != 1 or b.data.ndim != 1 or a.data.shape != b.data.shape:
        raise ShapeError(f"dot: need matching rank-1 shapes, got {a.data.shape} and {b.data.shape}")
    return reduce_sum(mul(a, b))


def norm2(a: Tensor) -> Tensor:
    """Euclidean norm of a rank-1 tensor (composite)."""
    return sqrt(dot(a, a))


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Fused softmax + cross-entropy, mean-reduced over the batch.

    ``logits`` is (classes,) with an int label or (B, classes) with an int
    vector.  Out-of-range labels are rejected.
    """
    data = logits.data
    if data.ndim == 1:
        lab = np.asarray([int(labels)])
        data2 = data[None, :]
    elif data.ndim == 2:
        lab = np.asarray(labels)
        if lab.ndim != 1 or lab.shape[0] != data.shape[0]:
            raise ShapeError("cross_entropy: labels must be one int per batch row")
        data2 = data
    else:
        raise ShapeError("cross_entropy: logits must be rank-1 or rank-2")
    if lab.dtype.kind not in "iu":
        raise ShapeError("cross_entropy: labels must be integers")
    classes = data2.shape[1]
    if lab.size and (lab.min() < 0 or lab.max() >= classes):
        raise ShapeError(f"cross_entropy: label out of range for {classes} classes")

    batch = data2.shape[0]
    shifted = data2 - data2.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    picked = shifted[np.arange(batch), lab]
    value = np.mean(lse - picked)
    out = Tensor(np.asarray(value), parents=(logits,), op="cross_entropy")

    probs = np.exp(shifted)
    probs /= probs.sum(axis=1, keepdims=True)

    def rule(g):
        d = probs.copy()
        d[np.arange(batch), lab] -= 1.0
        d *= float(g) / batch
        _accum(logits, d.reshape(logits.data.shape))

    out._rule = rule
    return out


# Convolution kernels: stride 1, explicit zero padding, channels-last layout.
# Implemented as kh*kw shifted matmuls; the fixed (u, v) loop order keeps the
# accumulation deterministic.

def _conv_fwd(xp: np.ndarray, w: np.ndarray) -> np.ndarray:
    b, hp, wp, cin = xp.shape
    kh, kw, cw, f = w.shape
    oh, ow = hp - kh + 1, wp - kw + 1
    out = np.zeros((b * oh * ow, f), dtype=xp.dtype)
    for u in range(kh):
        for v in range(kw):
            patch = xp[:, u:u + oh, v:v + ow, :].reshape(b * oh * ow, cin)
            out += patch @ w[u, v].reshape(cin, f)
    return out.reshape(b, oh, ow, f)


def _conv_dx(dy: np.ndarray, w: np.ndarray, pad: int, in_hw) -> np.ndarray:
    b, oh, ow, f = dy.shape
    kh, kw, cin, _ = w.shape
    h, wd = in_hw
    dxp = np.zeros((b, h + 2 * pad, wd + 2 * pad, cin), dtype=dy.dtype)
    dy2 = dy.reshape(b * oh * ow, f)
    for u in range(kh):
        for v in range(kw):
            contrib = (dy2 @ w[u, v].reshape(cin, f).T).reshape(b, oh, ow, cin)
            dxp[:, u:u + oh, v:v + ow, :] += contrib
    if pad == 0:
        return dxp
    return dxp[:, pad:pad + h, pad:pad + wd, :]


def _conv_dw(xp: np.ndarray, dy: np.ndarray, kh: int, kw: int) -> np.ndarray:
    b, oh, ow, f = dy.shape
    cin = xp.shape[3]
    dy2 = dy.reshape(b * oh * ow, f)
    dw = np.zeros((kh, kw, cin, f), dtype=dy.dtype)
    for u in range(kh):
        for v in range(kw):
            patch = xp[:, u:u + oh, v:v + ow, :].reshape(b * oh * ow, cin)
            dw[u, v] = patch.T @ dy2
    return dw


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, pad: int = 1) -> Tensor:
    """2-D convolution, stride 1: x (B,H,W,C) * w (kh,kw,C,F) -> (B,OH,OW,F)."""
    x, w = _as_tensor(x), _as_tensor(w)
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ShapeError("conv2d: x must be rank-4 and w rank-4")
    if x.data.shape[3] != w.data.shape[2]:
        raise ShapeError(
            f"conv2d: input channels {x.data.shape[3]} != kernel channels {w.data.shape[2]}"
        )
    kh, kw = w.data.shape[0], w.data.shape[1]
    h, wd = x.data.shape[1], x.data.shape[2]
    if h + 2 * pad < kh or wd + 2 * pad < kw:
        raise ShapeError("conv2d: kernel larger than padded input")
    p = int(pad)
    xp = np.pad(x.data, ((0, 0), (p, p), (p, p), (0, 0))) if p else x.data
    parents = (x, w) if b is None else (x, w, b)
    y = _conv_fwd(xp, w.data)
    if b is not None:
        if b.data.shape != (w.data.shape[3],):
            raise ShapeError("conv2d: bias must be (F,)")
        y = y + b.data
    out = Tensor(y, parents=parents, op="conv2d")

    def rule(g):
        if x.requires_grad:
            _accum(x, _conv_dx(g, w.data, p, (h, wd)))
        if w.requires_grad:
            _accum(w, _conv_dw(xp, g, kh, kw))
        if b is not None and b.requires_grad:
            _accum(b, g.sum(axis=(0, 1, 2)))

    out._rule = rule
    return out


def conv2d_wgrad(x: Tensor, dy: Tensor, kh: int, kw: int, pad: int = 1) -> Tensor:
    """Weight-gradient correlation: given input x and upstream dy, produce the
    (kh,kw,C,F) array matching conv2d's kernel gradient.

    Differentiable in both arguments, which is what lets a parameter gradient
    live on the tape as an ordinary value.
    """
    x, dy = _as_tensor(x), _as_tensor(dy)
    if x.data.ndim != 4 or dy.data.ndim != 4:
        raise ShapeError("conv2d_wgrad: both arguments must be rank-4")
    h, wd = x.data.shape[1], x.data.shape[2]
    oh, ow = dy.data.shape[1], dy.data.shape[2]
    if (h + 2 * pad - kh + 1, wd + 2 * pad - kw + 1) != (oh, ow):
        raise ShapeError("conv2d_wgrad: dy spatial shape inconsistent with x/kernel/pad")
    p = int(pad)
    xp = np.pad(x.data, ((0, 0), (p, p), (p, p), (0, 0))) if p else x.data
    out = Tensor(_conv_dw(xp, dy.data, kh, kw), parents=(x, dy), op="conv2d_wgrad")

    def rule(g):
        if x.requires_grad:
            _accum(x, _conv_dx(dy.data, g, p, (h, wd)))
        if dy.requires_grad:
            _accum(dy, _conv_fwd(xp, g))

    out._rule = rule
    return out


def max_pool2d(x: Tensor, size: int, stride: int | None = None):
    """Max pooling over (B,H,W,C); returns (output, flat argmax indices).

    Window positions are floor-aligned; gradient routes to each window's
    argmax (first occurrence on exact ties).
    """
    if x.data.ndim != 4:
        raise ShapeError("max_pool2d: expected rank-4 input")
    stride = size if stride is None else stride
    b, h, w, c = x.data.shape
    oh, ow = (h - size) // stride + 1, (w - size) // stride + 1
    if oh < 1 or ow < 1:
        raise ShapeError("max_pool2d: window does not fit input")
    windows = np.empty((b, oh, ow, size * size, c), dtype=x.data.dtype)
    offsets = np.empty((oh, ow, size * size), dtype=np.int64)
    for u in range(size):
        for v in range(size):
            tap = u * size + v
            windows[:, :, :, tap, :] = x.data[:, u:u + oh * stride:stride, v:v + ow * stride:stride, :]
            rows = np.arange(oh)[:, None] * stride + u
            cols = np.arange(ow)[None, :] * stride + v
            offsets[:, :, tap] = rows * w + cols
    arg = windows.argmax(axis=3)
    spatial = np.take_along_axis(
        np.broadcast_to(offsets[None, :, :, :, None], windows.shape),
        arg[:, :, :, None, :], axis=3,
    )[:, :, :, 0, :]
    batch_off = (np.arange(b) * (h * w * c))[:, None, None, None]
    chan_off = np.arange(c)[None, None, None, :]
    flat_idx = batch_off + spatial * c + chan_off
    return take(x, flat_idx), flat_idx


def flatten_batch(x: Tensor) -> Tensor:
    """Collapse all but the leading batch axis."""
    if x.data.ndim < 2:
        raise ShapeError("flatten_batch: expected a batch dimension")
    return reshape(x, (x.data.shape[0], -1))
