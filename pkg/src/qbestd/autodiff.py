"""Minimal reverse-mode automatic differentiation over numpy float64 arrays.

A Tensor wraps an ndarray plus an optional gradient buffer; operations build
a DAG of backward closures which ``backward`` replays in reverse topological
order. Only what the scorer needs is implemented: dense ops, slicing/concat,
the usual nonlinearities and stable softmax/log-softmax reductions.
"""
from __future__ import annotations

import numpy as np
from scipy.special import expit

from .errors import DataError, ValidationError


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, _parents=(), _backward=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self):
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return index(self, key)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _acc(t: Tensor, g: np.ndarray):
    if not t.requires_grad:
        return
    g = _unbroadcast(np.asarray(g), t.data.shape)
    if t.grad is None:
        t.grad = g.copy()
    else:
        t.grad += g


def _make(data, parents, backward_fn) -> Tensor:
    if any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, _parents=tuple(parents), _backward=backward_fn)
    return Tensor(data)


def backward(loss: Tensor):
    """Accumulate gradients of a scalar loss into every reachable Tensor."""
    if loss.data.size != 1:
        raise ValidationError("backward expects a scalar loss")
    topo: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in visited or not node.requires_grad:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            stack.append((p, False))
    loss.grad = np.ones_like(loss.data)
    for node in reversed(topo):
        if node._backward is not None:
            node._backward(node.grad)


def zero_grads(tensors):
    for t in tensors:
        t.grad = None


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------

def add(a, b):
    a, b = _wrap(a), _wrap(b)
    def bw(g):
        _acc(a, g)
        _acc(b, g)
    return _make(a.data + b.data, (a, b), bw)


def sub(a, b):
    a, b = _wrap(a), _wrap(b)
    def bw(g):
        _acc(a, g)
        _acc(b, -g)
    return _make(a.data - b.data, (a, b), bw)


def mul(a, b):
    a, b = _wrap(a), _wrap(b)
    def bw(g):
        _acc(a, g * b.data)
        _acc(b, g * a.data)
    return _make(a.data * b.data, (a, b), bw)


def div(a, b):
    a, b = _wrap(a), _wrap(b)
    out_data = a.data / b.data
    def bw(g):
        _acc(a, g / b.data)
        _acc(b, -g * out_data / b.data)
    return _make(out_data, (a, b), bw)


def neg(a):
    a = _wrap(a)
    def bw(g):
        _acc(a, -g)
    return _make(-a.data, (a,), bw)


def matmul(a, b):
    a, b = _wrap(a), _wrap(b)
    def bw(g):
        _acc(a, g @ b.data.T)
        _acc(b, a.data.T @ g)
    return _make(a.data @ b.data, (a, b), bw)


# ---------------------------------------------------------------------------
# shape ops
# ---------------------------------------------------------------------------

def reshape(a, shape):
    a = _wrap(a)
    orig = a.data.shape
    def bw(g):
        _acc(a, g.reshape(orig))
    return _make(a.data.reshape(shape), (a,), bw)


def index(a, key):
    """Basic (slice/int) indexing with gradient scatter."""
    a = _wrap(a)
    def bw(g):
        if a.requires_grad:
            full = np.zeros_like(a.data)
            full[key] = g
            _acc(a, full)
    return _make(a.data[key], (a,), bw)


def concat(tensors, axis=0):
    tensors = [_wrap(t) for t in tensors]
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)
    def bw(g):
        sl = [slice(None)] * g.ndim
        for t, start, stop in zip(tensors, offsets[:-1], offsets[1:]):
            sl[axis] = slice(start, stop)
            _acc(t, g[tuple(sl)])
    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors, bw)


def stack(tensors, axis=0):
    tensors = [_wrap(t) for t in tensors]
    def bw(g):
        slices = np.moveaxis(g, axis, 0)
        for t, gi in zip(tensors, slices):
            _acc(t, gi)
    return _make(np.stack([t.data for t in tensors], axis=axis), tensors, bw)


def select_columns(a, idx):
    """out[i] = a[i, idx[i]] for a 2-D tensor and integer index vector."""
    a = _wrap(a)
    idx = np.asarray(idx, dtype=np.intp)
    rows = np.arange(a.data.shape[0])
    def bw(g):
        if a.requires_grad:
            full = np.zeros_like(a.data)
            np.add.at(full, (rows, idx), g)
            _acc(a, full)
    return _make(a.data[rows, idx], (a,), bw)


def gather_frames(a, idx):
    """out[b] = a[b, idx[b], :] for a 3-D tensor and per-row frame indices."""
    a = _wrap(a)
    idx = np.asarray(idx, dtype=np.intp)
    rows = np.arange(a.data.shape[0])
    def bw(g):
        if a.requires_grad:
            full = np.zeros_like(a.data)
            np.add.at(full, (rows, idx), g)
            _acc(a, full)
    return _make(a.data[rows, idx], (a,), bw)


def frames_dot(frames, v):
    """Per-frame dot products: (B, T, h) x (B, h) -> (B, T)."""
    frames, v = _wrap(frames), _wrap(v)
    fd, vd = frames.data, v.data
    def bw(g):
        _acc(frames, g[:, :, None] * vd[:, None, :])
        _acc(v, np.einsum("bth,bt->bh", fd, g, optimize=True))
    return _make(np.matmul(fd, vd[:, :, None])[:, :, 0], (frames, v), bw)


def frames_pool(frames, w):
    """Weighted frame sum: (B, T, h) pooled by (B, T) -> (B, h)."""
    frames, w = _wrap(frames), _wrap(w)
    fd, wd = frames.data, w.data
    def bw(g):
        _acc(frames, wd[:, :, None] * g[:, None, :])
        _acc(w, np.matmul(fd, g[:, :, None])[:, :, 0])
    return _make(np.einsum("bth,bt->bh", fd, wd, optimize=True), (frames, w), bw)


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------

def tsum(a, axis=None, keepdims=False):
    a = _wrap(a)
    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _acc(a, np.broadcast_to(g, a.data.shape))
    return _make(a.data.sum(axis=axis, keepdims=keepdims), (a,), bw)


def tmean(a, axis=None, keepdims=False):
    a = _wrap(a)
    count = a.data.size if axis is None else a.data.shape[axis]
    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _acc(a, np.broadcast_to(g, a.data.shape) / count)
    return _make(a.data.mean(axis=axis, keepdims=keepdims), (a,), bw)


# ---------------------------------------------------------------------------
# nonlinearities
# ---------------------------------------------------------------------------

def texp(a):
    a = _wrap(a)
    out_data = np.exp(a.data)
    def bw(g):
        _acc(a, g * out_data)
    return _make(out_data, (a,), bw)


def tlog(a):
    a = _wrap(a)
    def bw(g):
        _acc(a, g / a.data)
    return _make(np.log(a.data), (a,), bw)


def tsqrt(a):
    a = _wrap(a)
    out_data = np.sqrt(a.data)
    def bw(g):
        _acc(a, g * 0.5 / out_data)
    return _make(out_data, (a,), bw)


def sigmoid(a):
    a = _wrap(a)
    out_data = expit(a.data)
    def bw(g):
        _acc(a, g * out_data * (1.0 - out_data))
    return _make(out_data, (a,), bw)


def tanh(a):
    a = _wrap(a)
    out_data = np.tanh(a.data)
    def bw(g):
        _acc(a, g * (1.0 - out_data * out_data))
    return _make(out_data, (a,), bw)


def relu(a):
    a = _wrap(a)
    mask = a.data > 0
    def bw(g):
        _acc(a, g * mask)
    return _make(a.data * mask, (a,), bw)


def clip_min(a, floor: float):
    """max(a, floor); gradient flows only where a > floor."""
    a = _wrap(a)
    mask = a.data > floor
    def bw(g):
        _acc(a, g * mask)
    return _make(np.maximum(a.data, floor), (a,), bw)


def where_mask(mask, a, b):
    """Select a where mask else b; mask is a plain boolean array."""
    a, b = _wrap(a), _wrap(b)
    mask = np.asarray(mask, dtype=bool)
    def bw(g):
        _acc(a, g * mask)
        _acc(b, g * ~mask)
    return _make(np.where(mask, a.data, b.data), (a, b), bw)


def mask_fill(a, mask, value: float):
    """a where mask else constant value (no gradient through filled slots)."""
    a = _wrap(a)
    mask = np.asarray(mask, dtype=bool)
    def bw(g):
        _acc(a, g * mask)
    return _make(np.where(mask, a.data, value), (a,), bw)


# ---------------------------------------------------------------------------
# stable reductions
# ---------------------------------------------------------------------------

def softmax(a, axis=-1):
    """Stable softmax; the max shift is a constant w.r.t. gradients."""
    a = _wrap(a)
    shift = a.data.max(axis=axis, keepdims=True)
    e = texp(sub(a, shift))
    return div(e, tsum(e, axis=axis, keepdims=True))


def log_softmax(a, axis=-1):
    a = _wrap(a)
    shift = a.data.max(axis=axis, keepdims=True)
    z = sub(a, shift)
    return sub(z, tlog(tsum(texp(z), axis=axis, keepdims=True)))


# ---------------------------------------------------------------------------
# finite-difference gradient checking
# ---------------------------------------------------------------------------

def gradient_check(loss_fn, params, *, rng=None, probes_per_tensor: int = 4,
                   step: float = 1e-5) -> dict:
    """Compare reverse-mode gradients against central finite differences.

    ``loss_fn`` must rebuild the scalar loss from the current ``params`` data
    on every call. Probes a random sample of coordinates per tensor and
    reports the maximum relative error.
    """
    rng = rng or np.random.default_rng(0)
    loss = loss_fn()
    if not np.isfinite(loss.data):
        raise DataError("loss is not finite at the probe point")
    zero_grads(params)
    backward(loss)
    analytic = [None if p.grad is None else p.grad.copy() for p in params]

    worst = {"max_rel_err": 0.0, "tensor": None, "coord": None,
             "analytic": None, "numeric": None, "probes": 0}
    for p, grad in zip(params, analytic):
        if grad is None:
            grad = np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        n = flat.size
        coords = rng.choice(n, size=min(probes_per_tensor, n), replace=False)
        for c in coords:
            orig = flat[c]
            flat[c] = orig + step
            f_plus = float(loss_fn().data)
            flat[c] = orig - step
            f_minus = float(loss_fn().data)
            flat[c] = orig
            if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
                raise DataError("loss became non-finite during probing")
            numeric = (f_plus - f_minus) / (2.0 * step)
            a = float(grad.reshape(-1)[c])
            rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-6)
            worst["probes"] += 1
            if rel > worst["max_rel_err"]:
                worst.update(max_rel_err=rel, tensor=p, coord=int(c),
                             analytic=a, numeric=numeric)
    zero_grads(params)
    return worst
