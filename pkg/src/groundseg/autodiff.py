"""Reverse-mode automatic differentiation over numpy arrays.

A small tape: every op builds a `Tensor` node holding the forward value and a
closure that routes the incoming gradient to its parents. `backward()` on a
scalar walks the graph in reverse topological order. Convolutions route
through the selected kernel backend (see `kernels`).

Training runs in float32; gradient-check fixtures build float64 graphs. The
dtype of an op follows its inputs.
"""

from __future__ import annotations

import numpy as np

from . import kernels


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, grad={self.requires_grad or bool(self._parents)})"

    def zero_grad(self):
        self.grad = None

    def backward(self):
        if self.data.size != 1:
            raise ValueError("backward() requires a scalar loss")
        order = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # operator sugar; constants are wrapped on the fly
    def __add__(self, other):
        return add(self, _wrap(other))

    def __radd__(self, other):
        return add(_wrap(other), self)

    def __sub__(self, other):
        return add(self, neg(_wrap(other)))

    def __rsub__(self, other):
        return add(_wrap(other), neg(self))

    def __neg__(self):
        return neg(self)

    def __mul__(self, other):
        return mul(self, _wrap(other))

    def __rmul__(self, other):
        return mul(_wrap(other), self)

    def __truediv__(self, other):
        return div(self, _wrap(other))

    def __matmul__(self, other):
        return matmul(self, _wrap(other))

    def __getitem__(self, idx):
        return getitem(self, idx)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x))


_grad_enabled = True


class no_grad:
    """Context manager that suppresses tape construction (inference paths)."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


def _tracked(*parents: Tensor) -> bool:
    return _grad_enabled and any(p.requires_grad or p._parents for p in parents)


def _needs(t: Tensor) -> bool:
    return t.requires_grad or bool(t._parents)


def _make(data, parents, backward) -> Tensor:
    out = Tensor(data)
    if _tracked(*parents):
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _accum(t: Tensor, g: np.ndarray):
    # stored references are never mutated in place (accumulation rebinds),
    # so no defensive copy is needed
    if t.grad is None:
        t.grad = np.asarray(g)
    else:
        t.grad = t.grad + g


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum a gradient over the axes that numpy broadcasting expanded."""
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, ss) in enumerate(zip(g.shape, shape)) if ss == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def add(a: Tensor, b: Tensor) -> Tensor:
    def backward(g):
        if _needs(a):
            _accum(a, _unbroadcast(g, a.data.shape))
        if _needs(b):
            _accum(b, _unbroadcast(g, b.data.shape))

    return _make(a.data + b.data, (a, b), backward)


def neg(a: Tensor) -> Tensor:
    def backward(g):
        _accum(a, -g)

    return _make(-a.data, (a,), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    def backward(g):
        if _needs(a):
            _accum(a, _unbroadcast(g * b.data, a.data.shape))
        if _needs(b):
            _accum(b, _unbroadcast(g * a.data, b.data.shape))

    return _make(a.data * b.data, (a, b), backward)


def div(a: Tensor, b: Tensor) -> Tensor:
    def backward(g):
        if _needs(a):
            _accum(a, _unbroadcast(g / b.data, a.data.shape))
        if _needs(b):
            _accum(b, _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    return _make(a.data / b.data, (a, b), backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    def backward(g):
        if _needs(a):
            _accum(a, _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.data.shape))
        if _needs(b):
            _accum(b, _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.data.shape))

    return _make(np.matmul(a.data, b.data), (a, b), backward)


def reshape(a: Tensor, shape) -> Tensor:
    old = a.data.shape

    def backward(g):
        _accum(a, g.reshape(old))

    return _make(a.data.reshape(shape), (a,), backward)


def transpose(a: Tensor, axes) -> Tensor:
    inv = np.argsort(axes)

    def backward(g):
        _accum(a, g.transpose(inv))

    return _make(a.data.transpose(axes), (a,), backward)


def getitem(a: Tensor, idx) -> Tensor:
    def backward(g):
        full = np.zeros_like(a.data)
        full[idx] += g
        _accum(a, full)

    return _make(a.data[idx], (a,), backward)


def concat(tensors, axis: int) -> Tensor:
    tensors = [_wrap(t) for t in tensors]
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        for t, piece in zip(tensors, np.split(g, splits, axis=axis)):
            if _needs(t):
                _accum(t, piece)

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    def backward(g):
        if axis is None:
            _accum(a, np.broadcast_to(g, a.data.shape).copy())
            return
        if not keepdims:
            axes = axis if isinstance(axis, tuple) else (axis,)
            g = np.expand_dims(g, axes)
        _accum(a, np.broadcast_to(g, a.data.shape).copy())

    return _make(a.data.sum(axis=axis, keepdims=keepdims), (a,), backward)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = a.data.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = int(np.prod([a.data.shape[ax] for ax in axes]))
    return mul(tsum(a, axis=axis, keepdims=keepdims), _wrap(np.asarray(1.0 / n, dtype=a.data.dtype)))


_GELU_K = 0.7978845608028654  # sqrt(2/pi)


def _sigmoid_stable(x: np.ndarray) -> np.ndarray:
    # sigma(x) = (1 + tanh(x/2)) / 2, stable for all finite x
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def gelu(a: Tensor) -> Tensor:
    x = a.data
    x2 = x * x
    t = x2 * 0.044715
    t += 1.0
    t *= x
    t *= _GELU_K
    np.tanh(t, out=t)  # t = tanh(K*(x + 0.044715*x^3))
    out = t + 1.0
    out *= 0.5 * x

    def backward(g):
        du = x2 * 0.134145
        du += 1.0
        du *= _GELU_K
        du *= 1.0 - t * t
        du *= 0.5 * x
        du += 0.5 * (1.0 + t)
        du *= g
        _accum(a, du)

    return _make(out, (a,), backward)


def sigmoid(a: Tensor) -> Tensor:
    s = _sigmoid_stable(a.data)

    def backward(g):
        _accum(a, g * s * (1.0 - s))

    return _make(s, (a,), backward)


def softplus(a: Tensor) -> Tensor:
    """log(1 + exp(x)) in the overflow-safe form max(x, 0) + log1p(exp(-|x|))."""
    x = a.data
    out = np.maximum(x, 0) + np.log1p(np.exp(-np.abs(x)))

    def backward(g):
        _accum(a, g * _sigmoid_stable(x))

    return _make(out, (a,), backward)


def tabs(a: Tensor) -> Tensor:
    def backward(g):
        _accum(a, g * np.sign(a.data))

    return _make(np.abs(a.data), (a,), backward)


def softmax(a: Tensor) -> Tensor:
    """Softmax along the last axis."""
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        _accum(a, (g - (g * s).sum(axis=-1, keepdims=True)) * s)

    return _make(s, (a,), backward)


def layer_norm(a: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then scale+shift."""
    mu = a.data.mean(axis=-1, keepdims=True)
    var = a.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (a.data - mu) * inv

    def backward(g):
        dxhat = g * gain.data
        m1 = dxhat.mean(axis=-1, keepdims=True)
        m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
        _accum(a, (dxhat - m1 - xhat * m2) * inv)
        red = tuple(range(g.ndim - 1))
        _accum(gain, (g * xhat).sum(axis=red))
        _accum(bias, g.sum(axis=red))

    return _make(xhat * gain.data + bias.data, (a, gain, bias), backward)


def embedding(weight: Tensor, ids: np.ndarray) -> Tensor:
    ids = np.asarray(ids)

    def backward(g):
        full = np.zeros_like(weight.data)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, weight.data.shape[1]))
        _accum(weight, full)

    return _make(weight.data[ids], (weight,), backward)


def take(a: Tensor, idx: np.ndarray) -> Tensor:
    """Gather along axis 0 (duplicate indices allowed; backward scatter-adds)."""
    idx = np.asarray(idx)

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        _accum(a, full)

    return _make(a.data[idx], (a,), backward)


def _im2col_op(a: Tensor, ksize: int, stride: int, pad: int) -> Tensor:
    x = np.ascontiguousarray(a.data)
    shape = x.shape

    def backward(g):
        if _needs(a):
            _accum(a, kernels.col2im(np.ascontiguousarray(g), shape, ksize, stride, pad))

    return _make(kernels.im2col(x, ksize, stride, pad), (a,), backward)


def conv2d(x: Tensor, w: Tensor, b: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """2d convolution, NCHW; weight (F, C, k, k), bias (F,)."""
    f, c, k, _ = w.data.shape
    n, cx, h, ww = x.data.shape
    if cx != c:
        raise ValueError(f"conv2d: input has {cx} channels, weight expects {c}")
    oh = kernels.conv_out_size(h, k, stride, pad)
    ow = kernels.conv_out_size(ww, k, stride, pad)
    cols = _im2col_op(x, k, stride, pad)  # (N, C*k*k, OH*OW)
    w2 = reshape(w, (f, c * k * k))
    out = matmul(w2, cols)  # (N, F, OH*OW)
    out = add(out, reshape(b, (f, 1)))
    return reshape(out, (n, f, oh, ow))


def avg_pool2(a: Tensor) -> Tensor:
    n, c, h, w = a.data.shape
    v = a.data.reshape(n, c, h // 2, 2, w // 2, 2)
    out = v.mean(axis=(3, 5))

    def backward(g):
        _accum(a, np.repeat(np.repeat(g, 2, axis=2), 2, axis=3) * 0.25)

    return _make(out, (a,), backward)


def upsample2(a: Tensor) -> Tensor:
    """Nearest-neighbour x2 upsampling on the trailing two axes."""
    n, c, h, w = a.data.shape

    def backward(g):
        _accum(a, g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)))

    return _make(np.repeat(np.repeat(a.data, 2, axis=2), 2, axis=3), (a,), backward)


def expand_hw(a: Tensor, h: int, w: int) -> Tensor:
    """Broadcast (M, D) vectors over an h x w grid -> (M, D, h, w)."""
    m, d = a.data.shape

    def backward(g):
        _accum(a, g.sum(axis=(2, 3)))

    return _make(np.broadcast_to(a.data[:, :, None, None], (m, d, h, w)).copy(), (a,), backward)


def cross_entropy_rows(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Per-row cross entropy of (M, V) logits against (M,) class indices."""
    targets = np.asarray(targets)
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1))
    rows = np.arange(z.shape[0])
    out = lse - z[rows, targets]

    def backward(g):
        p = np.exp(z)
        p /= p.sum(axis=-1, keepdims=True)
        p[rows, targets] -= 1.0
        _accum(logits, p * g[:, None])

    return _make(out, (logits,), backward)
