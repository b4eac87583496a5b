"""Array-valued reverse-mode automatic differentiation.

Every op records its parents and a closure that turns the output gradient
into parent gradients. ``Tensor.backward`` walks the graph in reverse
topological order. Values are float64 throughout.
"""

from __future__ import annotations

import contextlib

import numpy as np

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = prev


def grad_enabled() -> bool:
    return _grad_enabled


def _unbroadcast(grad, shape):
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def _accumulate(self, g):
        if not self.requires_grad:
            return
        g = _unbroadcast(g, self.data.shape)
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad += g

    def backward(self):
        if self.data.size != 1:
            raise ValueError("backward() needs a scalar loss")
        order, seen, stack = [], set(), [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in seen:
                    stack.append((parent, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
                if node is not self and node._parents:
                    node.grad = None  # intermediate buffers are not needed afterwards

    # arithmetic ------------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other):
        return add(as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a tensor is not supported")
        return mul(self, 1.0 / other)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        n = self.data.size if axis is None else self.data.shape[axis]
        return tsum(self, axis) * (1.0 / n)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], tuple) else shape)

    def transpose(self, *axes):
        return transpose(self, axes)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, backward):
    parents = tuple(p for p in parents if isinstance(p, Tensor))
    if _grad_enabled and any(p.requires_grad for p in parents):
        return Tensor(data, True, parents, backward)
    return Tensor(data)


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        a._accumulate(g)
        b._accumulate(g)

    return _make(a.data + b.data, (a, b), backward)


def neg(a):
    def backward(g):
        a._accumulate(-g)

    return _make(-a.data, (a,), backward)


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * b.data)
        if b.requires_grad:
            b._accumulate(g * a.data)

    return _make(a.data * b.data, (a, b), backward)


def square(a):
    def backward(g):
        a._accumulate(2.0 * a.data * g)

    return _make(a.data * a.data, (a,), backward)


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g @ np.swapaxes(b.data, -1, -2))
        if b.requires_grad:
            b._accumulate(np.swapaxes(a.data, -1, -2) @ g)

    return _make(a.data @ b.data, (a, b), backward)


def tsum(a, axis=None):
    def backward(g):
        if axis is None:
            a._accumulate(np.broadcast_to(g, a.data.shape))
        else:
            a._accumulate(np.broadcast_to(np.expand_dims(g, axis), a.data.shape))

    return _make(a.data.sum(axis=axis), (a,), backward)


def reshape(a, shape):
    def backward(g):
        a._accumulate(g.reshape(a.data.shape))

    return _make(a.data.reshape(shape), (a,), backward)


def transpose(a, axes):
    axes = tuple(axes) if axes else None
    inverse = None if axes is None else tuple(np.argsort(axes))

    def backward(g):
        a._accumulate(np.transpose(g, inverse))

    return _make(np.transpose(a.data, axes), (a,), backward)


def relu(a):
    mask = a.data > 0

    def backward(g):
        a._accumulate(g * mask)

    return _make(a.data * mask, (a,), backward)


def linear(x, weight, bias=None):
    """``x @ weight + bias`` over the last axis; leading axes are batch axes.

    Applied to an ``(B, M, C)`` point set this is a shared point-wise layer.
    """
    x = as_tensor(x)
    lead = x.data.shape[:-1]
    x2 = x.data.reshape(-1, x.data.shape[-1])
    out = x2 @ weight.data
    if bias is not None:
        out += bias.data

    def backward(g):
        g2 = g.reshape(-1, g.shape[-1])
        if x.requires_grad:
            x._accumulate((g2 @ weight.data.T).reshape(x.data.shape))
        if weight.requires_grad:
            weight._accumulate(x2.T @ g2)
        if bias is not None and bias.requires_grad:
            bias._accumulate(g2.sum(axis=0))

    return _make(out.reshape(*lead, -1), (x, weight, bias), backward)


def global_max_pool(x, axis=1):
    """Max over the point axis; the subgradient goes to the first maximiser."""
    idx = np.expand_dims(np.argmax(x.data, axis=axis), axis)
    out = np.take_along_axis(x.data, idx, axis=axis)

    def backward(g):
        gx = np.zeros_like(x.data)
        np.put_along_axis(gx, idx, np.expand_dims(g, axis), axis=axis)
        x._accumulate(gx)

    return _make(np.squeeze(out, axis), (x,), backward)


def gather_points(x, idx):
    """``out[b, k] = x[b, idx[b, k]]`` for ``x`` of shape ``(B, M, C)``."""
    B, M, C = x.data.shape
    idx = np.asarray(idx, dtype=np.intp)
    rows = np.arange(B)[:, None]
    out = x.data[rows, idx]

    def backward(g):
        flat = (rows * M + idx).ravel()
        gx = np.empty((B * M, C))
        for c in range(C):
            gx[:, c] = np.bincount(flat, weights=g[..., c].ravel(), minlength=B * M)
        x._accumulate(gx.reshape(B, M, C))

    return _make(out, (x,), backward)


def conv_transpose2d(x, weight, bias=None, stride=2, padding=0):
    """Transposed 2D convolution.

    Args:
        x: ``(B, Cin, H, W)``.
        weight: ``(Cin, Cout, k, k)``.
        bias: ``(Cout,)`` or None.

    Returns:
        ``(B, Cout, (H-1)*stride - 2*padding + k, ...)``.
    """
    B, cin, H, W = x.data.shape
    _, cout, k, _ = weight.data.shape
    s, p = stride, padding
    Hf, Wf = (H - 1) * s + k, (W - 1) * s + k
    Ho, Wo = Hf - 2 * p, Wf - 2 * p
    if Ho <= 0 or Wo <= 0:
        raise ValueError("padding too large for transposed convolution")
    # channels-last internally so every kernel tap is a contiguous slab
    xr = x.data.transpose(0, 2, 3, 1).reshape(-1, cin)
    wmat = weight.data.transpose(0, 2, 3, 1).reshape(cin, k * k * cout)
    cols = (xr @ wmat).reshape(B, H, W, k, k, cout)
    full = np.zeros((B, Hf, Wf, cout))
    for ki in range(k):
        for kj in range(k):
            full[:, ki:ki + s * H:s, kj:kj + s * W:s, :] += cols[:, :, :, ki, kj, :]
    out = full[:, p:p + Ho, p:p + Wo, :].transpose(0, 3, 1, 2)
    if bias is not None:
        out = out + bias.data[None, :, None, None]
    else:
        out = np.ascontiguousarray(out)

    def backward(g):
        gfull = np.zeros((B, Hf, Wf, cout))
        gfull[:, p:p + Ho, p:p + Wo, :] = g.transpose(0, 2, 3, 1)
        gcols = np.empty((B, H, W, k, k, cout))
        for ki in range(k):
            for kj in range(k):
                gcols[:, :, :, ki, kj, :] = gfull[:, ki:ki + s * H:s, kj:kj + s * W:s, :]
        g2 = gcols.reshape(-1, k * k * cout)
        if x.requires_grad:
            x._accumulate((g2 @ wmat.T).reshape(B, H, W, cin).transpose(0, 3, 1, 2))
        if weight.requires_grad:
            gw = (xr.T @ g2).reshape(cin, k, k, cout).transpose(0, 3, 1, 2)
            weight._accumulate(gw)
        if bias is not None and bias.requires_grad:
            bias._accumulate(g.sum(axis=(0, 2, 3)))

    return _make(out, (x, weight, bias), backward)
