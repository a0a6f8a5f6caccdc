"""Reverse-mode differentiation over numpy arrays.

Only the operations the classifier needs are provided. Each op records its
parents and a closure that maps the output gradient to parent gradients;
``Tensor.backward`` walks the graph in reverse topological order.
"""

from __future__ import annotations

import numpy as np

DTYPE = np.float64


class NumericGuardError(FloatingPointError):
    """Raised when an activation or gradient becomes NaN or infinite."""


def guard(arr: np.ndarray, where: str) -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        raise NumericGuardError(f"non-finite values in {where}")
    return arr


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad=False, name=None, _parents=(), _backward=None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, name={self.name!r})"

    def zero_grad(self):
        self.grad = None

    def backward(self, grad=None):
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without a gradient needs a scalar output")
            grad = np.ones_like(self.data)
        order = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))

        grads = {id(self): np.asarray(grad, dtype=DTYPE)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.requires_grad and not node._parents:
                node.grad = g if node.grad is None else node.grad + g
            if node._backward is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not _needs_grad(parent):
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg

    # arithmetic sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return mul(self, -1.0)


def _needs_grad(t: Tensor) -> bool:
    return t.requires_grad or bool(t._parents)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, backward):
    parents = tuple(parents)
    if any(_needs_grad(p) for p in parents):
        return Tensor(data, _parents=parents, _backward=backward)
    return Tensor(data)


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(a.data * b.data, (a, b), backward)


def matmul(a, b) -> Tensor:
    """``a @ b`` where ``b`` is 2-D and ``a`` has any leading batch dims."""
    a, b = as_tensor(a), as_tensor(b)
    if b.ndim != 2:
        raise ValueError("matmul expects a 2-D right operand")

    def backward(g):
        ga = g @ b.data.T
        a2 = a.data.reshape(-1, a.shape[-1])
        gb = a2.T @ g.reshape(-1, g.shape[-1])
        return ga, gb

    return _make(a.data @ b.data, (a, b), backward)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0

    def backward(g):
        return (g * mask,)

    return _make(x.data * mask, (x,), backward)


def reshape(x: Tensor, shape) -> Tensor:
    def backward(g):
        return (g.reshape(x.shape),)

    return _make(x.data.reshape(shape), (x,), backward)


def sum_(x: Tensor, axis=None, keepdims=False) -> Tensor:
    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make(x.data.sum(axis=axis, keepdims=keepdims), (x,), backward)


def mean(x: Tensor, axis=None, keepdims=False) -> Tensor:
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(sum_(x, axis=axis, keepdims=keepdims), 1.0 / n)


def log(x: Tensor) -> Tensor:
    def backward(g):
        return (g / x.data,)

    return _make(np.log(x.data), (x,), backward)


def clip_min(x: Tensor, floor: float) -> Tensor:
    """``max(x, floor)``; gradient flows only where ``x > floor``."""
    mask = x.data > floor

    def backward(g):
        return (g * mask,)

    return _make(np.where(mask, x.data, floor), (x,), backward)


def softmax(x: Tensor, axis=-1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (p * (g - (g * p).sum(axis=axis, keepdims=True)),)

    return _make(p, (x,), backward)


def log_softmax(x: Tensor, axis=-1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    p = np.exp(out)

    def backward(g):
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return _make(out, (x,), backward)


def take_along_last(x: Tensor, idx: np.ndarray) -> Tensor:
    """Pick ``x[i, idx[i]]`` for a 2-D ``x``."""
    rows = np.arange(x.shape[0])

    def backward(g):
        out = np.zeros_like(x.data)
        out[rows, idx] = g
        return (out,)

    return _make(x.data[rows, idx], (x,), backward)


def conv2d(x: Tensor, w: Tensor, b: Tensor, stride=(1, 1)) -> Tensor:
    """Channels-last 2-D convolution with 'same'-style zero padding.

    x: (n, T, F, Cin); w: (kt, kf, Cin, Cout); b: (Cout,).
    Output: (n, ceil(T/st), ceil(F/sf), Cout).
    """
    n, T, F, cin = x.shape
    kt, kf, _, cout = w.shape
    st, sf = stride
    pt, pf = kt // 2, kf // 2
    xp = np.pad(x.data, ((0, 0), (pt, pt), (pf, pf), (0, 0)))
    To = (T - 1) // st + 1
    Fo = (F - 1) // sf + 1
    cols = np.empty((n, To, Fo, kt, kf, cin), dtype=DTYPE)
    for i in range(kt):
        for j in range(kf):
            cols[:, :, :, i, j, :] = xp[:, i:i + st * (To - 1) + 1:st, j:j + sf * (Fo - 1) + 1:sf, :]
    cols2 = cols.reshape(-1, kt * kf * cin)
    wmat = w.data.reshape(-1, cout)
    out = (cols2 @ wmat).reshape(n, To, Fo, cout) + b.data

    def backward(g):
        g2 = g.reshape(-1, cout)
        gw = (cols2.T @ g2).reshape(w.shape)
        gb = g2.sum(axis=0)
        gx = None
        if _needs_grad(x):
            gcols = (g2 @ wmat.T).reshape(n, To, Fo, kt, kf, cin)
            gxp = np.zeros_like(xp)
            for i in range(kt):
                for j in range(kf):
                    gxp[:, i:i + st * (To - 1) + 1:st, j:j + sf * (Fo - 1) + 1:sf, :] += gcols[:, :, :, i, j, :]
            gx = gxp[:, pt:pt + T, pf:pf + F, :]
        return gx, gw, gb

    return _make(out, (x, w, b), backward)
