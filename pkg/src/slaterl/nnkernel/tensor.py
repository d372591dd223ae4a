"""Dense tensors with reverse-mode automatic differentiation.

The engine keeps a dynamically recorded computation graph: every operation
that touches a gradient-requiring tensor produces a new node holding its
parents and a backward closure. ``Tensor.backward()`` walks the graph in
reverse topological order and accumulates gradients into leaf tensors.

Contracts that callers rely on:

* gradients accumulate across repeated ``backward()`` calls until cleared
  (by the optimizer step or ``zero_grads``),
* graph recording is suppressed inside a ``no_grad()`` block,
* only scalar tensors may start a backward pass.

Shapes follow numpy; broadcasting is supported for elementwise ops and for
the leading (batch) dimensions of ``matmul``, which covers everything the
model architectures in this package need.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

DEFAULT_DTYPE = np.float64

_GRAD_ENABLED = True


class no_grad:
    """Context manager that disables graph recording."""

    def __enter__(self):
        global _GRAD_ENABLED
        self._prev = _GRAD_ENABLED
        _GRAD_ENABLED = False
        return self

    def __exit__(self, *exc):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._prev
        return False


def grad_enabled() -> bool:
    return _GRAD_ENABLED


class frozen:
    """Temporarily treat the given tensors as constants (no gradient flow)."""

    def __init__(self, tensors: Iterable["Tensor"]):
        self._tensors = list(tensors)

    def __enter__(self):
        self._prev = [t.requires_grad for t in self._tensors]
        for t in self._tensors:
            t.requires_grad = False
        return self

    def __exit__(self, *exc):
        for t, flag in zip(self._tensors, self._prev):
            t.requires_grad = flag
        return False


class Tensor:
    __slots__ = ("values", "requires_grad", "grad", "_parents", "_parent_needs",
                 "_backward", "_retain")

    def __init__(self, values, requires_grad: bool = False, dtype=None):
        arr = np.asarray(values)
        if arr.dtype.kind != "f":
            arr = arr.astype(dtype or DEFAULT_DTYPE)
        elif dtype is not None and arr.dtype != dtype:
            arr = arr.astype(dtype)
        self.values: np.ndarray = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        # which parents required gradients when the op was recorded; flipping
        # requires_grad afterwards (e.g. leaving a frozen block) must not
        # reopen edges in an already built graph
        self._parent_needs: tuple[bool, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self._retain = False

    # -- introspection -------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def ndim(self) -> int:
        return self.values.ndim

    @property
    def size(self) -> int:
        return self.values.size

    @property
    def dtype(self):
        return self.values.dtype

    def item(self) -> float:
        return float(self.values.reshape(()))

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # -- graph management ----------------------------------------------

    def detach(self) -> "Tensor":
        return Tensor(self.values)

    def retain_grad(self) -> "Tensor":
        """Keep the gradient of this non-leaf node after backward."""
        self._retain = True
        return self

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into every reachable leaf's ``grad``.

        Each call runs an independent pass and adds its result on top of any
        gradients already stored, so repeated calls accumulate.
        """
        if self.size != 1:
            raise ValueError(f"backward requires a scalar, got shape {self.shape}")
        if not self.requires_grad:
            raise ValueError("backward on a tensor that was not recorded for gradients")

        order = self._topo_order()
        flowing: dict[int, np.ndarray] = {id(self): np.ones_like(self.values)}
        for node in reversed(order):
            grad = flowing.pop(id(node), None)
            if grad is None:
                continue
            if node._backward is None or node._retain:
                node.grad = grad if node.grad is None else node.grad + grad
            if node._backward is None:
                continue
            parent_grads = node._backward(grad)
            for parent, pgrad, needed in zip(node._parents, parent_grads,
                                             node._parent_needs):
                if pgrad is None or not needed:
                    continue
                key = id(parent)
                if key in flowing:
                    flowing[key] = flowing[key] + pgrad
                else:
                    flowing[key] = pgrad

    def _topo_order(self) -> list["Tensor"]:
        order: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent, needed in zip(node._parents, node._parent_needs):
                if needed and id(parent) not in visited:
                    stack.append((parent, False))
        return order

    # -- operators -------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def zero_grads(tensors: Iterable[Tensor]) -> None:
    for t in tensors:
        t.grad = None


# -- op helpers ----------------------------------------------------------


def _node(values: np.ndarray, parents: tuple[Tensor, ...], backward) -> Tensor:
    out = Tensor(values)
    if _GRAD_ENABLED:
        needs = tuple(p.requires_grad for p in parents)
        if any(needs):
            out.requires_grad = True
            out._parents = parents
            out._parent_needs = needs
            out._backward = backward
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum-reduce ``grad`` back down to ``shape`` after numpy broadcasting."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# -- elementwise ops ------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.values + b.values

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _node(out, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.values - b.values

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _node(out, (a, b), backward)


def neg(a) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        return (-g,)

    return _node(-a.values, (a,), backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.values * b.values

    def backward(g):
        return (
            _unbroadcast(g * b.values, a.shape),
            _unbroadcast(g * a.values, b.shape),
        )

    return _node(out, (a, b), backward)


def relu(a) -> Tensor:
    a = as_tensor(a)
    out = np.maximum(a.values, 0.0)

    def backward(g):
        return (g * (a.values > 0),)

    return _node(out, (a,), backward)


def minimum(a, b) -> Tensor:
    """Elementwise minimum; on ties the gradient goes to the first operand."""
    a, b = as_tensor(a), as_tensor(b)
    out = np.minimum(a.values, b.values)
    a_wins = a.values <= b.values

    def backward(g):
        return (
            _unbroadcast(g * a_wins, a.shape),
            _unbroadcast(g * ~a_wins, b.shape),
        )

    return _node(out, (a, b), backward)


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    x = a.values
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)

    def backward(g):
        return (g * out * (1.0 - out),)

    return _node(out, (a,), backward)


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.values)

    def backward(g):
        return (g * out,)

    return _node(out, (a,), backward)


def log(a) -> Tensor:
    a = as_tensor(a)
    out = np.log(a.values)

    def backward(g):
        return (g / a.values,)

    return _node(out, (a,), backward)


def clip(a, lo: float, hi: float) -> Tensor:
    """Clamp values to [lo, hi]; gradient is zero where the clamp is active."""
    a = as_tensor(a)
    out = np.clip(a.values, lo, hi)
    passthrough = (a.values >= lo) & (a.values <= hi)

    def backward(g):
        return (g * passthrough,)

    return _node(out, (a,), backward)


# -- reductions ------------------------------------------------------------


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    if axis in (-1, a.ndim - 1) and a.ndim >= 2:
        ones = np.ones(a.shape[-1], dtype=a.dtype)
        out = np.matmul(a.values, ones)
        if keepdims:
            out = out[..., None]
    else:
        out = a.values.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        g = np.asarray(g)
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        axes = axis if isinstance(axis, tuple) else (axis,)
        if not keepdims:
            for ax in sorted(ax % a.ndim for ax in axes):
                g = np.expand_dims(g, ax)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _node(out, (a,), backward)


def tmean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        count = a.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([a.shape[ax] for ax in axes]))
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / count)


# -- linear algebra ---------------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError(f"matmul requires >=2-d operands, got {a.shape} @ {b.shape}")
    out = np.matmul(a.values, b.values)

    def backward(g):
        ga = np.matmul(g, b.values.swapaxes(-1, -2))
        gb = np.matmul(a.values.swapaxes(-1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _node(out, (a, b), backward)


# -- normalization / activation blocks --------------------------------------


def _rowsum(arr: np.ndarray) -> np.ndarray:
    """Sum over the last axis, keepdims, via a BLAS matvec.

    Narrow-axis ufunc reductions are an order of magnitude slower than a
    matrix-vector product on this code's typical shapes.
    """
    ones = np.ones(arr.shape[-1], dtype=arr.dtype)
    return np.matmul(arr, ones)[..., None]


def softmax(a, axis: int = -1) -> Tensor:
    """Numerically stable softmax (max subtraction) along the last axis."""
    a = as_tensor(a)
    if axis not in (-1, a.ndim - 1):
        raise ValueError("softmax supports the last axis only")
    shifted = a.values - a.values.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / _rowsum(e)

    def backward(g):
        inner = _rowsum(g * out)
        return (out * (g - inner),)

    return _node(out, (a,), backward)


def log_softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    if axis not in (-1, a.ndim - 1):
        raise ValueError("log_softmax supports the last axis only")
    shifted = a.values - a.values.max(axis=-1, keepdims=True)
    lse = np.log(_rowsum(np.exp(shifted)))
    out = shifted - lse
    soft = np.exp(out)

    def backward(g):
        return (g - soft * _rowsum(g),)

    return _node(out, (a,), backward)


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    """Layer normalization over the last axis with affine transform."""
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    n = x.shape[-1]
    mu = _rowsum(x.values) / n
    centered = x.values - mu
    var = _rowsum(centered * centered) / n
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    out = xhat * gain.values + bias.values

    def backward(g):
        dxhat = g * gain.values
        m1 = _rowsum(dxhat) / n
        m2 = _rowsum(dxhat * xhat) / n
        dx = inv * (dxhat - m1 - xhat * m2)
        flat = g.reshape(-1, n)
        dgain = (flat * xhat.reshape(-1, n)).T @ np.ones(flat.shape[0], dtype=g.dtype)
        dbias = flat.T @ np.ones(flat.shape[0], dtype=g.dtype)
        return dx, dgain, dbias

    return _node(out, (x, gain, bias), backward)


def dropout(x, rate: float, rng: np.random.Generator, training: bool) -> Tensor:
    """Inverted dropout: active only in training mode, identity otherwise."""
    x = as_tensor(x)
    if not training or rate <= 0.0:
        return x
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) / (1.0 - rate)

    def backward(g):
        return (g * keep,)

    return _node(x.values * keep, (x,), backward)


# -- indexing / shaping ------------------------------------------------------


def embedding(table, indices) -> Tensor:
    """Row lookup ``table[indices]``; backward scatter-adds into the table."""
    table = as_tensor(table)
    idx = np.asarray(indices)
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise ValueError(
            f"embedding index out of range [0, {table.shape[0]}): "
            f"min={idx.min()}, max={idx.max()}"
        )
    out = table.values[idx]

    def backward(g):
        gt = np.zeros_like(table.values)
        np.add.at(gt, idx, g)
        return (gt,)

    return _node(out, (table,), backward)


def take_rows(x, indices) -> Tensor:
    """Gather ``x[b, indices[b, j]]`` from a 2-d tensor; returns shape of indices."""
    x = as_tensor(x)
    if x.ndim != 2:
        raise ValueError(f"take_rows expects a 2-d tensor, got {x.shape}")
    idx = np.asarray(indices)
    rows = np.arange(x.shape[0])[:, None]
    out = x.values[rows, idx]

    def backward(g):
        gx = np.zeros_like(x.values)
        np.add.at(gx, (rows, idx), g)
        return (gx,)

    return _node(out, (x,), backward)


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.values for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return _node(out, tuple(tensors), backward)


def narrow(x, axis: int, start: int, length: int) -> Tensor:
    """Slice ``length`` entries along ``axis`` starting at ``start``."""
    x = as_tensor(x)
    index = [slice(None)] * x.ndim
    index[axis] = slice(start, start + length)
    index = tuple(index)
    out = x.values[index]

    def backward(g):
        gx = np.zeros_like(x.values)
        gx[index] = g
        return (gx,)

    return _node(out, (x,), backward)


def reshape(x, shape: tuple[int, ...]) -> Tensor:
    x = as_tensor(x)
    out = x.values.reshape(shape)

    def backward(g):
        return (g.reshape(x.shape),)

    return _node(out, (x,), backward)


def swapaxes(x, a: int, b: int) -> Tensor:
    x = as_tensor(x)
    out = x.values.swapaxes(a, b)

    def backward(g):
        return (g.swapaxes(a, b),)

    return _node(out, (x,), backward)
