"""Reverse-mode automatic differentiation over 2-D float64 arrays.

A deliberately small operator set: affine algebra, Tanh/sigmoid, exp/log,
reductions, row gather/scatter, masked log-softmax and the clip/min pieces
of a clipped surrogate objective. Everything is batched as (rows, cols)
matrices; scalars are (1, 1). Gradients accumulate into ``Tensor.grad``
after calling ``backward()`` on a scalar tail.

Rollouts run inside ``no_grad()``: ops then skip graph construction and the
forward pass is plain numpy.
"""

from __future__ import annotations

from contextlib import contextmanager

import numpy as np

_GRAD_ENABLED = True


@contextmanager
def no_grad():
    global _GRAD_ENABLED
    previous = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = previous


def grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        array = np.ascontiguousarray(data, dtype=np.float64)
        if array.ndim == 0:
            array = array.reshape(1, 1)
        elif array.ndim == 1:
            array = array.reshape(1, -1)
        elif array.ndim != 2:
            raise ValueError(f"tensors are 2-D, got shape {array.shape}")
        self.data = array
        self.grad = np.zeros_like(array) if requires_grad else None
        self.requires_grad = requires_grad
        self._parents: tuple = ()
        self._backward = None

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError("item() needs a single-element tensor")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad.fill(0.0)

    def backward(self) -> None:
        """Backpropagate from a scalar tail through the recorded graph."""
        if self.data.size != 1:
            raise ValueError("backward() requires a scalar loss")
        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in visited:
                    stack.append((parent, False))
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(topo):
            grad = grads.pop(id(node), None)
            if grad is None:
                continue
            if node.requires_grad:
                if node.grad is None:
                    node.grad = np.zeros_like(node.data)
                node.grad += grad
            if node._backward is None:
                continue
            for parent, parent_grad in node._backward(grad):
                if parent_grad is None:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + parent_grad
                else:
                    grads[key] = parent_grad

    # Operator sugar; constants are wrapped as non-differentiable tensors.
    def __add__(self, other):
        return add(self, _wrap(other))

    def __radd__(self, other):
        return add(_wrap(other), self)

    def __sub__(self, other):
        return sub(self, _wrap(other))

    def __rsub__(self, other):
        return sub(_wrap(other), self)

    def __mul__(self, other):
        return mul(self, _wrap(other))

    def __rmul__(self, other):
        return mul(_wrap(other), self)

    def __truediv__(self, other):
        return div(self, _wrap(other))

    def __neg__(self):
        return mul(self, _wrap(-1.0))

    def __matmul__(self, other):
        return matmul(self, _wrap(other))


def _wrap(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _needs_graph(*tensors: Tensor) -> bool:
    if not _GRAD_ENABLED:
        return False
    return any(t.requires_grad or t._parents for t in tensors)


def _make(data: np.ndarray, parents: tuple, backward) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.requires_grad = False
    if backward is not None and _needs_graph(*parents):
        out._parents = parents
        out._backward = backward
    else:
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    """Reduce a gradient back to the shape it was broadcast from."""
    if grad.shape == shape:
        return grad
    out = grad
    if shape[0] == 1 and grad.shape[0] != 1:
        out = out.sum(axis=0, keepdims=True)
    if shape[1] == 1 and grad.shape[1] != 1:
        out = out.sum(axis=1, keepdims=True)
    return out


# ---------------------------------------------------------------------------
# elementwise algebra
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    data = a.data + b.data

    def backward(g):
        return ((a, _unbroadcast(g, a.shape)), (b, _unbroadcast(g, b.shape)))

    return _make(data, (a, b), backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    data = a.data - b.data

    def backward(g):
        return ((a, _unbroadcast(g, a.shape)), (b, _unbroadcast(-g, b.shape)))

    return _make(data, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    data = a.data * b.data

    def backward(g):
        return (
            (a, _unbroadcast(g * b.data, a.shape)),
            (b, _unbroadcast(g * a.data, b.shape)),
        )

    return _make(data, (a, b), backward)


def div(a: Tensor, b: Tensor) -> Tensor:
    data = a.data / b.data

    def backward(g):
        return (
            (a, _unbroadcast(g / b.data, a.shape)),
            (b, _unbroadcast(-g * a.data / (b.data * b.data), b.shape)),
        )

    return _make(data, (a, b), backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    data = a.data @ b.data

    def backward(g):
        return ((a, g @ b.data.T), (b, a.data.T @ g))

    return _make(data, (a, b), backward)


def tanh(a: Tensor) -> Tensor:
    data = np.tanh(a.data)

    def backward(g):
        return ((a, g * (1.0 - data * data)),)

    return _make(data, (a,), backward)


def sigmoid(a: Tensor) -> Tensor:
    data = 1.0 / (1.0 + np.exp(-a.data))

    def backward(g):
        return ((a, g * data * (1.0 - data)),)

    return _make(data, (a,), backward)


def exp(a: Tensor) -> Tensor:
    data = np.exp(a.data)

    def backward(g):
        return ((a, g * data),)

    return _make(data, (a,), backward)


def log(a: Tensor) -> Tensor:
    data = np.log(a.data)

    def backward(g):
        return ((a, g / a.data),)

    return _make(data, (a,), backward)


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    data = np.clip(a.data, lo, hi)
    inside = (a.data >= lo) & (a.data <= hi)

    def backward(g):
        return ((a, g * inside),)

    return _make(data, (a,), backward)


def minimum(a: Tensor, b: Tensor) -> Tensor:
    take_a = a.data <= b.data
    data = np.where(take_a, a.data, b.data)

    def backward(g):
        return (
            (a, _unbroadcast(g * take_a, a.shape)),
            (b, _unbroadcast(g * ~take_a, b.shape)),
        )

    return _make(data, (a, b), backward)


# ---------------------------------------------------------------------------
# reductions and reshaping
# ---------------------------------------------------------------------------

def sum_all(a: Tensor) -> Tensor:
    data = np.array([[a.data.sum()]])

    def backward(g):
        return ((a, np.full_like(a.data, g[0, 0])),)

    return _make(data, (a,), backward)


def mean_all(a: Tensor) -> Tensor:
    n = a.data.size
    data = np.array([[a.data.sum() / n]])

    def backward(g):
        return ((a, np.full_like(a.data, g[0, 0] / n)),)

    return _make(data, (a,), backward)


def row_sum(a: Tensor) -> Tensor:
    data = a.data.sum(axis=1, keepdims=True)

    def backward(g):
        return ((a, np.broadcast_to(g, a.shape).copy()),)

    return _make(data, (a,), backward)


def transpose(a: Tensor) -> Tensor:
    data = a.data.T

    def backward(g):
        return ((a, g.T),)

    return _make(data, (a,), backward)


def concat_cols(tensors: list[Tensor]) -> Tensor:
    data = np.concatenate([t.data for t in tensors], axis=1)
    widths = [t.shape[1] for t in tensors]

    def backward(g):
        grads, start = [], 0
        for t, width in zip(tensors, widths):
            grads.append((t, g[:, start : start + width]))
            start += width
        return tuple(grads)

    return _make(data, tuple(tensors), backward)


def gather_rows(table: Tensor, idx: np.ndarray) -> Tensor:
    idx = np.asarray(idx, dtype=np.intp)
    data = table.data[idx]

    def backward(g):
        grad = np.zeros_like(table.data)
        np.add.at(grad, idx, g)
        return ((table, grad),)

    return _make(data, (table,), backward)


def scatter_add_rows(n_rows: int, idx: np.ndarray, values: Tensor) -> Tensor:
    """Rows of ``values`` summed into ``n_rows`` buckets selected by ``idx``."""
    idx = np.asarray(idx, dtype=np.intp)
    data = np.zeros((n_rows, values.shape[1]))
    np.add.at(data, idx, values.data)

    def backward(g):
        return ((values, g[idx]),)

    return _make(data, (values,), backward)


def take_per_row(a: Tensor, idx: np.ndarray) -> Tensor:
    idx = np.asarray(idx, dtype=np.intp)
    rows = np.arange(a.shape[0])
    data = a.data[rows, idx].reshape(-1, 1)

    def backward(g):
        grad = np.zeros_like(a.data)
        grad[rows, idx] = g[:, 0]
        return ((a, grad),)

    return _make(data, (a,), backward)


# ---------------------------------------------------------------------------
# masked categorical pieces
# ---------------------------------------------------------------------------

def masked_log_softmax(logits: Tensor, mask: np.ndarray) -> Tensor:
    """Row-wise log-softmax over the unmasked entries only.

    Masked positions come out as -inf and receive zero gradient; every row
    must keep at least one active entry.
    """
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != logits.shape:
        raise ValueError("mask shape must match logits")
    if not mask.any(axis=1).all():
        raise ValueError("each row needs at least one unmasked entry")
    neg_inf = np.where(mask, logits.data, -np.inf)
    shift = neg_inf.max(axis=1, keepdims=True)
    z = np.where(mask, np.exp(neg_inf - shift), 0.0)
    denom = z.sum(axis=1, keepdims=True)
    data = np.where(mask, neg_inf - shift - np.log(denom), -np.inf)
    probs = z / denom

    def backward(g):
        g = np.where(mask, g, 0.0)
        return ((logits, g - probs * g.sum(axis=1, keepdims=True)),)

    return _make(data, (logits,), backward)


def masked_entropy(log_probs: Tensor, mask: np.ndarray) -> Tensor:
    """Shannon entropy per row of a masked log-softmax output."""
    mask = np.asarray(mask, dtype=bool)
    ls = np.where(mask, log_probs.data, 0.0)  # keep 0 * -inf out of the arithmetic
    p = np.where(mask, np.exp(ls), 0.0)
    data = -(p * ls).sum(axis=1, keepdims=True)

    def backward(g):
        local = -p * (1.0 + ls) * mask
        return ((log_probs, g * local),)

    return _make(data, (log_probs,), backward)
