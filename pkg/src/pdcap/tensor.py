"""Dense float64 tensors with a tape-based reverse-mode autodiff.

Every differentiable op appends a node to the thread's active
:class:`ComputationRecord`. ``backward`` sweeps that record once in reverse
node order, so gradient accumulation order (and therefore the bits of every
gradient) is fixed by construction.

    >>> x = Tensor([1.0, 2.0], requires_grad=True)
    >>> loss = sum_all(x * x)
    >>> loss.backward()
    >>> x.grad
    array([2., 4.])
"""

from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from pdcap.errors import ContractError, DimensionError, VocabularyError

__all__ = [
    "Tensor",
    "ComputationRecord",
    "no_grad",
    "new_record",
    "matmul",
    "add",
    "sub",
    "mul",
    "scale",
    "broadcast_add_row",
    "activation",
    "tanh",
    "sigmoid",
    "relu",
    "softmax_rows",
    "log_softmax",
    "mean_rows",
    "concat",
    "embedding_lookup",
    "slice1d",
    "transpose",
    "reshape",
    "sum_all",
    "pick",
    "backward",
    "zero_grad",
    "finite_diff_check",
]


@dataclass
class Node:
    index: int
    kind: str
    inputs: tuple
    backward_fn: Callable
    shape: tuple


@dataclass
class ComputationRecord:
    """Append-only list of op nodes; consumed by exactly one backward sweep."""

    nodes: list = field(default_factory=list)
    consumed: bool = False

    def append(self, kind, inputs, backward_fn, shape):
        if self.consumed:
            raise ContractError("cannot extend a record after backward() has run on it")
        node = Node(len(self.nodes), kind, tuple(inputs), backward_fn, shape)
        self.nodes.append(node)
        return node


_state = threading.local()


def _grad_enabled():
    return getattr(_state, "grad_enabled", True)


def _current_record():
    rec = getattr(_state, "record", None)
    if rec is None or rec.consumed:
        rec = ComputationRecord()
        _state.record = rec
    return rec


@contextlib.contextmanager
def no_grad():
    """Evaluate ops without recording them."""
    prev = _grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


def new_record():
    """Install and return a fresh record for this thread."""
    rec = ComputationRecord()
    _state.record = rec
    return rec


class Tensor:
    __slots__ = ("values", "requires_grad", "grad", "node", "record")
    __array_priority__ = 100

    def __init__(self, values, requires_grad=False):
        arr = np.array(values, dtype=np.float64)
        if any(n <= 0 for n in arr.shape):
            raise DimensionError(f"tensor dimensions must be positive, got {arr.shape}")
        self.values = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.node = None
        self.record = None

    @classmethod
    def _wrap(cls, arr):
        t = cls.__new__(cls)
        t.values = arr
        t.requires_grad = False
        t.grad = None
        t.node = None
        t.record = None
        return t

    @property
    def shape(self):
        return self.values.shape

    @property
    def size(self):
        return self.values.size

    def item(self):
        return float(self.values.reshape(-1)[0])

    def numpy(self):
        return self.values.copy()

    def backward(self):
        backward(self)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({self.values!r}{flag})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(values, kind, inputs, backward_fn):
    """Wrap ``values``; record a node when any input needs gradients."""
    out = Tensor._wrap(values)
    if not _grad_enabled() or not any(t.requires_grad for t in inputs):
        return out
    rec = None
    for t in inputs:
        if t.record is not None:
            if rec is None:
                rec = t.record
            elif t.record is not rec:
                raise ContractError("inputs belong to different computation records")
    if rec is None:
        rec = _current_record()
    out.requires_grad = True
    out.record = rec
    out.node = rec.append(kind, inputs, backward_fn, values.shape)
    return out


# -- linear algebra -----------------------------------------------------------


def matmul(a, b):
    """Matrix product ``a @ b``. ``a`` may be a length-k row vector."""
    a, b = _as_tensor(a), _as_tensor(b)
    if b.values.ndim != 2 or a.values.ndim not in (1, 2) or a.shape[-1] != b.shape[0]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    av, bv = a.values, b.values

    def bwd(g):
        if av.ndim == 1:
            return g @ bv.T, np.outer(av, g)
        return g @ bv.T, av.T @ g

    return _make(av @ bv, "matmul", (a, b), bwd)


def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"add shape mismatch: {a.shape} vs {b.shape}")
    return _make(a.values + b.values, "add", (a, b), lambda g: (g, g))


def sub(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"sub shape mismatch: {a.shape} vs {b.shape}")
    return _make(a.values - b.values, "sub", (a, b), lambda g: (g, -g))


def mul(a, b):
    """Elementwise (Hadamard) product of equal-shape tensors."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"mul shape mismatch: {a.shape} vs {b.shape}")
    av, bv = a.values, b.values
    return _make(av * bv, "mul", (a, b), lambda g: (g * bv, g * av))


def scale(x, c):
    c = float(c)
    return _make(x.values * c, "scale", (x,), lambda g: (g * c,))


def broadcast_add_row(m, r):
    """Add vector ``r`` to every row of matrix ``m``."""
    m, r = _as_tensor(m), _as_tensor(r)
    if m.values.ndim != 2 or r.values.ndim != 1 or m.shape[1] != r.shape[0]:
        raise DimensionError(f"broadcast_add_row shape mismatch: {m.shape} and {r.shape}")
    return _make(m.values + r.values, "broadcast_add_row", (m, r), lambda g: (g, g.sum(axis=0)))


# -- pointwise ----------------------------------------------------------------


def _stable_sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def tanh(x):
    y = np.tanh(x.values)
    return _make(y, "tanh", (x,), lambda g: (g * (1.0 - y * y),))


def sigmoid(x):
    y = _stable_sigmoid(x.values)
    return _make(y, "sigmoid", (x,), lambda g: (g * y * (1.0 - y),))


def relu(x):
    mask = x.values > 0
    return _make(x.values * mask, "relu", (x,), lambda g: (g * mask,))


_ACTIVATIONS = {"tanh": tanh, "sigmoid": sigmoid, "relu": relu}


def activation(kind, x):
    try:
        fn = _ACTIVATIONS[kind]
    except KeyError:
        raise ContractError(f"unknown activation {kind!r}") from None
    return fn(_as_tensor(x))


def softmax_rows(x):
    """Softmax over the L entries of a length-L or L x 1 tensor."""
    x = _as_tensor(x)
    if not (x.values.ndim == 1 or (x.values.ndim == 2 and x.shape[1] == 1)):
        raise DimensionError(f"softmax_rows expects L or Lx1, got {x.shape}")
    z = x.values - x.values.max()
    e = np.exp(z)
    y = e / e.sum()

    def bwd(g):
        return (y * (g - (g * y).sum()),)

    return _make(y, "softmax", (x,), bwd)


def log_softmax(x):
    x = _as_tensor(x)
    if x.values.ndim != 1:
        raise DimensionError(f"log_softmax expects a vector, got {x.shape}")
    z = x.values - x.values.max()
    lse = np.log(np.exp(z).sum())
    y = z - lse

    def bwd(g):
        return (g - np.exp(y) * g.sum(),)

    return _make(y, "log_softmax", (x,), bwd)


# -- reductions and reshaping -------------------------------------------------


def mean_rows(m):
    m = _as_tensor(m)
    if m.values.ndim != 2:
        raise DimensionError(f"mean_rows expects a matrix, got {m.shape}")
    n = m.shape[0]
    return _make(m.values.mean(axis=0), "mean_rows", (m,),
                 lambda g: (np.broadcast_to(g / n, m.shape).copy(),))


def concat(*parts):
    parts = [_as_tensor(p) for p in parts]
    if any(p.values.ndim != 1 for p in parts):
        raise DimensionError("concat expects vectors: " + ", ".join(str(p.shape) for p in parts))
    bounds = np.cumsum([0] + [p.shape[0] for p in parts])

    def bwd(g):
        return tuple(g[bounds[i]:bounds[i + 1]] for i in range(len(parts)))

    return _make(np.concatenate([p.values for p in parts]), "concat", tuple(parts), bwd)


def embedding_lookup(table, index):
    """Row ``index`` of ``table``; the gradient lands only in that row."""
    k = table.shape[0]
    if not 0 <= index < k:
        raise VocabularyError(f"token id {index} outside vocabulary of size {k}")
    index = int(index)

    def bwd(g):
        full = np.zeros(table.shape)
        full[index] = g
        return (full,)

    return _make(table.values[index].copy(), "embedding", (table,), bwd)


def slice1d(x, start, stop):
    n = x.shape[0]

    def bwd(g):
        full = np.zeros(n)
        full[start:stop] = g
        return (full,)

    return _make(x.values[start:stop].copy(), "slice", (x,), bwd)


def transpose(m):
    return _make(m.values.T.copy(), "transpose", (m,), lambda g: (g.T,))


def reshape(x, shape):
    shape = tuple(shape)
    old = x.shape
    if int(np.prod(shape)) != x.size:
        raise DimensionError(f"cannot reshape {old} to {shape}")
    return _make(x.values.reshape(shape), "reshape", (x,), lambda g: (g.reshape(old),))


def sum_all(x):
    shape = x.shape
    return _make(np.array(x.values.sum()), "sum", (x,), lambda g: (np.full(shape, float(g)),))


def pick(x, index):
    """Scalar entry ``x[index]`` of a vector."""
    n = x.shape[0]
    index = int(index)

    def bwd(g):
        full = np.zeros(n)
        full[index] = g
        return (full,)

    return _make(np.array(x.values[index]), "pick", (x,), bwd)


# -- backward -----------------------------------------------------------------


def backward(loss):
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf that requires it.

    Raises ContractError if ``loss`` is not a scalar, is not on a record, or its
    record was already swept.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss.node is None:
        raise ContractError("loss is not connected to any computation record")
    rec = loss.record
    if rec.consumed:
        raise ContractError("backward already ran on this computation record")
    rec.consumed = True

    pending = {loss.node.index: np.ones(loss.shape)}
    for node in reversed(rec.nodes[: loss.node.index + 1]):
        g = pending.pop(node.index, None)
        if g is None:
            continue
        for inp, gi in zip(node.inputs, node.backward_fn(g)):
            if gi is None or not inp.requires_grad:
                continue
            if inp.node is not None:
                prev = pending.get(inp.node.index)
                pending[inp.node.index] = gi if prev is None else prev + gi
            elif inp.grad is None:
                inp.grad = np.array(gi, dtype=np.float64).reshape(inp.shape)
            else:
                inp.grad = inp.grad + gi
    # release saved activations
    rec.nodes.clear()


def zero_grad(tensors):
    for t in tensors:
        t.grad = None


def finite_diff_check(f, tensors: Sequence[Tensor], eps=1e-5, analytic=None, floor=1e-6):
    """Max relative error between analytic and central-difference gradients.

    ``f`` maps no arguments to a scalar Tensor built from ``tensors``.
    ``analytic`` overrides the backward-pass gradients (one array per tensor),
    which lets callers confirm the check actually detects a wrong gradient.
    Per scalar the error is ``|a - n| / max(|a|, |n|, floor)``.
    """
    if analytic is None:
        zero_grad(tensors)
        new_record()
        f().backward()
        analytic = [np.zeros(t.shape) if t.grad is None else t.grad.copy() for t in tensors]
    worst = 0.0
    with no_grad():
        for t, a in zip(tensors, analytic):
            flat = t.values.reshape(-1)
            a = np.asarray(a).reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + eps
                fp = f().item()
                flat[i] = orig - eps
                fm = f().item()
                flat[i] = orig
                num = (fp - fm) / (2.0 * eps)
                err = abs(a[i] - num) / max(abs(a[i]), abs(num), floor)
                worst = max(worst, err)
    return worst
