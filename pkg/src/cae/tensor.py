"""Dense float64 tensors with tape-based reverse-mode differentiation.

Operations executed while a :class:`Tape` is active, and that touch at least
one tensor requiring gradients, are recorded on that tape. :func:`backward`
replays the recorded nodes in reverse order exactly once each.

Broadcasting is restricted to trailing dimensions: the smaller operand's
shape must be a suffix of the larger one (a 0-d scalar always qualifies).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, DegenerateInputError, DimensionError, DomainError

NORM_EPS = 1e-12

_TAPES: list["Tape"] = []


@dataclass
class Node:
    index: int
    inputs: tuple
    output: "Tensor"
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]
    tape: "Tape"


@dataclass
class Tape:
    nodes: list = field(default_factory=list)

    def __enter__(self):
        _TAPES.append(self)
        return self

    def __exit__(self, *exc):
        _TAPES.remove(self)
        return False

    def record(self, output, inputs, backward_fn):
        node = Node(len(self.nodes), tuple(inputs), output, backward_fn, self)
        self.nodes.append(node)
        output.tape_node = node
        return node


def active_tape():
    return _TAPES[-1] if _TAPES else None


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "tape_node", "name", "__weakref__")
    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self.tape_node = None
        self.name = name

    @classmethod
    def parameter(cls, data, name=None):
        return cls(np.array(data, dtype=np.float64), requires_grad=True, name=name)

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self):
        return self.data

    def item(self):
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    def __len__(self):
        return len(self.data)

    # operator sugar
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

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    @property
    def T(self):
        return transpose(self)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data, inputs, backward_fn):
    out = Tensor(data)
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.record(out, inputs, backward_fn)
    return out


def _broadcast_shape(a, b):
    sa, sb = a.shape, b.shape
    if sa == sb:
        return sa
    if len(sa) >= len(sb) and sa[len(sa) - len(sb):] == sb:
        return sa
    if len(sb) > len(sa) and sb[len(sb) - len(sa):] == sa:
        return sb
    raise DimensionError(f"shapes {sa} and {sb} are not trailing-broadcast compatible")


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    return g.sum(axis=tuple(range(lead))).reshape(shape)


# elementwise

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b)
    return _result(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b)
    return _result(a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)))


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b)
    return _result(a.data * b.data, (a, b),
                   lambda g: (_unbroadcast(g * b.data, a.shape),
                              _unbroadcast(g * a.data, b.shape)))


def neg(a):
    a = as_tensor(a)
    return _result(-a.data, (a,), lambda g: (-g,))


def tanh(a):
    a = as_tensor(a)
    y = np.tanh(a.data)
    return _result(y, (a,), lambda g: (g * (1.0 - y * y),))


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def sigmoid(a):
    a = as_tensor(a)
    y = _sigmoid(a.data)
    return _result(y, (a,), lambda g: (g * y * (1.0 - y),))


def exp(a):
    a = as_tensor(a)
    y = np.exp(a.data)
    return _result(y, (a,), lambda g: (g * y,))


def log(a):
    a = as_tensor(a)
    if np.any(a.data <= 0):
        raise DomainError("log of a non-positive value")
    return _result(np.log(a.data), (a,), lambda g: (g / a.data,))


_ELEMENTWISE = {"add": add, "sub": sub, "mul": mul, "neg": neg,
                "tanh": tanh, "sigmoid": sigmoid, "exp": exp, "log": log}


def elementwise(op, *args):
    """Dispatch an elementwise op by name (add, sub, mul, tanh, sigmoid, log, exp, neg)."""
    try:
        fn = _ELEMENTWISE[op]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op!r}") from None
    return fn(*args)


def clip(a, lo, hi):
    """Clamp values; gradient passes only where the input lies inside [lo, hi]."""
    a = as_tensor(a)
    inside = (a.data >= lo) & (a.data <= hi)
    return _result(np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,))


# linear algebra and shape ops

def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"cannot multiply shapes {a.shape} and {b.shape}")
    return _result(a.data @ b.data, (a, b),
                   lambda g: (g @ b.data.T, a.data.T @ g))


def transpose(a):
    a = as_tensor(a)
    if a.ndim != 2:
        raise DimensionError(f"transpose needs a matrix, got shape {a.shape}")
    return _result(a.data.T, (a,), lambda g: (g.T,))


def reshape(a, shape):
    a = as_tensor(a)
    try:
        y = a.data.reshape(shape)
    except ValueError as e:
        raise DimensionError(str(e)) from None
    return _result(y, (a,), lambda g: (g.reshape(a.shape),))


def _is_basic(index):
    parts = index if isinstance(index, tuple) else (index,)
    return all(isinstance(p, (int, slice)) or p is None or p is Ellipsis for p in parts)


def getitem(a, index):
    a = as_tensor(a)
    basic = _is_basic(index)

    def back(g):
        out = np.zeros_like(a.data)
        if basic:
            out[index] = g
        else:
            np.add.at(out, index, g)
        return (out,)

    return _result(a.data[index], (a,), back)


def embedding(table, ids):
    """Gather rows of ``table`` for an integer array of ids (any shape)."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"token id out of range for table with {table.shape[0]} rows")

    def back(g):
        out = np.zeros_like(table.data)
        np.add.at(out, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (out,)

    return _result(table.data[ids], (table,), back)


def stack(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    shapes = {t.shape for t in tensors}
    if len(shapes) != 1:
        raise DimensionError(f"cannot stack tensors of shapes {sorted(shapes)}")
    y = np.stack([t.data for t in tensors], axis=axis)

    def back(g):
        return [np.take(g, i, axis=axis) for i in range(len(tensors))]

    return _result(y, tensors, back)


def concat(tensors, axis=-1):
    tensors = [as_tensor(t) for t in tensors]
    try:
        y = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as e:
        raise DimensionError(str(e)) from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def back(g):
        return np.split(g, bounds, axis=axis)

    return _result(y, tensors, back)


def tsum(a, axis=None):
    a = as_tensor(a)
    y = a.data.sum(axis=axis)

    def back(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), a.shape).copy(),)

    return _result(y, (a,), back)


def mean(a, axis=None):
    a = as_tensor(a)
    n = a.size if axis is None else a.shape[axis]
    return mul(tsum(a, axis), 1.0 / n)


# composite numerics

def l2_normalize(v, axis=-1):
    """Scale each vector along ``axis`` (default: each row) to unit L2 norm."""
    v = as_tensor(v)
    norm = np.sqrt((v.data * v.data).sum(axis=axis, keepdims=True))
    if np.any(norm <= NORM_EPS):
        raise DegenerateInputError("cannot normalize a (near-)zero vector")
    y = v.data / norm

    def back(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        return ((g - y * dot) / norm,)

    return _result(y, (v,), back)


def l1_distance(a, b, axis=None):
    """Sum of absolute differences; per-row when ``axis`` is given.

    The subgradient at coordinates where a == b is 0.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"l1_distance shape mismatch: {a.shape} vs {b.shape}")
    d = a.data - b.data
    s = np.sign(d)

    def back(g):
        gg = g if axis is None else np.expand_dims(g, axis)
        return (gg * s, -gg * s)

    return _result(np.abs(d).sum(axis=axis), (a, b), back)


def softmax(x, axis=-1):
    """Plain numpy softmax (not recorded)."""
    x = np.asarray(x.data if isinstance(x, Tensor) else x)
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax(x, axis=-1):
    x = np.asarray(x.data if isinstance(x, Tensor) else x)
    z = x - x.max(axis=axis, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


def softmax_cross_entropy(logits, targets, weights=None):
    """Mean of -log softmax(logits)[target] over rows.

    ``weights`` (one non-negative value per row) turns the mean into a weighted
    mean, which is how padding positions are masked out.
    """
    logits = as_tensor(logits)
    targets = np.asarray(targets, dtype=np.int64).reshape(-1)
    if logits.ndim != 2 or logits.shape[0] != targets.shape[0]:
        raise DimensionError(f"logits {logits.shape} vs {targets.shape[0]} targets")
    n, v = logits.shape
    if targets.size and (targets.min() < 0 or targets.max() >= v):
        raise IndexError(f"target id out of range for {v} classes")
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=np.float64).reshape(-1)
    total = w.sum()
    if total <= 0:
        raise ContractError("softmax_cross_entropy needs a positive total weight")
    logp = log_softmax(logits.data)
    rows = np.arange(n)
    nll = -logp[rows, targets]
    loss = float((w * nll).sum() / total)

    def back(g):
        grad = np.exp(logp)
        grad[rows, targets] -= 1.0
        return (grad * (w / total)[:, None] * g,)

    return _result(np.array(loss), (logits,), back)


# differentiation

def backward(loss, tape=None, params=None):
    """Populate ``.grad`` on every leaf tensor reachable from ``loss``.

    Gradients are added to any existing ``.grad``. Tensors in ``params`` that
    are not reachable get a zero gradient.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    node = loss.tape_node
    if node is None:
        raise ContractError("loss was not recorded on a tape")
    tape = tape or node.tape
    if node.tape is not tape:
        raise ContractError("loss belongs to a different tape")
    grads = {id(loss): np.ones_like(loss.data)}
    for n in reversed(tape.nodes[: node.index + 1]):
        g = grads.pop(id(n.output), None)
        if g is None:
            continue
        for inp, gi in zip(n.inputs, n.backward(g)):
            if gi is None or not inp.requires_grad:
                continue
            if inp.tape_node is None:
                if inp.grad is None:
                    inp.grad = np.array(gi, dtype=np.float64)
                else:
                    inp.grad += gi
            else:
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
    for p in params or ():
        if p.grad is None:
            p.grad = np.zeros_like(p.data)


# optimizers

class Optimizer:
    kind = "base"

    def __init__(self, params: Iterable[Tensor], learning_rate: float):
        if learning_rate < 0:
            raise ValueError("learning_rate must be non-negative")
        self.params = list(params)
        self.learning_rate = learning_rate

    def step(self):
        for p in self.params:
            if p.grad is None:
                raise ContractError(f"parameter {p.name or '?'} has no gradient")
        for i, p in enumerate(self.params):
            self._update(i, p)
            p.grad = None

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def _update(self, i, p):
        raise NotImplementedError

    def state_arrays(self):
        return {}


class SGD(Optimizer):
    kind = "sgd"

    def _update(self, i, p):
        p.data = p.data - self.learning_rate * p.grad


class Adam(Optimizer):
    kind = "adam"

    def __init__(self, params, learning_rate=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        super().__init__(params, learning_rate)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self):
        self.t += 1
        super().step()

    def _update(self, i, p):
        b1, b2 = self.beta1, self.beta2
        self.m[i] = b1 * self.m[i] + (1 - b1) * p.grad
        self.v[i] = b2 * self.v[i] + (1 - b2) * p.grad * p.grad
        mhat = self.m[i] / (1 - b1 ** self.t)
        vhat = self.v[i] / (1 - b2 ** self.t)
        p.data = p.data - self.learning_rate * mhat / (np.sqrt(vhat) + self.eps)


def make_optimizer(kind, params, learning_rate):
    if kind == "sgd":
        return SGD(params, learning_rate)
    if kind == "adam":
        return Adam(params, learning_rate)
    raise ValueError(f"unknown optimizer kind {kind!r}")


# gradient checking

def numerical_grad(fn, tensor, h=1e-5):
    """Central finite differences of scalar ``fn()`` with respect to ``tensor.data``."""
    tensor.data = np.ascontiguousarray(tensor.data)
    grad = np.zeros_like(tensor.data)
    flat = tensor.data.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        up = fn()
        flat[i] = old - h
        down = fn()
        flat[i] = old
        gflat[i] = (up - down) / (2 * h)
    return grad


def max_relative_error(analytic, numeric, floor=1e-6):
    """Largest elementwise |a - n| / max(|a|, |n|, floor)."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom)) if a.size else 0.0


def gradcheck(loss_fn, tensors, h=1e-5):
    """Compare tape gradients of ``loss_fn()`` against finite differences.

    ``loss_fn`` must build its result from ``tensors`` and return a scalar
    Tensor. Returns the worst relative error over all entries.
    """
    tensors = list(tensors)
    for t in tensors:
        t.grad = None
    with Tape():
        loss = loss_fn()
        backward(loss, params=tensors)
    worst = 0.0
    for t in tensors:
        num = numerical_grad(lambda: float(loss_fn().data), t, h)
        worst = max(worst, max_relative_error(t.grad, num))
        t.grad = None
    return worst


def finite(t):
    return bool(np.all(np.isfinite(t.data if isinstance(t, Tensor) else t)))


__all__ = [
    "Tensor", "Tape", "Node", "active_tape", "as_tensor", "add", "sub", "mul", "neg",
    "tanh", "sigmoid", "exp", "log", "elementwise", "clip", "matmul", "transpose",
    "reshape", "getitem", "embedding", "stack", "concat", "tsum", "mean", "l2_normalize",
    "l1_distance", "softmax", "log_softmax", "softmax_cross_entropy", "backward",
    "Optimizer", "SGD", "Adam", "make_optimizer", "numerical_grad",
    "max_relative_error", "gradcheck", "finite", "NORM_EPS",
]
