"""Dense float64 tensors with define-by-run reverse-mode differentiation.

Every primitive computes its value eagerly with numpy and, when any input
requires gradients, records a node holding the inputs and a closure that maps
the upstream gradient to input gradients.  ``backward`` walks the recorded
nodes in reverse topological order.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy import special

_node_ids = itertools.count()


class DimensionError(ValueError):
    """Input shapes are incompatible for the requested primitive."""


class DomainError(ValueError):
    """Input values fall outside the primitive's mathematical domain."""


class ContractError(ValueError):
    """A caller-side precondition of the engine was violated."""


class Tensor:
    """N-dimensional float64 array that may take part in a recorded graph.

    Leaf tensors created with ``requires_grad=True`` own a zero-initialised
    ``grad`` buffer of the same shape.  Non-leaf tensors never store
    gradients; they only route them to their inputs.
    """

    __slots__ = ("data", "requires_grad", "grad", "op", "parents", "_backward", "node_id")

    def __init__(self, data, requires_grad: bool = False, *, _op: str = "leaf",
                 _parents: tuple = (), _backward: Callable | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.op = _op
        self.parents = _parents
        self._backward = _backward
        self.node_id = next(_node_ids)
        self.grad = np.zeros_like(self.data) if (requires_grad and _backward is None) else None

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_scalar(self)

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def zero_grad(self) -> None:
        if self.requires_grad and self.is_leaf:
            self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        rg = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({self.data!r}{rg})"

    # -- operator sugar -----------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return subtract(self, other)

    def __rsub__(self, other):
        return subtract(other, self)

    def __mul__(self, other):
        return multiply(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return divide(self, other)

    def __rtruediv__(self, other):
        return divide(other, self)

    def __neg__(self):
        return negate(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __getitem__(self, index):
        return slice_(self, index)

    def sum(self, axis=None, keepdims: bool = False) -> Tensor:
        return sum_(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape) -> Tensor:
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> Tensor:
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self) -> Tensor:
        return transpose(self, None)


def _raise_scalar(t: Tensor) -> float:
    raise ContractError(f"item() needs a single-element tensor, got shape {t.shape}")


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, op: str, parents: tuple[Tensor, ...], backward: Callable) -> Tensor:
    if any(p.requires_grad for p in parents):
        return Tensor(data, True, _op=op, _parents=parents, _backward=backward)
    return Tensor(data, _op=op)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_shape(op: str, *shapes) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(*shapes)
    except ValueError as exc:
        raise DimensionError(f"{op}: cannot broadcast shapes {shapes}") from exc


# ---------------------------------------------------------------------------
# elementwise binary
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a.shape, b.shape)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, "add", (a, b), bw)


def subtract(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("subtract", a.shape, b.shape)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, "subtract", (a, b), bw)


def multiply(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("multiply", a.shape, b.shape)

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(a.data * b.data, "multiply", (a, b), bw)


def divide(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("divide", a.shape, b.shape)
    if np.any(b.data == 0.0):
        raise DomainError("divide: division by zero")
    out = a.data / b.data

    def bw(g):
        return _unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)

    return _make(out, "divide", (a, b), bw)


def negate(a) -> Tensor:
    a = as_tensor(a)
    return _make(-a.data, "negate", (a,), lambda g: (-g,))


def where(cond, a, b) -> Tensor:
    """Select ``a`` where ``cond`` is true, else ``b``; ``cond`` carries no gradient."""
    cond = np.asarray(cond.data if isinstance(cond, Tensor) else cond, dtype=bool)
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("where", cond.shape, a.shape, b.shape)

    def bw(g):
        return (_unbroadcast(np.where(cond, g, 0.0), a.shape),
                _unbroadcast(np.where(cond, 0.0, g), b.shape))

    return _make(np.where(cond, a.data, b.data), "where", (a, b), bw)


# ---------------------------------------------------------------------------
# elementwise unary
# ---------------------------------------------------------------------------

def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make(out, "exp", (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    if np.any(~(a.data > 0.0)):
        raise DomainError("log: input must be strictly positive")
    return _make(np.log(a.data), "log", (a,), lambda g: (g / a.data,))


def power(a, exponent: float) -> Tensor:
    a = as_tensor(a)
    p = float(exponent)
    if p != int(p) and np.any(a.data < 0.0):
        raise DomainError("power: negative base with non-integer exponent")
    out = a.data ** p
    return _make(out, "power", (a,), lambda g: (g * p * a.data ** (p - 1.0),))


def sqrt(a) -> Tensor:
    return power(a, 0.5)


def sin(a) -> Tensor:
    a = as_tensor(a)
    return _make(np.sin(a.data), "sin", (a,), lambda g: (g * np.cos(a.data),))


def cos(a) -> Tensor:
    a = as_tensor(a)
    return _make(np.cos(a.data), "cos", (a,), lambda g: (-g * np.sin(a.data),))


_TWO_OVER_SQRT_PI = 2.0 / math.sqrt(math.pi)


def erf(a) -> Tensor:
    a = as_tensor(a)
    return _make(special.erf(a.data), "erf", (a,),
                 lambda g: (g * _TWO_OVER_SQRT_PI * np.exp(-a.data ** 2),))


def gelu(x) -> Tensor:
    """Exact Gaussian error linear unit, ``0.5 x (1 + erf(x / sqrt 2))``."""
    x = as_tensor(x)
    return 0.5 * x * (1.0 + erf(x * (1.0 / math.sqrt(2.0))))


# ---------------------------------------------------------------------------
# reductions and normalisers
# ---------------------------------------------------------------------------

def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(out, "sum", (a,), bw)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return sum_(a, axis, keepdims) * (1.0 / float(n))


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, "softmax", (a,), bw)


def logsumexp(a, axis: int = -1, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    m = a.data.max(axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    s = np.exp(a.data - m).sum(axis=axis, keepdims=True)
    out_k = np.log(s) + m
    weights = np.exp(a.data - out_k)
    out = out_k if keepdims else np.squeeze(out_k, axis=axis)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (g * weights,)

    return _make(out, "logsumexp", (a,), bw)


def log_softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=axis, keepdims=True))
    probs = np.exp(out)

    def bw(g):
        return (g - probs * g.sum(axis=axis, keepdims=True),)

    return _make(out, "log_softmax", (a,), bw)


# ---------------------------------------------------------------------------
# linear algebra and layout
# ---------------------------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 1 or b.ndim < 1:
        raise DimensionError("matmul: scalar operands are not allowed")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError as exc:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}") from exc

    def bw(g):
        ad = a.data[None, :] if a.ndim == 1 else a.data
        bd = b.data[:, None] if b.ndim == 1 else b.data
        gg = g
        if a.ndim == 1:
            gg = np.expand_dims(gg, -2)
        if b.ndim == 1:
            gg = np.expand_dims(gg, -1)
        ga = np.matmul(gg, np.swapaxes(bd, -1, -2))
        gb = np.matmul(np.swapaxes(ad, -1, -2), gg)
        if a.ndim == 1:
            ga = ga.reshape(ga.shape[:-2] + ga.shape[-1:])
        if b.ndim == 1:
            gb = gb[..., 0]
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(out, "matmul", (a, b), bw)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"reshape: cannot reshape {a.shape} into {tuple(shape)}") from exc
    return _make(out, "reshape", (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    out = np.transpose(a.data, axes)
    inv = None if axes is None else tuple(np.argsort(axes))
    return _make(out, "transpose", (a,), lambda g: (np.transpose(g, inv),))


def broadcast_to(a, shape) -> Tensor:
    a = as_tensor(a)
    try:
        out = np.broadcast_to(a.data, shape)
    except ValueError as exc:
        raise DimensionError(f"broadcast: cannot broadcast {a.shape} to {tuple(shape)}") from exc
    return _make(out.copy(), "broadcast", (a,), lambda g: (_unbroadcast(g, a.shape),))


def concatenate(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError as exc:
        raise DimensionError(f"concatenate: incompatible shapes {[t.shape for t in ts]}") from exc
    sizes = [t.shape[axis] for t in ts]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(out, "concatenate", tuple(ts), bw)


def slice_(a, index) -> Tensor:
    a = as_tensor(a)
    out = a.data[index]

    def bw(g):
        full = np.zeros_like(a.data)
        if _is_fancy(index):
            np.add.at(full, index, g)
        else:
            full[index] = g
        return (full,)

    return _make(np.array(out, dtype=np.float64), "slice", (a,), bw)


def _is_fancy(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def gather(a, index, axis: int = -1) -> Tensor:
    """``take_along_axis``: pick entries of ``a`` along ``axis`` with an integer index array."""
    a = as_tensor(a)
    index = np.asarray(index, dtype=np.int64)
    if index.ndim != a.ndim:
        raise DimensionError(f"gather: index rank {index.ndim} != tensor rank {a.ndim}")
    n = a.shape[axis]
    if np.any(index < 0) or np.any(index >= n):
        raise IndexError(f"gather: index out of range for axis of size {n}")
    out = np.take_along_axis(a.data, index, axis=axis)

    def bw(g):
        full = np.zeros_like(a.data)
        _add_along_axis(full, index, g, axis % a.ndim)
        return (full,)

    return _make(out, "gather", (a,), bw)


def _add_along_axis(full: np.ndarray, index: np.ndarray, g: np.ndarray, axis: int) -> None:
    idx = list(np.ix_(*[np.arange(s) for s in index.shape]))
    idx[axis] = index
    np.add.at(full, tuple(np.broadcast_arrays(*idx)), g)


def embedding(table, ids) -> Tensor:
    """Rows of ``table`` selected by integer ``ids`` (any shape); output ``ids.shape + (dim,)``."""
    table = as_tensor(table)
    ids = np.asarray(ids, dtype=np.int64)
    if np.any(ids < 0) or np.any(ids >= table.shape[0]):
        raise IndexError(f"embedding: id out of range [0, {table.shape[0]})")
    out = table.data[ids]

    def bw(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (full,)

    return _make(out, "index_gather", (table,), bw)


def masked_fill(a, mask, value: float) -> Tensor:
    """Replace entries where ``mask`` is true with a constant; those entries get no gradient."""
    a = as_tensor(a)
    mask = np.asarray(mask, dtype=bool)
    _broadcast_shape("masked_fill", a.shape, mask.shape)
    out = np.where(mask, value, a.data)
    return _make(out, "masked_fill", (a,), lambda g: (_unbroadcast(np.where(mask, 0.0, g), a.shape),))


# ---------------------------------------------------------------------------
# generic dispatch (used by grad checks over every primitive)
# ---------------------------------------------------------------------------

PRIMITIVES: dict[str, Callable] = {
    "add": add,
    "subtract": subtract,
    "multiply": multiply,
    "divide": divide,
    "matmul": matmul,
    "exponential": exp,
    "natural-log": log,
    "power": power,
    "sine": sin,
    "cosine": cos,
    "gaussian-error-function": erf,
    "softmax": softmax,
    "concatenate": lambda *ts, axis=-1: concatenate(ts, axis=axis),
    "reshape": reshape,
    "slice": slice_,
    "index-gather": gather,
    "sum-reduce": sum_,
    "broadcast": broadcast_to,
    "masked-fill": masked_fill,
}


def forward_primitive(kind: str, *inputs, **kwargs) -> Tensor:
    try:
        fn = PRIMITIVES[kind]
    except KeyError:
        raise ContractError(f"unknown primitive {kind!r}") from None
    return fn(*inputs, **kwargs)


# ---------------------------------------------------------------------------
# graph traversal
# ---------------------------------------------------------------------------

@dataclass
class Graph:
    """Nodes reachable from a root, in topological order (inputs first)."""

    nodes: list[Tensor]

    @classmethod
    def trace(cls, root: Tensor) -> Graph:
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if node.node_id in seen:
                continue
            seen.add(node.node_id)
            stack.append((node, True))
            for p in node.parents:
                if p.requires_grad and p.node_id not in seen:
                    stack.append((p, False))
        return cls(order)

    def leaves(self) -> list[Tensor]:
        return [n for n in self.nodes if n.is_leaf]


def backward(loss: Tensor, accumulate: bool = False, graph: Graph | None = None) -> Graph:
    """Populate ``grad`` of every leaf reachable from the scalar ``loss``.

    Leaf accumulators are zeroed first unless ``accumulate`` is set.  The
    traced graph is returned so callers can re-run the pass without
    re-tracing.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward: loss must be scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        return Graph([])
    graph = graph or Graph.trace(loss)
    grads: dict[int, np.ndarray] = {loss.node_id: np.ones_like(loss.data)}
    for node in reversed(graph.nodes):
        g = grads.pop(node.node_id, None)
        if node.is_leaf:
            if g is None:
                g = np.zeros_like(node.data)
            if accumulate and node.grad is not None:
                node.grad = node.grad + g
            else:
                node.grad = np.array(g, dtype=np.float64)
            continue
        if g is None:
            continue
        for parent, pg in zip(node.parents, node._backward(g)):
            if not parent.requires_grad:
                continue
            prev = grads.get(parent.node_id)
            grads[parent.node_id] = pg if prev is None else prev + pg
    return graph


# ---------------------------------------------------------------------------
# optimisation
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: dict[str, Tensor], state: AdamState,
              frozen: Iterable[str] = ()) -> AdamState:
    """Apply one bias-corrected Adam update in place using each parameter's ``grad``.

    Raises FloatingPointError naming the first parameter with a non-finite gradient.
    """
    if state.lr < 0:
        raise ContractError("adam_step: learning rate must be non-negative")
    frozen = set(frozen)
    for name, p in params.items():
        if p.grad is None:
            raise ContractError(f"adam_step: parameter {name!r} has no gradient buffer")
        if p.grad.shape != p.shape:
            raise DimensionError(f"adam_step: gradient shape {p.grad.shape} != {p.shape} for {name!r}")
        if not np.all(np.isfinite(p.grad)):
            bad = int(np.flatnonzero(~np.isfinite(p.grad))[0])
            raise FloatingPointError(f"non-finite gradient in parameter {name!r} at flat index {bad}")
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for name, p in params.items():
        if name in frozen:
            continue
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        m = state.beta1 * m + (1.0 - state.beta1) * p.grad
        v = state.beta2 * v + (1.0 - state.beta2) * p.grad * p.grad
        state.m[name], state.v[name] = m, v
        p.data = p.data - state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return state


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------

@dataclass
class GradCheckReport:
    max_rel_error: float
    worst: tuple[str, int] | None
    flagged: list[tuple[str, int, float, float]]
    checked: int

    @property
    def ok(self) -> bool:
        return not self.flagged


def relative_error(analytic, numeric, floor: float = 1e-6):
    analytic = np.asarray(analytic)
    numeric = np.asarray(numeric)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def grad_check(loss_fn: Callable[[], Tensor], params: dict[str, Tensor],
               tolerance: float = 1e-6, step: float = 1e-5, floor: float = 1e-6) -> GradCheckReport:
    """Compare analytic gradients to central finite differences for every element.

    ``loss_fn`` re-runs the forward pass from the current parameter values.
    Relative error is ``|a - n| / max(|a|, |n|, floor)``.
    """
    loss = loss_fn()
    backward(loss)
    analytic = {k: p.grad.copy() for k, p in params.items()}
    flagged = []
    worst_err, worst = 0.0, None
    checked = 0
    for name, p in params.items():
        flat = p.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            up = loss_fn().item()
            flat[i] = orig - step
            down = loss_fn().item()
            flat[i] = orig
            numeric = (up - down) / (2.0 * step)
            a = analytic[name].reshape(-1)[i]
            err = float(relative_error(a, numeric, floor))
            checked += 1
            if err > worst_err:
                worst_err, worst = err, (name, i)
            if err > tolerance:
                flagged.append((name, i, float(a), float(numeric)))
    return GradCheckReport(worst_err, worst, flagged, checked)
