"""Dense NCHW tensors with a dynamic reverse-mode tape.

Every differentiable operation produces a new :class:`Tensor` whose
``node`` remembers the inputs and a closure mapping the upstream gradient to
per-input gradients. :func:`backward` walks the recorded graph once, in
reverse topological order, and accumulates gradients into leaf tensors.

Feature maps are 4-D ``(N, C, H, W)``; parameters such as biases and the
AAC importance scores are 1-D. Results are checked for finiteness after
every forward and backward step.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

EPS = 1e-7

_grad_enabled = True


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class GraphConsumedError(RuntimeError):
    pass


class NondeterministicError(RuntimeError):
    pass


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def grad_enabled() -> bool:
    return _grad_enabled


def check_finite(arr: np.ndarray, where: str) -> None:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"non-finite values produced by {where}")


class Node:
    __slots__ = ("op", "inputs", "backward_fn", "consumed")

    def __init__(self, op: str, inputs: tuple["Tensor", ...], backward_fn: Callable):
        self.op = op
        self.inputs = inputs
        self.backward_fn = backward_fn
        self.consumed = False


class Tensor:
    """A numeric array plus an optional gradient slot."""

    __slots__ = ("data", "grad", "requires_grad", "node", "name")
    __array_priority__ = 100  # make ndarray <op> Tensor defer to Tensor

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        arr = np.array(data, dtype=dtype if dtype is not None else None, copy=True)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64 if dtype is None else dtype)
        if arr.ndim == 0:
            arr = arr.reshape(1, 1, 1, 1)
        if any(d < 1 for d in arr.shape):
            raise ShapeError(f"all dims must be >= 1, got {arr.shape}")
        check_finite(arr, "Tensor()")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.node: Node | None = None
        self.name = name

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool = False) -> "Tensor":
        t = cls.__new__(cls)
        t.data = arr
        t.grad = None
        t.requires_grad = requires_grad
        t.node = None
        t.name = None
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(as_tensor(other, like=self), self)

    def __neg__(self):
        return neg(self)

    def backward(self, retain_graph: bool = False) -> None:
        backward(self, retain_graph=retain_graph)


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    arr = np.asarray(x, dtype=dtype)
    if like is not None and arr.ndim == 0:
        arr = np.full(like.shape, arr, dtype=like.dtype)
    return Tensor._wrap(arr.astype(dtype) if dtype is not None else arr)


def record(op: str, out: np.ndarray, inputs: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    """Wrap an op result and, if any input needs grad, attach a graph node.

    ``backward_fn(g)`` receives the upstream gradient and returns one
    gradient array (or None) per input.
    """
    check_finite(out, op)
    needs = _grad_enabled and any(t.requires_grad for t in inputs)
    t = Tensor._wrap(out, requires_grad=needs)
    if needs:
        t.node = Node(op, tuple(inputs), backward_fn)
    return t


# -- graph -------------------------------------------------------------------

@dataclass
class Graph:
    """Recorded operations reachable from one output, producers first."""

    output: Tensor
    nodes: list[Node] = field(default_factory=list)

    @classmethod
    def trace(cls, output: Tensor) -> "Graph":
        order: list[Node] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(output, False)]
        while stack:
            t, expanded = stack.pop()
            node = t.node
            if node is None:
                continue
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((t, True))
            for inp in node.inputs:
                if inp.node is not None and id(inp.node) not in seen:
                    stack.append((inp, False))
        return cls(output, order)


def backward(loss: Tensor, retain_graph: bool = False) -> None:
    """Populate ``.grad`` of every leaf reachable from ``loss``.

    Gradients accumulate across calls. Without ``retain_graph`` the graph is
    consumed and a second call raises :class:`GraphConsumedError`.
    """
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss.node is None:
        if loss.requires_grad:
            _accumulate(loss, np.ones_like(loss.data))
        return
    graph = Graph.trace(loss)
    if any(n.consumed for n in graph.nodes):
        raise GraphConsumedError("graph already consumed; pass retain_graph=True to reuse it")

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    # id -> tensor for the outputs we visit; nodes don't hold their output
    outputs: dict[int, Tensor] = {id(loss.node): loss}
    for node in graph.nodes:
        for inp in node.inputs:
            if inp.node is not None:
                outputs.setdefault(id(inp.node), inp)

    for node in reversed(graph.nodes):
        out = outputs[id(node)]
        g = grads.pop(id(out), None)
        if g is None:
            continue
        in_grads = node.backward_fn(g)
        for inp, ig in zip(node.inputs, in_grads):
            if ig is None or not inp.requires_grad:
                continue
            check_finite(ig, f"backward of {node.op}")
            if inp.node is None:
                _accumulate(inp, ig)
            else:
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + ig
                else:
                    grads[key] = ig
        if not retain_graph:
            node.consumed = True
            node.backward_fn = _consumed


def _consumed(_g):
    raise GraphConsumedError("graph already consumed")


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if g.shape != t.shape:
        raise ShapeError(f"gradient shape {g.shape} does not match {t.shape}")
    g = g.astype(t.dtype, copy=False)
    if t.grad is None:
        t.grad = g.copy()
    else:
        t.grad += g


# -- elementwise ---------------------------------------------------------------

def _operand(a: Tensor, b) -> Tensor | float:
    if isinstance(b, Tensor):
        if b.shape != a.shape:
            raise ShapeError(f"shape mismatch {a.shape} vs {b.shape}")
        return b
    if isinstance(b, np.ndarray) and b.ndim > 0:
        if b.shape != a.shape:
            raise ShapeError(f"shape mismatch {a.shape} vs {b.shape}")
        return Tensor._wrap(b.astype(a.dtype, copy=False))
    return float(b)


def add(a: Tensor, b) -> Tensor:
    b = _operand(a, b)
    if isinstance(b, float):
        return record("add", a.data + a.dtype.type(b), (a,), lambda g: (g,))
    return record("add", a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b) -> Tensor:
    b = _operand(a, b)
    if isinstance(b, float):
        return record("sub", a.data - a.dtype.type(b), (a,), lambda g: (g,))
    return record("sub", a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b) -> Tensor:
    b = _operand(a, b)
    if isinstance(b, float):
        s = a.dtype.type(b)
        return record("mul", a.data * s, (a,), lambda g: (g * s,))
    ad, bd = a.data, b.data
    return record("mul", ad * bd, (a, b), lambda g: (g * bd, g * ad))


def div(a: Tensor, b) -> Tensor:
    """``a / max(b, EPS)``; denominators here are non-negative quantities."""
    b = _operand(a, b)
    if isinstance(b, float):
        s = a.dtype.type(max(b, EPS))
        return record("div", a.data / s, (a,), lambda g: (g / s,))
    ad = a.data
    bd = np.maximum(b.data, EPS)
    live = b.data >= EPS
    out = ad / bd

    def bw(g):
        return g / bd, np.where(live, -g * out / bd, 0.0).astype(bd.dtype)

    return record("div", out, (a, b), bw)


def neg(a: Tensor) -> Tensor:
    return record("neg", -a.data, (a,), lambda g: (-g,))


def log(a: Tensor) -> Tensor:
    """Natural log of ``max(a, EPS)``; zero gradient where clamped."""
    x = a.data
    xc = np.maximum(x, EPS)
    live = x >= EPS
    return record("log", np.log(xc), (a,), lambda g: (np.where(live, g / xc, 0.0).astype(x.dtype),))


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):  # overflow surfaces as NonFiniteError in record
        out = np.exp(a.data)
    return record("exp", out, (a,), lambda g: (g * out,))


def sigmoid(a: Tensor) -> Tensor:
    out = 1.0 / (1.0 + np.exp(-a.data))
    return record("sigmoid", out, (a,), lambda g: (g * out * (1.0 - out),))


def relu(a: Tensor) -> Tensor:
    live = a.data > 0
    return record("relu", np.where(live, a.data, 0.0).astype(a.dtype), (a,),
                  lambda g: (np.where(live, g, 0.0).astype(g.dtype),))


def clamp(a: Tensor, lo: float | None = None, hi: float | None = None) -> Tensor:
    x = a.data
    out = np.clip(x, lo, hi)
    live = np.ones(x.shape, dtype=bool)
    if lo is not None:
        live &= x >= lo
    if hi is not None:
        live &= x <= hi
    return record("clamp", out, (a,), lambda g: (np.where(live, g, 0.0).astype(g.dtype),))


_UNARY = {"neg": neg, "log": log, "exp": exp, "sigmoid": sigmoid, "relu": relu}
_BINARY = {"add": add, "sub": sub, "mul": mul, "div": div}


def elementwise(tag: str, a: Tensor, b=None, **kwargs) -> Tensor:
    """Dispatch an elementwise op by name (add, sub, mul, div, log, exp,
    sigmoid, relu, neg, clamp)."""
    if tag in _BINARY:
        return _BINARY[tag](a, b)
    if tag in _UNARY:
        return _UNARY[tag](a)
    if tag == "clamp":
        return clamp(a, **kwargs)
    raise ValueError(f"unknown elementwise op {tag!r}")


# -- reductions and channel plumbing ---------------------------------------------

def _axes(a: Tensor, axes) -> tuple[int, ...]:
    if axes is None:
        return tuple(range(a.data.ndim))
    if isinstance(axes, int):
        axes = (axes,)
    nd = a.data.ndim
    out = []
    for ax in axes:
        if not -nd <= ax < nd:
            raise ShapeError(f"axis {ax} invalid for shape {a.shape}")
        out.append(ax % nd)
    return tuple(sorted(set(out)))


def reduce(tag: str, a: Tensor, axes=None) -> Tensor:
    """Sum or mean over ``axes`` (all by default); reduced dims stay as size 1."""
    axes = _axes(a, axes)
    if tag == "sum":
        scale = None
        out = a.data.sum(axis=axes, keepdims=True)
    elif tag == "mean":
        count = 1
        for ax in axes:
            count *= a.shape[ax]
        scale = a.dtype.type(1.0 / count)
        out = a.data.sum(axis=axes, keepdims=True) * scale
    else:
        raise ValueError(f"unknown reduction {tag!r}")
    shape = a.shape

    def bw(g):
        full = np.broadcast_to(g, shape)
        return ((full * scale) if scale is not None else full.copy(),)

    return record(tag, out, (a,), bw)


def sum_(a: Tensor, axes=None) -> Tensor:
    return reduce("sum", a, axes)


def mean(a: Tensor, axes=None) -> Tensor:
    return reduce("mean", a, axes)


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 4 or b.data.ndim != 4:
        raise ShapeError("concat_channels needs 4-D tensors")
    if (a.shape[0], a.shape[2], a.shape[3]) != (b.shape[0], b.shape[2], b.shape[3]):
        raise ShapeError(f"batch/spatial mismatch {a.shape} vs {b.shape}")
    ca = a.shape[1]
    out = np.concatenate([a.data, b.data], axis=1)
    return record("concat_channels", out, (a, b), lambda g: (g[:, :ca], g[:, ca:]))


def select_channel(a: Tensor, c: int) -> Tensor:
    """Channel ``c`` of an NCHW tensor, kept as (N, 1, H, W)."""
    shape = a.shape

    def bw(g):
        full = np.zeros(shape, dtype=g.dtype)
        full[:, c:c + 1] = g
        return (full,)

    return record("select_channel", a.data[:, c:c + 1].copy(), (a,), bw)


def select_batch(a: Tensor, index: Sequence[int] | np.ndarray) -> Tensor:
    """Rows ``index`` of the batch axis (no repeats)."""
    idx = np.asarray(index, dtype=np.int64)
    shape = a.shape

    def bw(g):
        full = np.zeros(shape, dtype=g.dtype)
        full[idx] = g
        return (full,)

    return record("select_batch", a.data[idx].copy(), (a,), bw)


def softmax_channels(a: Tensor) -> Tensor:
    z = a.data - a.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=1, keepdims=True)

    def bw(g):
        return (p * (g - (g * p).sum(axis=1, keepdims=True)),)

    return record("softmax_channels", p, (a,), bw)


# -- verification oracle ------------------------------------------------------------

@dataclass
class GradcheckReport:
    name: str
    max_rel_err: float
    tol: float
    rel_err: np.ndarray
    analytic: np.ndarray
    numeric: np.ndarray

    @property
    def passed(self) -> bool:
        return bool(self.max_rel_err < self.tol)


def _scalar(out: Tensor) -> float:
    if out.size != 1:
        raise ShapeError(f"gradcheck function must return a scalar, got {out.shape}")
    return float(out.data.reshape(-1)[0])


def gradcheck(f: Callable[..., Tensor], inputs: Tensor | Sequence[Tensor],
              eps: float = 1e-3, tol: float = 1e-4,
              names: Iterable[str] | None = None) -> list[GradcheckReport]:
    """Compare analytic gradients of scalar ``f(*inputs)`` with central
    differences ``(f(x+eps) - f(x-eps)) / 2eps`` for every input that has
    ``requires_grad``.

    Relative error per element is ``|a - d| / max(|a|, |d|, 1e-8)``; a
    report passes when its maximum is below ``tol``.
    """
    if isinstance(inputs, Tensor):
        inputs = [inputs]
    inputs = list(inputs)
    names = list(names) if names is not None else [t.name or f"arg{i}" for i, t in enumerate(inputs)]
    for t in inputs:
        if t.dtype != np.float64:
            raise TypeError("gradcheck requires float64 inputs")

    with no_grad():
        base = _scalar(f(*inputs))
        if _scalar(f(*inputs)) != base:
            raise NondeterministicError("f evaluated twice gave different results")

    for t in inputs:
        t.grad = None
    out = f(*inputs)
    _scalar(out)
    backward(out)

    reports = []
    for t, name in zip(inputs, names):
        if not t.requires_grad:
            continue
        analytic = t.grad.copy() if t.grad is not None else np.zeros_like(t.data)
        numeric = np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        with no_grad():
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + eps
                fp = _scalar(f(*inputs))
                flat[i] = orig - eps
                fm = _scalar(f(*inputs))
                flat[i] = orig
                numeric.reshape(-1)[i] = (fp - fm) / (2 * eps)
        denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
        rel = np.abs(analytic - numeric) / denom
        reports.append(GradcheckReport(name, float(rel.max()), tol, rel, analytic, numeric))
    return reports
