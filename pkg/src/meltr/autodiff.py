"""Reverse-mode automatic differentiation over dense float64 arrays.

Every backward rule is written in terms of :class:`Tensor` operations, so a
backward pass run with ``create_graph=True`` is itself recorded and can be
differentiated again. That is what the mixed second-order terms of the
hypergradient need.

Only scalar-with-tensor broadcasting happens implicitly. Anything else goes
through the explicit :func:`expand` / :func:`reduce_to` pair.
"""

from __future__ import annotations

import contextlib
import math
import threading
import warnings
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy import special

__all__ = [
    "Tensor",
    "Graph",
    "ShapeError",
    "NonFiniteError",
    "UnusedGradientWarning",
    "OPS",
    "tensor",
    "parameter",
    "constant",
    "no_grad",
    "enable_grad",
    "is_grad_enabled",
    "forward_op",
    "grad",
    "hvp",
    "hvp_from_grads",
    "finite_diff_grad",
    "replay",
    "vdot",
    "flatten",
    "unflatten",
]


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class UnusedGradientWarning(UserWarning):
    """A ``wrt`` tensor was not reachable from the output; its gradient is zero."""


_mode = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_mode, "enabled", True)


@contextlib.contextmanager
def _grad_mode(enabled: bool):
    prev = is_grad_enabled()
    _mode.enabled = enabled
    try:
        yield
    finally:
        _mode.enabled = prev


def no_grad():
    return _grad_mode(False)


def enable_grad():
    return _grad_mode(True)


class Tensor:
    __slots__ = ("data", "requires_grad", "op", "inputs", "params", "__weakref__")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.op: Op | None = None
        self.inputs: tuple[Tensor, ...] = ()
        self.params: dict = {}

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self.op is None

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.size == 1 else float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def __repr__(self):
        tag = f", op={self.op.name}" if self.op is not None else ""
        return f"Tensor({self.data!r}{tag})"

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

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self) -> Tensor:
        return transpose(self)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return data if isinstance(data, Tensor) else Tensor(data, requires_grad=requires_grad)


def parameter(data) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True)


def constant(data) -> Tensor:
    return Tensor(data)


# ---------------------------------------------------------------------------
# op machinery


@dataclass
class Op:
    """One differentiable primitive.

    ``forward`` maps numpy arrays to a numpy array. ``backward`` receives the
    upstream gradient, the output node, the inputs, the per-input ``needs``
    mask and the op params, and returns one Tensor (or None) per input.
    """

    name: str
    forward: Callable[..., np.ndarray]
    backward: Callable[..., tuple]


OPS: dict[str, Op] = {}


def _register(name):
    def deco(cls_or_pair):
        fwd, bwd = cls_or_pair()
        OPS[name] = Op(name, fwd, bwd)
        return OPS[name]

    return deco


def forward_op(kind: str, *inputs, **params) -> Tensor:
    op = OPS[kind]
    ins = tuple(x if type(x) is Tensor else tensor(x) for x in inputs)
    out = op.forward(*[t.data for t in ins], **params)
    if type(out) is not np.ndarray:
        out = np.asarray(out, dtype=np.float64)
    # a NaN or Inf anywhere makes the sum non-finite
    if not math.isfinite(out.sum()):
        raise NonFiniteError(f"{kind} produced a non-finite value")
    res = Tensor.__new__(Tensor)
    res.data = out
    res.requires_grad = False
    res.op = None
    res.inputs = ()
    res.params = {}
    if getattr(_mode, "enabled", True) and any(t.requires_grad for t in ins):
        res.requires_grad = True
        res.op = op
        res.inputs = ins
        res.params = params
    return res


def _scalar_pair(a, b):
    a, b = tensor(a), tensor(b)
    if a.shape == b.shape:
        return a, b
    if a.ndim == 0:
        return expand(a, b.shape), b
    if b.ndim == 0:
        return a, expand(b, a.shape)
    raise ShapeError(f"shapes {a.shape} and {b.shape} are not compatible (only scalar broadcasting)")


# ---------------------------------------------------------------------------
# elementwise arithmetic


@_register("add")
def _add():
    return (lambda a, b: a + b), (lambda g, out, a, b, needs: (g, g))


@_register("sub")
def _sub():
    return (lambda a, b: a - b), (lambda g, out, a, b, needs: (g, neg(g) if needs[1] else None))


@_register("mul")
def _mul():
    def bwd(g, out, a, b, needs):
        return (mul(g, b) if needs[0] else None, mul(g, a) if needs[1] else None)

    return (lambda a, b: a * b), bwd


@_register("div")
def _div():
    def bwd(g, out, a, b, needs):
        ga = div(g, b) if needs[0] else None
        gb = neg(div(mul(g, out), b)) if needs[1] else None
        return ga, gb

    return (lambda a, b: a / b), bwd


@_register("neg")
def _neg():
    return (lambda a: -a), (lambda g, out, a, needs: (neg(g),))


def add(a, b) -> Tensor:
    return forward_op("add", *_scalar_pair(a, b))


def sub(a, b) -> Tensor:
    return forward_op("sub", *_scalar_pair(a, b))


def mul(a, b) -> Tensor:
    return forward_op("mul", *_scalar_pair(a, b))


def div(a, b) -> Tensor:
    return forward_op("div", *_scalar_pair(a, b))


def neg(a) -> Tensor:
    return forward_op("neg", a)


# ---------------------------------------------------------------------------
# unary nonlinearities


@_register("abs")
def _abs():
    # sign(0) = 0: the subgradient at the kink is zero
    return np.abs, (lambda g, out, a, needs: (mul(g, sign(a)),))


@_register("sign")
def _sign():
    return np.sign, (lambda g, out, a, needs: (None,))


@_register("exp")
def _exp():
    return np.exp, (lambda g, out, a, needs: (mul(g, out),))


@_register("log")
def _log():
    def fwd(a):
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.log(a)

    return fwd, (lambda g, out, a, needs: (div(g, a),))


@_register("tanh")
def _tanh():
    return np.tanh, (lambda g, out, a, needs: (mul(g, sub(1.0, mul(out, out))),))


def _hermite(m: int, x: np.ndarray) -> np.ndarray:
    # probabilists' Hermite polynomial He_m
    h0, h1 = np.ones_like(x), x
    if m == 0:
        return h0
    for k in range(1, m):
        h0, h1 = h1, x * h1 - k * h0
    return h1


def _gelu_deriv(x: np.ndarray, order: int) -> np.ndarray:
    cdf = special.ndtr(x)
    pdf = np.exp(-0.5 * x * x) / np.sqrt(2.0 * np.pi)
    if order == 0:
        return x * cdf
    if order == 1:
        return cdf + x * pdf

    def pdf_deriv(m):
        return (-1) ** m * _hermite(m, x) * pdf

    return order * pdf_deriv(order - 2) + x * pdf_deriv(order - 1)


@_register("gelu")
def _gelu():
    return (lambda a, order=0: _gelu_deriv(a, order)), (
        lambda g, out, a, needs, order=0: (mul(g, forward_op("gelu", a, order=order + 1)),)
    )


def abs_(a) -> Tensor:
    return forward_op("abs", a)


def sign(a) -> Tensor:
    return forward_op("sign", a)


def exp(a) -> Tensor:
    return forward_op("exp", a)


def log(a) -> Tensor:
    return forward_op("log", a)


def tanh(a) -> Tensor:
    return forward_op("tanh", a)


def gelu(a) -> Tensor:
    """Exact (erf-based) GELU."""
    return forward_op("gelu", a, order=0)


# ---------------------------------------------------------------------------
# shape and reduction ops


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(a % ndim for a in axis))


def _kept_shape(shape, axes):
    return tuple(1 if i in axes else s for i, s in enumerate(shape))


@_register("sum")
def _sum():
    def fwd(a, axis=None, keepdims=False):
        return np.asarray(np.sum(a, axis=axis, keepdims=keepdims))

    def bwd(g, out, a, needs, axis=None, keepdims=False):
        axes = _norm_axis(axis, a.ndim)
        return (expand(reshape(g, _kept_shape(a.shape, axes)), a.shape),)

    return fwd, bwd


@_register("mean")
def _mean():
    def fwd(a, axis=None, keepdims=False):
        return np.asarray(np.mean(a, axis=axis, keepdims=keepdims))

    def bwd(g, out, a, needs, axis=None, keepdims=False):
        axes = _norm_axis(axis, a.ndim)
        count = int(np.prod([a.shape[i] for i in axes])) if axes else 1
        gx = expand(reshape(g, _kept_shape(a.shape, axes)), a.shape)
        return (mul(gx, 1.0 / count),)

    return fwd, bwd


@_register("reshape")
def _reshape():
    return (lambda a, shape: a.reshape(shape)), (
        lambda g, out, a, needs, shape: (reshape(g, a.shape),)
    )


@_register("transpose")
def _transpose():
    def fwd(a, axes=None):
        return np.transpose(a, axes)

    def bwd(g, out, a, needs, axes=None):
        inv = None if axes is None else tuple(np.argsort(axes))
        return (transpose(g, inv),)

    return fwd, bwd


@_register("expand")
def _expand():
    def fwd(a, shape):
        return np.array(np.broadcast_to(a, shape))

    return fwd, (lambda g, out, a, needs, shape: (reduce_to(g, a.shape),))


def _reduce_array(a, shape):
    lead = a.ndim - len(shape)
    if lead:
        a = a.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and a.shape[i] != 1)
    if axes:
        a = a.sum(axis=axes, keepdims=True)
    return a.reshape(shape)


@_register("reduce_to")
def _reduce_to():
    return _reduce_array, (lambda g, out, a, needs, shape: (expand(g, a.shape),))


@_register("matmul")
def _matmul():
    def bwd(g, out, a, b, needs):
        ga = matmul(g, swap_last(b)) if needs[0] else None
        gb = matmul(swap_last(a), g) if needs[1] else None
        return ga, gb

    return np.matmul, bwd


@_register("slice")
def _slice():
    def fwd(a, axis, start, stop):
        idx = [slice(None)] * a.ndim
        idx[axis] = slice(start, stop)
        return a[tuple(idx)].copy()

    def bwd(g, out, a, needs, axis, start, stop):
        return (forward_op("pad", g, axis=axis, start=start, length=a.shape[axis]),)

    return fwd, bwd


@_register("pad")
def _pad():
    def fwd(a, axis, start, length):
        shape = list(a.shape)
        shape[axis] = length
        res = np.zeros(shape)
        idx = [slice(None)] * a.ndim
        idx[axis] = slice(start, start + a.shape[axis])
        res[tuple(idx)] = a
        return res

    def bwd(g, out, a, needs, axis, start, length):
        return (take(g, axis, start, start + a.shape[axis]),)

    return fwd, bwd


def _concat_op():
    # variadic; registered by hand because inputs are a sequence
    def fwd(*arrays, axis):
        return np.concatenate(arrays, axis=axis)

    def bwd(g, out, *rest, axis):
        *inputs, needs = rest
        grads, start = [], 0
        for x, need in zip(inputs, needs):
            stop = start + x.shape[axis]
            grads.append(take(g, axis, start, stop) if need else None)
            start = stop
        return tuple(grads)

    return fwd, bwd


OPS["concat"] = Op("concat", *_concat_op())


@_register("embedding")
def _embedding():
    def fwd(table, idx):
        return table[idx]

    def bwd(g, out, table, needs, idx):
        return (forward_op("index_add", g, idx=idx, rows=table.shape[0]),)

    return fwd, bwd


@_register("index_add")
def _index_add():
    def fwd(g, idx, rows):
        res = np.zeros((rows,) + g.shape[np.asarray(idx).ndim:])
        np.add.at(res, idx, g)
        return res

    return fwd, (lambda g, out, a, needs, idx, rows: (forward_op("embedding", g, idx=idx),))


@_register("softmax")
def _softmax():
    def fwd(a):
        z = a - a.max(axis=-1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=-1, keepdims=True)

    def bwd(g, out, a, needs):
        inner = expand(tsum(mul(g, out), axis=-1, keepdims=True), out.shape)
        return (mul(out, sub(g, inner)),)

    return fwd, bwd


@_register("log_softmax")
def _log_softmax():
    def fwd(a):
        z = a - a.max(axis=-1, keepdims=True)
        return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))

    def bwd(g, out, a, needs):
        total = expand(tsum(g, axis=-1, keepdims=True), g.shape)
        return (sub(g, mul(softmax(a), total)),)

    return fwd, bwd


@_register("layer_norm")
def _layer_norm():
    def fwd(a, eps=1e-5):
        mu = a.mean(axis=-1, keepdims=True)
        xc = a - mu
        var = (xc * xc).mean(axis=-1, keepdims=True)
        return xc / np.sqrt(var + eps)

    def bwd(g, out, a, needs, eps=1e-5):
        shape = a.shape
        xc = sub(a, expand(mean(a, axis=-1, keepdims=True), shape))
        var = mean(mul(xc, xc), axis=-1, keepdims=True)
        inv_std = exp(mul(log(add(var, eps)), -0.5))
        g_mean = expand(mean(g, axis=-1, keepdims=True), shape)
        gy_mean = expand(mean(mul(g, out), axis=-1, keepdims=True), shape)
        return (mul(expand(inv_std, shape), sub(sub(g, g_mean), mul(out, gy_mean))),)

    return fwd, bwd


def tsum(a, axis=None, keepdims=False) -> Tensor:
    return forward_op("sum", a, axis=axis, keepdims=keepdims)


def mean(a, axis=None, keepdims=False) -> Tensor:
    return forward_op("mean", a, axis=axis, keepdims=keepdims)


def reshape(a, shape) -> Tensor:
    return forward_op("reshape", a, shape=tuple(shape))


def transpose(a, axes=None) -> Tensor:
    return forward_op("transpose", a, axes=None if axes is None else tuple(axes))


def swap_last(a) -> Tensor:
    a = tensor(a)
    if a.ndim < 2:
        raise ShapeError("swap_last needs at least 2 dimensions")
    axes = tuple(range(a.ndim - 2)) + (a.ndim - 1, a.ndim - 2)
    return transpose(a, axes)


def expand(a, shape) -> Tensor:
    a = tensor(a)
    shape = tuple(shape)
    if a.shape == shape:
        return a
    try:
        np.broadcast_shapes(a.shape, shape)
    except ValueError as exc:
        raise ShapeError(f"cannot expand {a.shape} to {shape}") from exc
    return forward_op("expand", a, shape=shape)


def reduce_to(a, shape) -> Tensor:
    a = tensor(a)
    shape = tuple(shape)
    if a.shape == shape:
        return a
    return forward_op("reduce_to", a, shape=shape)


def matmul(a, b) -> Tensor:
    a, b = tensor(a), tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2] or a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul shape mismatch {a.shape} @ {b.shape}")
    return forward_op("matmul", a, b)


def take(a, axis: int, start: int, stop: int) -> Tensor:
    """Contiguous slice ``a[..., start:stop, ...]`` along ``axis``."""
    a = tensor(a)
    return forward_op("slice", a, axis=axis % a.ndim, start=start, stop=stop)


def concat(xs: Sequence, axis: int = 0) -> Tensor:
    xs = [tensor(x) for x in xs]
    ax = axis % xs[0].ndim
    for x in xs[1:]:
        if x.ndim != xs[0].ndim or any(
            s != t for i, (s, t) in enumerate(zip(x.shape, xs[0].shape)) if i != ax
        ):
            raise ShapeError("concat shape mismatch")
    return forward_op("concat", *xs, axis=ax)


def embedding(table, idx) -> Tensor:
    table = tensor(table)
    idx = np.asarray(idx, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise IndexError(f"embedding index out of range [0, {table.shape[0]})")
    return forward_op("embedding", table, idx=idx)


def softmax(a) -> Tensor:
    return forward_op("softmax", a)


def log_softmax(a) -> Tensor:
    return forward_op("log_softmax", a)


def layer_norm(a, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis (no affine part)."""
    return forward_op("layer_norm", a, eps=eps)


def stack_scalars(xs: Sequence[Tensor]) -> Tensor:
    return concat([reshape(x, (1,)) for x in xs], axis=0)


def vdot(xs: Sequence[Tensor], ys: Sequence) -> Tensor:
    """Sum of elementwise products over paired tensor lists."""
    total = None
    for x, y in zip(xs, ys):
        term = tsum(mul(x, y))
        total = term if total is None else add(total, term)
    return total


def flatten(xs: Sequence) -> np.ndarray:
    return np.concatenate([np.asarray(tensor(x).data).reshape(-1) for x in xs]) if xs else np.zeros(0)


def unflatten(vec: np.ndarray, like: Sequence) -> list[np.ndarray]:
    out, pos = [], 0
    for x in like:
        shape = tensor(x).shape
        n = int(np.prod(shape))
        out.append(np.asarray(vec[pos:pos + n]).reshape(shape))
        pos += n
    return out


# ---------------------------------------------------------------------------
# graph traversal and differentiation


def _toposort(roots: Iterable[Tensor]) -> list[Tensor]:
    order, seen = [], set()
    for root in roots:
        if id(root) in seen:
            continue
        stack = [(root, False)]
        while stack:
            node, done = stack.pop()
            if done:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for inp in node.inputs:
                if inp.requires_grad and id(inp) not in seen:
                    stack.append((inp, False))
    return order


@dataclass
class Graph:
    """Snapshot of the nodes reachable from some outputs, inputs first."""

    nodes: list[Tensor]
    generation: int = 0
    outputs: list[Tensor] = field(default_factory=list)

    @classmethod
    def capture(cls, *outputs: Tensor, generation: int = 0) -> Graph:
        return cls(_toposort(outputs), generation, list(outputs))

    def leaves(self) -> list[Tensor]:
        found, seen = [], set()
        for node in self.nodes:
            for inp in node.inputs if node.op is not None else (node,):
                if inp.op is None and id(inp) not in seen:
                    seen.add(id(inp))
                    found.append(inp)
        return found

    def is_acyclic(self) -> bool:
        pos = {id(n): i for i, n in enumerate(self.nodes)}
        return all(
            pos.get(id(inp), -1) < pos[id(n)] for n in self.nodes for inp in n.inputs
        )


def replay(output: Tensor, overrides: dict[int, np.ndarray] | None = None) -> np.ndarray:
    """Recompute ``output`` from its leaves by re-running every recorded op in order."""
    graph = Graph.capture(output)
    values: dict[int, np.ndarray] = dict(overrides or {})

    def value(t):
        return values.get(id(t), t.data)

    for node in graph.nodes:
        if node.op is None:
            continue
        values[id(node)] = node.op.forward(*(value(i) for i in node.inputs), **node.params)
    return value(output)


def grad(
    output: Tensor,
    wrt: Sequence[Tensor],
    create_graph: bool = False,
    warn_unused: bool = True,
) -> list[Tensor]:
    """Gradients of a scalar ``output`` with respect to each tensor in ``wrt``.

    Unreachable entries of ``wrt`` get zeros and an :class:`UnusedGradientWarning`.
    """
    if output.size != 1:
        raise ShapeError(f"grad needs a scalar output, got shape {output.shape}")
    wrt = list(wrt)
    targets = {id(t) for t in wrt}
    if not output.requires_grad:
        order = []
    else:
        order = _toposort([output])
    # only propagate along nodes that can reach a wrt tensor
    reaches: dict[int, bool] = {}
    for node in order:
        reaches[id(node)] = id(node) in targets or any(
            reaches.get(id(i), False) for i in node.inputs
        )
    grads: dict[int, Tensor] = {}
    if order and reaches.get(id(output), False):
        grads[id(output)] = Tensor(np.ones_like(output.data))
    with _grad_mode(create_graph):
        for node in reversed(order):
            g = grads.get(id(node))
            if g is None or node.op is None:
                continue
            needs = tuple(reaches.get(id(i), False) for i in node.inputs)
            if not any(needs):
                continue
            in_grads = node.op.backward(g, node, *node.inputs, needs, **node.params)
            for inp, ig, need in zip(node.inputs, in_grads, needs):
                if ig is None or not need:
                    continue
                prev = grads.get(id(inp))
                grads[id(inp)] = ig if prev is None else add(prev, ig)
    result, missing = [], 0
    for t in wrt:
        g = grads.get(id(t))
        if g is None:
            missing += 1
            g = Tensor(np.zeros_like(t.data))
        elif not create_graph and g.requires_grad:
            g = g.detach()
        result.append(g)
    if missing and warn_unused:
        warnings.warn(
            f"{missing} of {len(wrt)} tensors unreachable from output; returning zeros",
            UnusedGradientWarning,
            stacklevel=2,
        )
    return result


def hvp_from_grads(grads: Sequence[Tensor], w: Sequence[Tensor], v: Sequence, create_graph=False):
    """Hessian-vector product given gradients built with ``create_graph=True``."""
    v = [tensor(x).detach() for x in v]
    for g, x in zip(grads, v):
        if g.shape != x.shape:
            raise ShapeError(f"vector shape {x.shape} does not match {g.shape}")
    dot = vdot(grads, v)
    if not dot.requires_grad:
        return [Tensor(np.zeros_like(x.data)) for x in w]
    return grad(dot, w, create_graph=create_graph, warn_unused=False)


def hvp(loss_builder: Callable[[list[Tensor]], Tensor], w: Sequence[Tensor], v: Sequence) -> list[Tensor]:
    """(d^2 L / dw^2) v via the gradient of (grad L . v); the Hessian is never formed."""
    loss = loss_builder(list(w))
    if loss.size != 1:
        raise ShapeError("hvp needs a scalar loss")
    gs = grad(loss, w, create_graph=True, warn_unused=False)
    return hvp_from_grads(gs, w, v)


def finite_diff_grad(
    loss_builder: Callable[[list[Tensor]], Tensor],
    w: Sequence[Tensor],
    step: float = 1e-4,
    relative: bool = False,
) -> list[np.ndarray]:
    """Central-difference gradient, one coordinate at a time.

    With ``relative=True`` the step for coordinate x is ``step * max(1, |x|)``.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    base = [np.array(tensor(x).data, dtype=np.float64) for x in w]
    out = []
    with no_grad():
        for k, arr in enumerate(base):
            g = np.zeros_like(arr)
            flat = arr.reshape(-1)
            for i in range(flat.size):
                h = step * max(1.0, abs(flat[i])) if relative else step
                vals = []
                for sgn in (1.0, -1.0):
                    trial = [b.copy() for b in base]
                    trial[k].reshape(-1)[i] += sgn * h
                    vals.append(loss_builder([Tensor(t, requires_grad=True) for t in trial]).item())
                g.reshape(-1)[i] = (vals[0] - vals[1]) / (2 * h)
            out.append(g)
    return out
