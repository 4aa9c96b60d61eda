"""Reverse-mode automatic differentiation on double-precision numpy arrays.

Every operation on :class:`Tensor` objects appends a node to the active
:class:`Tape` when gradients are enabled and at least one input requires a
gradient.  :func:`backward` replays the tape in reverse creation order (which
is a topological order of the recorded graph), accumulates gradients of
tensors reached along several paths, and clears the tape.

Broadcasting is deliberately narrow.  Two operand shapes are compatible when
they are equal or when one is a trailing suffix of the other, e.g. ``(m, d)``
with ``(d,)`` or any shape with the scalar shape ``()``.  The gradient of the
smaller operand is summed over the leading axes it was expanded along.
Anything else raises :class:`ShapeError`.

Backward rules live in :data:`BACKWARD_RULES`, keyed by op name, so a rule can
be inspected or swapped in isolation.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable, Dict, Iterable, List, Optional, Sequence

import numpy as np

__all__ = [
    "AutodiffError",
    "ShapeError",
    "DomainError",
    "Tensor",
    "Tape",
    "tensor",
    "constant",
    "no_grad",
    "grad_enabled",
    "current_tape",
    "unary_op",
    "binary_op",
    "matmul",
    "linear",
    "reduce",
    "concat",
    "slice_",
    "split",
    "concat_slice",
    "reshape",
    "transpose",
    "clamp",
    "detach",
    "backward",
    "grad_check",
    "grad_check_tensors",
    "BACKWARD_RULES",
]


class AutodiffError(Exception):
    """Base class for errors raised by the autodiff engine."""


class ShapeError(AutodiffError, ValueError):
    pass


class DomainError(AutodiffError, ValueError):
    """An input lies outside the domain of an operation (log of x <= 0, x / 0)."""


class Tensor:
    """An n-dimensional float64 array that can take part in a recorded graph."""

    __slots__ = ("data", "requires_grad", "grad", "name", "_leaf")
    # make ``ndarray <op> Tensor`` defer to the Tensor's reflected operator
    __array_ufunc__ = None

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self._leaf = True

    @classmethod
    def _from_op(cls, data: np.ndarray, requires_grad: bool) -> "Tensor":
        t = object.__new__(cls)
        t.data = data
        t.requires_grad = requires_grad
        t.grad = None
        t.name = None
        t._leaf = False
        return t

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._leaf

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_not_scalar(self)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    # arithmetic sugar; equality and hashing stay identity-based
    def __add__(self, other):
        return binary_op("add", self, other)

    def __radd__(self, other):
        return binary_op("add", other, self)

    def __sub__(self, other):
        return binary_op("sub", self, other)

    def __rsub__(self, other):
        return binary_op("sub", other, self)

    def __mul__(self, other):
        return binary_op("mul", self, other)

    def __rmul__(self, other):
        return binary_op("mul", other, self)

    def __truediv__(self, other):
        return binary_op("div", self, other)

    def __rtruediv__(self, other):
        return binary_op("div", other, self)

    def __neg__(self):
        return unary_op("neg", self)

    def __matmul__(self, other):
        return matmul(self, other)

    def tanh(self):
        return unary_op("tanh", self)

    def sigmoid(self):
        return unary_op("sigmoid", self)

    def exp(self):
        return unary_op("exp", self)

    def log(self):
        return unary_op("log", self)

    def softplus(self):
        return unary_op("softplus", self)

    def square(self):
        return unary_op("square", self)

    def sum(self, axis=None):
        return reduce("sum", self, axis)

    def mean(self, axis=None):
        return reduce("mean", self, axis)

    def detach(self):
        return detach(self)


def _raise_not_scalar(t: Tensor):
    raise ShapeError(f"item() needs a single-element tensor, got shape {t.shape}")


def tensor(data, requires_grad: bool = False, name: Optional[str] = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def constant(data) -> Tensor:
    if isinstance(data, Tensor):
        return data
    return Tensor(data)


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor._from_op(np.asarray(x, dtype=np.float64), False)


# ---------------------------------------------------------------------------
# tape and grad mode


class _Node:
    __slots__ = ("op", "inputs", "out", "ctx")

    def __init__(self, op, inputs, out, ctx):
        self.op = op
        self.inputs = inputs
        self.out = out
        self.ctx = ctx


class Tape:
    """Ordered record of operation nodes.

    A default tape exists per thread.  ``with Tape() as tape:`` makes a fresh
    tape active for the duration of the block.
    """

    def __init__(self):
        self.nodes: List[_Node] = []

    def __len__(self) -> int:
        return len(self.nodes)

    def clear(self) -> None:
        self.nodes.clear()

    def __enter__(self) -> "Tape":
        _state().tapes.append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _state().tapes
        stack.pop()


class _State(threading.local):
    def __init__(self):
        self.tapes = [Tape()]
        self.enabled = True


_STATE = _State()


def _state() -> _State:
    return _STATE


def current_tape() -> Tape:
    return _STATE.tapes[-1]


def grad_enabled() -> bool:
    return _STATE.enabled


@contextmanager
def no_grad():
    """Disable recording inside the block."""
    prev = _STATE.enabled
    _STATE.enabled = False
    try:
        yield
    finally:
        _STATE.enabled = prev


def _record(op: str, data: np.ndarray, inputs: tuple, ctx=None) -> Tensor:
    st = _STATE
    if st.enabled:
        for t in inputs:
            if t.requires_grad:
                out = Tensor._from_op(data, True)
                st.tapes[-1].nodes.append(_Node(op, inputs, out, ctx))
                return out
    return Tensor._from_op(data, False)


BACKWARD_RULES: Dict[str, Callable[[_Node, np.ndarray], tuple]] = {}


def _rule(name):
    def register(fn):
        BACKWARD_RULES[name] = fn
        return fn

    return register


# ---------------------------------------------------------------------------
# elementwise unary ops


def _sigmoid(x: np.ndarray) -> np.ndarray:
    y = np.tanh(0.5 * x)
    y += 1.0
    y *= 0.5
    return y


_UNARY = {
    "tanh": np.tanh,
    "sigmoid": _sigmoid,
    "exp": np.exp,
    "log": np.log,
    "softplus": lambda x: np.logaddexp(0.0, x),
    "neg": np.negative,
    "square": np.square,
}


def unary_op(kind: str, x) -> Tensor:
    """Apply an elementwise function: tanh, sigmoid, exp, log, softplus, neg or square."""
    fn = _UNARY.get(kind)
    if fn is None:
        raise ValueError(f"unknown unary op {kind!r}")
    x = _as_tensor(x)
    if kind == "log" and np.any(x.data <= 0.0):
        raise DomainError("log of a non-positive value")
    return _record(kind, fn(x.data), (x,))


@_rule("tanh")
def _tanh_bw(node, g):
    y = node.out.data
    return (g * (1.0 - y * y),)


@_rule("sigmoid")
def _sigmoid_bw(node, g):
    y = node.out.data
    return (g * y * (1.0 - y),)


@_rule("exp")
def _exp_bw(node, g):
    return (g * node.out.data,)


@_rule("log")
def _log_bw(node, g):
    return (g / node.inputs[0].data,)


@_rule("softplus")
def _softplus_bw(node, g):
    return (g * _sigmoid(node.inputs[0].data),)


@_rule("neg")
def _neg_bw(node, g):
    return (-g,)


@_rule("square")
def _square_bw(node, g):
    return (2.0 * g * node.inputs[0].data,)


def clamp(x, lo: float, hi: float) -> Tensor:
    """Clip values into ``[lo, hi]``; the gradient is zero where clipping bites."""
    x = _as_tensor(x)
    return _record("clamp", np.clip(x.data, lo, hi), (x,), (lo, hi))


@_rule("clamp")
def _clamp_bw(node, g):
    lo, hi = node.ctx
    x = node.inputs[0].data
    return (g * ((x >= lo) & (x <= hi)),)


# ---------------------------------------------------------------------------
# elementwise binary ops with suffix broadcasting


def _check_broadcast(sa, sb):
    if sa == sb:
        return
    la, lb = len(sa), len(sb)
    if la >= lb:
        if lb == 0 or sa[la - lb:] == sb:
            return
    elif la == 0 or sb[lb - la:] == sa:
        return
    raise ShapeError(f"shapes {sa} and {sb} are not trailing-suffix compatible")


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    return g.sum(axis=tuple(range(lead)))


def binary_op(kind: str, a, b) -> Tensor:
    """Elementwise add, sub, mul or div of two tensors."""
    a = _as_tensor(a)
    b = _as_tensor(b)
    _check_broadcast(a.data.shape, b.data.shape)
    if kind == "add":
        out = a.data + b.data
    elif kind == "sub":
        out = a.data - b.data
    elif kind == "mul":
        out = a.data * b.data
    elif kind == "div":
        if np.any(b.data == 0.0):
            raise DomainError("division by zero")
        out = a.data / b.data
    else:
        raise ValueError(f"unknown binary op {kind!r}")
    return _record(kind, out, (a, b))


@_rule("add")
def _add_bw(node, g):
    a, b = node.inputs
    return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)


@_rule("sub")
def _sub_bw(node, g):
    a, b = node.inputs
    return _unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)


@_rule("mul")
def _mul_bw(node, g):
    a, b = node.inputs
    ga = _unbroadcast(g * b.data, a.data.shape) if a.requires_grad else None
    gb = _unbroadcast(g * a.data, b.data.shape) if b.requires_grad else None
    return ga, gb


@_rule("div")
def _div_bw(node, g):
    a, b = node.inputs
    ga = _unbroadcast(g / b.data, a.data.shape) if a.requires_grad else None
    gb = None
    if b.requires_grad:
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape)
    return ga, gb


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b) -> Tensor:
    """Matrix product of a ``(m, k)`` and a ``(k, n)`` tensor."""
    a = _as_tensor(a)
    b = _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    return _record("matmul", a.data @ b.data, (a, b))


@_rule("matmul")
def _matmul_bw(node, g):
    a, b = node.inputs
    ga = g @ b.data.T if a.requires_grad else None
    gb = a.data.T @ g if b.requires_grad else None
    return ga, gb


def linear(x, weight, bias=None) -> Tensor:
    """Affine map ``x @ weight.T + bias`` with ``weight`` stored as ``(out, in)``.

    ``x`` may be a single vector ``(in,)`` or a batch ``(m, in)``.
    """
    x = _as_tensor(x)
    weight = _as_tensor(weight)
    if weight.ndim != 2 or x.ndim not in (1, 2) or x.shape[-1] != weight.shape[1]:
        raise ShapeError(f"linear: input {x.shape} does not match weight {weight.shape}")
    out = x.data @ weight.data.T
    if bias is None:
        return _record("linear", out, (x, weight))
    bias = _as_tensor(bias)
    if bias.shape != (weight.shape[0],):
        raise ShapeError(f"linear: bias {bias.shape} does not match weight {weight.shape}")
    return _record("linear", out + bias.data, (x, weight, bias))


@_rule("linear")
def _linear_bw(node, g):
    x, w = node.inputs[0], node.inputs[1]
    gx = g @ w.data if x.requires_grad else None
    gw = None
    if w.requires_grad:
        gw = np.outer(g, x.data) if x.ndim == 1 else g.T @ x.data
    if len(node.inputs) == 2:
        return gx, gw
    gb = (g if g.ndim == 1 else g.sum(axis=0)) if node.inputs[2].requires_grad else None
    return gx, gw, gb


def transpose(x) -> Tensor:
    x = _as_tensor(x)
    if x.ndim != 2:
        raise ShapeError(f"transpose expects a 2-D tensor, got {x.shape}")
    return _record("transpose", x.data.T, (x,))


@_rule("transpose")
def _transpose_bw(node, g):
    return (g.T,)


# ---------------------------------------------------------------------------
# reductions and structural ops


def _norm_axis(axis: int, ndim: int) -> int:
    if not -ndim <= axis < ndim:
        raise ShapeError(f"axis {axis} out of range for rank {ndim}")
    return axis % ndim


def reduce(kind: str, x, axis: Optional[int] = None) -> Tensor:
    """Sum or mean over one axis, or over all elements when ``axis`` is None."""
    x = _as_tensor(x)
    if kind not in ("sum", "mean"):
        raise ValueError(f"unknown reduction {kind!r}")
    if axis is None:
        out = x.data.sum() if kind == "sum" else x.data.mean()
        return _record(kind, np.asarray(out), (x,), None)
    ax = _norm_axis(axis, x.ndim)
    out = x.data.sum(axis=ax) if kind == "sum" else x.data.mean(axis=ax)
    return _record(kind, out, (x,), ax)


def _reduce_bw(node, g, scale):
    x = node.inputs[0]
    ax = node.ctx
    if ax is not None:
        g = np.expand_dims(g, ax)
    out = np.broadcast_to(g, x.data.shape)
    return (out * scale if scale != 1.0 else out.copy(),)


@_rule("sum")
def _sum_bw(node, g):
    return _reduce_bw(node, g, 1.0)


@_rule("mean")
def _mean_bw(node, g):
    x = node.inputs[0]
    count = x.data.size if node.ctx is None else x.data.shape[node.ctx]
    return _reduce_bw(node, g, 1.0 / count if count else 0.0)


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    """Join tensors along ``axis``; all other dimensions must agree."""
    ts = tuple(_as_tensor(t) for t in tensors)
    if not ts:
        raise ShapeError("concat of an empty list")
    nd = ts[0].ndim
    if nd == 0:
        raise ShapeError("cannot concatenate scalars")
    ax = _norm_axis(axis, nd)
    ref = ts[0].shape
    for t in ts[1:]:
        if t.ndim != nd or t.shape[:ax] != ref[:ax] or t.shape[ax + 1:] != ref[ax + 1:]:
            raise ShapeError(f"concat: incompatible shapes {ref} and {t.shape} on axis {axis}")
    sizes = [t.shape[ax] for t in ts]
    out = np.concatenate([t.data for t in ts], axis=ax)
    return _record("concat", out, ts, (ax, sizes))


@_rule("concat")
def _concat_bw(node, g):
    ax, sizes = node.ctx
    bounds = np.cumsum(sizes)[:-1]
    return tuple(np.split(g, bounds, axis=ax))


def slice_(x, start: int, stop: int, axis: int = -1) -> Tensor:
    """Copy of ``x[start:stop]`` along ``axis``."""
    x = _as_tensor(x)
    if x.ndim == 0:
        raise ShapeError("cannot slice a scalar")
    ax = _norm_axis(axis, x.ndim)
    n = x.shape[ax]
    if not 0 <= start <= stop <= n:
        raise IndexError(f"slice {start}:{stop} out of bounds for axis of length {n}")
    idx = (slice(None),) * ax + (slice(start, stop),)
    return _record("slice", x.data[idx].copy(), (x,), (idx,))


@_rule("slice")
def _slice_bw(node, g):
    (idx,) = node.ctx
    out = np.zeros_like(node.inputs[0].data)
    out[idx] = g
    return (out,)


def split(x, sizes: Sequence[int], axis: int = -1) -> List[Tensor]:
    """Cut ``x`` into consecutive pieces of the given sizes along ``axis``.

    Recorded as a single node whose backward writes every piece's gradient
    into one buffer.
    """
    x = _as_tensor(x)
    if x.ndim == 0:
        raise ShapeError("cannot split a scalar")
    ax = _norm_axis(axis, x.ndim)
    if any(s < 0 for s in sizes) or sum(sizes) != x.shape[ax]:
        raise ShapeError(f"split sizes {list(sizes)} do not add up to {x.shape[ax]}")
    bounds = np.cumsum(sizes)[:-1]
    pieces = np.split(x.data, bounds, axis=ax)
    st = _STATE
    req = st.enabled and x.requires_grad
    outs = tuple(Tensor._from_op(p, req) for p in pieces)
    if req:
        st.tapes[-1].nodes.append(_Node("split", (x,), outs, (ax, bounds)))
    return list(outs)


@_rule("split")
def _split_bw(node, gs):
    ax, bounds = node.ctx
    x = node.inputs[0]
    if all(g is not None for g in gs):
        return (np.concatenate(gs, axis=ax),)
    out = np.zeros_like(x.data)
    for piece, g in zip(np.split(out, bounds, axis=ax), gs):
        if g is not None:
            piece[...] = g
    return (out,)


def concat_slice(kind: str, *args, **kwargs) -> Tensor:
    """Dispatch to :func:`concat` or :func:`slice_` by name."""
    if kind == "concat":
        return concat(*args, **kwargs)
    if kind == "slice":
        return slice_(*args, **kwargs)
    raise ValueError(f"unknown structural op {kind!r}")


def reshape(x, shape) -> Tensor:
    x = _as_tensor(x)
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(str(exc)) from None
    return _record("reshape", out, (x,))


@_rule("reshape")
def _reshape_bw(node, g):
    return (g.reshape(node.inputs[0].data.shape),)


def detach(x) -> Tensor:
    """Same values, cut from the graph."""
    x = _as_tensor(x)
    return Tensor._from_op(x.data, False)


# ---------------------------------------------------------------------------
# backward pass


def backward(loss: Tensor, inputs: Optional[Iterable[Tensor]] = None) -> Dict[Tensor, np.ndarray]:
    """Reverse-mode sweep from a scalar ``loss`` over the active tape.

    Returns a map from each reached leaf tensor to its gradient and adds the
    same gradient into ``tensor.grad``.  When ``inputs`` is given, the map
    covers exactly those tensors, with zero arrays for any the loss does not
    depend on.  The tape is cleared afterwards.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = current_tape()
    if not loss.requires_grad:
        tape.clear()
        raise AutodiffError("loss does not depend on any tensor that requires a gradient")
    grads: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: Dict[int, Tensor] = {}
    if loss._leaf:
        leaves[id(loss)] = loss
    rules = BACKWARD_RULES
    pop = grads.pop
    get = grads.get
    try:
        for node in reversed(tape.nodes):
            out = node.out
            if out.__class__ is tuple:
                g = [pop(id(o), None) for o in out]
                if all(gi is None for gi in g):
                    continue
            else:
                g = pop(id(out), None)
                if g is None:
                    continue
            for t, gi in zip(node.inputs, rules[node.op](node, g)):
                if gi is None or not t.requires_grad:
                    continue
                k = id(t)
                prev = get(k)
                if prev is None:
                    grads[k] = gi
                    if t._leaf:
                        leaves[k] = t
                else:
                    grads[k] = prev + gi
    finally:
        tape.clear()
    result: Dict[Tensor, np.ndarray] = {}
    for k, t in leaves.items():
        g = grads[k]
        t.grad = g.copy() if t.grad is None else t.grad + g
        result[t] = g
    if inputs is not None:
        result = {t: result[t] if t in result else np.zeros_like(t.data) for t in inputs}
    return result


# ---------------------------------------------------------------------------
# finite-difference checking


def _scalar_value(out) -> float:
    v = out.data if isinstance(out, Tensor) else np.asarray(out)
    if v.size != 1:
        raise ShapeError("grad_check needs a scalar-valued function")
    v = float(v.reshape(-1)[0])
    if not np.isfinite(v):
        raise DomainError("function is not finite at a perturbed point")
    return v


def _compare(analytic: np.ndarray, numeric: np.ndarray) -> float:
    if analytic.size == 0:
        return 0.0
    return float(np.max(np.abs(analytic - numeric) / (1.0 + np.abs(numeric))))


def _central_difference(f: Callable[[], Tensor], t: Tensor, eps: float) -> np.ndarray:
    num = np.zeros_like(t.data)
    flat = t.data.reshape(-1)
    nflat = num.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = _scalar_value(f())
            flat[i] = orig - eps
            fm = _scalar_value(f())
            flat[i] = orig
            nflat[i] = (fp - fm) / (2.0 * eps)
    return num


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-6) -> float:
    """Max over coordinates of ``|autodiff - central difference| / (1 + |central difference|)``."""
    if not 1e-7 <= eps <= 1e-3:
        raise ValueError("eps must lie in [1e-7, 1e-3]")
    x.requires_grad = True
    with Tape():
        out = f(x)
        _scalar_value(out)
        analytic = backward(out, inputs=[x])[x]
    return _compare(analytic, _central_difference(lambda: f(x), x, eps))


def grad_check_tensors(
    f: Callable[[], Tensor], tensors: Sequence[Tensor], eps: float = 1e-6
) -> List[float]:
    """Per-tensor max relative error for a closure ``f`` over several leaf tensors."""
    if not 1e-7 <= eps <= 1e-3:
        raise ValueError("eps must lie in [1e-7, 1e-3]")
    with Tape():
        out = f()
        _scalar_value(out)
        grads = backward(out, inputs=tensors)
    return [_compare(grads[t], _central_difference(f, t, eps)) for t in tensors]
