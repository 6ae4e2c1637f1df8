"""Minimal reverse-mode automatic differentiation over dense numpy arrays.

Every forward computation in the package is expressed through :func:`apply`
with one of a closed set of primitive kinds.  Each primitive stores what its
backward rule needs on a :class:`Node`; :func:`backward` linearises the graph
reachable from a scalar loss into a :class:`Tape` (inputs before outputs) and
walks it once in reverse.

Storage is numpy C order (row-major), so ``values.ravel()`` is the flat layout
used by the checkpoint format.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

PRIMITIVES = (
    "add",
    "sub",
    "mul",
    "scale",
    "matmul",
    "transpose",
    "concat",
    "slice",
    "gather",
    "sum",
    "mean",
    "exp",
    "log",
    "tanh",
    "sigmoid",
    "relu",
    "softmax",
    "layernorm",
    "masked_fill",
    "sq_l2",
    "lstm",
)

LAYERNORM_EPS = 1e-5

# Finite stand-in for -inf in masked attention logits; exp() of it underflows
# to exactly zero after max-subtraction in both float32 and float64.
MASK_VALUE = -1e9

_check_finite = True


def set_finite_checks(enabled: bool) -> None:
    """Toggle the non-finite input guard applied by every primitive."""
    global _check_finite
    _check_finite = bool(enabled)


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


@dataclass(eq=False)
class Node:
    kind: str
    inputs: tuple
    output: "Tensor"
    saved: dict
    grad_fn: Callable


@dataclass
class Tape:
    """Topologically ordered nodes reachable from one loss."""

    nodes: list = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.nodes)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "node")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name
        self.node: Node | None = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def values(self) -> np.ndarray:
        """Flat row-major copy of the data."""
        return self.data.ravel().copy()

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False, name=self.name)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag}, requires_grad={self.requires_grad})"

    # Operator sugar over the primitives.
    def __add__(self, other):
        return add(self, _as_tensor(other, self.dtype))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _as_tensor(other, self.dtype))

    def __rsub__(self, other):
        return sub(_as_tensor(other, self.dtype), self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, other)
        return mul(self, _as_tensor(other, self.dtype))

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self):
        return transpose(self)


def _as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def constant(x, dtype=None) -> Tensor:
    return Tensor(np.array(x, dtype=dtype))


def parameter(x, name: str | None = None, dtype=None) -> Tensor:
    return Tensor(np.array(x, dtype=dtype), requires_grad=True, name=name)


# ---------------------------------------------------------------------------
# Forward and backward rules.  Each forward returns (output array, saved) and
# each backward maps (upstream grad, inputs, saved, attrs) to input grads.
# ---------------------------------------------------------------------------


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


def _check_broadcast(kind, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{kind}: shapes {a.shape} and {b.shape} do not broadcast") from None


def _fw_add(xs, attrs):
    a, b = xs
    _check_broadcast("add", a, b)
    return a + b, None


def _bw_add(g, xs, saved, attrs):
    a, b = xs
    return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)


def _fw_sub(xs, attrs):
    a, b = xs
    _check_broadcast("sub", a, b)
    return a - b, None


def _bw_sub(g, xs, saved, attrs):
    a, b = xs
    return _unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)


def _fw_mul(xs, attrs):
    a, b = xs
    _check_broadcast("mul", a, b)
    return a * b, None


def _bw_mul(g, xs, saved, attrs):
    a, b = xs
    return _unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)


def _fw_scale(xs, attrs):
    (a,) = xs
    return a * a.dtype.type(attrs["c"]), None


def _bw_scale(g, xs, saved, attrs):
    return (g * g.dtype.type(attrs["c"]),)


def _fw_matmul(xs, attrs):
    a, b = xs
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions disagree for shapes {a.shape} and {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError(f"matmul: batch dimensions of {a.shape} and {b.shape} do not broadcast") from None
    if b.ndim == 2:
        return row_stable_matmul(a, b), None
    return a @ b, None


ROW_BLOCK = 32


def row_stable_matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """``a @ b`` for 2-D ``b``, with each output row independent of the others.

    BLAS picks kernels by matrix shape, so the bits of one row of ``a @ b``
    can change with the number of rows in ``a``.  Rows are therefore folded
    into fixed blocks of :data:`ROW_BLOCK` (zero-padding the last), and every
    GEMM call has the same shape.  Exact online causality relies on this.
    """
    a2 = a.reshape(-1, a.shape[-1])
    M = a2.shape[0]
    pad = (-M) % ROW_BLOCK
    if pad or M == 0:
        a2 = np.concatenate([a2, np.zeros((pad or ROW_BLOCK, a2.shape[1]), dtype=a2.dtype)])
    out = (a2.reshape(-1, ROW_BLOCK, a2.shape[1]) @ b).reshape(-1, b.shape[1])[:M]
    return out.reshape(a.shape[:-1] + (b.shape[1],))


def _bw_matmul(g, xs, saved, attrs):
    a, b = xs
    if b.ndim == 2 and a.ndim > 2:
        g2 = g.reshape(-1, g.shape[-1])
        ga = (g2 @ b.T).reshape(a.shape)
        gb = a.reshape(-1, a.shape[-1]).T @ g2
        return ga, gb
    ga = g @ np.swapaxes(b, -1, -2)
    gb = np.swapaxes(a, -1, -2) @ g
    return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)


def _fw_transpose(xs, attrs):
    (a,) = xs
    axes = attrs.get("axes")
    if axes is None:
        axes = tuple(range(a.ndim - 2)) + (a.ndim - 1, a.ndim - 2)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError(f"transpose: axes {axes} invalid for shape {a.shape}")
    return np.ascontiguousarray(np.transpose(a, axes)), {"axes": axes}


def _bw_transpose(g, xs, saved, attrs):
    return (np.transpose(g, np.argsort(saved["axes"])),)


def _fw_concat(xs, attrs):
    axis = attrs.get("axis", -1)
    ref = xs[0]
    ax = axis % ref.ndim
    for x in xs[1:]:
        if x.ndim != ref.ndim or any(x.shape[i] != ref.shape[i] for i in range(ref.ndim) if i != ax):
            raise ShapeError(f"concat: shapes {[y.shape for y in xs]} differ off axis {axis}")
    sizes = [x.shape[ax] for x in xs]
    return np.concatenate(xs, axis=ax), {"ax": ax, "splits": np.cumsum(sizes)[:-1]}


def _bw_concat(g, xs, saved, attrs):
    return tuple(np.split(g, saved["splits"], axis=saved["ax"]))


def _fw_slice(xs, attrs):
    (a,) = xs
    key = attrs["key"]
    try:
        out = a[key]
    except IndexError as exc:
        raise ShapeError(f"slice: {key!r} invalid for shape {a.shape}") from exc
    return np.array(out), None


def _bw_slice(g, xs, saved, attrs):
    (a,) = xs
    out = np.zeros_like(a)
    out[attrs["key"]] = g
    return (out,)


def _fw_gather(xs, attrs):
    (table,) = xs
    ids = attrs["ids"]
    if table.ndim != 2:
        raise ShapeError(f"gather: table must be 2-D, got shape {table.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError(f"gather: ids outside [0, {table.shape[0]}) for table of shape {table.shape}")
    return table[ids], None


def _bw_gather(g, xs, saved, attrs):
    (table,) = xs
    out = np.zeros_like(table)
    np.add.at(out, attrs["ids"].ravel(), g.reshape(-1, table.shape[1]))
    return (out,)


def _fw_sum(xs, attrs):
    (a,) = xs
    return np.sum(a, axis=attrs.get("axis"), keepdims=attrs.get("keepdims", False)), None


def _expand_reduced(g, shape, axis, keepdims):
    if axis is not None and not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, shape)


def _bw_sum(g, xs, saved, attrs):
    (a,) = xs
    return (np.array(_expand_reduced(g, a.shape, attrs.get("axis"), attrs.get("keepdims", False))),)


def _fw_mean(xs, attrs):
    (a,) = xs
    return np.mean(a, axis=attrs.get("axis"), keepdims=attrs.get("keepdims", False)), None


def _bw_mean(g, xs, saved, attrs):
    (a,) = xs
    axis = attrs.get("axis")
    n = a.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    g = _expand_reduced(g, a.shape, axis, attrs.get("keepdims", False))
    return (np.array(g / a.dtype.type(n)),)


def _fw_exp(xs, attrs):
    out = np.exp(xs[0])
    return out, {"out": out}


def _bw_exp(g, xs, saved, attrs):
    return (g * saved["out"],)


def _fw_log(xs, attrs):
    (a,) = xs
    floor = attrs.get("floor")
    if floor is not None:
        clamped = a < floor
        return np.log(np.maximum(a, a.dtype.type(floor))), {"clamped": clamped}
    if np.any(a <= 0):
        raise ValueError("log: non-positive input; pass floor= to clamp")
    return np.log(a), {"clamped": None}


def _bw_log(g, xs, saved, attrs):
    (a,) = xs
    clamped = saved["clamped"]
    if clamped is None:
        return (g / a,)
    safe = np.where(clamped, 1.0, a)
    return (np.where(clamped, 0.0, g / safe).astype(a.dtype),)


def _fw_tanh(xs, attrs):
    out = np.tanh(xs[0])
    return out, {"out": out}


def _bw_tanh(g, xs, saved, attrs):
    y = saved["out"]
    return (g * (1 - y * y),)


def _sigmoid(x):
    # Two-branch form never overflows exp().
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _fw_sigmoid(xs, attrs):
    out = _sigmoid(xs[0])
    return out, {"out": out}


def _bw_sigmoid(g, xs, saved, attrs):
    y = saved["out"]
    return (g * y * (1 - y),)


def _fw_relu(xs, attrs):
    (a,) = xs
    return np.maximum(a, 0), None


def _bw_relu(g, xs, saved, attrs):
    return (g * (xs[0] > 0),)


def _softmax(a, axis):
    shifted = a - np.max(a, axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=axis, keepdims=True)


def _fw_softmax(xs, attrs):
    out = _softmax(xs[0], attrs.get("axis", -1))
    return out, {"out": out}


def _bw_softmax(g, xs, saved, attrs):
    y = saved["out"]
    axis = attrs.get("axis", -1)
    return (y * (g - np.sum(g * y, axis=axis, keepdims=True)),)


def _fw_layernorm(xs, attrs):
    x, gain, bias = xs
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layernorm: gain {gain.shape} / bias {bias.shape} do not match feature size {d}")
    eps = x.dtype.type(attrs.get("eps", LAYERNORM_EPS))
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    return xhat * gain + bias, {"xhat": xhat, "inv": inv}


def _bw_layernorm(g, xs, saved, attrs):
    x, gain, bias = xs
    xhat, inv = saved["xhat"], saved["inv"]
    lead = tuple(range(x.ndim - 1))
    ggain = np.sum(g * xhat, axis=lead)
    gbias = np.sum(g, axis=lead)
    gx_hat = g * gain
    d = x.shape[-1]
    gx = (inv / d) * (
        d * gx_hat - gx_hat.sum(axis=-1, keepdims=True) - xhat * (gx_hat * xhat).sum(axis=-1, keepdims=True)
    )
    return gx, ggain, gbias


def _fw_masked_fill(xs, attrs):
    (a,) = xs
    mask = attrs["mask"]
    try:
        mask_b = np.broadcast_to(mask, a.shape)
    except ValueError:
        raise ShapeError(f"masked_fill: mask {np.shape(mask)} not broadcastable to {a.shape}") from None
    return np.where(mask_b, a.dtype.type(attrs["value"]), a), {"mask": mask_b}


def _bw_masked_fill(g, xs, saved, attrs):
    return (np.where(saved["mask"], 0.0, g).astype(g.dtype),)


def _fw_sq_l2(xs, attrs):
    a, b = xs
    if a.shape != b.shape:
        raise ShapeError(f"sq_l2: shapes {a.shape} and {b.shape} differ")
    diff = a - b
    return np.sum(diff * diff, axis=-1), {"diff": diff}


def _bw_sq_l2(g, xs, saved, attrs):
    gd = 2.0 * g[..., None] * saved["diff"]
    return gd, -gd


def _fw_lstm(xs, attrs):
    from hkd import kernels

    x, w_ih, w_hh, b = xs
    h, cache = kernels.lstm_forward(x, w_ih, w_hh, b)
    return h, {"cache": cache}


def _bw_lstm(g, xs, saved, attrs):
    from hkd import kernels

    x, w_ih, w_hh, b = xs
    return kernels.lstm_backward(g, x, w_ih, w_hh, saved["cache"])


_RULES: dict[str, tuple[Callable, Callable]] = {
    "add": (_fw_add, _bw_add),
    "sub": (_fw_sub, _bw_sub),
    "mul": (_fw_mul, _bw_mul),
    "scale": (_fw_scale, _bw_scale),
    "matmul": (_fw_matmul, _bw_matmul),
    "transpose": (_fw_transpose, _bw_transpose),
    "concat": (_fw_concat, _bw_concat),
    "slice": (_fw_slice, _bw_slice),
    "gather": (_fw_gather, _bw_gather),
    "sum": (_fw_sum, _bw_sum),
    "mean": (_fw_mean, _bw_mean),
    "exp": (_fw_exp, _bw_exp),
    "log": (_fw_log, _bw_log),
    "tanh": (_fw_tanh, _bw_tanh),
    "sigmoid": (_fw_sigmoid, _bw_sigmoid),
    "relu": (_fw_relu, _bw_relu),
    "softmax": (_fw_softmax, _bw_softmax),
    "layernorm": (_fw_layernorm, _bw_layernorm),
    "masked_fill": (_fw_masked_fill, _bw_masked_fill),
    "sq_l2": (_fw_sq_l2, _bw_sq_l2),
    "lstm": (_fw_lstm, _bw_lstm),
}
assert set(_RULES) == set(PRIMITIVES)


def apply(kind: str, inputs: Sequence[Tensor], **attrs) -> Tensor:
    """Evaluate primitive ``kind`` on ``inputs``; record it if any input needs grad.

    Inputs are never mutated.  Shape errors name the offending shapes; a
    non-finite input raises :class:`NonFiniteError`.
    """
    try:
        fw, bw = _RULES[kind]
    except KeyError:
        raise ValueError(f"unknown primitive {kind!r}") from None
    arrays = tuple(t.data for t in inputs)
    if _check_finite:
        for t in inputs:
            # One reduction catches NaN/inf; confirm elementwise only on failure.
            if not np.isfinite(np.add.reduce(t.data, axis=None)) and not np.isfinite(t.data).all():
                raise NonFiniteError(f"{kind}: non-finite input {t!r}")
    data, saved = fw(arrays, attrs)
    out = Tensor(data)
    if any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.node = Node(kind, tuple(inputs), out, {"saved": saved, "attrs": attrs}, bw)
    return out


def build_tape(loss: Tensor) -> Tape:
    """Nodes reachable from ``loss`` in topological order (inputs first)."""
    order: list[Node] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
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
        for inp in reversed(node.inputs):
            if inp.node is not None and id(inp.node) not in seen:
                stack.append((inp, False))
    return Tape(order)


def backward(loss: Tensor, leaves: Iterable[Tensor] | None = None) -> dict[Tensor, np.ndarray]:
    """Reverse sweep from a scalar ``loss``.

    Populates ``.grad`` on every ``requires_grad`` leaf reached and returns a
    map leaf -> gradient.  Leaves listed in ``leaves`` that the loss does not
    depend on receive exact zeros.  Gradients of tensors feeding several
    consumers are summed.
    """
    if loss.data.size != 1 or loss.data.ndim != 0:
        raise ShapeError(f"backward: loss must be a scalar, got shape {loss.shape}")
    tape = build_tape(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    found: dict[int, Tensor] = {}
    if loss.node is None and loss.requires_grad:
        found[id(loss)] = loss
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        in_grads = node.grad_fn(g, tuple(t.data for t in node.inputs), node.saved["saved"], node.saved["attrs"])
        for inp, gi in zip(node.inputs, in_grads):
            if not inp.requires_grad or gi is None:
                continue
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = np.asarray(gi, dtype=inp.dtype)
            if inp.node is None:
                found[key] = inp
    result: dict[Tensor, np.ndarray] = {}
    for key, leaf in found.items():
        g = grads.get(key, np.zeros_like(leaf.data))
        leaf.grad = g
        result[leaf] = g
    if leaves is not None:
        for leaf in leaves:
            if leaf not in result:
                leaf.grad = np.zeros_like(leaf.data)
                result[leaf] = leaf.grad
    return result


def grad_check(fn: Callable[..., Tensor], inputs: Sequence[Tensor], eps: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``fn`` maps the input tensors to a scalar tensor.  Relative error per
    coordinate is ``|a - n| / max(|a|, |n|, 1e-8)``.
    """
    for t in inputs:
        if not np.isfinite(t.data).all():
            raise NonFiniteError("grad_check: non-finite input")
        t.requires_grad = True
        t.grad = None
    out = fn(*inputs)
    if out.data.size != 1 or out.data.ndim != 0:
        raise ShapeError(f"grad_check: function must return a scalar, got shape {out.shape}")
    analytic = backward(out, leaves=inputs)
    worst = 0.0
    for t in inputs:
        a_grad = analytic[t]
        flat = t.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            up = float(fn(*inputs).data)
            flat[i] = orig - eps
            down = float(fn(*inputs).data)
            flat[i] = orig
            numeric = (up - down) / (2 * eps)
            a = float(a_grad.reshape(-1)[i])
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, err)
    return worst


# ---------------------------------------------------------------------------
# Thin functional wrappers.
# ---------------------------------------------------------------------------


def add(a, b):
    return apply("add", (a, b))


def sub(a, b):
    return apply("sub", (a, b))


def mul(a, b):
    return apply("mul", (a, b))


def scale(a, c):
    return apply("scale", (a,), c=float(c))


def matmul(a, b):
    return apply("matmul", (a, b))


def transpose(a, axes=None):
    return apply("transpose", (a,), axes=None if axes is None else tuple(axes))


def concat(xs, axis=-1):
    return apply("concat", tuple(xs), axis=axis)


def slice_(a, key):
    return apply("slice", (a,), key=key)


def gather(table, ids):
    return apply("gather", (table,), ids=np.asarray(ids, dtype=np.int64))


def sum_(a, axis=None, keepdims=False):
    return apply("sum", (a,), axis=axis, keepdims=keepdims)


def mean(a, axis=None, keepdims=False):
    return apply("mean", (a,), axis=axis, keepdims=keepdims)


def exp(a):
    return apply("exp", (a,))


def log(a, floor=None):
    return apply("log", (a,), floor=floor)


def tanh(a):
    return apply("tanh", (a,))


def sigmoid(a):
    return apply("sigmoid", (a,))


def relu(a):
    return apply("relu", (a,))


def softmax(a, axis=-1):
    return apply("softmax", (a,), axis=axis)


def layernorm(x, gain, bias, eps=LAYERNORM_EPS):
    return apply("layernorm", (x, gain, bias), eps=eps)


def masked_fill(a, mask, value=MASK_VALUE):
    return apply("masked_fill", (a,), mask=np.asarray(mask, dtype=bool), value=value)


def sq_l2(a, b):
    """Squared Euclidean distance over the last axis."""
    return apply("sq_l2", (a, b))


def lstm(x, w_ih, w_hh, b):
    """One unidirectional LSTM layer over ``x`` of shape (batch, time, in)."""
    return apply("lstm", (x, w_ih, w_hh, b))
