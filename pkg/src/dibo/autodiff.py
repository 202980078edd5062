"""Reverse-mode automatic differentiation on float64 numpy arrays.

A small tape-based tracer in the style of HIPS autograd. Values are plain
``numpy.ndarray``; traced values are wrapped in :class:`Box`. Adjoint rules
are themselves written in terms of the traced primitives, so one level of
nesting works: you can take the gradient of a function that internally
computes vector-Jacobian products (needed to differentiate a Hutchinson
divergence estimate through an ODE solve). Nesting deeper than two tapes is
rejected at tape construction.

Arrays are treated as immutable. Everything is single-threaded and
deterministic: identical inputs produce bitwise identical gradients.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import erf as _erf_np

MAX_TAPE_DEPTH = 2

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)
_TWO_OVER_SQRT_PI = 2.0 / np.sqrt(np.pi)


class AutodiffError(Exception):
    """Raised for misuse of the tracing machinery."""


class NonFiniteError(AutodiffError):
    """Raised when a non-finite value is produced; names the primitive."""


_TAPES: list["Tape"] = []


class Tape:
    """One tracing level. Holds boxes in creation (topological) order."""

    __slots__ = ("level", "nodes")

    def __init__(self, level: int):
        self.level = level
        self.nodes: list[Box] = []


class Box:
    """A traced value: numpy array data plus the tape bookkeeping.

    ``value`` may itself be a Box of a lower tape when tapes are nested.
    ``parents`` is a tuple of (parent_box, vjp_closure) pairs.
    """

    __slots__ = ("value", "tape", "parents", "op")

    # Refuse silent consumption by numpy ufuncs (np.exp(box) etc. must fail
    # loudly instead of degrading to an object array).
    __array_ufunc__ = None

    def __init__(self, value, tape: Tape, parents: tuple, op: str):
        self.value = value
        self.tape = tape
        self.parents = parents
        self.op = op
        tape.nodes.append(self)

    @property
    def shape(self) -> tuple:
        return shape_of(self)

    @property
    def ndim(self) -> int:
        return len(shape_of(self))

    def __repr__(self):
        return f"Box(op={self.op!r}, level={self.tape.level}, shape={self.shape})"

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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return power(self, p)


def shape_of(x) -> tuple:
    while isinstance(x, Box):
        x = x.value
    return np.shape(x)


def raw_value(x):
    """Strip all boxes down to the underlying ndarray."""
    while isinstance(x, Box):
        x = x.value
    return x


def _top_tape(args):
    top = None
    for a in args:
        if isinstance(a, Box) and (top is None or a.tape.level > top.level):
            top = a.tape
    return top


def primitive(name: str, raw, make_vjps):
    """Wrap a raw numpy function as a traceable primitive.

    ``make_vjps(out, *argvals, **kw)`` returns a list of
    ``(arg_index, vjp_closure)`` pairs; closures receive the output cotangent
    and must be written with traced primitives so they can themselves be
    differentiated by an outer tape.
    """

    def op(*args, **kw):
        tape = _top_tape(args)
        if tape is None:
            return raw(*args, **kw)
        vals = tuple(
            a.value if isinstance(a, Box) and a.tape is tape else a for a in args
        )
        out = op(*vals, **kw)
        vjps = make_vjps(out, *vals, **kw)
        parents = tuple(
            (args[i], fn)
            for i, fn in vjps
            if isinstance(args[i], Box) and args[i].tape is tape
        )
        return Box(out, tape, parents, name)

    op.__name__ = name
    return op


def _unbroadcast(g, target_shape: tuple):
    """Sum ``g`` down to ``target_shape`` (adjoint of numpy broadcasting)."""
    gshape = shape_of(g)
    if gshape == target_shape:
        return g
    while len(shape_of(g)) > len(target_shape):
        g = asum(g, axis=0)
    axes = tuple(
        i for i, (gs, ts) in enumerate(zip(shape_of(g), target_shape)) if ts == 1 and gs != 1
    )
    if axes:
        g = asum(g, axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------

add = primitive(
    "add",
    lambda a, b: np.add(a, b),
    lambda out, a, b: [
        (0, lambda g: _unbroadcast(g, shape_of(a))),
        (1, lambda g: _unbroadcast(g, shape_of(b))),
    ],
)

sub = primitive(
    "sub",
    lambda a, b: np.subtract(a, b),
    lambda out, a, b: [
        (0, lambda g: _unbroadcast(g, shape_of(a))),
        (1, lambda g: _unbroadcast(neg(g), shape_of(b))),
    ],
)

mul = primitive(
    "mul",
    lambda a, b: np.multiply(a, b),
    lambda out, a, b: [
        (0, lambda g: _unbroadcast(mul(g, b), shape_of(a))),
        (1, lambda g: _unbroadcast(mul(g, a), shape_of(b))),
    ],
)

div = primitive(
    "div",
    lambda a, b: np.divide(a, b),
    lambda out, a, b: [
        (0, lambda g: _unbroadcast(div(g, b), shape_of(a))),
        (1, lambda g: _unbroadcast(neg(div(mul(g, a), mul(b, b))), shape_of(b))),
    ],
)

neg = primitive(
    "neg",
    lambda a: np.negative(a),
    lambda out, a: [(0, lambda g: neg(g))],
)

exp = primitive(
    "exp",
    lambda a: np.exp(a),
    lambda out, a: [(0, lambda g: mul(g, out))],
)

log = primitive(
    "log",
    lambda a: np.log(a),
    lambda out, a: [(0, lambda g: div(g, a))],
)

sqrt = primitive(
    "sqrt",
    lambda a: np.sqrt(a),
    lambda out, a: [(0, lambda g: div(g, mul(2.0, out)))],
)

erf = primitive(
    "erf",
    lambda a: _erf_np(a),
    lambda out, a: [(0, lambda g: mul(g, mul(_TWO_OVER_SQRT_PI, exp(neg(mul(a, a))))))],
)

power = primitive(
    "power",
    lambda a, p: np.power(a, p),
    lambda out, a, p: [(0, lambda g: mul(g, mul(p, power(a, p - 1))))],
)


def _gelu_raw(a):
    return 0.5 * a * (1.0 + _erf_np(a * _INV_SQRT2))


def _gelu_vjps(out, a):
    def vjp(g):
        # d/dx [x * Phi(x)] = Phi(x) + x * phi(x), exact erf form
        cdf = mul(0.5, add(1.0, erf(mul(a, _INV_SQRT2))))
        pdf = mul(_INV_SQRT_2PI, exp(mul(-0.5, mul(a, a))))
        return mul(g, add(cdf, mul(a, pdf)))

    return [(0, vjp)]


gelu = primitive("gelu", _gelu_raw, _gelu_vjps)

matmul = primitive(
    "matmul",
    lambda a, b: np.matmul(a, b),
    lambda out, a, b: [
        (0, lambda g: matmul(g, transpose(b))),
        (1, lambda g: matmul(transpose(a), g)),
    ],
)

transpose = primitive(
    "transpose",
    lambda a: np.transpose(a),
    lambda out, a: [(0, lambda g: transpose(g))],
)


def _asum_vjps(out, a, axis=None, keepdims=False):
    ashape = shape_of(a)

    def vjp(g):
        if axis is not None and not keepdims:
            kshape = list(ashape)
            for ax in axis if isinstance(axis, tuple) else (axis,):
                kshape[ax] = 1
            g = reshape(g, tuple(kshape))
        return broadcast_to(g, ashape)

    return [(0, vjp)]


asum = primitive(
    "asum",
    lambda a, axis=None, keepdims=False: np.sum(a, axis=axis, keepdims=keepdims),
    _asum_vjps,
)

broadcast_to = primitive(
    "broadcast_to",
    lambda a, shp: np.broadcast_to(a, shp),
    lambda out, a, shp: [(0, lambda g: _unbroadcast(g, shape_of(a)))],
)

reshape = primitive(
    "reshape",
    lambda a, shp: np.reshape(a, shp),
    lambda out, a, shp: [(0, lambda g: reshape(g, shape_of(a)))],
)


def _extract_raw(a, axis, start, stop):
    idx = [slice(None)] * np.ndim(a)
    idx[axis] = slice(start, stop)
    return a[tuple(idx)]


extract = primitive(
    "extract",
    _extract_raw,
    lambda out, a, axis, start, stop: [
        (0, lambda g: pad_zeros(g, axis, start, shape_of(a)[axis] - stop))
    ],
)


def _pad_zeros_raw(a, axis, before, after):
    widths = [(0, 0)] * np.ndim(a)
    widths[axis] = (before, after)
    return np.pad(a, widths)


pad_zeros = primitive(
    "pad_zeros",
    _pad_zeros_raw,
    lambda out, a, axis, before, after: [
        (0, lambda g: extract(g, axis, before, before + shape_of(a)[axis]))
    ],
)


def _scatter_rows_raw(g, idx, n):
    out = np.zeros((n,) + np.shape(g)[1:])
    np.add.at(out, idx, g)
    return out


take_rows = primitive(
    "take_rows",
    lambda a, idx: np.take(a, idx, axis=0),
    lambda out, a, idx: [(0, lambda g: scatter_rows(g, idx, shape_of(a)[0]))],
)

scatter_rows = primitive(
    "scatter_rows",
    _scatter_rows_raw,
    lambda out, a, idx, n: [(0, lambda g: take_rows(g, idx))],
)


def _concat_vjps(out, *arrays, axis=0):
    vjps = []
    start = 0
    for i, a in enumerate(arrays):
        width = shape_of(a)[axis]
        vjps.append((i, (lambda s, w: lambda g: extract(g, axis, s, s + w))(start, width)))
        start += width
    return vjps


concat = primitive(
    "concat",
    lambda *arrays, axis=0: np.concatenate(arrays, axis=axis),
    _concat_vjps,
)


def mean(a, axis=None, keepdims=False):
    n = np.prod(shape_of(a)) if axis is None else _axis_size(shape_of(a), axis)
    return div(asum(a, axis=axis, keepdims=keepdims), float(n))


def _axis_size(shp, axis):
    if isinstance(axis, tuple):
        out = 1
        for ax in axis:
            out *= shp[ax]
        return out
    return shp[axis]


def square(a):
    return mul(a, a)


# ---------------------------------------------------------------------------
# tracing entry points
# ---------------------------------------------------------------------------


def _as_leaf_list(x):
    if isinstance(x, (list, tuple)):
        return list(x), True
    return [x], False


def make_vjp(f, x):
    """Trace ``f`` at ``x`` and return ``(value, vjp_fn)``.

    ``x`` is an array or a list of arrays. ``vjp_fn(cotangent)`` may be
    called repeatedly; it returns gradients matching the structure of ``x``.
    """
    if len(_TAPES) >= MAX_TAPE_DEPTH:
        raise AutodiffError(
            f"tape nesting depth is limited to {MAX_TAPE_DEPTH}; "
            "a third nested gradient was requested"
        )
    leaves, is_list = _as_leaf_list(x)
    tape = Tape(level=len(_TAPES) + 1)
    _TAPES.append(tape)
    try:
        roots = [Box(v, tape, (), "input") for v in leaves]
        out = f(roots if is_list else roots[0])
    finally:
        _TAPES.pop()

    def vjp_fn(cotangent):
        if isinstance(out, Box) and out.tape is tape:
            adjoints = _backward(tape, out, cotangent)
        else:
            adjoints = {}
        grads = []
        for root in roots:
            g = adjoints.get(id(root))
            if g is None:
                g = np.zeros(shape_of(root))
            grads.append(g)
        return grads if is_list else grads[0]

    value = out.value if isinstance(out, Box) and out.tape is tape else out
    return value, vjp_fn


def _backward(tape: Tape, out: Box, seed):
    adjoints = {id(out): seed}
    for node in reversed(tape.nodes):
        g = adjoints.get(id(node))
        if g is None:
            continue
        for parent, vjp_closure in node.parents:
            contrib = vjp_closure(g)
            pid = id(parent)
            held = adjoints.get(pid)
            adjoints[pid] = contrib if held is None else add(held, contrib)
        if node.op != "input":
            del adjoints[id(node)]  # free the frontier; inputs keep their grads
    return adjoints


def _first_nonfinite_op(tape: Tape):
    for node in tape.nodes:
        v = raw_value(node.value)
        if not np.all(np.isfinite(v)):
            return node.op
    return None


def grad(f, x):
    """Gradient of a scalar-valued ``f`` at ``x`` (array or list of arrays)."""
    return value_and_grad(f, x)[1]


def value_and_grad(f, x):
    if len(_TAPES) >= MAX_TAPE_DEPTH:
        raise AutodiffError(
            f"tape nesting depth is limited to {MAX_TAPE_DEPTH}; "
            "a third nested gradient was requested"
        )
    leaves, is_list = _as_leaf_list(x)
    tape = Tape(level=len(_TAPES) + 1)
    _TAPES.append(tape)
    try:
        roots = [Box(v, tape, (), "input") for v in leaves]
        out = f(roots if is_list else roots[0])
    finally:
        _TAPES.pop()

    out_shape = shape_of(out)
    if int(np.prod(out_shape)) != 1:
        raise AutodiffError(f"grad requires a scalar output, got shape {out_shape}")
    out_raw = raw_value(out)
    if not np.all(np.isfinite(out_raw)):
        culprit = _first_nonfinite_op(tape)
        raise NonFiniteError(
            f"non-finite output of primitive '{culprit}'" if culprit else "non-finite function value"
        )

    if isinstance(out, Box) and out.tape is tape:
        adjoints = _backward(tape, out, np.ones(out_shape))
    else:
        adjoints = {}
    grads = []
    for root in roots:
        g = adjoints.get(id(root))
        if g is None:
            g = np.zeros(shape_of(root))
        if not np.all(np.isfinite(raw_value(g))):
            culprit = _first_nonfinite_op(tape)
            raise NonFiniteError(
                f"non-finite gradient; first non-finite primitive: '{culprit}'"
            )
        grads.append(g)
    value = out.value if isinstance(out, Box) and out.tape is tape else out
    return value, (grads if is_list else grads[0])


def vjp(f, x, cotangent):
    """cotangent^T @ Jacobian of ``f`` at ``x``; differentiable in ``x``."""
    y, vjp_fn = make_vjp(f, x)
    yshape = shape_of(y)
    cshape = shape_of(cotangent)
    if yshape != cshape:
        raise AutodiffError(f"cotangent shape {cshape} does not match output shape {yshape}")
    return vjp_fn(cotangent)


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    """Adam accumulator state; ``m``/``v`` mirror the parameter shapes."""

    step: int
    m: list[np.ndarray]
    v: list[np.ndarray]
    lr: float
    b1: float = 0.9
    b2: float = 0.999
    eps: float = 1e-8


def adam_init(params: list[np.ndarray], lr: float, b1: float = 0.9, b2: float = 0.999,
              eps: float = 1e-8) -> AdamState:
    if lr <= 0:
        raise ValueError("lr must be positive")
    return AdamState(
        step=0,
        m=[np.zeros_like(p) for p in params],
        v=[np.zeros_like(p) for p in params],
        lr=lr, b1=b1, b2=b2, eps=eps,
    )


def adam_step(params: list[np.ndarray], grads: list[np.ndarray], state: AdamState,
              names: list[str] | None = None):
    """One bias-corrected Adam update; returns (new_params, new_state)."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ValueError("params/grads/state length mismatch")
    t = state.step + 1
    new_params, new_m, new_v = [], [], []
    for i, (p, g) in enumerate(zip(params, grads)):
        g = raw_value(g)
        if not np.all(np.isfinite(g)):
            label = names[i] if names else f"param[{i}]"
            raise NonFiniteError(f"NaN/inf gradient for parameter block {label}")
        m = state.b1 * state.m[i] + (1.0 - state.b1) * g
        v = state.b2 * state.v[i] + (1.0 - state.b2) * g * g
        mhat = m / (1.0 - state.b1 ** t)
        vhat = v / (1.0 - state.b2 ** t)
        new_params.append(p - state.lr * mhat / (np.sqrt(vhat) + state.eps))
        new_m.append(m)
        new_v.append(v)
    return new_params, AdamState(t, new_m, new_v, state.lr, state.b1, state.b2, state.eps)
