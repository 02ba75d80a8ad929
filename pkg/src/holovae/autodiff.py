"""Eager reverse-mode differentiation over numpy arrays.

A :class:`Tape` records every primitive applied to a :class:`Var`. Values are
computed immediately; ``Tape.backward`` walks the records in reverse and
accumulates vector-Jacobian products. Functions in this module accept any mix
of ``Var`` and plain arrays; with no ``Var`` among the inputs they fall
through to numpy, so the same model code serves training and inference.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .exceptions import NumericError, ShapeError, ValidationError


class Var:
    """Handle to a value recorded on a tape."""

    __slots__ = ("value", "tape", "index", "requires_grad")
    __array_ufunc__ = None  # make numpy defer to our reflected operators

    def __init__(self, value, tape, index, requires_grad):
        self.value = value
        self.tape = tape
        self.index = index
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def __repr__(self):
        return f"Var(#{self.index}, shape={self.shape})"

    def __add__(self, o):
        return add(self, o)

    def __radd__(self, o):
        return add(o, self)

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return sub(o, self)

    def __mul__(self, o):
        return mul(self, o)

    def __rmul__(self, o):
        return mul(o, self)

    def __truediv__(self, o):
        return div(self, o)

    def __rtruediv__(self, o):
        return div(o, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return power(self, p)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], tuple):
            shape = shape[0]
        return reshape(self, shape)


@dataclass
class Node:
    op: str
    inputs: tuple  # tape index per input, None where the input is a constant
    ctx: object
    params: dict = field(default_factory=dict)
    consts: tuple = ()


def value_of(x):
    return x.value if isinstance(x, Var) else x


# ---------------------------------------------------------------------------
# primitives: name -> (forward, vjp)
# forward(*values, **params) -> (out, ctx)
# vjp(g, ctx, values, needs, **params) -> tuple of input cotangents
# ---------------------------------------------------------------------------


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _add_vjp(g, ctx, vals, needs):
    return tuple(_unbroadcast(g, np.shape(v)) if n else None for v, n in zip(vals, needs))


def _sub_vjp(g, ctx, vals, needs):
    a, b = vals
    return (_unbroadcast(g, np.shape(a)) if needs[0] else None, _unbroadcast(-g, np.shape(b)) if needs[1] else None)


def _mul_vjp(g, ctx, vals, needs):
    a, b = vals
    return (_unbroadcast(g * b, np.shape(a)) if needs[0] else None, _unbroadcast(g * a, np.shape(b)) if needs[1] else None)


def _div_vjp(g, ctx, vals, needs):
    a, b = vals
    ga = _unbroadcast(g / b, np.shape(a)) if needs[0] else None
    gb = _unbroadcast(-g * a / (b * b), np.shape(b)) if needs[1] else None
    return ga, gb


def _einsum_parse(spec):
    ins, out = spec.replace(" ", "").split("->")
    return ins.split(","), out


def _einsum_vjp(g, ctx, vals, needs, spec):
    ins, out = _einsum_parse(spec)
    grads = []
    for i, (sub, need) in enumerate(zip(ins, needs)):
        if not need:
            grads.append(None)
            continue
        others = [s for j, s in enumerate(ins) if j != i]
        other_vals = [v for j, v in enumerate(vals) if j != i]
        avail = set(out).union(*others)
        kept = "".join(c for c in sub if c in avail)
        gi = np.einsum(",".join([out] + others) + "->" + kept, g, *other_vals, optimize=len(vals) > 2)
        if len(kept) != len(sub):
            # indices summed inside this operand alone: broadcast back
            for ax, c in enumerate(sub):
                if c not in avail:
                    gi = np.expand_dims(gi, ax)
            gi = np.broadcast_to(gi, np.shape(vals[i])).copy()
        grads.append(gi)
    return tuple(grads)


def _sum_fwd(x, axis=None, keepdims=False):
    return np.sum(x, axis=axis, keepdims=keepdims), None


def _sum_vjp(g, ctx, vals, needs, axis=None, keepdims=False):
    (x,) = vals
    shape = np.shape(x)
    if axis is not None and not keepdims:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        axes = tuple(a % len(shape) for a in axes)
        for a in sorted(axes):
            g = np.expand_dims(g, a)
    return (np.broadcast_to(g, shape).copy(),)


def _getitem_vjp(g, ctx, vals, needs, idx):
    out = np.zeros_like(vals[0])
    np.add.at(out, idx, g)
    return (out,)


def _concat_fwd(*xs, axis=0):
    return np.concatenate(xs, axis=axis), [np.shape(x)[axis] for x in xs]


def _concat_vjp(g, ctx, vals, needs, axis=0):
    splits = np.cumsum(ctx)[:-1]
    parts = np.split(g, splits, axis=axis)
    return tuple(p if n else None for p, n in zip(parts, needs))


def _logsumexp_fwd(x, axis=-1):
    m = np.max(x, axis=axis, keepdims=True)
    s = np.log(np.sum(np.exp(x - m), axis=axis, keepdims=True)) + m
    return np.squeeze(s, axis=axis), s


def _logsumexp_vjp(g, ctx, vals, needs, axis=-1):
    (x,) = vals
    return (np.expand_dims(g, axis) * np.exp(x - ctx),)


def _cross_vjp(g, ctx, vals, needs):
    a, b = vals
    return (np.cross(b, g) if needs[0] else None, np.cross(g, a) if needs[1] else None)


PRIMITIVES = {
    "add": (lambda a, b: (a + b, None), _add_vjp),
    "sub": (lambda a, b: (a - b, None), _sub_vjp),
    "mul": (lambda a, b: (a * b, None), _mul_vjp),
    "div": (lambda a, b: (a / b, None), _div_vjp),
    "neg": (lambda a: (-a, None), lambda g, c, v, n: (-g,)),
    "power": (lambda a, p: (a**p, None), lambda g, c, v, n, p: (g * p * v[0] ** (p - 1),)),
    "sqrt": (lambda a: ((s := np.sqrt(a)), s), lambda g, c, v, n: (g / (2.0 * c),)),
    "exp": (lambda a: ((e := np.exp(a)), e), lambda g, c, v, n: (g * c,)),
    "log": (lambda a: (np.log(a), None), lambda g, c, v, n: (g / v[0],)),
    "sum": (_sum_fwd, _sum_vjp),
    "reshape": (lambda a, shape: (np.reshape(a, shape), None), lambda g, c, v, n, shape: (np.reshape(g, np.shape(v[0])),)),
    "getitem": (lambda a, idx: (a[idx], None), _getitem_vjp),
    "concat": (_concat_fwd, _concat_vjp),
    "einsum": (lambda *xs, spec: (np.einsum(spec, *xs, optimize=len(xs) > 2), None), _einsum_vjp),
    "logsumexp": (_logsumexp_fwd, _logsumexp_vjp),
    "cross": (lambda a, b: (np.cross(a, b), None), _cross_vjp),
}


# ---------------------------------------------------------------------------
# tape
# ---------------------------------------------------------------------------


class Tape:
    """Append-only record of primitive applications."""

    def __init__(self):
        self.nodes: list[Node] = []
        self.values: list = []
        self._grad_flags: list[bool] = []

    def __len__(self):
        return len(self.nodes)

    def leaf(self, value, requires_grad: bool = True) -> Var:
        """Register an input (a parameter when ``requires_grad``)."""
        value = np.asarray(value, dtype=np.float64)
        self.nodes.append(Node("leaf", (), None))
        self.values.append(value)
        self._grad_flags.append(requires_grad)
        return Var(value, self, len(self.nodes) - 1, requires_grad)

    def record(self, op: str, *inputs, **params) -> Var:
        """Evaluate primitive ``op`` eagerly and append it to the tape."""
        try:
            fwd, _ = PRIMITIVES[op]
        except KeyError:
            raise ValidationError(f"unknown primitive {op!r}") from None
        refs = []
        vals = []
        for x in inputs:
            if isinstance(x, Var):
                if x.tape is not self:
                    raise ValidationError("input recorded on a different tape")
                refs.append(x.index)
                vals.append(x.value)
            else:
                refs.append(None)
                vals.append(np.asarray(x, dtype=np.float64))
        try:
            out, ctx = fwd(*vals, **params)
        except ValueError as exc:
            raise ShapeError(f"{op}: {exc}") from exc
        needs = any(r is not None and self._grad_flags[r] for r in refs)
        consts = tuple(None if r is not None else v for r, v in zip(refs, vals))
        self.nodes.append(Node(op, tuple(refs), ctx, params, consts))
        self.values.append(out)
        self._grad_flags.append(needs)
        return Var(out, self, len(self.nodes) - 1, needs)

    def backward(self, loss: Var) -> "Gradients":
        """Reverse accumulation from a scalar ``loss``."""
        if loss.tape is not self:
            raise ValidationError("loss was recorded on a different tape")
        if np.size(loss.value) != 1:
            raise ValidationError(f"backward needs a scalar loss, got shape {np.shape(loss.value)}")
        grads: list = [None] * len(self.nodes)
        grads[loss.index] = np.ones_like(loss.value)
        for i in range(loss.index, -1, -1):
            g = grads[i]
            node = self.nodes[i]
            if g is None or node.op == "leaf" or not self._grad_flags[i]:
                continue
            vals = [self.values[r] if r is not None else c for r, c in zip(node.inputs, node.consts)]
            needs = [r is not None and self._grad_flags[r] for r in node.inputs]
            _, vjp = PRIMITIVES[node.op]
            contrib = vjp(g, node.ctx, vals, needs, **node.params)
            for r, n, c in zip(node.inputs, needs, contrib):
                if n:
                    grads[r] = c if grads[r] is None else grads[r] + c
            grads[i] = None
        return Gradients({i: g for i, g in enumerate(grads) if g is not None})


class Gradients:
    """Leaf gradients, looked up by the ``Var`` returned from ``Tape.leaf``."""

    def __init__(self, by_index):
        self._g = by_index

    def __getitem__(self, var: Var):
        g = self._g.get(var.index)
        return np.zeros_like(var.value) if g is None else g

    def __contains__(self, var: Var):
        return var.index in self._g


def backward(tape: Tape, loss: Var) -> Gradients:
    return tape.backward(loss)


# ---------------------------------------------------------------------------
# mixed Var / ndarray front end
# ---------------------------------------------------------------------------


def _tape_of(xs):
    for x in xs:
        if isinstance(x, Var):
            return x.tape
    return None


def _call(op, np_fn, *xs, **params):
    tape = _tape_of(xs)
    if tape is None:
        return np_fn(*xs)
    return tape.record(op, *xs, **params)


def add(a, b):
    return _call("add", np.add, a, b)


def sub(a, b):
    return _call("sub", np.subtract, a, b)


def mul(a, b):
    return _call("mul", np.multiply, a, b)


def div(a, b):
    return _call("div", np.divide, a, b)


def neg(a):
    return _call("neg", np.negative, a)


def power(a, p):
    return _call("power", lambda x: x**p, a, p=p)


def sqrt(a):
    return _call("sqrt", np.sqrt, a)


def exp(a):
    return _call("exp", np.exp, a)


def log(a):
    return _call("log", np.log, a)


def sum_(a, axis=None, keepdims=False):
    return _call("sum", lambda x: np.sum(x, axis=axis, keepdims=keepdims), a, axis=axis, keepdims=keepdims)


def mean(a, axis=None, keepdims=False):
    n = np.size(value_of(a)) if axis is None else np.prod([np.shape(value_of(a))[ax] for ax in np.atleast_1d(axis)])
    return mul(sum_(a, axis=axis, keepdims=keepdims), 1.0 / float(n))


def reshape(a, shape):
    return _call("reshape", lambda x: np.reshape(x, shape), a, shape=tuple(shape))


def getitem(a, idx):
    return _call("getitem", lambda x: x[idx], a, idx=idx)


def concatenate(xs, axis=0):
    xs = list(xs)
    if len(xs) == 1:
        return xs[0]
    return _call("concat", lambda *v: np.concatenate(v, axis=axis), *xs, axis=axis)


def einsum(spec, *xs):
    return _call("einsum", lambda *v: np.einsum(spec, *v, optimize=len(v) > 2), *xs, spec=spec)


def logsumexp(a, axis=-1):
    return _call("logsumexp", lambda x: _logsumexp_fwd(x, axis)[0], a, axis=axis)


def cross(a, b):
    return _call("cross", np.cross, a, b)


# ---------------------------------------------------------------------------
# optimizer and schedules
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    m: dict
    v: dict
    t: int = 0

    @classmethod
    def zeros_like(cls, params: dict) -> "AdamState":
        return cls({k: np.zeros_like(p) for k, p in params.items()}, {k: np.zeros_like(p) for k, p in params.items()}, 0)


def adam_step(params: dict, grads: dict, state: AdamState, lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
    """One bias-corrected Adam update; returns new ``(params, state)``."""
    for k, g in grads.items():
        if not np.all(np.isfinite(g)):
            bad = int(np.size(g) - np.count_nonzero(np.isfinite(g)))
            raise NumericError(f"non-finite gradient for parameter {k!r} ({bad} entries)")
    t = state.t + 1
    new_p, new_m, new_v = {}, {}, {}
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for k, p in params.items():
        if k not in grads:
            new_p[k], new_m[k], new_v[k] = p, state.m[k], state.v[k]
            continue
        if state.m[k].shape != p.shape:
            raise ShapeError(f"optimizer state for {k!r} has shape {state.m[k].shape}, param {p.shape}")
        g = grads[k]
        m = beta1 * state.m[k] + (1 - beta1) * g
        v = beta2 * state.v[k] + (1 - beta2) * g * g
        new_p[k] = p - lr * (m / c1) / (np.sqrt(v / c2) + eps)
        new_m[k], new_v[k] = m, v
    return new_p, AdamState(new_m, new_v, t)


def exponential_lr(epoch: int, lr0: float, orders: float, over_epochs: float) -> float:
    """Learning rate decayed by ``orders`` powers of ten every ``over_epochs`` epochs."""
    if over_epochs <= 0 or orders == 0:
        return lr0
    return lr0 * math.pow(10.0, -orders * epoch / over_epochs)
