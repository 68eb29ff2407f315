"""Reverse-mode automatic differentiation over dual-number payloads.

Every node on a :class:`Tape` carries a value and a tangent (the derivative
with respect to a single designated input, the event time).  The forward pass
is therefore forward-mode in time, and :meth:`Tape.backward` differentiates
any expression of values *and* tangents with respect to the leaves
(reverse-over-forward).  This is what lets the training loss contain
``log dF/dt`` and still receive exact parameter gradients.

Payloads are numpy arrays so that one node represents a whole minibatch;
a node with a Python float payload is simply a 0-d array.  Tangents that are
identically zero are stored as ``None`` and never materialised, which keeps
the time-independent parts of a network (embedding, balancing head) at
plain reverse-mode cost.

Propagation rule.  For an elementwise node ``y = g(a, b, ...)`` the tape
records, for every parent ``k``, the local partial ``dg/dk`` as a dual
number ``(p, q)`` where ``q`` is the tangent of ``dg/dk``.  Given output
adjoints ``(y_v, y_t)`` for the value and tangent channels::

    k_v += y_v * p + y_t * q
    k_t += y_t * p
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "NumericDomainError",
    "TapeUsageError",
    "Tape",
    "Var",
    "Gradient",
]

ELEMENTWISE_OPS = ("add", "sub", "mul", "div", "neg", "exp", "log", "tanh", "softplus", "square")


class NumericDomainError(ArithmeticError):
    """An operation was applied outside its mathematical domain."""

    def __init__(self, opcode: str, value):
        self.opcode = opcode
        self.value = value
        super().__init__(f"{opcode}: argument outside domain (offending value {value!r})")


class TapeUsageError(RuntimeError):
    pass


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _softplus(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # split on sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


@dataclass
class _Node:
    opcode: str
    parents: tuple
    # elementwise nodes: one (p, q) dual partial per parent; structural nodes: None
    partials: list | None
    # structural nodes: callable(adj_v, adj_t) -> list of (adj_v, adj_t) per parent
    vjp: Callable | None
    value: np.ndarray
    tangent: np.ndarray | None
    requires_grad: bool
    is_leaf: bool = False


class Var:
    """Handle to a node on a tape."""

    __slots__ = ("tape", "index")
    __array_priority__ = 100.0

    def __init__(self, tape: "Tape", index: int):
        self.tape = tape
        self.index = index

    @property
    def value(self) -> np.ndarray:
        return self.tape._nodes[self.index].value

    @property
    def tangent(self) -> np.ndarray:
        node = self.tape._nodes[self.index]
        if node.tangent is None:
            return np.zeros_like(node.value)
        return node.tangent

    @property
    def shape(self) -> tuple:
        return self.value.shape

    def __repr__(self):
        return f"Var(#{self.index}, value={self.value!r}, tangent={self.tangent!r})"

    def _lift(self, other) -> "Var":
        if isinstance(other, Var):
            if other.tape is not self.tape:
                raise TapeUsageError("operands belong to different tapes")
            return other
        return self.tape.constant(other)

    def __add__(self, other):
        return self.tape.add(self, self._lift(other))

    def __radd__(self, other):
        return self.tape.add(self._lift(other), self)

    def __sub__(self, other):
        return self.tape.sub(self, self._lift(other))

    def __rsub__(self, other):
        return self.tape.sub(self._lift(other), self)

    def __mul__(self, other):
        return self.tape.mul(self, self._lift(other))

    def __rmul__(self, other):
        return self.tape.mul(self._lift(other), self)

    def __truediv__(self, other):
        return self.tape.div(self, self._lift(other))

    def __rtruediv__(self, other):
        return self.tape.div(self._lift(other), self)

    def __neg__(self):
        return self.tape.neg(self)

    def __matmul__(self, other):
        return self.tape.matmul(self, self._lift(other))

    def __getitem__(self, key):
        return self.tape.index(self, key)

    @property
    def T(self):
        return self.tape.transpose(self)

    def exp(self):
        return self.tape.exp(self)

    def log(self):
        return self.tape.log(self)

    def tanh(self):
        return self.tape.tanh(self)

    def softplus(self):
        return self.tape.softplus(self)

    def square(self):
        return self.tape.square(self)

    def sum(self, axis=None, keepdims=False):
        return self.tape.sum(self, axis=axis, keepdims=keepdims)


class Gradient:
    """Adjoints of the value channel for every differentiable leaf."""

    def __init__(self, tape: "Tape", adjoints: dict):
        self._tape = tape
        self.adjoints = adjoints

    def wrt(self, leaf) -> np.ndarray:
        """Gradient with respect to a leaf ``Var`` or a bound parameter array."""
        if not isinstance(leaf, Var):
            leaf = self._tape._param_vars.get(id(leaf))
            if leaf is None:
                raise TapeUsageError("array was never bound as a parameter on this tape")
        if leaf.tape is not self._tape:
            raise TapeUsageError("leaf belongs to a different tape")
        return self.adjoints[leaf.index]

    __getitem__ = wrt


class Tape:
    """Append-only record of dual-valued operations."""

    def __init__(self):
        self.reset()

    def reset(self) -> None:
        self._nodes: list[_Node] = []
        self._param_vars: dict[int, Var] = {}
        self._param_arrays: list[np.ndarray] = []

    def __len__(self):
        return len(self._nodes)

    # -- leaves ---------------------------------------------------------

    def _push(self, node: _Node) -> Var:
        self._nodes.append(node)
        return Var(self, len(self._nodes) - 1)

    def var(self, value, tangent=None, requires_grad: bool = True) -> Var:
        """Leaf with payload ``(value, tangent)``."""
        value = np.asarray(value, dtype=np.float64)
        if tangent is not None:
            tangent = np.broadcast_to(np.asarray(tangent, dtype=np.float64), value.shape).copy()
            if not np.any(tangent):
                tangent = None
        return self._push(_Node("leaf", (), None, None, value, tangent, requires_grad, is_leaf=True))

    scalar = var

    def constant(self, value) -> Var:
        return self.var(value, None, requires_grad=False)

    def param(self, array: np.ndarray) -> Var:
        """Bind a parameter array as a differentiable leaf (once per tape)."""
        key = id(array)
        bound = self._param_vars.get(key)
        if bound is None:
            bound = self.var(array, None, requires_grad=True)
            self._param_vars[key] = bound
            # keep the array alive so its id cannot be recycled while bound
            self._param_arrays.append(array)
        return bound

    # -- elementwise ----------------------------------------------------

    def _elementwise(self, opcode, parents, value, tangent, partials) -> Var:
        req = any(self._nodes[p.index].requires_grad for p in parents)
        return self._push(_Node(opcode, tuple(p.index for p in parents), partials, None,
                                value, tangent, req))

    def _unary(self, opcode, x: Var, value, d1, d2) -> Var:
        xt = self._nodes[x.index].tangent
        if xt is None:
            return self._elementwise(opcode, (x,), value, None, [(d1, None)])
        return self._elementwise(opcode, (x,), value, d1 * xt, [(d1, d2 * xt)])

    def elementwise(self, op: str, *args: Var) -> Var:
        if op not in ELEMENTWISE_OPS:
            raise TapeUsageError(f"unsupported elementwise op {op!r}")
        return getattr(self, op)(*args)

    def add(self, a: Var, b: Var) -> Var:
        na, nb = self._nodes[a.index], self._nodes[b.index]
        t = _add_tangents(na.tangent, nb.tangent)
        one = np.float64(1.0)
        return self._elementwise("add", (a, b), na.value + nb.value, t, [(one, None), (one, None)])

    def sub(self, a: Var, b: Var) -> Var:
        na, nb = self._nodes[a.index], self._nodes[b.index]
        nt = None if nb.tangent is None else -nb.tangent
        t = _add_tangents(na.tangent, nt)
        return self._elementwise("sub", (a, b), na.value - nb.value, t,
                                 [(np.float64(1.0), None), (np.float64(-1.0), None)])

    def mul(self, a: Var, b: Var) -> Var:
        na, nb = self._nodes[a.index], self._nodes[b.index]
        at, bt = na.tangent, nb.tangent
        t = _add_tangents(None if bt is None else na.value * bt,
                          None if at is None else at * nb.value)
        return self._elementwise("mul", (a, b), na.value * nb.value, t,
                                 [(nb.value, bt), (na.value, at)])

    def div(self, a: Var, b: Var) -> Var:
        na, nb = self._nodes[a.index], self._nodes[b.index]
        if np.any(nb.value == 0):
            raise NumericDomainError("div", nb.value[nb.value == 0].flat[0] if nb.value.ndim else nb.value)
        av, bv, at, bt = na.value, nb.value, na.tangent, nb.tangent
        inv = 1.0 / bv
        value = av * inv
        t = _add_tangents(None if at is None else at * inv,
                          None if bt is None else -value * inv * bt)
        # d/da = 1/b ; d/db = -a/b^2, each with its own tangent
        pa_t = None if bt is None else -bt * inv * inv
        pb_v = -value * inv
        pb_t = None
        if at is not None or bt is not None:
            pb_t = np.zeros(np.broadcast_shapes(av.shape, bv.shape))
            if at is not None:
                pb_t = pb_t - at * inv * inv
            if bt is not None:
                pb_t = pb_t + 2.0 * av * bt * inv ** 3
        return self._elementwise("div", (a, b), value, t, [(inv, pa_t), (pb_v, pb_t)])

    def neg(self, x: Var) -> Var:
        n = self._nodes[x.index]
        return self._unary("neg", x, -n.value, np.float64(-1.0), np.float64(0.0))

    def exp(self, x: Var) -> Var:
        v = np.exp(self._nodes[x.index].value)
        return self._unary("exp", x, v, v, v)

    def log(self, x: Var) -> Var:
        xv = self._nodes[x.index].value
        if np.any(xv <= 0):
            raise NumericDomainError("log", xv[xv <= 0].flat[0] if xv.ndim else xv)
        inv = 1.0 / xv
        return self._unary("log", x, np.log(xv), inv, -inv * inv)

    def tanh(self, x: Var) -> Var:
        v = np.tanh(self._nodes[x.index].value)
        d1 = 1.0 - v * v
        return self._unary("tanh", x, v, d1, -2.0 * v * d1)

    def softplus(self, x: Var) -> Var:
        xv = self._nodes[x.index].value
        s = _sigmoid(np.atleast_1d(xv)).reshape(xv.shape)
        return self._unary("softplus", x, _softplus(xv), s, s * (1.0 - s))

    def square(self, x: Var) -> Var:
        xv = self._nodes[x.index].value
        return self._unary("square", x, xv * xv, 2.0 * xv, np.float64(2.0))

    def clamp_min(self, x: Var, floor: float) -> Var:
        """``max(x, floor)``; gradient is zero where the floor binds."""
        xv = self._nodes[x.index].value
        keep = (xv >= floor).astype(np.float64)
        return self._unary("clamp_min", x, np.maximum(xv, floor), keep, np.float64(0.0))

    # -- structural -----------------------------------------------------

    def _structural(self, opcode, parents, value, tangent, vjp) -> Var:
        req = any(self._nodes[p.index].requires_grad for p in parents)
        return self._push(_Node(opcode, tuple(p.index for p in parents), None, vjp,
                                value, tangent, req))

    def matmul(self, a: Var, b: Var) -> Var:
        na, nb = self._nodes[a.index], self._nodes[b.index]
        av, bv, at, bt = na.value, nb.value, na.tangent, nb.tangent
        t = _add_tangents(None if at is None else at @ bv, None if bt is None else av @ bt)

        def vjp(gv, gt):
            # value channel: d(A@B); tangent channel: d(At@B + A@Bt)
            ga_v = gv @ bv.T
            gb_v = av.T @ gv
            ga_t = gb_t = None
            if gt is not None:
                if bt is not None:
                    ga_v = ga_v + gt @ bt.T
                if at is not None:
                    gb_v = gb_v + at.T @ gt
                ga_t = gt @ bv.T
                gb_t = av.T @ gt
            return [(ga_v, ga_t), (gb_v, gb_t)]

        return self._structural("matmul", (a, b), av @ bv, t, vjp)

    def transpose(self, x: Var) -> Var:
        n = self._nodes[x.index]
        t = None if n.tangent is None else n.tangent.T

        def vjp(gv, gt):
            return [(gv.T, None if gt is None else gt.T)]

        return self._structural("transpose", (x,), n.value.T, t, vjp)

    def sum(self, x: Var, axis=None, keepdims: bool = False) -> Var:
        n = self._nodes[x.index]
        shape = n.value.shape
        t = None if n.tangent is None else n.tangent.sum(axis=axis, keepdims=keepdims)

        def expand(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return np.broadcast_to(g, shape)

        def vjp(gv, gt):
            return [(expand(gv), None if gt is None else expand(gt))]

        return self._structural("sum", (x,), n.value.sum(axis=axis, keepdims=keepdims), t, vjp)

    def index(self, x: Var, key) -> Var:
        n = self._nodes[x.index]
        shape = n.value.shape
        t = None if n.tangent is None else n.tangent[key]

        def scatter(g):
            out = np.zeros(shape)
            np.add.at(out, key, g)
            return out

        def vjp(gv, gt):
            return [(scatter(gv), None if gt is None else scatter(gt))]

        return self._structural("index", (x,), n.value[key], t, vjp)

    def reshape(self, x: Var, shape) -> Var:
        n = self._nodes[x.index]
        old = n.value.shape
        t = None if n.tangent is None else n.tangent.reshape(shape)

        def vjp(gv, gt):
            return [(gv.reshape(old), None if gt is None else gt.reshape(old))]

        return self._structural("reshape", (x,), n.value.reshape(shape), t, vjp)

    def concat(self, parts: Sequence[Var], axis: int = -1) -> Var:
        nodes = [self._nodes[p.index] for p in parts]
        value = np.concatenate([n.value for n in nodes], axis=axis)
        if all(n.tangent is None for n in nodes):
            t = None
        else:
            t = np.concatenate([np.zeros_like(n.value) if n.tangent is None else n.tangent
                                for n in nodes], axis=axis)
        bounds = np.cumsum([n.value.shape[axis] for n in nodes])[:-1]

        def vjp(gv, gt):
            vs = np.split(gv, bounds, axis=axis)
            ts = [None] * len(vs) if gt is None else np.split(gt, bounds, axis=axis)
            return list(zip(vs, ts))

        return self._structural("concat", tuple(parts), value, t, vjp)

    def tangent_of(self, x: Var) -> Var:
        """Node whose value is the tangent channel of ``x``.

        Its own tangent (a second time-derivative) is not tracked.
        """
        n = self._nodes[x.index]
        value = np.zeros_like(n.value) if n.tangent is None else n.tangent.copy()

        def vjp(gv, gt):
            return [(None, gv)]

        return self._structural("tangent_of", (x,), value, None, vjp)

    def softmax(self, x: Var, axis: int = -1) -> Var:
        """Row softmax built from primitives, shifted by a constant row maximum."""
        shift = self.constant(self._nodes[x.index].value.max(axis=axis, keepdims=True))
        e = self.exp(self.sub(x, shift))
        return self.div(e, self.sum(e, axis=axis, keepdims=True))

    # -- reverse pass ---------------------------------------------------

    def backward(self, loss: Var) -> Gradient:
        """Adjoints of ``loss``'s value with respect to every differentiable leaf."""
        if not isinstance(loss, Var) or loss.tape is not self:
            raise TapeUsageError("loss is not a node of this tape")
        root = self._nodes[loss.index]
        if root.value.size != 1:
            raise TapeUsageError(f"loss must be a scalar, got shape {root.value.shape}")
        adj_v: list = [None] * len(self._nodes)
        adj_t: list = [None] * len(self._nodes)
        adj_v[loss.index] = np.ones_like(root.value)

        for i in range(loss.index, -1, -1):
            node = self._nodes[i]
            gv, gt = adj_v[i], adj_t[i]
            if (gv is None and gt is None) or not node.requires_grad or node.is_leaf:
                continue
            if gv is None:
                gv = np.zeros_like(node.value)
            if node.partials is not None:
                contribs = []
                for p, q in node.partials:
                    cv = gv * p
                    if gt is not None and q is not None:
                        cv = cv + gt * q
                    contribs.append((cv, None if gt is None else gt * p))
            else:
                contribs = node.vjp(gv, gt)
            for parent, (cv, ct) in zip(node.parents, contribs):
                pnode = self._nodes[parent]
                if not pnode.requires_grad:
                    continue
                shape = pnode.value.shape
                if cv is not None:
                    cv = _unbroadcast(np.asarray(cv), shape)
                    adj_v[parent] = cv if adj_v[parent] is None else adj_v[parent] + cv
                # a parent whose tangent is identically zero cannot pass it on
                if ct is not None and pnode.tangent is not None:
                    ct = _unbroadcast(np.asarray(ct), shape)
                    adj_t[parent] = ct if adj_t[parent] is None else adj_t[parent] + ct

        adjoints = {}
        for i, node in enumerate(self._nodes):
            if node.is_leaf and node.requires_grad:
                a = adj_v[i]
                adjoints[i] = np.zeros_like(node.value) if a is None else np.array(a, dtype=np.float64)
        return Gradient(self, adjoints)


def _add_tangents(a, b):
    if a is None:
        return b
    if b is None:
        return a
    return a + b
