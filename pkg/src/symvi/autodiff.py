"""Reverse-mode differentiation over an append-only computation tape.

Node payloads are numpy arrays (scalars are 0-d), so one tape differentiates
anything from a single logit to a whole batch of relaxed design-matrix
columns.  Domain escapes (log of a negative, division by zero) propagate as
non-finite values instead of raising; the training loop is the single
recovery point and skips such steps.
"""

from __future__ import annotations

import numpy as np

from .numerics import digamma as _digamma_fn
from .numerics import trigamma as _trigamma_fn
from scipy.special import expit as _expit
from scipy.special import gammaln as _gammaln
from scipy.special import psi as _psi

__all__ = [
    "Tape",
    "Node",
    "NonFiniteError",
    "backward",
    "check_gradient",
    "exp",
    "log",
    "sin",
    "cos",
    "square",
    "sqrt",
    "sigmoid",
    "lgamma",
    "digamma",
    "clamp_max",
    "clamp_min",
    "vsum",
    "matmul",
    "take",
    "softmax_last",
]


class NonFiniteError(RuntimeError):
    """Raised when a backward pass is requested from a non-finite root."""


class Node:
    __slots__ = ("tape", "idx", "value", "prim", "ops", "aux")

    def __init__(self, tape, idx, value, prim, ops, aux=None):
        self.tape = tape
        self.idx = idx
        self.value = value
        self.prim = prim
        self.ops = ops
        self.aux = aux

    @property
    def shape(self):
        return self.value.shape

    def __float__(self):
        return float(self.value)

    # arithmetic sugar; constants may appear on either side
    def __add__(self, other):
        return self.tape.record("add", [self, other])

    def __radd__(self, other):
        return self.tape.record("add", [other, self])

    def __sub__(self, other):
        return self.tape.record("sub", [self, other])

    def __rsub__(self, other):
        return self.tape.record("sub", [other, self])

    def __mul__(self, other):
        return self.tape.record("mul", [self, other])

    def __rmul__(self, other):
        return self.tape.record("mul", [other, self])

    def __truediv__(self, other):
        return self.tape.record("div", [self, other])

    def __rtruediv__(self, other):
        return self.tape.record("div", [other, self])

    def __neg__(self):
        return self.tape.record("neg", [self])


def _val(x):
    return x.value if isinstance(x, Node) else np.asarray(x, dtype=float)


def _unbroadcast(grad, shape):
    """Reduce a broadcasted gradient back to the operand's shape."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# forward rules: operand values -> node value
_FORWARD = {
    "add": lambda a, b: a + b,
    "sub": lambda a, b: a - b,
    "mul": lambda a, b: a * b,
    "div": lambda a, b: a / b,
    "neg": lambda a: -a,
    "exp": np.exp,
    "log": np.log,
    "sin": np.sin,
    "cos": np.cos,
    "square": lambda a: a * a,
    "sqrt": np.sqrt,
    "sigmoid": _expit,
    "lgamma": _gammaln,
    "digamma": _psi,
}


class Tape:
    """Issues monotonically increasing node ids; operands precede consumers.

    The tape does not keep references to its nodes: the graph hangs off the
    root through operand links, so a finished step is freed by reference
    counting alone (no cycles, no collector pressure in the hot loop).
    """

    def __init__(self):
        self._next = 0

    def _push(self, value, prim, ops, aux=None) -> Node:
        node = Node(self, self._next, np.asarray(value, dtype=float), prim, ops, aux)
        self._next += 1
        return node

    def leaf(self, value) -> Node:
        """Differentiable input node; rejects non-finite values."""
        arr = np.asarray(value, dtype=float)
        if not np.all(np.isfinite(arr)):
            raise ValueError("leaf value must be finite")
        return self._push(arr, "leaf", ())

    def record(self, prim: str, operands, aux=None) -> Node:
        """Apply a primitive to operands (Nodes or constants) and push the result."""
        vals = [_val(o) for o in operands]
        with np.errstate(all="ignore"):
            if prim in _FORWARD:
                value = _FORWARD[prim](*vals)
            elif prim == "maximum_const":
                value = np.maximum(vals[0], aux)
            elif prim == "minimum_const":
                value = np.minimum(vals[0], aux)
            elif prim == "sum":
                axis, keepdims = aux
                value = np.sum(vals[0], axis=axis, keepdims=keepdims)
            elif prim == "matmul":
                value = vals[0] @ vals[1]
            elif prim == "index":
                value = vals[0][aux]
            else:
                raise ValueError(f"unknown primitive {prim!r}")
        return self._push(value, prim, tuple(operands), aux)

    def backward(self, root: Node) -> "Gradients":
        """Reverse accumulation from a finite scalar root; one pass."""
        if root.tape is not self:
            raise ValueError("root belongs to a different tape")
        if root.value.size != 1:
            raise ValueError("backward requires a scalar root")
        if not np.isfinite(root.value).all():
            raise NonFiniteError("non-finite objective; skip step")
        order = _reachable(root)  # descending idx: consumers before operands
        adj: dict[int, np.ndarray] = {root.idx: np.ones_like(root.value)}
        with np.errstate(all="ignore"):
            for node in order:
                g = adj.get(node.idx)
                if g is None:
                    continue
                if node.prim != "leaf":
                    del adj[node.idx]
                    self._accumulate(node, g, adj)
        return Gradients(adj)

    def _accumulate(self, node: Node, g, adj):
        ops = node.ops
        needs = tuple(isinstance(o, Node) for o in ops)
        contribs = _backward_rule(node.prim, g, node, ops, needs)
        for operand, contrib in zip(ops, contribs):
            if contrib is None or not isinstance(operand, Node):
                continue
            contrib = _unbroadcast(np.asarray(contrib, dtype=float), operand.value.shape)
            prev = adj.get(operand.idx)
            adj[operand.idx] = contrib if prev is None else prev + contrib


def _reachable(root: Node) -> list[Node]:
    """Nodes reachable from the root, sorted by descending creation index."""
    seen = {root.idx}
    stack = [root]
    out = [root]
    while stack:
        node = stack.pop()
        if node.prim == "leaf":
            continue
        for operand in node.ops:
            if isinstance(operand, Node) and operand.idx not in seen:
                seen.add(operand.idx)
                out.append(operand)
                stack.append(operand)
    out.sort(key=lambda n: n.idx, reverse=True)
    return out


class Gradients:
    """Gradient map from backward(); zero for nodes the root never touched."""

    def __init__(self, adj):
        self._adj = adj

    def __getitem__(self, node: Node):
        g = self._adj.get(node.idx)
        return np.zeros_like(node.value) if g is None else g


def _backward_rule(prim, g, node, ops, needs):
    a = _val(ops[0])
    if prim == "add":
        return (g if needs[0] else None), (g if needs[1] else None)
    if prim == "sub":
        return (g if needs[0] else None), (-g if needs[1] else None)
    if prim == "mul":
        return (
            g * _val(ops[1]) if needs[0] else None,
            g * a if needs[1] else None,
        )
    if prim == "div":
        b = _val(ops[1])
        return (
            g / b if needs[0] else None,
            -g * a / (b * b) if needs[1] else None,
        )
    if prim == "neg":
        return (-g,)
    if prim == "exp":
        return (g * node.value,)
    if prim == "log":
        return (g / a,)
    if prim == "sin":
        return (g * np.cos(a),)
    if prim == "cos":
        return (-g * np.sin(a),)
    if prim == "square":
        return (2.0 * a * g,)
    if prim == "sqrt":
        return (g / (2.0 * node.value),)
    if prim == "sigmoid":
        s = node.value
        return (g * s * (1.0 - s),)
    if prim == "lgamma":
        return (g * _psi(a),)
    if prim == "digamma":
        # trigamma is only defined for positive arguments here
        return (g * _trigamma_fn(np.maximum(a, np.finfo(float).tiny)),)
    if prim == "maximum_const":
        return (g * (a > node.aux),)
    if prim == "minimum_const":
        return (g * (a < node.aux),)
    if prim == "sum":
        axis, keepdims = node.aux
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape),)
    if prim == "matmul":
        b = _val(ops[1])
        left = g @ np.swapaxes(b, -1, -2) if needs[0] else None
        right = np.swapaxes(a, -1, -2) @ g if needs[1] else None
        return left, right
    if prim == "index":
        buf = np.zeros_like(a)
        buf[node.aux] += g
        return (buf,)
    raise ValueError(f"no backward rule for {prim!r}")


def backward(tape: Tape, root: Node) -> Gradients:
    return tape.backward(root)


def _unary(prim):
    def op(x):
        return x.tape.record(prim, [x])

    return op


exp = _unary("exp")
log = _unary("log")
sin = _unary("sin")
cos = _unary("cos")
square = _unary("square")
sqrt = _unary("sqrt")
sigmoid = _unary("sigmoid")
lgamma = _unary("lgamma")
digamma = _unary("digamma")


def clamp_max(x: Node, bound: float) -> Node:
    """min(x, bound); used to cap exponent arguments."""
    return x.tape.record("minimum_const", [x], aux=float(bound))


def clamp_min(x: Node, bound: float) -> Node:
    return x.tape.record("maximum_const", [x], aux=float(bound))


def vsum(x: Node, axis=None, keepdims=False) -> Node:
    return x.tape.record("sum", [x], aux=(axis, keepdims))


def matmul(a: Node, b) -> Node:
    tape = a.tape if isinstance(a, Node) else b.tape
    return tape.record("matmul", [a, b])


def take(x: Node, key) -> Node:
    """Basic-indexing slice of a node; backward scatters into the source shape."""
    return x.tape.record("index", [x], aux=key)


def softmax_last(x: Node) -> Node:
    """Softmax over the trailing axis via exp/sum with max subtraction.

    The subtracted maximum is treated as a constant shift: softmax is
    invariant to it, so gradients stay exact while exp never overflows.
    """
    shift = np.max(x.value, axis=-1, keepdims=True)
    e = exp(x - shift)
    return e / vsum(e, axis=-1, keepdims=True)


def check_gradient(fn, point, step: float) -> float:
    """Max relative error between tape gradients and central differences.

    ``fn(tape, nodes) -> Node`` builds a scalar from one leaf per coordinate.
    """
    point = np.asarray(point, dtype=float)

    def evaluate(values):
        tape = Tape()
        xs = [tape.leaf(v) for v in values]
        return tape, xs, fn(tape, xs)

    tape, xs, root = evaluate(point)
    grads = tape.backward(root)
    grad = np.array([float(np.sum(grads[x])) for x in xs])

    fd = np.empty_like(grad)
    for i in range(point.size):
        bump = np.zeros_like(point)
        bump[i] = step
        _, _, up = evaluate(point + bump)
        _, _, down = evaluate(point - bump)
        fd[i] = (float(up) - float(down)) / (2.0 * step)

    denom = np.maximum(np.maximum(np.abs(grad), np.abs(fd)), 1e-12)
    return float(np.max(np.abs(grad - fd) / denom))
