"""Reverse-mode automatic differentiation over dense float64 arrays.

Graphs are built eagerly: every operation computes its value immediately and,
while gradient recording is enabled, remembers its parents, a forward rule
(so :func:`evaluate` can replay the graph after leaf values change) and a
vector-Jacobian rule.  Vector-Jacobian rules are written with the same
operations, so a backward pass run with ``create_graph=True`` produces a graph
that can be differentiated again.  This is what a gradient penalty on a
critic's input gradient needs.

Example::

    x = Node(np.array(3.0), requires_grad=True)
    y = x * x + 1.0
    gradient(y, [x])        # [array(6.)]
"""

from __future__ import annotations

import math
import threading
from contextlib import contextmanager, nullcontext
from typing import Callable, Sequence

import numpy as np

LOG_FLOOR = 1e-12
_NORM_FLOOR = 1e-12


class DiffError(Exception):
    """Base class for engine errors."""


class NumericalOverflowError(DiffError, FloatingPointError):
    """An operation produced NaN or Inf."""

    def __init__(self, op: str):
        super().__init__(f"numerical overflow in '{op}': result contains NaN or Inf")
        self.op = op


class ContractError(DiffError, ValueError):
    """A caller violated an operation's precondition."""


class SecondOrderUnsupportedError(DiffError):
    """A graph differentiated with ``create_graph=True`` holds first-order-only ops."""

    def __init__(self, ops: Sequence[str]):
        super().__init__("second-order unsupported op(s): " + ", ".join(ops))
        self.ops = list(ops)


_mode = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_mode, "enabled", True)


@contextmanager
def no_grad():
    """Disable graph recording on the current thread."""
    prev = is_grad_enabled()
    _mode.enabled = False
    try:
        yield
    finally:
        _mode.enabled = prev


class Node:
    """A value in the computation graph.

    Leaves are created directly; interior nodes come from the operations in
    this module.  ``value`` is always a float64 ndarray.
    """

    __slots__ = ("value", "parents", "forward", "vjp", "requires_grad", "op", "twice", "name")
    __array_ufunc__ = None  # make ndarray (op) Node dispatch to Node

    def __init__(self, value, requires_grad: bool = False, name: str | None = None):
        arr = np.array(value, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise NumericalOverflowError(name or "leaf")
        self.value = arr
        self.parents: tuple[Node, ...] = ()
        self.forward = None
        self.vjp = None
        self.requires_grad = requires_grad
        self.op = "leaf"
        self.twice = True
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    @property
    def T(self) -> Node:
        return transpose(self)

    def __repr__(self):
        tag = f" {self.name}" if self.name else ""
        return f"Node({self.op}{tag}, shape={self.shape}, requires_grad={self.requires_grad})"

    def item(self) -> float:
        if self.value.size != 1:
            raise ContractError(f"item() needs a single element, got shape {self.shape}")
        return float(self.value.reshape(-1)[0])

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
        if isinstance(other, Node):
            return mul(self, reciprocal(other))
        return mul(self, 1.0 / np.asarray(other, dtype=np.float64))

    def __rtruediv__(self, other):
        return mul(other, reciprocal(self))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __pow__(self, power):
        if power != 2:
            raise ContractError("only square (power 2) is supported")
        return square(self)

    def __getitem__(self, key):
        return index(self, key)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)


def as_node(x) -> Node:
    return x if isinstance(x, Node) else Node(x)


def _check(value: np.ndarray, op: str) -> np.ndarray:
    # NaN/Inf anywhere (or a finite overflow) makes the sum non-finite
    if not math.isfinite(np.add.reduce(value, axis=None)):
        raise NumericalOverflowError(op)
    return value


def _make(op: str, forward: Callable, parents: tuple[Node, ...], vjp: Callable, twice: bool = True) -> Node:
    value = _check(np.asarray(forward(*[p.value for p in parents]), dtype=np.float64), op)
    node = Node.__new__(Node)
    node.value = value
    node.name = None
    node.op = op
    node.twice = twice
    if is_grad_enabled():
        node.parents = parents
        node.forward = forward
        node.vjp = vjp
        rg = False
        for p in parents:
            if p.requires_grad:
                rg = True
                break
        node.requires_grad = rg
    else:
        node.parents = ()
        node.forward = None
        node.vjp = None
        node.requires_grad = False
    return node


# ---------------------------------------------------------------------------
# shape plumbing


def _reduce_to(v: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if v.shape == shape:
        return v
    lead = v.ndim - len(shape)
    if lead:
        v = v.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and v.shape[i] != 1)
    if axes:
        v = v.sum(axis=axes, keepdims=True)
    return v.reshape(shape)


def sum_to(x: Node, shape: tuple[int, ...]) -> Node:
    """Sum ``x`` down to ``shape`` (the adjoint of broadcasting)."""
    if x.shape == tuple(shape):
        return x
    shape = tuple(shape)
    return _make("sum_to", lambda v: _reduce_to(v, shape), (x,), _vjp_sum_to)


def _vjp_sum_to(g, out, needs):
    return (broadcast_to(g, out.parents[0].shape),)


def broadcast_to(x: Node, shape: tuple[int, ...]) -> Node:
    if x.shape == tuple(shape):
        return x
    shape = tuple(shape)
    return _make("broadcast_to", lambda v: np.broadcast_to(v, shape).copy(), (x,), _vjp_broadcast)


def _vjp_broadcast(g, out, needs):
    return (sum_to(g, out.parents[0].shape),)


def reshape(x: Node, shape) -> Node:
    shape = tuple(shape)
    if x.shape == shape:
        return x
    return _make("reshape", lambda v: v.reshape(shape), (as_node(x),), _vjp_reshape)


def _vjp_reshape(g, out, needs):
    return (reshape(g, out.parents[0].shape),)


def transpose(x: Node) -> Node:
    return _make("transpose", lambda v: v.T, (as_node(x),), _vjp_transpose)


def _vjp_transpose(g, out, needs):
    return (transpose(g),)


def index(x: Node, key) -> Node:
    x = as_node(x)
    return _make("index", lambda v: v[key], (x,), lambda g, out, needs: (_scatter(g, key, x.shape),))


def _scatter(g: Node, key, shape) -> Node:
    def fwd(v):
        z = np.zeros(shape)
        z[key] = v
        return z

    return _make("scatter", fwd, (g,), lambda gg, out, needs: (index(gg, key),))


def concat(nodes: Sequence[Node], axis: int = -1) -> Node:
    nodes = tuple(as_node(n) for n in nodes)
    ax = axis % nodes[0].ndim
    bounds = np.cumsum([0] + [n.shape[ax] for n in nodes])

    def vjp(g, out, needs):
        res = []
        for i, need in enumerate(needs):
            if not need:
                res.append(None)
                continue
            key = [slice(None)] * g.ndim
            key[ax] = slice(bounds[i], bounds[i + 1])
            res.append(index(g, tuple(key)))
        return tuple(res)

    return _make("concat", lambda *vs: np.concatenate(vs, axis=ax), nodes, vjp)


# ---------------------------------------------------------------------------
# arithmetic


def add(a, b) -> Node:
    return _make("add", np.add, (as_node(a), as_node(b)), _vjp_add)


def _vjp_add(g, out, needs):
    a, b = out.parents
    return (sum_to(g, a.shape) if needs[0] else None, sum_to(g, b.shape) if needs[1] else None)


def sub(a, b) -> Node:
    return _make("sub", np.subtract, (as_node(a), as_node(b)), _vjp_sub)


def _vjp_sub(g, out, needs):
    a, b = out.parents
    return (sum_to(g, a.shape) if needs[0] else None, sum_to(neg(g), b.shape) if needs[1] else None)


def neg(x) -> Node:
    return _make("neg", np.negative, (as_node(x),), lambda g, out, needs: (neg(g),))


def mul(a, b) -> Node:
    return _make("mul", np.multiply, (as_node(a), as_node(b)), _vjp_mul)


def _vjp_mul(g, out, needs):
    a, b = out.parents
    return (
        sum_to(mul(g, b), a.shape) if needs[0] else None,
        sum_to(mul(g, a), b.shape) if needs[1] else None,
    )


def matmul(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ContractError(f"matmul expects 2-D operands, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ContractError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    return _make("matmul", np.matmul, (a, b), _vjp_matmul)


def _vjp_matmul(g, out, needs):
    a, b = out.parents
    return (
        matmul(g, transpose(b)) if needs[0] else None,
        matmul(transpose(a), g) if needs[1] else None,
    )


def square(x) -> Node:
    return _make("square", np.square, (as_node(x),), _vjp_square)


def _vjp_square(g, out, needs):
    (x,) = out.parents
    return (mul(g, mul(x, 2.0)),)


def reciprocal(x) -> Node:
    return _make("reciprocal", np.reciprocal, (as_node(x),), lambda g, out, needs: (neg(mul(g, square(out))),))


def tanh(x) -> Node:
    return _make("tanh", np.tanh, (as_node(x),), lambda g, out, needs: (mul(g, sub(1.0, square(out))),))


def exp(x) -> Node:
    return _make("exp", np.exp, (as_node(x),), lambda g, out, needs: (mul(g, out),))


def _log_raw(x) -> Node:
    return _make("log", np.log, (as_node(x),), lambda g, out, needs: (mul(g, reciprocal(out.parents[0])),))


def log(x) -> Node:
    """Natural log with the input clamped below at ``LOG_FLOOR``."""
    return _log_raw(clamp(x, LOG_FLOOR, None))


def clamp(x, lo=None, hi=None) -> Node:
    x = as_node(x)

    def vjp(g, out, needs):
        v = out.parents[0].value
        mask = np.ones_like(v)
        if lo is not None:
            mask[v < lo] = 0.0
        if hi is not None:
            mask[v > hi] = 0.0
        return (mul(g, mask),)

    return _make("clamp", lambda v: np.clip(v, lo, hi), (x,), vjp)


# ---------------------------------------------------------------------------
# reductions


def sum_(x, axis=None, keepdims=False) -> Node:
    x = as_node(x)

    def vjp(g, out, needs):
        shape = x.shape
        if axis is not None and not keepdims:
            kept = np.expand_dims(np.empty(out.shape), axis).shape
            g = reshape(g, kept)
        elif axis is None:
            g = reshape(g, (1,) * len(shape))
        return (broadcast_to(g, shape),)

    return _make("sum", lambda v: np.sum(v, axis=axis, keepdims=keepdims), (x,), vjp)


def mean(x, axis=None, keepdims=False) -> Node:
    x = as_node(x)
    n = x.value.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(sum_(x, axis=axis, keepdims=keepdims), 1.0 / float(n))


def l2norm(x, axis=-1, keepdims=False) -> Node:
    """Euclidean norm along ``axis``; the gradient at the origin is taken as zero."""
    x = as_node(x)

    def vjp(g, out, needs):
        gk = g if keepdims else reshape(g, np.expand_dims(out.value, axis).shape)
        ok = out if keepdims else reshape(out, gk.shape)
        return (mul(mul(gk, x), reciprocal(clamp(ok, _NORM_FLOOR, None))),)

    return _make("l2norm", lambda v: np.sqrt(np.sum(v * v, axis=axis, keepdims=keepdims)), (x,), vjp)


def logmeanexp(x) -> Node:
    """``log(mean(exp(x)))`` over all entries, computed stably.

    First-order only: its backward pass is not expressed in graph operations.
    """
    x = as_node(x)

    def fwd(v):
        m = np.max(v)
        return m + np.log(np.mean(np.exp(v - m)))

    def vjp(g, out, needs):
        v = x.value
        w = np.exp(v - np.max(v))
        return (Node(g.value * w / w.sum()),)

    return _make("logmeanexp", fwd, (x,), vjp, twice=False)


# ---------------------------------------------------------------------------
# graph traversal


def _toposort(root: Node, grad_only: bool) -> list[Node]:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in seen and (p.requires_grad or not grad_only):
                stack.append((p, False))
    return order


def evaluate(root: Node) -> np.ndarray:
    """Recompute the graph under ``root`` from its current leaf values."""
    for node in _toposort(root, grad_only=False):
        if node.parents:
            node.value = _check(
                np.asarray(node.forward(*[p.value for p in node.parents]), dtype=np.float64), node.op
            )
    return root.value


def grad_nodes(root: Node, leaves: Sequence[Node], create_graph: bool = False) -> list[Node]:
    """Gradients of scalar ``root`` with respect to ``leaves``, as nodes.

    With ``create_graph=True`` the returned nodes carry their own graph and can
    be differentiated again.
    """
    if root.value.size != 1:
        raise ContractError(f"gradient root must be scalar, got shape {root.shape}")
    zeros = [Node(np.zeros_like(leaf.value)) for leaf in leaves]
    if not root.requires_grad:
        return zeros
    order = _toposort(root, grad_only=True)
    targets = {id(leaf) for leaf in leaves}
    relevant = set()
    for node in order:
        if id(node) in targets or any(id(p) in relevant for p in node.parents):
            relevant.add(id(node))
    if create_graph:
        bad = sorted({n.op for n in order if n.parents and not n.twice and id(n) in relevant})
        if bad:
            raise SecondOrderUnsupportedError(bad)
    grads: dict[int, Node] = {id(root): Node(np.ones_like(root.value))}
    with nullcontext() if create_graph else no_grad():
        for node in reversed(order):
            if not node.parents or id(node) not in relevant:
                continue
            g = grads.get(id(node))
            if g is None:
                continue
            needs = tuple(p.requires_grad and id(p) in relevant for p in node.parents)
            for p, gp in zip(node.parents, node.vjp(g, node, needs)):
                if gp is None or not (p.requires_grad and id(p) in relevant):
                    continue
                prev = grads.get(id(p))
                grads[id(p)] = gp if prev is None else add(prev, gp)
    return [grads.get(id(leaf), z) for leaf, z in zip(leaves, zeros)]


def gradient(root: Node, leaves: Sequence[Node]) -> list[np.ndarray]:
    """d root / d leaf for every leaf; unreached leaves get zeros."""
    return [g.value for g in grad_nodes(root, leaves)]


def input_gradient(f_apply: Callable[[Node], Node], x, return_output: bool = False):
    """Gradient of ``f_apply`` with respect to its input, kept differentiable.

    ``f_apply`` may return a batch of outputs; their sum is differentiated, which
    gives per-row input gradients for maps that act row-wise.  With
    ``return_output`` the forward node is returned too, as ``(output, gradient)``.
    """
    xn = Node(x.value if isinstance(x, Node) else x, requires_grad=True)
    with _enabled():
        out = f_apply(xn)
        (g,) = grad_nodes(sum_(out), [xn], create_graph=True)
    return (out, g) if return_output else g


@contextmanager
def _enabled():
    prev = is_grad_enabled()
    _mode.enabled = True
    try:
        yield
    finally:
        _mode.enabled = prev


# ---------------------------------------------------------------------------
# finite-difference checking


def numerical_gradient(fn: Callable[[], float], arrays: Sequence[np.ndarray], h: float = 1e-6) -> list[np.ndarray]:
    """Central differences of the scalar ``fn()`` with respect to each array,
    perturbed in place."""
    out = []
    for arr in arrays:
        g = np.zeros(arr.shape)
        for i in np.ndindex(arr.shape):
            orig = arr[i]
            arr[i] = orig + h
            up = fn()
            arr[i] = orig - h
            down = fn()
            arr[i] = orig
            g[i] = (up - down) / (2.0 * h)
        out.append(g)
    return out


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    """``|a - b| / max(|a| + |b|, tiny)`` in the Euclidean norm."""
    diff = float(np.linalg.norm(np.ravel(a) - np.ravel(b)))
    scale = float(np.linalg.norm(np.ravel(a)) + np.linalg.norm(np.ravel(b)))
    return diff / scale if scale > 1e-12 else diff


def gradcheck(root: Node, leaves: Sequence[Node], h: float = 1e-6) -> float:
    """Worst relative error between reverse-mode and central-difference
    gradients of scalar ``root``; the graph is replayed with :func:`evaluate`."""
    analytic = gradient(root, leaves)

    def fn():
        return float(evaluate(root))

    numeric = numerical_gradient(fn, [leaf.value for leaf in leaves], h)
    evaluate(root)
    return max(relative_error(a, n) for a, n in zip(analytic, numeric))
