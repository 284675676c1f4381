"""Tape-free reverse-mode autodiff over dense float64 numpy arrays.

Every op builds a :class:`Node` holding its value and a closure mapping the
upstream gradient to one gradient per parent.  :func:`backward` walks the
graph in reverse topological order, accumulating into ``Node.grad``.

Elementwise ops broadcast only over leading dimensions: the smaller operand's
shape must be a suffix of the larger one's.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float64

# Stand-in for log(0) inside log-space recursions; keeps every value finite.
LOG_ZERO = -1e30

_grad_enabled = True


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class GraphError(RuntimeError):
    pass


@contextlib.contextmanager
def no_grad():
    """Compute values only; no parents or closures are recorded."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Node:
    __slots__ = (
        "op", "value", "grad", "parents", "requires_grad", "name",
        "_backward", "_version", "_parent_versions", "_consumed",
    )

    def __init__(self, value, op="const", parents=(), backward_fn=None,
                 requires_grad=False, name=None):
        self.op = op
        self.value = value
        self.grad = None
        self.parents = tuple(parents)
        self.requires_grad = requires_grad
        self.name = name
        self._backward = backward_fn
        self._version = 0
        self._parent_versions = tuple(p._version for p in self.parents)
        self._consumed = False

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def zero_grad(self):
        self.grad = np.zeros_like(self.value)

    def assign(self, new_value):
        """Replace a leaf's value in place (optimizer updates)."""
        if self.parents:
            raise GraphError("only leaf nodes can be reassigned")
        new_value = np.asarray(new_value, dtype=DTYPE)
        if new_value.shape != self.value.shape:
            raise ShapeError(f"assign: shape {new_value.shape} != {self.value.shape}")
        self.value = new_value
        self._version += 1

    def __repr__(self):
        label = self.name or self.op
        return f"Node({label}, shape={self.value.shape})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return multiply(self, other)

    def __rmul__(self, other):
        return multiply(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return slice_(self, key)


def constant(value, name=None) -> Node:
    return Node(np.asarray(value, dtype=DTYPE), name=name)


def parameter(value, name=None) -> Node:
    return Node(np.array(value, dtype=DTYPE), op="param", requires_grad=True, name=name)


def _as_node(x) -> Node:
    return x if isinstance(x, Node) else constant(x)


def _make(op, value, parents, backward_fn) -> Node:
    if not np.all(np.isfinite(value)):
        shapes = ", ".join(str(p.shape) for p in parents)
        raise NonFiniteError(f"{op}: non-finite output for inputs of shape {shapes}")
    if _grad_enabled and any(p.requires_grad for p in parents):
        return Node(value, op, parents, backward_fn, requires_grad=True)
    return Node(value, op)


def _check_broadcast(op, a, b):
    sa, sb = a.shape, b.shape
    if sa == sb:
        return
    short, long_ = (sa, sb) if len(sa) <= len(sb) else (sb, sa)
    if long_[len(long_) - len(short):] != short:
        raise ShapeError(f"{op}: incompatible shapes {sa} and {sb} "
                         "(only leading-dimension broadcasting is supported)")


def _reduce_to(g, shape):
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    return g.sum(axis=tuple(range(lead)))


# --------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Node:
    a, b = _as_node(a), _as_node(b)
    _check_broadcast("add", a, b)
    sa, sb = a.shape, b.shape
    return _make("add", a.value + b.value, (a, b),
                 lambda g: (_reduce_to(g, sa), _reduce_to(g, sb)))


def sub(a, b) -> Node:
    a, b = _as_node(a), _as_node(b)
    _check_broadcast("sub", a, b)
    sa, sb = a.shape, b.shape
    return _make("sub", a.value - b.value, (a, b),
                 lambda g: (_reduce_to(g, sa), -_reduce_to(g, sb)))


def multiply(a, b) -> Node:
    a, b = _as_node(a), _as_node(b)
    _check_broadcast("multiply", a, b)
    av, bv = a.value, b.value
    return _make("multiply", av * bv, (a, b),
                 lambda g: (_reduce_to(g * bv, av.shape), _reduce_to(g * av, bv.shape)))


def neg(x) -> Node:
    x = _as_node(x)
    return _make("neg", -x.value, (x,), lambda g: (-g,))


def exp(x) -> Node:
    out = np.exp(x.value)
    return _make("exp", out, (x,), lambda g: (g * out,))


def log(x) -> Node:
    xv = x.value
    with np.errstate(divide="ignore"):
        out = np.log(xv)
    return _make("log", out, (x,), lambda g: (g / xv,))


def sqrt(x) -> Node:
    out = np.sqrt(x.value)
    return _make("sqrt", out, (x,), lambda g: (g * 0.5 / out,))


def tanh(x) -> Node:
    out = np.tanh(x.value)
    return _make("tanh", out, (x,), lambda g: (g * (1.0 - out * out),))


def sigmoid(x) -> Node:
    xv = x.value
    out = np.empty_like(xv)
    pos = xv >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-xv[pos]))
    ez = np.exp(xv[~pos])
    out[~pos] = ez / (1.0 + ez)
    return _make("sigmoid", out, (x,), lambda g: (g * out * (1.0 - out),))


def relu(x) -> Node:
    mask = x.value > 0
    return _make("relu", x.value * mask, (x,), lambda g: (g * mask,))


# --------------------------------------------------------------------------
# linear algebra and reductions


def matmul(a, b) -> Node:
    """``a @ b`` with ``b`` either a shared 2-D weight or a batch of matrices
    with the same leading dims as ``a``."""
    a, b = _as_node(a), _as_node(b)
    av, bv = a.value, b.value
    if av.ndim < 1 or bv.ndim < 2 or av.shape[-1] != bv.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions differ, {av.shape} @ {bv.shape}")
    if bv.ndim == 2:
        def backward(g):
            ga = g @ bv.T
            gb = av.reshape(-1, av.shape[-1]).T @ g.reshape(-1, bv.shape[-1])
            return ga, gb
    elif av.ndim == bv.ndim and av.shape[:-2] == bv.shape[:-2]:
        def backward(g):
            return g @ np.swapaxes(bv, -1, -2), np.swapaxes(av, -1, -2) @ g
    else:
        raise ShapeError(f"matmul: cannot batch {av.shape} @ {bv.shape}")
    return _make("matmul", av @ bv, (a, b), backward)


def sum_(x, axis=None, keepdims=False) -> Node:
    shape = x.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make("sum", np.sum(x.value, axis=axis, keepdims=keepdims), (x,), backward)


def mean(x, axis=None, keepdims=False) -> Node:
    n = x.value.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    shape = x.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, shape).copy(),)

    return _make("mean", np.mean(x.value, axis=axis, keepdims=keepdims), (x,), backward)


def logsumexp(x, axis=-1, keepdims=False) -> Node:
    xv = x.value
    m = np.max(xv, axis=axis, keepdims=True)
    e = np.exp(xv - m)
    s = e.sum(axis=axis, keepdims=True)
    out = m + np.log(s)
    weights = e / s

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (g * weights,)

    value = out if keepdims else np.squeeze(out, axis=axis)
    return _make("logsumexp", value, (x,), backward)


def softmax(x) -> Node:
    xv = x.value
    e = np.exp(xv - xv.max(axis=-1, keepdims=True))
    out = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _make("softmax", out, (x,), backward)


def log_softmax(x) -> Node:
    xv = x.value
    shifted = xv - xv.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out = shifted - lse
    probs = np.exp(out)

    def backward(g):
        return (g - probs * g.sum(axis=-1, keepdims=True),)

    return _make("log_softmax", out, (x,), backward)


# --------------------------------------------------------------------------
# structural ops


def concat(nodes: Sequence[Node], axis=-1) -> Node:
    nodes = [_as_node(n) for n in nodes]
    ref = nodes[0].shape
    ax = axis % len(ref)
    for n in nodes[1:]:
        if len(n.shape) != len(ref) or any(
                n.shape[i] != ref[i] for i in range(len(ref)) if i != ax):
            raise ShapeError(f"concat: incompatible shapes {[m.shape for m in nodes]} on axis {axis}")
    sizes = [n.shape[ax] for n in nodes]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=ax))

    return _make("concat", np.concatenate([n.value for n in nodes], axis=ax), nodes, backward)


def stack(nodes: Sequence[Node], axis=0) -> Node:
    nodes = [_as_node(n) for n in nodes]
    shapes = {n.shape for n in nodes}
    if len(shapes) != 1:
        raise ShapeError(f"stack: shapes differ {[n.shape for n in nodes]}")
    k = len(nodes)

    def backward(g):
        return tuple(np.take(g, i, axis=axis) for i in range(k))

    return _make("stack", np.stack([n.value for n in nodes], axis=axis), nodes, backward)


def slice_(x, key) -> Node:
    shape = x.shape

    def backward(g):
        full = np.zeros(shape, dtype=DTYPE)
        full[key] = g
        return (full,)

    return _make("slice", x.value[key], (x,), backward)


def reshape(x, shape) -> Node:
    old = x.shape
    return _make("reshape", x.value.reshape(shape), (x,), lambda g: (g.reshape(old),))


def swapaxes(x, a1, a2) -> Node:
    return _make("swapaxes", np.swapaxes(x.value, a1, a2), (x,),
                 lambda g: (np.swapaxes(g, a1, a2),))


def embedding(table: Node, indices) -> Node:
    """Row lookup ``table[indices]``; repeated indices accumulate."""
    idx = np.asarray(indices, dtype=np.int64)
    if table.ndim != 2:
        raise ShapeError(f"embedding: table must be 2-D, got {table.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise ShapeError(f"embedding: index out of range for table {table.shape}")
    shape = table.shape

    def backward(g):
        full = np.zeros(shape, dtype=DTYPE)
        np.add.at(full, idx, g)
        return (full,)

    return _make("embedding", table.value[idx], (table,), backward)


def take(x: Node, indices) -> Node:
    """Gather along the last axis: ``out[..., k] = x[..., indices[..., k]]``."""
    idx = np.asarray(indices, dtype=np.int64)
    if idx.shape[:-1] != x.shape[:-1]:
        raise ShapeError(f"take: index shape {idx.shape} does not match {x.shape}")
    shape = x.shape

    def backward(g):
        full = np.zeros(shape, dtype=DTYPE)
        lead = np.indices(idx.shape, sparse=True)[:-1]
        np.add.at(full, (*lead, idx), g)
        return (full,)

    return _make("take", np.take_along_axis(x.value, idx, axis=-1), (x,), backward)


def gradient_reversal(x: Node, alpha: float) -> Node:
    """Identity forward; multiplies the upstream gradient by ``-alpha``."""
    if alpha < 0:
        raise ValueError(f"gradient_reversal: alpha must be >= 0, got {alpha}")
    alpha = float(alpha)
    return _make("gradient_reversal", x.value, (x,), lambda g: (-alpha * g,))


# --------------------------------------------------------------------------
# backward pass


def _topo_order(root: Node) -> list[Node]:
    order, seen = [], set()
    stack_ = [(root, False)]
    while stack_:
        node, expanded = stack_.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack_.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack_.append((p, False))
    return order


def backward(root: Node) -> dict[Node, np.ndarray]:
    """Accumulate d(root)/d(node) into every reachable node's ``grad``.

    Leaf gradients add onto whatever the leaf already holds, so parameters
    shared across several losses sum their contributions; call
    :meth:`Node.zero_grad` between optimizer steps.  Returns the leaf
    gradients keyed by node.
    """
    if root.value.size != 1:
        raise GraphError(f"backward: root must be scalar, got shape {root.shape}")
    if root._consumed:
        raise GraphError("backward: graph already differentiated; rebuild it")
    if not root.requires_grad:
        return {}
    order = _topo_order(root)
    for node in order:
        for p, v in zip(node.parents, node._parent_versions):
            if p._version != v:
                raise GraphError(f"backward: {p!r} was modified after the forward pass")
        if node.parents:
            node.grad = None

    root.grad = np.ones_like(root.value)
    leaves = {}
    for node in reversed(order):
        node._consumed = True
        if node._backward is None:
            leaves[node] = node.grad
            continue
        g = node.grad
        if g is None:
            continue
        for p, pg in zip(node.parents, node._backward(g)):
            if not p.requires_grad:
                continue
            if p.grad is None:
                p.grad = np.array(pg, dtype=DTYPE)
            else:
                p.grad = p.grad + pg
    return {n: n.grad for n in leaves if n.grad is not None}


# --------------------------------------------------------------------------
# gradient checking


def grad_check(f: Callable[[Node], Node], x, eps: float = 1e-5) -> float:
    """Max relative error between autodiff and central differences of ``f`` at ``x``.

    ``f`` maps a node to a scalar node.  Relative error per entry is
    ``|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)``.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    x = np.array(x, dtype=DTYPE)
    xp = parameter(x)
    out = f(xp)
    backward(out)
    analytic = xp.grad if xp.grad is not None else np.zeros_like(x)

    numeric = np.zeros_like(x)
    flat = numeric.reshape(-1)
    with no_grad():
        for i in range(x.size):
            bumped = x.copy().reshape(-1)
            bumped[i] += eps
            hi = float(f(constant(bumped.reshape(x.shape))).value)
            bumped[i] -= 2 * eps
            lo = float(f(constant(bumped.reshape(x.shape))).value)
            if not (np.isfinite(hi) and np.isfinite(lo)):
                raise NonFiniteError(f"grad_check: f is non-finite near entry {i}")
            flat[i] = (hi - lo) / (2 * eps)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom)) if x.size else 0.0


def grad_check_params(loss_fn: Callable[[], Node], params: Iterable[Node],
                      eps: float = 1e-5) -> float:
    """Like :func:`grad_check` but perturbs existing parameter leaves in place."""
    params = list(params)
    for p in params:
        p.grad = None
    out = loss_fn()
    backward(out)
    worst = 0.0
    for p in params:
        analytic = p.grad if p.grad is not None else np.zeros_like(p.value)
        base = p.value.copy()
        numeric = np.zeros_like(base)
        with no_grad():
            for i in range(base.size):
                v = base.copy().reshape(-1)
                v[i] += eps
                p.value = v.reshape(base.shape)
                hi = float(loss_fn().value)
                v[i] -= 2 * eps
                p.value = v.reshape(base.shape)
                lo = float(loss_fn().value)
                numeric.reshape(-1)[i] = (hi - lo) / (2 * eps)
        p.value = base
        p.grad = None
        denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
        if base.size:
            worst = max(worst, float(np.max(np.abs(analytic - numeric) / denom)))
    return worst
