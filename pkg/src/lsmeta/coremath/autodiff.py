"""Tape-based reverse-mode differentiation over numpy arrays.

Every primitive appends a node to a :class:`Tape`.  Nodes are stored in
recording order, so walking the tape backwards is a valid reverse
topological order.  Vector-Jacobian products are themselves written with
the same primitives; when ``create_graph=True`` the backward pass is
recorded onto the tape and can be differentiated again (this is what
second-order MAML needs).

The primitives are polymorphic: called with plain ndarrays they simply
compute, called with at least one :class:`Var` they record.  Operands that
are not Vars are frozen as constants and receive no gradient.
"""
from __future__ import annotations

import numpy as np
from scipy.special import expit

from ..errors import ShapeError

__all__ = [
    "Tape",
    "Var",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "scale",
    "matmul",
    "matmul_nt",
    "matmul_tn",
    "sigmoid",
    "sigmoid_grad",
    "relu",
    "log",
    "clip",
    "total",
    "mean",
    "sum_to",
    "broadcast_to",
    "bce_logits",
    "value_of",
]


class Var:
    """A recorded array value living on a tape."""

    __slots__ = ("value", "tape", "index")

    def __init__(self, value, tape, index):
        self.value = value
        self.tape = tape
        self.index = index

    @property
    def shape(self):
        return self.value.shape

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

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __float__(self):
        return float(self.value)

    def __repr__(self):
        return f"Var(index={self.index}, shape={self.value.shape})"


class _Node:
    __slots__ = ("parents", "fn", "vjp", "name")

    def __init__(self, parents, fn, vjp, name):
        self.parents = parents  # tuple of parent node indices (Var operands only)
        self.fn = fn  # parent values -> value
        self.vjp = vjp  # (g, out, *parent values or Vars) -> parent grads
        self.name = name


class Tape:
    """Linear record of primitive operations."""

    def __init__(self):
        self.nodes = []
        self.values = []

    def __len__(self):
        return len(self.nodes)

    def leaf(self, value):
        """Register an independent variable."""
        value = np.array(value, dtype=np.float64)
        return self._push(value, _Node((), None, None, "leaf"))

    def _push(self, value, node):
        self.nodes.append(node)
        self.values.append(value)
        return Var(value, self, len(self.nodes) - 1)

    def gradient(self, output, wrt, create_graph=False):
        """Gradients of a scalar ``output`` with respect to each Var in ``wrt``.

        With ``create_graph`` the returned gradients are Vars recorded on this
        tape (differentiable again); otherwise they are plain arrays.
        """
        if output.tape is not self or any(w.tape is not self for w in wrt):
            raise ValueError("all variables must live on this tape")
        if output.value.size != 1:
            raise ShapeError(f"gradient needs a scalar output, got shape {output.shape}")
        stop = output.index
        adj = {stop: np.ones_like(output.value)}
        wanted = {w.index for w in wrt}
        found = {}
        nodes, values = self.nodes, self.values
        for i in range(stop, -1, -1):
            g = adj.pop(i, None)
            if g is None:
                continue
            if i in wanted:
                found[i] = g
            node = nodes[i]
            if node.vjp is None:
                continue
            if create_graph:
                out = Var(values[i], self, i)
                parents = [Var(values[p], self, p) for p in node.parents]
            else:
                out = values[i]
                parents = [values[p] for p in node.parents]
            for p, pg in zip(node.parents, node.vjp(g, out, *parents)):
                prev = adj.get(p)
                adj[p] = pg if prev is None else add(prev, pg)
        result = []
        for w in wrt:
            g = found.get(w.index)
            if g is None:
                g = np.zeros_like(w.value)
            result.append(g if create_graph else value_of(g))
        return result

    def replay(self, leaf_values=None):
        """Recompute every node from the leaves in recording order.

        ``leaf_values`` optionally maps leaf index -> replacement value.
        """
        leaf_values = leaf_values or {}
        vals = []
        for i, node in enumerate(self.nodes):
            if node.fn is None:
                vals.append(np.asarray(leaf_values.get(i, self.values[i]), dtype=np.float64))
            else:
                vals.append(node.fn(*[vals[p] for p in node.parents]))
        return vals


def value_of(x):
    return x.value if isinstance(x, Var) else x


def _apply(name, fn, vjp, *args):
    """Evaluate ``fn`` on operand values and record the op if any operand is a Var.

    ``vjp(g, out, needs, *operands)`` returns one gradient per operand; it
    may return None for operands whose ``needs`` flag is False.
    """
    tape = None
    needs = []
    vals = []
    for a in args:
        if isinstance(a, Var):
            if tape is None:
                tape = a.tape
            elif a.tape is not tape:
                raise ValueError("operands live on different tapes")
            needs.append(True)
            vals.append(a.value)
        else:
            needs.append(False)
            vals.append(a if isinstance(a, np.ndarray) else np.asarray(a, dtype=np.float64))
    out = np.asarray(fn(*vals))
    if tape is None:
        return out
    var_pos = [i for i, n in enumerate(needs) if n]
    parents = tuple(args[i].index for i in var_pos)
    needs = tuple(needs)

    def fwd(*pvals):
        full = list(vals)
        for i, v in zip(var_pos, pvals):
            full[i] = v
        return np.asarray(fn(*full))

    def node_vjp(g, o, *pvars):
        full = list(vals)
        for i, v in zip(var_pos, pvars):
            full[i] = v
        grads = vjp(g, o, needs, *full)
        return [grads[i] for i in var_pos]

    return tape._push(out, _Node(parents, fwd, node_vjp, name))


def _shape(x):
    return np.shape(value_of(x))


# -- broadcasting helpers --------------------------------------------------


def _sum_to_np(x, shape):
    if x.shape == shape:
        return x
    lead = x.ndim - len(shape)
    if lead > 0:
        x = x.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and x.shape[i] != 1)
    if axes:
        x = x.sum(axis=axes, keepdims=True)
    return np.asarray(x).reshape(shape)


def sum_to(x, shape):
    """Sum ``x`` down to ``shape`` (the adjoint of broadcasting)."""
    shape = tuple(shape)
    in_shape = _shape(x)
    if in_shape == shape:
        return x
    return _apply(
        "sum_to",
        lambda a: _sum_to_np(a, shape),
        lambda g, o, nd, a: (broadcast_to(g, in_shape),),
        x,
    )


def broadcast_to(x, shape):
    shape = tuple(shape)
    in_shape = _shape(x)
    if in_shape == shape:
        return x
    return _apply(
        "broadcast_to",
        lambda a: np.broadcast_to(a, shape).copy(),
        lambda g, o, nd, a: (sum_to(g, in_shape),),
        x,
    )


# -- elementwise -----------------------------------------------------------


def add(a, b):
    def vjp(g, o, nd, x, y):
        return (sum_to(g, _shape(x)) if nd[0] else None, sum_to(g, _shape(y)) if nd[1] else None)

    return _apply("add", np.add, vjp, a, b)


def sub(a, b):
    def vjp(g, o, nd, x, y):
        return (
            sum_to(g, _shape(x)) if nd[0] else None,
            neg(sum_to(g, _shape(y))) if nd[1] else None,
        )

    return _apply("sub", np.subtract, vjp, a, b)


def mul(a, b):
    def vjp(g, o, nd, x, y):
        return (
            sum_to(mul(g, y), _shape(x)) if nd[0] else None,
            sum_to(mul(g, x), _shape(y)) if nd[1] else None,
        )

    return _apply("mul", np.multiply, vjp, a, b)


def div(a, b):
    def vjp(g, o, nd, x, y):
        return (
            sum_to(div(g, y), _shape(x)) if nd[0] else None,
            sum_to(neg(div(mul(g, o), y)), _shape(y)) if nd[1] else None,
        )

    return _apply("div", np.divide, vjp, a, b)


def neg(a):
    return _apply("neg", np.negative, lambda g, o, nd, x: (neg(g),), a)


def scale(a, c):
    """Multiply by a Python scalar constant."""
    c = float(c)
    return _apply("scale", lambda x: x * c, lambda g, o, nd, x: (scale(g, c),), a)


def sigmoid(a):
    return _apply("sigmoid", expit, lambda g, o, nd, x: (sigmoid_grad(g, o),), a)


def sigmoid_grad(g, s):
    """g * s * (1 - s): the sigmoid backward rule as a single op."""

    def vjp(gg, o, nd, gv, sv):
        return (
            sigmoid_grad(gg, sv) if nd[0] else None,
            mul(mul(gg, gv), sub(1.0, scale(sv, 2.0))) if nd[1] else None,
        )

    return _apply("sigmoid_grad", lambda x, s: x * s * (1.0 - s), vjp, g, s)


def relu(a):
    def vjp(g, o, nd, x):
        return (mul(g, (value_of(x) > 0).astype(np.float64)),)

    return _apply("relu", lambda x: np.maximum(x, 0.0), vjp, a)


def log(a):
    return _apply("log", np.log, lambda g, o, nd, x: (div(g, x),), a)


def clip(a, lo, hi):
    """Clamp to [lo, hi]; the gradient is zero where the clamp is active."""

    def vjp(g, o, nd, x):
        xv = value_of(x)
        return (mul(g, ((xv >= lo) & (xv <= hi)).astype(np.float64)),)

    return _apply("clip", lambda x: np.clip(x, lo, hi), vjp, a)


# -- linear algebra ---------------------------------------------------------


def _swap(x):
    return np.swapaxes(x, -1, -2)


def _check_mm(av, bv, ta, tb):
    if np.ndim(av) < 2 or np.ndim(bv) < 2:
        raise ShapeError("matmul expects operands with at least 2 dimensions")
    k1 = av.shape[-2] if ta else av.shape[-1]
    k2 = bv.shape[-1] if tb else bv.shape[-2]
    if k1 != k2:
        raise ShapeError(f"matmul shape mismatch: {av.shape} and {bv.shape}")


def matmul(a, b):
    """a @ b (batched over leading axes)."""
    _check_mm(value_of(a), value_of(b), False, False)

    def vjp(g, o, nd, x, y):
        return (
            sum_to(matmul_nt(g, y), _shape(x)) if nd[0] else None,
            sum_to(matmul_tn(x, g), _shape(y)) if nd[1] else None,
        )

    return _apply("matmul", np.matmul, vjp, a, b)


def matmul_nt(a, b):
    """a @ b^T over the last two axes."""
    _check_mm(value_of(a), value_of(b), False, True)

    def vjp(g, o, nd, x, y):
        return (
            sum_to(matmul(g, y), _shape(x)) if nd[0] else None,
            sum_to(matmul_tn(g, x), _shape(y)) if nd[1] else None,
        )

    return _apply("matmul_nt", lambda x, y: np.matmul(x, _swap(y)), vjp, a, b)


def matmul_tn(a, b):
    """a^T @ b over the last two axes."""
    _check_mm(value_of(a), value_of(b), True, False)

    def vjp(g, o, nd, x, y):
        return (
            sum_to(matmul_nt(y, g), _shape(x)) if nd[0] else None,
            sum_to(matmul(x, g), _shape(y)) if nd[1] else None,
        )

    return _apply("matmul_tn", lambda x, y: np.matmul(_swap(x), y), vjp, a, b)


# -- reductions ------------------------------------------------------------


def total(a):
    """Sum of all entries (0-d result)."""
    return _apply(
        "sum",
        lambda x: np.asarray(x.sum()),
        lambda g, o, nd, x: (broadcast_to(g, _shape(x)),),
        a,
    )


def mean(a):
    return scale(total(a), 1.0 / value_of(a).size)


# -- fused loss head -------------------------------------------------------


def _bce_forward(z, y, w, eps):
    p = np.clip(expit(z), eps, 1.0 - eps)
    return np.asarray(-(w * (y * np.log(p) + (1.0 - y) * np.log(1.0 - p))).sum())


def _active(z, eps):
    p = expit(z)
    return ((p >= eps) & (p <= 1.0 - eps)).astype(np.float64)


def bce_logits(z, y, w, eps):
    """Weighted sum of clamped binary cross-entropies of sigmoid(z).

    Equals ``-sum(w * (y log p + (1-y) log(1-p)))`` with ``p = clip(sigmoid(z),
    eps, 1-eps)``; ``y`` and ``w`` are constants broadcastable to ``z``.
    """
    y = np.asarray(value_of(y), dtype=np.float64)
    w = np.asarray(value_of(w), dtype=np.float64)

    def vjp(g, o, nd, zv):
        return (mul(g, _bce_dlogit(zv, y, w, eps)),)

    return _apply("bce_logits", lambda zz: _bce_forward(zz, y, w, eps), vjp, z)


def _bce_dlogit(z, y, w, eps):
    # d/dz = w * (sigmoid(z) - y) inside the clamp, 0 outside
    def vjp(g, o, nd, zv):
        m = w * _active(value_of(zv), eps)
        return (mul(mul(g, m), sigmoid_grad(1.0, sigmoid(zv))),)

    return _apply(
        "bce_dlogit",
        lambda zz: w * _active(zz, eps) * (expit(zz) - y),
        vjp,
        z,
    )
