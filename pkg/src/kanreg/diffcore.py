"""Array-valued reverse-mode tape with three-tangent dual numbers on top.

Every primitive accepts plain ``numpy`` arrays or :class:`Node` objects.  When
no argument is a node the primitive simply computes the array, so the same
model code runs untaped for inference.  :class:`Dual` carries a primal and a
stacked tangent of shape ``(3,) + primal.shape``; its arithmetic is written in
terms of the tape primitives, so tangents recorded on a tape stay
differentiable with respect to the tape leaves (forward-over-reverse).
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Node",
    "Tape",
    "Dual",
    "backward",
    "value_of",
    "spatial_jacobian",
    "jacobian_array",
    "grad_check",
]


class Node:
    """One recorded value on a :class:`Tape`."""

    __slots__ = ("tape", "value", "edges", "index", "is_leaf")
    __array_priority__ = 1000

    def __init__(self, tape: "Tape", value, edges=(), is_leaf=False):
        self.tape = tape
        self.value = value
        self.edges = edges
        self.is_leaf = is_leaf
        self.index = len(tape.nodes)
        tape.nodes.append(self)

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    @property
    def dtype(self):
        return self.value.dtype

    def __repr__(self):
        return f"Node(#{self.index}, shape={self.value.shape})"

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

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, idx):
        return getitem(self, idx)


class Tape:
    """Append-only record of primitive applications."""

    def __init__(self):
        self.nodes: list[Node] = []

    def __len__(self):
        return len(self.nodes)

    def leaf(self, value) -> Node:
        """Register a differentiable input (a parameter)."""
        return Node(self, np.asarray(value), is_leaf=True)

    def record(self, value, edges) -> Node:
        """Record ``value`` produced from ``edges``: (parent, vjp) pairs."""
        return Node(self, value, tuple(edges))

    @property
    def leaves(self) -> list[Node]:
        return [n for n in self.nodes if n.is_leaf]

    def release(self) -> None:
        """Drop the recorded graph.

        Nodes and their tape reference each other, so without this the graph
        waits for a full cyclic collection, and memory grows across iterations.
        """
        for node in self.nodes:
            node.edges = ()
        self.nodes.clear()


def value_of(x):
    """Strip the tape (and the tangent, for duals) from ``x``."""
    if isinstance(x, Dual):
        x = x.primal
    return x.value if isinstance(x, Node) else x


def _tape_of(*xs) -> Tape | None:
    tape = None
    for x in xs:
        if isinstance(x, Node):
            if tape is None:
                tape = x.tape
            elif x.tape is not tape:
                raise ValueError("operands live on different tapes")
    return tape


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def backward(tape: Tape, root: Node) -> dict[Node, np.ndarray]:
    """Adjoints of a scalar ``root`` with respect to every leaf of ``tape``."""
    if not tape.nodes:
        raise ValueError("backward on an empty tape")
    if not isinstance(root, Node) or root.tape is not tape:
        raise ValueError("root is not a node of this tape")
    if root.value.size != 1:
        raise ValueError(f"backward root must be scalar, got shape {root.value.shape}")
    adj: list = [None] * len(tape.nodes)
    adj[root.index] = np.ones_like(root.value)
    for node in reversed(tape.nodes[: root.index + 1]):
        g = adj[node.index]
        if g is None or node.is_leaf:
            continue
        adj[node.index] = None
        for parent, vjp in node.edges:
            pg = vjp(g)
            cur = adj[parent.index]
            adj[parent.index] = pg if cur is None else cur + pg
    return {
        leaf: (adj[leaf.index] if adj[leaf.index] is not None else np.zeros_like(leaf.value))
        for leaf in tape.leaves
    }


# --------------------------------------------------------------------------
# tape primitives


def add(a, b):
    if isinstance(a, Dual) or isinstance(b, Dual):
        return _dual(a) + _dual(b)
    av, bv = value_of(a), value_of(b)
    out = av + bv
    tape = _tape_of(a, b)
    if tape is None:
        return out
    edges = []
    if isinstance(a, Node):
        edges.append((a, lambda g, s=np.shape(av): _unbroadcast(g, s)))
    if isinstance(b, Node):
        edges.append((b, lambda g, s=np.shape(bv): _unbroadcast(g, s)))
    return tape.record(out, edges)


def sub(a, b):
    if isinstance(a, Dual) or isinstance(b, Dual):
        return _dual(a) - _dual(b)
    av, bv = value_of(a), value_of(b)
    out = av - bv
    tape = _tape_of(a, b)
    if tape is None:
        return out
    edges = []
    if isinstance(a, Node):
        edges.append((a, lambda g, s=np.shape(av): _unbroadcast(g, s)))
    if isinstance(b, Node):
        edges.append((b, lambda g, s=np.shape(bv): _unbroadcast(-g, s)))
    return tape.record(out, edges)


def mul(a, b):
    if isinstance(a, Dual) or isinstance(b, Dual):
        return _dual(a) * _dual(b)
    av, bv = value_of(a), value_of(b)
    out = av * bv
    tape = _tape_of(a, b)
    if tape is None:
        return out
    edges = []
    if isinstance(a, Node):
        edges.append((a, lambda g: _unbroadcast(g * bv, np.shape(av))))
    if isinstance(b, Node):
        edges.append((b, lambda g: _unbroadcast(g * av, np.shape(bv))))
    return tape.record(out, edges)


def div(a, b):
    if isinstance(a, Dual) or isinstance(b, Dual):
        return _dual(a) / _dual(b)
    av, bv = value_of(a), value_of(b)
    out = av / bv
    tape = _tape_of(a, b)
    if tape is None:
        return out
    edges = []
    if isinstance(a, Node):
        edges.append((a, lambda g: _unbroadcast(g / bv, np.shape(av))))
    if isinstance(b, Node):
        edges.append((b, lambda g: _unbroadcast(-g * out / bv, np.shape(bv))))
    return tape.record(out, edges)


def neg(a):
    if isinstance(a, Dual):
        return Dual(neg(a.primal), None if a.tangent is None else neg(a.tangent))
    out = -value_of(a)
    if not isinstance(a, Node):
        return out
    return a.tape.record(out, [(a, lambda g: -g)])


def _unary(a, fwd, deriv):
    """Elementwise op; ``deriv(x, y)`` is the local derivative as an array."""
    x = value_of(a)
    y = fwd(x)
    if not isinstance(a, Node):
        return y
    return a.tape.record(y, [(a, lambda g: g * deriv(x, y))])


def _dual_unary(a: "Dual", prim, dfactor):
    """Dual rule: primal through ``prim``; tangent scaled by ``dfactor(p, y)``."""
    y = prim(a.primal)
    if a.tangent is None:
        return Dual(y, None)
    return Dual(y, mul(dfactor(a.primal, y), a.tangent))


def tanh(a):
    if isinstance(a, Dual):
        return _dual_unary(a, tanh, lambda p, y: 1.0 - y * y)
    return _unary(a, np.tanh, lambda x, y: 1.0 - y * y)


def sin(a):
    if isinstance(a, Dual):
        return _dual_unary(a, sin, lambda p, y: cos(p))
    return _unary(a, np.sin, lambda x, y: np.cos(x))


def cos(a):
    if isinstance(a, Dual):
        return _dual_unary(a, cos, lambda p, y: neg(sin(p)))
    return _unary(a, np.cos, lambda x, y: -np.sin(x))


def arccos(a):
    if isinstance(a, Dual):
        return _dual_unary(a, arccos, lambda p, y: neg(1.0 / sqrt(1.0 - p * p)))
    return _unary(a, np.arccos, lambda x, y: -1.0 / np.sqrt(1.0 - x * x))


def sqrt(a):
    if isinstance(a, Dual):
        return _dual_unary(a, sqrt, lambda p, y: 0.5 / y)
    return _unary(a, np.sqrt, lambda x, y: 0.5 / y)


def exp(a):
    if isinstance(a, Dual):
        return _dual_unary(a, exp, lambda p, y: y)
    return _unary(a, np.exp, lambda x, y: y)


def _np_sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def sigmoid(a):
    if isinstance(a, Dual):
        return _dual_unary(a, sigmoid, lambda p, y: y * (1.0 - y))
    return _unary(a, _np_sigmoid, lambda x, y: y * (1.0 - y))


def _silu_deriv(x, s=None):
    s = _np_sigmoid(x) if s is None else s
    return s * (1.0 + x * (1.0 - s))


def silu_deriv(a):
    """d/dx silu(x) as a differentiable primitive (needed for dual tangents)."""
    x = value_of(a)
    s = _np_sigmoid(x)
    y = _silu_deriv(x, s)
    if not isinstance(a, Node):
        return y
    # d2/dx2 silu = s(1-s)(2 + x(1-2s))
    return a.tape.record(y, [(a, lambda g: g * s * (1.0 - s) * (2.0 + x * (1.0 - 2.0 * s)))])


def silu(a):
    if isinstance(a, Dual):
        return _dual_unary(a, silu, lambda p, y: silu_deriv(p))
    x = value_of(a)
    s = _np_sigmoid(x)
    y = x * s
    if not isinstance(a, Node):
        return y
    return a.tape.record(y, [(a, lambda g: g * _silu_deriv(x, s))])


def relu(a):
    # subgradient 0 at exactly 0
    if isinstance(a, Dual):
        return _dual_unary(a, relu, lambda p, y: (value_of(p) > 0).astype(value_of(p).dtype))
    return _unary(a, lambda x: np.maximum(x, 0), lambda x, y: (x > 0).astype(x.dtype))


def absolute(a):
    if isinstance(a, Dual):
        return _dual_unary(a, absolute, lambda p, y: np.sign(value_of(p)))
    return _unary(a, np.abs, lambda x, y: np.sign(x))


def clip(a, lo, hi):
    """Clamp to [lo, hi]; zero derivative outside the interval."""
    if isinstance(a, Dual):
        return _dual_unary(
            a,
            lambda p: clip(p, lo, hi),
            lambda p, y: ((value_of(p) >= lo) & (value_of(p) <= hi)).astype(value_of(p).dtype),
        )
    return _unary(
        a, lambda x: np.clip(x, lo, hi), lambda x, y: ((x >= lo) & (x <= hi)).astype(x.dtype)
    )


def sum(a, axis=None):  # noqa: A001 - mirrors numpy
    if isinstance(a, Dual):
        t = None if a.tangent is None else sum(a.tangent, _shift_axis(axis, a.primal))
        return Dual(sum(a.primal, axis), t)
    x = value_of(a)
    out = np.sum(x, axis=axis)
    if not isinstance(a, Node):
        return out
    shape = x.shape

    def vjp(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g, shape).copy()

    return a.tape.record(np.asarray(out), [(a, vjp)])


def mean(a, axis=None):
    x = value_of(a)
    n = x.size if axis is None else np.prod([x.shape[i] for i in np.atleast_1d(axis)])
    return mul(sum(a, axis), 1.0 / float(n))


def _shift_axis(axis, primal):
    if axis is None:
        return tuple(range(1, value_of(primal).ndim + 1))
    axes = np.atleast_1d(axis)
    return tuple(int(ax) + 1 if ax >= 0 else int(ax) for ax in axes)


def reshape(a, shape):
    if isinstance(a, Dual):
        t = None if a.tangent is None else reshape(a.tangent, (3,) + tuple(shape))
        return Dual(reshape(a.primal, shape), t)
    x = value_of(a)
    out = x.reshape(shape)
    if not isinstance(a, Node):
        return out
    return a.tape.record(out, [(a, lambda g: g.reshape(x.shape))])


def getitem(a, idx):
    if isinstance(a, Dual):
        tidx = (slice(None),) + (idx if isinstance(idx, tuple) else (idx,))
        t = None if a.tangent is None else getitem(a.tangent, tidx)
        return Dual(getitem(a.primal, idx), t)
    x = value_of(a)
    out = x[idx]
    if not isinstance(a, Node):
        return out

    basic = all(
        isinstance(i, (int, np.integer, slice)) or i is Ellipsis or i is None
        for i in (idx if isinstance(idx, tuple) else (idx,))
    )

    def vjp(g):
        full = np.zeros_like(x)
        if basic:
            full[idx] = g
        else:
            np.add.at(full, idx, g)
        return full

    return a.tape.record(out, [(a, vjp)])


def take(a, indices, axis):
    """Gather along one axis (used to pick active coefficient slices)."""
    x = value_of(a)
    indices = np.asarray(indices)
    out = np.take(x, indices, axis=axis)
    if not isinstance(a, Node):
        return out

    def vjp(g):
        full = np.zeros_like(x)
        sl = [slice(None)] * x.ndim
        sl[axis] = indices
        np.add.at(full, tuple(sl), g)
        return full

    return a.tape.record(out, [(a, vjp)])


def concat(parts: Sequence, axis=0):
    vals = [value_of(p) for p in parts]
    out = np.concatenate(vals, axis=axis)
    tape = _tape_of(*parts)
    if tape is None:
        return out
    bounds = np.cumsum([0] + [v.shape[axis] for v in vals])
    edges = []
    for p, lo, hi in zip(parts, bounds[:-1], bounds[1:]):
        if isinstance(p, Node):
            edges.append((p, lambda g, lo=lo, hi=hi: np.take(g, np.arange(lo, hi), axis=axis)))
    return tape.record(out, edges)


def matmul(a, b):
    """``a @ b`` with ``b`` a matrix; ``a`` may carry leading batch axes."""
    if isinstance(b, Dual):
        raise TypeError("dual right operand of matmul is not supported")
    if isinstance(a, Dual):
        t = None if a.tangent is None else matmul(a.tangent, b)
        return Dual(matmul(a.primal, b), t)
    av, bv = value_of(a), value_of(b)
    if bv.ndim != 2:
        raise ValueError("matmul expects a 2-D right operand")
    lead = av.shape[:-1]
    a2 = av.reshape(-1, av.shape[-1])
    out = (a2 @ bv).reshape(lead + (bv.shape[1],))
    tape = _tape_of(a, b)
    if tape is None:
        return out
    edges = []
    if isinstance(a, Node):
        edges.append((a, lambda g: (g.reshape(-1, g.shape[-1]) @ bv.T).reshape(av.shape)))
    if isinstance(b, Node):
        edges.append((b, lambda g: a2.T @ g.reshape(-1, g.shape[-1])))
    return tape.record(out, edges)


def transpose(a, axes=None):
    x = value_of(a)
    out = np.transpose(x, axes)
    if not isinstance(a, Node):
        return out
    inverse = None if axes is None else np.argsort(axes)
    return a.tape.record(out, [(a, lambda g: np.transpose(g, inverse))])


def custom(value, parents_and_vjps: Iterable[tuple[object, Callable]]):
    """Record a fused primitive; non-node parents are dropped."""
    edges = [(p, f) for p, f in parents_and_vjps if isinstance(p, Node)]
    if not edges:
        return value
    tape = _tape_of(*(p for p, _ in edges))
    return tape.record(value, edges)


# --------------------------------------------------------------------------
# dual numbers


class Dual:
    """Primal value plus three spatial tangents stacked on axis 0."""

    __slots__ = ("primal", "tangent")

    def __init__(self, primal, tangent):
        self.primal = primal
        self.tangent = tangent

    @classmethod
    def seed(cls, x) -> "Dual":
        """Seed tangents for points ``x`` of shape (..., 3): d x_i / d x_j = delta_ij."""
        x = np.asarray(x)
        if x.shape[-1] != 3:
            raise ValueError(f"expected trailing dimension 3, got {x.shape}")
        t = np.zeros((3,) + x.shape, dtype=x.dtype)
        for j in range(3):
            t[j, ..., j] = 1.0
        return cls(x, t)

    @property
    def shape(self):
        return value_of(self.primal).shape

    def __repr__(self):
        return f"Dual(shape={self.shape})"

    def __add__(self, other):
        o = _dual(other)
        return Dual(add(self.primal, o.primal), _tadd(self.tangent, o.tangent))

    __radd__ = __add__

    def __sub__(self, other):
        o = _dual(other)
        return Dual(sub(self.primal, o.primal), _tsub(self.tangent, o.tangent))

    def __rsub__(self, other):
        return _dual(other) - self

    def __mul__(self, other):
        o = _dual(other)
        t = _tadd(
            None if o.tangent is None else mul(self.primal, o.tangent),
            None if self.tangent is None else mul(o.primal, self.tangent),
        )
        return Dual(mul(self.primal, o.primal), t)

    __rmul__ = __mul__

    def __truediv__(self, other):
        o = _dual(other)
        q = div(self.primal, o.primal)
        t = _tsub(
            None if self.tangent is None else div(self.tangent, o.primal),
            None if o.tangent is None else mul(div(q, o.primal), o.tangent),
        )
        return Dual(q, t)

    def __rtruediv__(self, other):
        return _dual(other) / self

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)


def _dual(x) -> Dual:
    """Lift a constant or node to a dual with no tangent."""
    return x if isinstance(x, Dual) else Dual(x, None)


def _tadd(a, b):
    if a is None:
        return b
    if b is None:
        return a
    return add(a, b)


def _tsub(a, b):
    if b is None:
        return a
    if a is None:
        return neg(b)
    return sub(a, b)


def spatial_jacobian(f: Callable[[Dual], Dual], x) -> list[list]:
    """Entries ``J[i][j] = d f_i / d x_j`` by forward mode.

    ``x`` has shape (3,) or (N, 3).  Entries are tape nodes when ``f`` touches
    tape leaves, otherwise arrays; each has the leading shape of ``x``.
    """
    y = f(Dual.seed(x))
    if not isinstance(y, Dual):
        raise TypeError("coordinate function must return a Dual")
    if y.shape[-1] != 3:
        raise ValueError(f"coordinate function must map to R^3, got shape {y.shape}")
    if y.tangent is None:
        zero = np.zeros(y.shape[:-1], dtype=value_of(y.primal).dtype)
        return [[zero for _ in range(3)] for _ in range(3)]
    return [[getitem(y.tangent, (j, Ellipsis, i)) for j in range(3)] for i in range(3)]


def jacobian_array(jac: list[list]) -> np.ndarray:
    """Stack a nested 3x3 jacobian into an array of shape (..., 3, 3)."""
    rows = [np.stack([np.asarray(value_of(e)) for e in row], axis=-1) for row in jac]
    return np.stack(rows, axis=-2)


def grad_check(
    f: Callable[..., object],
    params: Sequence[np.ndarray],
    step: float = 1e-5,
    indices: Sequence[Sequence[int]] | None = None,
) -> float:
    """Max relative error between tape gradients and central differences.

    ``f(*params)`` must return a scalar and work on both plain arrays and
    tape nodes.  ``indices`` optionally restricts the finite-difference probes
    to given flat positions per parameter.
    """
    params = [np.array(p, dtype=np.float64) for p in params]
    tape = Tape()
    leaves = [tape.leaf(p.copy()) for p in params]
    root = f(*leaves)
    if isinstance(root, Node):
        grads = backward(tape, root)
        analytic = [grads[leaf] for leaf in leaves]
    else:
        analytic = [np.zeros_like(p) for p in params]

    worst = 0.0
    for k, p in enumerate(params):
        flat = p.reshape(-1)
        probe = range(flat.size) if indices is None else indices[k]
        for i in probe:
            orig = flat[i]
            flat[i] = orig + step
            fp = float(np.asarray(value_of(f(*params))))
            flat[i] = orig - step
            fm = float(np.asarray(value_of(f(*params))))
            flat[i] = orig
            numeric = (fp - fm) / (2.0 * step)
            a = float(analytic[k].reshape(-1)[i])
            worst = max(worst, abs(a - numeric) / (abs(numeric) + 1e-12))
    return worst
