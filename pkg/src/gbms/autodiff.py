"""Reverse-mode automatic differentiation on an explicit tape.

Node payloads are whole numpy arrays (scalars are 0-d arrays), never
per-scalar nodes, so a 2000-step unrolled solver costs O(steps) nodes.
Every recorded value must be finite; a NaN/Inf result aborts recording
immediately so diverging solver unrolls fail loudly.
"""

from __future__ import annotations

import warnings
from typing import Callable, Sequence

import numpy as np
from scipy.special import expit


class AutodiffError(Exception):
    pass


class ShapeError(AutodiffError):
    pass


class NonFiniteError(AutodiffError):
    pass


class DomainError(AutodiffError):
    pass


class _Node:
    __slots__ = ("name", "parents", "value", "vjp", "fwd")

    def __init__(self, name, parents, value, vjp, fwd):
        self.name = name
        self.parents = parents  # node ids of differentiable inputs
        self.value = value
        self.vjp = vjp          # adjoint -> tuple of parent adjoints
        self.fwd = fwd          # parent values -> value, for replay checks


class Tape:
    """Append-only record of primitive applications.

    A tape is single-owner: record on it from one thread only. With
    ``record=False`` the same code path computes identical values but
    stores nothing (and cannot be differentiated).
    """

    def __init__(self, record: bool = True):
        self.nodes: list[_Node] = []
        self.record = record

    @property
    def node_count(self) -> int:
        return len(self.nodes)

    def leaf(self, value) -> "TapeVar":
        return self._append("leaf", (), _clean_value(value), None, None)

    def constant(self, value) -> "TapeVar":
        # like a leaf but never receives an adjoint; kept for readability
        return self._append("const", (), _clean_value(value), None, None)

    def _append(self, name, parents, value, vjp, fwd) -> "TapeVar":
        if not np.all(np.isfinite(value)):
            raise NonFiniteError(f"primitive '{name}' produced a non-finite value")
        if not self.record:
            return TapeVar(self, -1, value)
        node = _Node(name, parents, value, vjp, fwd)
        self.nodes.append(node)
        return TapeVar(self, len(self.nodes) - 1, value)

    def replay_check(self) -> bool:
        """Recompute every node from its parents; True if all values match exactly."""
        for node in self.nodes:
            if node.fwd is None:
                continue
            redo = node.fwd(*[self.nodes[p].value for p in node.parents])
            if not np.array_equal(np.asarray(redo), node.value):
                return False
        return True


class TapeVar:
    """Handle to one recorded value on a tape."""

    __slots__ = ("tape", "node_id", "value")

    def __init__(self, tape: Tape, node_id: int, value: np.ndarray):
        self.tape = tape
        self.node_id = node_id
        self.value = value

    @property
    def shape(self):
        return self.value.shape

    # operator sugar; constants may appear on either side
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

    def __repr__(self):
        return f"TapeVar(id={self.node_id}, shape={self.value.shape})"


class GradientMap:
    """Adjoints of a backward pass, keyed by node id.

    Nodes unreachable from the seed have adjoint exactly zero.
    """

    def __init__(self, adjoints: dict[int, np.ndarray], seed: int):
        self._adjoints = adjoints
        self.seed = seed

    def wrt(self, var: TapeVar) -> np.ndarray:
        g = self._adjoints.get(var.node_id)
        if g is None:
            return np.zeros_like(var.value)
        return g


def _clean_value(value) -> np.ndarray:
    arr = np.asarray(value, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError("leaf value is not finite")
    return arr


def _value(x) -> np.ndarray:
    return x.value if isinstance(x, TapeVar) else np.asarray(x, dtype=np.float64)


def _tape_of(*args) -> Tape:
    tape = None
    for a in args:
        if isinstance(a, TapeVar):
            if tape is None:
                tape = a.tape
            elif a.tape is not tape:
                raise ValueError("inputs live on different tapes")
    if tape is None:
        raise ValueError("at least one input must be a TapeVar")
    return tape


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to `shape`."""
    grad = np.asarray(grad)
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


def record(tape: Tape, name: str, value: np.ndarray, inputs: Sequence, vjp, fwd=None) -> TapeVar:
    """Append one primitive application; `inputs` may mix TapeVars and constants.

    Only TapeVar inputs receive adjoints from `vjp`, which must return one
    gradient per element of `inputs` (entries for constants are ignored).
    """
    tape_ids = []
    var_slots = []
    for i, x in enumerate(inputs):
        if isinstance(x, TapeVar):
            if x.tape is not tape:
                raise ValueError("input recorded on a different tape")
            tape_ids.append(x.node_id)
            var_slots.append(i)

    if vjp is None:
        packed = None
    else:
        def packed(adjoint, _vjp=vjp, _slots=tuple(var_slots)):
            grads = _vjp(adjoint)
            return tuple(grads[i] for i in _slots)

    return tape._append(name, tuple(tape_ids), np.asarray(value), packed, fwd)


def backward(output: TapeVar) -> GradientMap:
    """Reverse sweep from a scalar output; deterministic for a fixed tape."""
    if output.value.ndim != 0:
        raise ValueError("backward seed must be a scalar TapeVar")
    tape = output.tape
    if not tape.record:
        raise ValueError("tape was created with record=False")
    adjoints: dict[int, np.ndarray] = {output.node_id: np.asarray(1.0)}
    for node_id in range(output.node_id, -1, -1):
        adj = adjoints.get(node_id)
        if adj is None:
            continue
        node = tape.nodes[node_id]
        if node.vjp is None:
            continue
        grads = node.vjp(adj)
        for parent_id, g in zip(node.parents, grads):
            g = np.asarray(g)
            seen = adjoints.get(parent_id)
            if seen is None:
                adjoints[parent_id] = g.copy() if g.base is not None else g
            else:
                adjoints[parent_id] = seen + g
    return GradientMap(adjoints, output.node_id)


# ---------------------------------------------------------------------------
# elementwise primitives (numpy broadcasting, unbroadcast on the way back)


def add(a, b):
    tape = _tape_of(a, b)
    va, vb = _value(a), _value(b)
    return record(
        tape, "add", va + vb, (a, b),
        lambda g: (_unbroadcast(g, va.shape), _unbroadcast(g, vb.shape)),
        fwd=np.add,
    )


def sub(a, b):
    tape = _tape_of(a, b)
    va, vb = _value(a), _value(b)
    return record(
        tape, "sub", va - vb, (a, b),
        lambda g: (_unbroadcast(g, va.shape), _unbroadcast(-g, vb.shape)),
        fwd=np.subtract,
    )


def mul(a, b):
    tape = _tape_of(a, b)
    va, vb = _value(a), _value(b)
    return record(
        tape, "mul", va * vb, (a, b),
        lambda g: (_unbroadcast(g * vb, va.shape), _unbroadcast(g * va, vb.shape)),
        fwd=np.multiply,
    )


def div(a, b):
    tape = _tape_of(a, b)
    va, vb = _value(a), _value(b)
    out = va / vb
    return record(
        tape, "div", out, (a, b),
        lambda g: (_unbroadcast(g / vb, va.shape), _unbroadcast(-g * va / (vb * vb), vb.shape)),
        fwd=np.divide,
    )


def neg(a):
    va = _value(a)
    return record(_tape_of(a), "neg", -va, (a,), lambda g: (-g,), fwd=np.negative)


def exp(a):
    va = _value(a)
    out = np.exp(va)
    return record(_tape_of(a), "exp", out, (a,), lambda g: (g * out,), fwd=np.exp)


def log(a):
    va = _value(a)
    if np.any(va <= 0.0):
        raise DomainError("log of nonpositive argument")
    return record(_tape_of(a), "log", np.log(va), (a,), lambda g: (g / va,), fwd=np.log)


def sqrt(a):
    va = _value(a)
    if np.any(va <= 0.0):
        raise DomainError("sqrt of nonpositive argument")
    out = np.sqrt(va)
    return record(_tape_of(a), "sqrt", out, (a,), lambda g: (g / (2.0 * out),), fwd=np.sqrt)


def tanh(a):
    va = _value(a)
    out = np.tanh(va)
    return record(_tape_of(a), "tanh", out, (a,), lambda g: (g * (1.0 - out * out),), fwd=np.tanh)


def sigmoid(a, gain: float = 1.0):
    """Sigmoid with gain: 1 / (1 + exp(-gain * x))."""
    va = _value(a)
    out = expit(gain * va)
    return record(
        _tape_of(a), "sigmoid", out, (a,),
        lambda g: (g * gain * out * (1.0 - out),),
        fwd=lambda x: expit(gain * x),
    )


def silu(a):
    va = _value(a)
    s = expit(va)
    return record(
        _tape_of(a), "silu", va * s, (a,),
        lambda g: (g * s * (1.0 + va * (1.0 - s)),),
        fwd=lambda x: x * expit(x),
    )


def relu(a):
    va = _value(a)
    return record(
        _tape_of(a), "relu", np.maximum(va, 0.0), (a,),
        lambda g: (g * (va > 0.0),),
        fwd=lambda x: np.maximum(x, 0.0),
    )


def maximum_const(a, floor: float):
    """Elementwise max with a constant; subgradient 0 on the clamped side."""
    va = _value(a)
    return record(
        _tape_of(a), "maxc", np.maximum(va, floor), (a,),
        lambda g: (g * (va > floor),),
        fwd=lambda x: np.maximum(x, floor),
    )


def select(mask, a, alt):
    """where(mask, a, alt) with constant mask and alt; grads flow only where mask holds."""
    va = _value(a)
    mask = np.asarray(mask, dtype=bool)
    alt = np.asarray(alt, dtype=np.float64)
    return record(
        _tape_of(a), "select", np.where(mask, va, alt), (a,),
        lambda g: (g * mask,),
        fwd=lambda x: np.where(mask, x, alt),
    )


# ---------------------------------------------------------------------------
# reductions and linear maps


def asum(a, axis=None):
    va = _value(a)
    out = va.sum(axis=axis)

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, va.shape),)
        g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, va.shape),)

    return record(_tape_of(a), "sum", out, (a,), vjp, fwd=lambda x: x.sum(axis=axis))


def dot(a, b):
    va, vb = _value(a), _value(b)
    if va.ndim != 1 or vb.ndim != 1 or va.shape != vb.shape:
        raise ShapeError(f"dot needs equal-length 1-d inputs, got {va.shape} and {vb.shape}")
    return record(
        _tape_of(a, b), "dot", np.dot(va, vb), (a, b),
        lambda g: (g * vb, g * va),
        fwd=np.dot,
    )


def norm(a, axis=None):
    """L2 norm, full or along one axis; subgradient 0 at an exactly-zero input."""
    va = _value(a)
    out = np.sqrt((va * va).sum(axis=axis))

    def vjp(g):
        denom = np.where(out > 0.0, out, 1.0)
        if axis is None:
            scale = g / denom
            return (scale * va if out > 0.0 else np.zeros_like(va),)
        scale = np.expand_dims(g / denom * (out > 0.0), axis)
        return (scale * va,)

    return record(
        _tape_of(a), "norm", out, (a,), vjp,
        fwd=lambda x: np.sqrt((x * x).sum(axis=axis)),
    )


def matmul(a, b):
    """a @ b for the shapes the package uses: (B,n)@(n,m), (n,)@(n,m), (n,m)@(m,)."""
    va, vb = _value(a), _value(b)
    out = va @ vb

    def vjp(g):
        g = np.asarray(g)
        if va.ndim == 1 and vb.ndim == 2:  # (n,)@(n,m) -> (m,)
            return (g @ vb.T, np.outer(va, g))
        if va.ndim == 2 and vb.ndim == 1:  # (n,m)@(m,) -> (n,)
            return (np.outer(g, vb), va.T @ g)
        return (g @ vb.T, va.T @ g)       # 2-d @ 2-d

    return record(_tape_of(a, b), "matmul", out, (a, b), vjp, fwd=np.matmul)


def col(a, j: int):
    """Column j of a 2-d value; adjoint scatters back into a zero matrix."""
    va = _value(a)
    if va.ndim != 2:
        raise ShapeError("col expects a 2-d value")

    def vjp(g):
        full = np.zeros_like(va)
        full[:, j] = g
        return (full,)

    return record(_tape_of(a), "col", va[:, j].copy(), (a,), vjp, fwd=lambda x: x[:, j].copy())


# ---------------------------------------------------------------------------
# gradient checking


def grad_check(f: Callable[[TapeVar], TapeVar], point, step: float = 1e-6) -> float:
    """Max relative error between tape gradients and central differences.

    `f` maps a 1-d TapeVar to a scalar TapeVar. Per-coordinate step is
    ``step * (1 + |x_i|)``. One-sided differences that disagree trigger a
    non-differentiable-point warning.
    """
    point = np.asarray(point, dtype=np.float64)
    tape = Tape()
    x = tape.leaf(point)
    out = f(x)
    analytic = backward(out).wrt(x)
    base = float(out.value)

    def probe(i, h):
        shifted = point.copy()
        shifted.flat[i] += h
        t = Tape(record=False)
        return float(f(t.leaf(shifted)).value)

    worst = 0.0
    for i in range(point.size):
        h = step * (1.0 + abs(point.flat[i]))
        fp, fm = probe(i, h), probe(i, -h)
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NonFiniteError("function is non-finite near the probe point")
        central = (fp - fm) / (2.0 * h)
        fwd, bwd = (fp - base) / h, (base - fm) / h
        if abs(fwd - bwd) > 0.1 * (abs(fwd) + abs(bwd)) + 1e-8:
            warnings.warn(
                f"one-sided differences disagree at coordinate {i}: "
                "possible non-differentiable point"
            )
        a = float(analytic.flat[i])
        worst = max(worst, abs(a - central) / (abs(a) + abs(central) + 1e-12))
    return worst
