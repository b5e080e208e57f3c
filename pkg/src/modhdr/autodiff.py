"""A small reverse-mode differentiation tape over numpy arrays.

Only the primitives needed by the unrolled reconstruction network are
provided. Each recorded node keeps its forward function so the tape can be
replayed, and a vector-Jacobian product used by :meth:`Tape.backward`.

``wrap`` and ``centered_mod`` use a straight-through rule: their derivative
is taken to be 1 everywhere, dropping the jumps at reset points.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from . import gradient as G
from .errors import IncompleteTape, ShapeMismatch
from .modulo import centered_mod, wrap
from .priors import conv3x3, conv3x3_vjp


@dataclass
class Node:
    op: str
    parents: tuple[int, ...]
    value: np.ndarray
    fn: Optional[Callable] = None
    vjp: Optional[Callable] = None
    name: Optional[str] = None


class Var:
    __slots__ = ("tape", "index")

    def __init__(self, tape: "Tape", index: int):
        self.tape = tape
        self.index = index

    @property
    def value(self) -> np.ndarray:
        return self.tape.nodes[self.index].value

    @property
    def shape(self):
        return self.value.shape

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

    def __neg__(self):
        return scale(self, -1.0)

    def __repr__(self):
        return f"Var({self.tape.nodes[self.index].op}#{self.index}, shape={self.shape})"


class Tape:
    def __init__(self):
        self.nodes: list[Node] = []

    def __len__(self):
        return len(self.nodes)

    def leaf(self, value, name: str | None = None) -> Var:
        self.nodes.append(Node("leaf", (), np.asarray(value, dtype=np.float64), name=name))
        return Var(self, len(self.nodes) - 1)

    def constant(self, value) -> Var:
        return self.leaf(value, name="const")

    def record(self, op: str, parents: Sequence[Var], fn: Callable, vjp: Callable) -> Var:
        for p in parents:
            if p.tape is not self:
                raise IncompleteTape(f"{op}: input recorded on a different tape")
        vals = [p.value for p in parents]
        out = np.asarray(fn(*vals), dtype=np.float64)
        self.nodes.append(Node(op, tuple(p.index for p in parents), out, fn, vjp))
        return Var(self, len(self.nodes) - 1)

    def replay(self, leaves: dict[int, np.ndarray] | None = None) -> list[np.ndarray]:
        """Recompute every node from the leaf values (optionally overridden)."""
        leaves = leaves or {}
        values: list[np.ndarray] = []
        for i, node in enumerate(self.nodes):
            if node.fn is None:
                values.append(np.asarray(leaves.get(i, node.value), dtype=np.float64))
            else:
                values.append(np.asarray(node.fn(*[values[p] for p in node.parents]), dtype=np.float64))
        return values

    def backward(self, output: Var, seed_grad=None) -> "Gradients":
        """Reverse sweep from ``output``; ``seed_grad`` defaults to ones."""
        if output.tape is not self or not 0 <= output.index < len(self.nodes):
            raise IncompleteTape("output is not recorded on this tape")
        out_node = self.nodes[output.index]
        seed = np.ones_like(out_node.value) if seed_grad is None else np.asarray(seed_grad, dtype=np.float64)
        if seed.shape != out_node.value.shape:
            raise ShapeMismatch(f"seed gradient {seed.shape} vs output {out_node.value.shape}")
        grads: list[Optional[np.ndarray]] = [None] * (output.index + 1)
        grads[output.index] = seed
        for i in range(output.index, -1, -1):
            g = grads[i]
            node = self.nodes[i]
            if g is None or node.vjp is None:
                continue
            parent_vals = [self.nodes[p].value for p in node.parents]
            for p, gp in zip(node.parents, node.vjp(g, *parent_vals, out=node.value)):
                if gp is None:
                    continue
                grads[p] = gp if grads[p] is None else grads[p] + gp
        return Gradients(self, grads)


class Gradients:
    def __init__(self, tape: Tape, grads):
        self._tape = tape
        self._grads = grads

    def __getitem__(self, var: Var) -> np.ndarray:
        g = self._grads[var.index] if var.index < len(self._grads) else None
        return np.zeros_like(var.value) if g is None else g


def backward(tape: Tape, output: Var, seed_grad=None) -> Gradients:
    return tape.backward(output, seed_grad)


# --- primitives ----------------------------------------------------------------

def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _lift(tape: Tape, x) -> Var:
    return x if isinstance(x, Var) else tape.constant(x)


def _tape_of(*xs) -> Tape:
    for x in xs:
        if isinstance(x, Var):
            return x.tape
    raise IncompleteTape("no recorded input")


def add(a, b) -> Var:
    t = _tape_of(a, b)
    a, b = _lift(t, a), _lift(t, b)
    sa, sb = a.shape, b.shape
    return t.record("add", [a, b], np.add,
                    lambda g, x, y, out: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Var:
    t = _tape_of(a, b)
    a, b = _lift(t, a), _lift(t, b)
    sa, sb = a.shape, b.shape
    return t.record("sub", [a, b], np.subtract,
                    lambda g, x, y, out: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a, b) -> Var:
    t = _tape_of(a, b)
    a, b = _lift(t, a), _lift(t, b)
    sa, sb = a.shape, b.shape
    return t.record("mul", [a, b], np.multiply,
                    lambda g, x, y, out: (_unbroadcast(g * y, sa), _unbroadcast(g * x, sb)))


def scale(a: Var, c: float) -> Var:
    c = float(c)
    return a.tape.record("scale", [a], lambda x: x * c, lambda g, x, out: (g * c,))


def relu(a: Var) -> Var:
    return a.tape.record("relu", [a], lambda x: np.maximum(x, 0.0),
                         lambda g, x, out: (g * (x > 0),))


def softplus(a: Var) -> Var:
    return a.tape.record("softplus", [a], lambda x: np.logaddexp(0.0, x),
                         lambda g, x, out: (g / (1.0 + np.exp(-x)),))


def take(a: Var, k: int) -> Var:
    def vjp(g, x, out):
        gx = np.zeros_like(x)
        gx[k] = g
        return (gx,)
    return a.tape.record("take", [a], lambda x: x[k], vjp)


def concat(parts: Sequence[Var]) -> Var:
    """Concatenate along the last (channel) axis."""
    t = parts[0].tape
    sizes = [p.shape[-1] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def fn(*xs):
        return np.concatenate(xs, axis=-1)

    def vjp(g, *xs, out):
        return tuple(np.split(g, splits, axis=-1))
    return t.record("concat", list(parts), fn, vjp)


def conv(x: Var, w: Var, b: Var) -> Var:
    def vjp(g, xv, wv, bv, out):
        return conv3x3_vjp(xv, wv, g)
    return x.tape.record("conv", [x, w, b], conv3x3, vjp)


def dct2(x: Var) -> Var:
    # orthonormal: the adjoint is the inverse
    return x.tape.record("dct2", [x], G.dct2, lambda g, xv, out: (G.idct2(g),))


def idct2(x: Var) -> Var:
    return x.tape.record("idct2", [x], G.idct2, lambda g, xv, out: (G.dct2(g),))


def spectral_divide(X: Var, rho: Var) -> Var:
    """``X / (λ_mn + ρ/2)`` with the Neumann-Laplacian eigenvalues ``λ_mn``."""
    h, w = X.shape[:2]
    extra = (1,) * (X.value.ndim - 2)
    lam = G.laplacian_eigenvalues(h, w).reshape((h, w) + extra)

    def fn(xv, r):
        return xv / (lam + r / 2.0)

    def vjp(g, xv, r, out):
        denom = lam + r / 2.0
        return g / denom, np.asarray(-0.5 * np.sum(g * xv / denom ** 2)).reshape(np.shape(r))
    return X.tape.record("spectral-divide", [X, rho], fn, vjp)


def diff_h(x: Var) -> Var:
    return x.tape.record("diff-h", [x], lambda v: G.forward_diff(v).dh,
                         lambda g, v, out: (G._div_axis(g, 1),))


def diff_v(x: Var) -> Var:
    return x.tape.record("diff-v", [x], lambda v: G.forward_diff(v).dv,
                         lambda g, v, out: (G._div_axis(g, 0),))


def divergence(dh: Var, dv: Var) -> Var:
    def vjp(g, a, b, out):
        f = G.forward_diff(g)
        return f.dh, f.dv
    return dh.tape.record("divergence", [dh, dv], lambda a, b: G.divergence(G.GradientField(a, b)), vjp)


def wrap_st(x: Var, b: int) -> Var:
    return x.tape.record("wrap-stopgrad", [x], lambda v: wrap(v, b), lambda g, v, out: (g,))


def centered_mod_st(x: Var, b: int) -> Var:
    return x.tape.record("centered-mod-stopgrad", [x], lambda v: centered_mod(v, b), lambda g, v, out: (g,))


def center(x: Var) -> Var:
    """Subtract the per-channel spatial mean."""
    def fn(v):
        return v - v.mean(axis=(0, 1), keepdims=True)

    def vjp(g, v, out):
        return (g - g.mean(axis=(0, 1), keepdims=True),)
    return x.tape.record("center", [x], fn, vjp)


def mean_square(x: Var) -> Var:
    n = x.value.size
    return x.tape.record("mean-square", [x], lambda v: np.mean(v * v),
                         lambda g, v, out: (g * 2.0 * v / n,))


def mean_abs(x: Var) -> Var:
    n = x.value.size
    return x.tape.record("mean-abs", [x], lambda v: np.mean(np.abs(v)),
                         lambda g, v, out: (g * np.sign(v) / n,))
