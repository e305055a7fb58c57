"""Minimal reverse-mode gradient tape over dense float64 arrays.

Only the primitives the fixed model graph needs are provided: dense matmul,
bias add, scaling, (leaky-)ReLU, row softmax, symmetric-sparse apply,
gather/scatter of rows, the fairness coupling application, the
group-discrepancy penalty, attention aggregation, and masked cross entropy.
Every op validates that its output is finite and records a closure that
accumulates gradients into its parents; backward walks the recorded ops in
exact reverse order.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from fairmp import backend, kernels
from fairmp.errors import DataError, NumericError
from fairmp.graph import NormalizedOperator


def _finite(value: np.ndarray, op: str) -> np.ndarray:
    if not np.isfinite(value).all():
        raise NumericError(f"non-finite values produced by {op}")
    return value


class Node:
    """A value recorded on a tape, with a gradient slot."""

    __slots__ = ("value", "grad", "requires_grad", "tape", "_backward", "name")

    def __init__(self, value, tape, requires_grad, name=""):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self.tape = tape
        self._backward = None
        self.name = name

    def accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.value)
        self.grad += g

    @property
    def shape(self):
        return self.value.shape


class Tape:
    """Ordered record of primitive ops for one forward pass."""

    def __init__(self):
        self.nodes: list[Node] = []

    def leaf(self, value, requires_grad: bool = True, name: str = "") -> Node:
        node = Node(_finite(np.asarray(value, dtype=np.float64), "leaf"),
                    self, requires_grad, name)
        self.nodes.append(node)
        return node

    def constant(self, value, name: str = "") -> Node:
        return self.leaf(value, requires_grad=False, name=name)

    def record(self, value, parents, backward, op: str) -> Node:
        node = Node(_finite(value, op), self,
                    any(p.requires_grad for p in parents))
        if node.requires_grad:
            node._backward = backward
        self.nodes.append(node)
        return node


def backward(tape: Tape, loss: Node) -> None:
    """Accumulate gradients of ``loss`` into every reachable node."""
    if loss.tape is not tape or not tape.nodes:
        raise DataError("backward called before a forward pass on this tape")
    if loss.value.ndim != 0:
        raise DataError("loss must be a scalar")
    loss.grad = np.ones((), dtype=np.float64)
    for node in reversed(tape.nodes):
        if node.grad is not None and node._backward is not None:
            node._backward(node.grad)


def grad_or_zero(node: Node) -> np.ndarray:
    return node.grad if node.grad is not None else np.zeros_like(node.value)


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------

def matmul(a: Node, b: Node) -> Node:
    def bwd(g):
        if a.requires_grad:
            a.accumulate(g @ b.value.T)
        if b.requires_grad:
            b.accumulate(a.value.T @ g)
    return a.tape.record(a.value @ b.value, (a, b), bwd, "matmul")


def add(a: Node, b: Node) -> Node:
    """Elementwise add; ``b`` may be a 1-D bias broadcast over rows."""
    if a.value.shape != b.value.shape and b.value.ndim != 1:
        raise DataError("add requires equal shapes or a 1-D bias")

    def bwd(g):
        if a.requires_grad:
            a.accumulate(g)
        if b.requires_grad:
            b.accumulate(g.sum(axis=0) if b.value.ndim < g.ndim else g)
    return a.tape.record(a.value + b.value, (a, b), bwd, "add")


def scale(a: Node, factor: float) -> Node:
    factor = float(factor)

    def bwd(g):
        if a.requires_grad:
            a.accumulate(factor * g)
    return a.tape.record(factor * a.value, (a,), bwd, "scale")


def relu(a: Node) -> Node:
    mask = a.value > 0

    def bwd(g):
        if a.requires_grad:
            a.accumulate(g * mask)
    return a.tape.record(np.where(mask, a.value, 0.0), (a,), bwd, "relu")


def leaky_relu(a: Node, slope: float = 0.2) -> Node:
    mask = a.value > 0

    def bwd(g):
        if a.requires_grad:
            a.accumulate(g * np.where(mask, 1.0, slope))
    return a.tape.record(np.where(mask, a.value, slope * a.value), (a,), bwd,
                         "leaky_relu")


def row_softmax(a: Node) -> Node:
    z = a.value - a.value.max(axis=1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=1, keepdims=True)

    def bwd(g):
        if a.requires_grad:
            a.accumulate((g - (g * p).sum(axis=1, keepdims=True)) * p)
    return a.tape.record(p, (a,), bwd, "row_softmax")


def sparse_apply(op: NormalizedOperator, a: Node) -> Node:
    """Apply a *symmetric* sparse operator to a dense node."""
    def bwd(g):
        if a.requires_grad:
            a.accumulate(op.apply(g))
    return a.tape.record(op.apply(a.value), (a,), bwd, "sparse_apply")


def gather_rows(a: Node, idx: np.ndarray) -> Node:
    idx = np.asarray(idx, dtype=np.int64)

    def bwd(g):
        if a.requires_grad:
            acc = np.zeros_like(a.value)
            np.add.at(acc, idx, g)
            a.accumulate(acc)
    return a.tape.record(a.value[idx], (a,), bwd, "gather_rows")


def scatter_add_rows(base: Node, update: Node, idx: np.ndarray) -> Node:
    """Rows of ``update`` added into ``base`` at positions ``idx``
    (which must be unique)."""
    idx = np.asarray(idx, dtype=np.int64)
    value = base.value.copy()
    value[idx] += update.value

    def bwd(g):
        if base.requires_grad:
            base.accumulate(g)
        if update.requires_grad:
            update.accumulate(g[idx])
    return base.tape.record(value, (base, update), bwd, "scatter_add_rows")


def coupling_apply(a: Node, group1: np.ndarray, n0: int, n1: int,
                   alpha: float, variant: str,
                   kernel_grad: str = "full") -> Node:
    """P(a) @ a for the fairness coupling built from ``a`` itself.

    With ``kernel_grad='full'`` the backward pass differentiates through
    the kernel entries; ``'detached'`` treats the matrix as a constant.
    """
    if kernel_grad not in ("full", "detached"):
        raise DataError(f"unknown kernel_grad mode: {kernel_grad!r}")
    out, cache = kernels.coupling_apply_forward(a.value, group1, n0, n1,
                                                alpha, variant)

    def bwd(g):
        if a.requires_grad:
            a.accumulate(kernels.coupling_apply_backward(cache, g, kernel_grad))
    return a.tape.record(out, (a,), bwd, "coupling_apply")


def mmd_penalty(a: Node, part, cfg: kernels.KernelConfig) -> Node:
    """Scalar group-discrepancy statistic with its analytic gradient."""
    value = np.asarray(kernels.mmd(a.value, part, cfg))

    def bwd(g):
        if a.requires_grad:
            a.accumulate(float(g) * kernels.mmd_gradient(a.value, part, cfg))
    return a.tape.record(value, (a,), bwd, "mmd_penalty")


def attention_apply(a: Node, att: Node, structure, slope: float = 0.2) -> Node:
    """Neighborhood-softmax attention aggregation.

    ``structure`` is the CSR pattern (indptr, cols, rows) of A + I, so every
    node attends at least to itself. ``att`` is the score vector of length
    2c split into source/destination halves; scores are
    leaky_relu(a_i . b_src + a_j . b_dst), normalized per neighborhood.
    """
    indptr, cols, rows = structure
    c = a.value.shape[1]
    if att.value.shape != (2 * c,):
        raise DataError("attention vector must have length 2 * cols")
    b_src, b_dst = att.value[:c], att.value[c:]
    u = a.value @ b_src
    v = a.value @ b_dst
    pre = u[rows] + v[cols]
    z = np.where(pre > 0, pre, slope * pre)
    zmax = np.maximum.reduceat(z, indptr[:-1])
    e = np.exp(z - zmax[rows])
    denom = np.add.reduceat(e, indptr[:-1])
    coeff = e / denom[rows]
    out = np.asarray(backend.csr_matmat(indptr, cols,
                                        np.ascontiguousarray(coeff), a.value))
    n = a.value.shape[0]

    def bwd(g):
        d_coeff = np.einsum("ij,ij->i", g[rows], a.value[cols])
        srow = np.add.reduceat(coeff * d_coeff, indptr[:-1])
        dz = coeff * (d_coeff - srow[rows])
        dz *= np.where(pre > 0, 1.0, slope)
        du = np.add.reduceat(dz, indptr[:-1])
        dv = np.bincount(cols, weights=dz, minlength=n)
        if a.requires_grad:
            ga = np.zeros_like(a.value)
            np.add.at(ga, cols, coeff[:, None] * g[rows])
            ga += np.outer(du, b_src) + np.outer(dv, b_dst)
            a.accumulate(ga)
        if att.requires_grad:
            att.accumulate(np.concatenate([a.value.T @ du, a.value.T @ dv]))
    return a.tape.record(out, (a, att), bwd, "attention_apply")


def masked_nll(probs: Node, labels: np.ndarray, mask: np.ndarray,
               reduction: str = "mean") -> Node:
    """Negative log likelihood of ``labels`` under row-stochastic ``probs``,
    restricted to ``mask``. Probabilities are clamped at 1e-12."""
    if reduction not in ("mean", "sum"):
        raise DataError(f"unknown reduction: {reduction!r}")
    idx = np.flatnonzero(np.asarray(mask))
    if idx.size == 0:
        raise DataError("loss mask selects no nodes")
    y = np.asarray(labels, dtype=np.int64)[idx]
    picked = probs.value[idx, y]
    clamped = np.maximum(picked, 1e-12)
    weight = 1.0 / idx.size if reduction == "mean" else 1.0
    value = np.asarray(-weight * np.log(clamped).sum())

    def bwd(g):
        if probs.requires_grad:
            gp = np.zeros_like(probs.value)
            live = picked >= 1e-12
            gp[idx[live], y[live]] = -float(g) * weight / clamped[live]
            probs.accumulate(gp)
    return probs.tape.record(value, (probs,), bwd, "masked_nll")


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    """First/second moment accumulators keyed like the parameter dict."""

    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_step(params: dict, grads: dict, state: AdamState, lr: float,
              weight_decay: float = 0.0) -> dict:
    """One Adam update with bias correction, in place on ``params``.

    Weight decay enters as a plain L2 gradient term (g + wd * p) before the
    moment update.
    """
    state.step += 1
    t = state.step
    for name, p in params.items():
        g = np.asarray(grads[name], dtype=np.float64)
        if not np.isfinite(g).all():
            raise NumericError(f"non-finite gradient for parameter {name!r}")
        if weight_decay:
            g = g + weight_decay * p
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        state.m[name] = state.beta1 * state.m[name] + (1 - state.beta1) * g
        state.v[name] = state.beta2 * state.v[name] + (1 - state.beta2) * g * g
        m_hat = state.m[name] / (1 - state.beta1 ** t)
        v_hat = state.v[name] / (1 - state.beta2 ** t)
        p -= lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return params
