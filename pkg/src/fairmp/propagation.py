"""Fairness-aware message-passing layers.

One layer is a gradient step on the joint objective

    h(F) = lambda_s/2 * tr(F^T L F) + 1/2 ||F - X_in||^2 + lambda_f * ell(F)

with learning rate gamma = 1 / (1 + lambda_s), which collapses to

    F_next = (1 - gamma) * Agg(F) + 4 gamma lambda_f alpha (P F) + gamma X_in

where Agg is the backbone aggregation (degree-normalized adjacency for gcn,
A + (1+eps) I for gin, neighborhood attention for gat) and P the coupling
from :mod:`fairmp.kernels`. Plain numpy functions taking an explicit
coupling live alongside the tape-recorded path used for training; tests
hold the two routes together.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from fairmp import autodiff as ad
from fairmp import kernels
from fairmp.errors import DataError
from fairmp.graph import (AttributedGraph, GroupPartition, NormalizedOperator,
                          build_normalized_adjacency, build_selfloop_adjacency,
                          neighborhood_structure, partition_by_sensitive)

VARIANTS = ("gmmd", "gmmd_s", "vanilla")
BACKBONES = ("gcn", "gin", "gat")


@dataclass(frozen=True)
class PropagationConfig:
    variant: str = "gmmd"
    backbone: str = "gcn"
    k: int = 2
    lambda_s: float = 1.0
    lambda_f: float = 0.0
    alpha: float = 1.0
    kernel_grad: str = "full"
    gin_epsilon: float = 0.0
    sample_size: int = 0
    smooth_identity: bool = False  # ablation: drop the aggregation term

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise DataError(f"unknown variant: {self.variant!r}")
        if self.backbone not in BACKBONES:
            raise DataError(f"unknown backbone: {self.backbone!r}")
        if self.k < 0:
            raise DataError("layer count must be >= 0")
        if self.lambda_s < 0 or self.lambda_f < 0:
            raise DataError("regularization weights must be >= 0")
        if not self.alpha > 0:
            raise DataError("alpha must be positive")
        if self.kernel_grad not in ("full", "detached"):
            raise DataError(f"unknown kernel_grad: {self.kernel_grad!r}")
        if self.sample_size < 0:
            raise DataError("sample size must be >= 0")

    @property
    def gamma(self) -> float:
        return 1.0 / (1.0 + self.lambda_s)

    @property
    def kernel(self) -> kernels.KernelConfig:
        return kernels.KernelConfig(self.alpha)

    @property
    def coupling_variant(self) -> str:
        return (kernels.VARIANT_SIMPLIFIED if self.variant == "gmmd_s"
                else kernels.VARIANT_FULL)


@dataclass(frozen=True)
class GATParams:
    """Single-head attention scores, shared across layers."""

    b: np.ndarray  # length 2c
    slope: float = 0.2


@dataclass(frozen=True)
class PropagationContext:
    """Per-graph precomputations shared by all layers of a run."""

    graph: AttributedGraph
    part: GroupPartition
    operator: NormalizedOperator
    gin_operator: NormalizedOperator | None
    attention_structure: tuple | None
    group1: np.ndarray  # boolean mask, True for group 1

    @classmethod
    def build(cls, graph: AttributedGraph,
              cfg: PropagationConfig) -> "PropagationContext":
        part = partition_by_sensitive(graph)
        g1 = np.zeros(graph.num_nodes, dtype=bool)
        g1[part.idx1] = True
        gin_op = (build_selfloop_adjacency(graph, cfg.gin_epsilon)
                  if cfg.backbone == "gin" else None)
        att = (neighborhood_structure(graph)
               if cfg.backbone == "gat" else None)
        return cls(graph, part, build_normalized_adjacency(graph), gin_op,
                   att, g1)


# ---------------------------------------------------------------------------
# plain (non-tape) layers taking an explicit coupling
# ---------------------------------------------------------------------------

def _fair_term(coupling: kernels.FairnessCoupling, f_prev: np.ndarray,
               cfg: PropagationConfig) -> np.ndarray:
    """4 gamma lambda_f alpha * (P F) scattered back to global rows."""
    out = np.zeros_like(f_prev)
    local = coupling.values @ f_prev[coupling.indices]
    out[coupling.indices] = 4.0 * cfg.gamma * cfg.lambda_f * cfg.alpha * local
    return out


def gmmd_layer(f_prev: np.ndarray, x_in: np.ndarray, op: NormalizedOperator,
               coupling: kernels.FairnessCoupling,
               cfg: PropagationConfig) -> np.ndarray:
    """One full-coupling step: (1-g) A~ F + 4 g lf a P F + g X_in."""
    g = cfg.gamma
    out = (1.0 - g) * op.apply(f_prev) + g * x_in
    if cfg.lambda_f:
        out += _fair_term(coupling, f_prev, cfg)
    return out


def gmmd_s_layer(f_prev: np.ndarray, x_in: np.ndarray, op: NormalizedOperator,
                 coupling: kernels.FairnessCoupling,
                 cfg: PropagationConfig) -> np.ndarray:
    """Same step with the simplified (cross-group only) coupling."""
    if coupling.variant != kernels.VARIANT_SIMPLIFIED:
        raise DataError("gmmd_s_layer requires a simplified coupling")
    return gmmd_layer(f_prev, x_in, op, coupling, cfg)


def sampled_layer(f_prev: np.ndarray, x_in: np.ndarray,
                  op: NormalizedOperator, sampled0: np.ndarray,
                  sampled1: np.ndarray, cfg: PropagationConfig) -> np.ndarray:
    """Smoothness step for all nodes; fairness correction only on the
    sampled rows, normalized by the sample size."""
    g = cfg.gamma
    out = (1.0 - g) * op.apply(f_prev) + g * x_in
    if cfg.lambda_f and np.asarray(sampled0).size:
        coupling = kernels.build_coupling_sampled(
            f_prev, sampled0, sampled1, cfg.kernel, cfg.coupling_variant)
        out += _fair_term(coupling, f_prev, cfg)
    return out


def gin_fair_layer(f_prev: np.ndarray, x_in: np.ndarray,
                   graph: AttributedGraph,
                   coupling: kernels.FairnessCoupling,
                   cfg: PropagationConfig) -> np.ndarray:
    """Sum-aggregation backbone: (1-g)(A + (1+eps) I) F + fairness + g X_in."""
    g = cfg.gamma
    op = build_selfloop_adjacency(graph, cfg.gin_epsilon)
    out = (1.0 - g) * op.apply(f_prev) + g * x_in
    if cfg.lambda_f:
        out += _fair_term(coupling, f_prev, cfg)
    return out


def attention_coefficients(f: np.ndarray, gat: GATParams,
                           structure) -> np.ndarray:
    """Per-entry attention weights over the CSR pattern of A + I."""
    indptr, cols, rows = structure
    c = f.shape[1]
    if gat.b.shape != (2 * c,):
        raise DataError("attention vector must have length 2 * cols")
    pre = f @ gat.b[:c]
    post = f @ gat.b[c:]
    z = pre[rows] + post[cols]
    z = np.where(z > 0, z, gat.slope * z)
    zmax = np.maximum.reduceat(z, indptr[:-1])
    e = np.exp(z - zmax[rows])
    denom = np.add.reduceat(e, indptr[:-1])
    return e / denom[rows]


def gat_fair_layer(f_prev: np.ndarray, x_in: np.ndarray,
                   graph: AttributedGraph,
                   coupling: kernels.FairnessCoupling, gat: GATParams,
                   cfg: PropagationConfig) -> np.ndarray:
    """Attention backbone; self loops keep every neighborhood non-empty."""
    structure = neighborhood_structure(graph)
    indptr, cols, _ = structure
    coeff = attention_coefficients(f_prev, gat, structure)
    att_op = NormalizedOperator(graph.num_nodes, indptr, cols,
                                np.ascontiguousarray(coeff))
    g = cfg.gamma
    out = (1.0 - g) * att_op.apply(f_prev) + g * x_in
    if cfg.lambda_f:
        out += _fair_term(coupling, f_prev, cfg)
    return out


# ---------------------------------------------------------------------------
# tape-recorded path
# ---------------------------------------------------------------------------

def fair_layer_node(ctx: PropagationContext, cfg: PropagationConfig,
                    f_prev: ad.Node, x_in: ad.Node,
                    att: ad.Node | None = None,
                    sample: tuple | None = None) -> ad.Node:
    """One tape-recorded layer; the coupling is rebuilt from ``f_prev``."""
    g = cfg.gamma
    if cfg.smooth_identity:
        agg = f_prev
    elif cfg.backbone == "gcn":
        agg = ad.sparse_apply(ctx.operator, f_prev)
    elif cfg.backbone == "gin":
        agg = ad.sparse_apply(ctx.gin_operator, f_prev)
    else:
        if att is None:
            raise DataError("gat backbone requires attention parameters")
        agg = ad.attention_apply(f_prev, att, ctx.attention_structure)
    smooth = ad.add(ad.scale(agg, 1.0 - g), ad.scale(x_in, g))
    if cfg.variant == "vanilla" or cfg.lambda_f == 0.0:
        return smooth
    weight = 4.0 * g * cfg.lambda_f * cfg.alpha
    if sample is None:
        term = ad.coupling_apply(f_prev, ctx.group1, ctx.part.n0, ctx.part.n1,
                                 cfg.alpha, cfg.coupling_variant,
                                 cfg.kernel_grad)
        return ad.add(smooth, ad.scale(term, weight))
    s0, s1 = sample
    if s0.size == 0:
        return smooth
    idx = np.concatenate([s0, s1])
    local1 = np.zeros(idx.size, dtype=bool)
    local1[s0.size:] = True
    gathered = ad.gather_rows(f_prev, idx)
    term = ad.coupling_apply(gathered, local1, s0.size, s1.size, cfg.alpha,
                             cfg.coupling_variant, cfg.kernel_grad)
    return ad.scatter_add_rows(smooth, ad.scale(term, weight), idx)


def propagate_k(ctx: PropagationContext, cfg: PropagationConfig,
                x_in: ad.Node, att: ad.Node | None = None,
                sample: tuple | None = None) -> tuple:
    """K layers starting from F(0) = X_in; the coupling is rebuilt from the
    previous layer's output at every step.

    Returns (F_K, F_{K-1}); for k = 0 both are X_in.
    """
    f = x_in
    prev = x_in
    for _ in range(cfg.k):
        prev = f
        f = fair_layer_node(ctx, cfg, f, x_in, att, sample)
    return f, prev


# ---------------------------------------------------------------------------
# joint objective (used by descent checks and the explicit-step API)
# ---------------------------------------------------------------------------

def joint_objective(f: np.ndarray, x_in: np.ndarray, op: NormalizedOperator,
                    part: GroupPartition, lambda_s: float, lambda_f: float,
                    kernel: kernels.KernelConfig) -> float:
    """h(F) with the full group-discrepancy penalty."""
    lf = f - op.apply(f)  # (I - A~) F
    smooth = 0.5 * lambda_s * float(np.sum(f * lf))
    fidelity = 0.5 * float(np.sum((f - x_in) ** 2))
    return smooth + fidelity + lambda_f * kernels.mmd(f, part, kernel)


def joint_objective_grad(f: np.ndarray, x_in: np.ndarray,
                         op: NormalizedOperator, part: GroupPartition,
                         lambda_s: float, lambda_f: float,
                         kernel: kernels.KernelConfig) -> np.ndarray:
    lf = f - op.apply(f)
    grad = lambda_s * lf + (f - x_in)
    if lambda_f:
        grad = grad + lambda_f * kernels.mmd_gradient(f, part, kernel)
    return grad


def vanilla_config(cfg: PropagationConfig) -> PropagationConfig:
    return replace(cfg, variant="vanilla", lambda_f=0.0)
