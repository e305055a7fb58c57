"""Empirical verification of the demographic-parity upper bounds.

The bounds are stated for a proof-mode propagation that differs from the
production layer: mean aggregation over neighbors (no self loop, no gamma
weighting), a fixed feature-fidelity term, and unit coefficients on the
coupling. Both bound checks run at K = 2, which is the scope the constants
were derived for.

Constants, with a = 2 + 4/N0 + 4/N1 and Delta the per-dimension maximal
deviation of X from its global mean:

    C1 = a^2 + 6 + 8/N0 + 8/N1
    C2 = ||mu0 - mu1|| + 8 (1 + 1/N0 + 1/N1)^2 ||Delta|| + 2 ||Delta||
    C3 = (3 - 1/N0 - 1/N1) ||mu0 - mu1|| + (4 + 2/N0 + 2/N1) ||Delta||

The first bound uses predictions softmax(F W) and reads

    dp_soft <= (L/2) ||W||_F (rep_discrepancy + C1 ||Delta||),

checked with L = 1 (the softmax Lipschitz constant is below 1, so 1 only
enlarges the right side). The second bounds the representation discrepancy
by the cross-group kernel mass on F(K-1):

    rep_discrepancy <= (3 - (1/(N0 N1^2) + 1/(N0^2 N1)) * S) * C3 + C2.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from fairmp import kernels, metrics
from fairmp.errors import DataError
from fairmp.graph import AttributedGraph, GroupPartition, NormalizedOperator
from fairmp.model import EpochRecord

BOUND_SLACK = 1e-9


def group_feature_means(x: np.ndarray, part: GroupPartition):
    x = np.asarray(x, dtype=np.float64)
    return x[part.idx0].mean(axis=0), x[part.idx1].mean(axis=0)


def max_deviation(x: np.ndarray) -> np.ndarray:
    """Per-dimension maximal deviation from the global feature mean."""
    x = np.asarray(x, dtype=np.float64)
    return np.abs(x - x.mean(axis=0)).max(axis=0)


def constants(x: np.ndarray, part: GroupPartition):
    """(C1, C2, C3) for the given features and group sizes."""
    n0, n1 = part.n0, part.n1
    mu0, mu1 = group_feature_means(x, part)
    gap = float(np.linalg.norm(mu0 - mu1))
    dev = float(np.linalg.norm(max_deviation(x)))
    c1 = (2 + 4 / n0 + 4 / n1) ** 2 + 6 + 8 / n0 + 8 / n1
    c2 = gap + 8 * (1 + 1 / n0 + 1 / n1) ** 2 * dev + 2 * dev
    c3 = (3 - 1 / n0 - 1 / n1) * gap + (4 + 2 / n0 + 2 / n1) * dev
    return c1, c2, c3


def rep_discrepancy(f: np.ndarray, part: GroupPartition) -> float:
    """Euclidean distance between the group means of a representation."""
    if part.n0 == 0 or part.n1 == 0:
        raise DataError("both groups must be non-empty")
    f = np.asarray(f, dtype=np.float64)
    return float(np.linalg.norm(f[part.idx0].mean(axis=0)
                                - f[part.idx1].mean(axis=0)))


def _mean_aggregation_operator(graph: AttributedGraph) -> NormalizedOperator:
    """Row-stochastic 1/|N_i| neighbor averaging, no self loops."""
    n = graph.num_nodes
    e = graph.edges
    src = np.concatenate([e[:, 0], e[:, 1]])
    dst = np.concatenate([e[:, 1], e[:, 0]])
    deg = np.bincount(src, minlength=n)
    if (deg == 0).any():
        raise DataError("mean aggregation needs every node to have a "
                        "neighbor; preprocess isolated nodes (e.g. add a "
                        "self loop) before the proof-mode propagation")
    order = np.lexsort((dst, src))
    src, dst = src[order], dst[order]
    indptr = np.zeros(n + 1, dtype=np.int64)
    np.cumsum(deg, out=indptr[1:])
    data = (1.0 / deg.astype(np.float64))[src]
    return NormalizedOperator(n, indptr, dst, np.ascontiguousarray(data))


def theorem_mode_propagate(x: np.ndarray, graph: AttributedGraph,
                           part: GroupPartition, alpha: float,
                           k: int = 2) -> list:
    """Proof-mode propagation: F(k) = X + mean_agg(F(k-1)) + P F(k-1).

    Returns [F(0), ..., F(k)] with F(0) = X. P is the full coupling built
    from F(k-1) at every step.
    """
    x = np.asarray(x, dtype=np.float64)
    op = _mean_aggregation_operator(graph)
    cfg = kernels.KernelConfig(alpha)
    seq = [x]
    f = x
    for _ in range(k):
        coupling = kernels.build_coupling_full(f, part, cfg)
        f = x + op.apply(f) + coupling.values @ f
        seq.append(f)
    return seq


@dataclass(frozen=True)
class BoundCheck:
    lhs: float
    rhs: float
    holds: bool


def check_bound_thm2(x: np.ndarray, graph: AttributedGraph,
                     part: GroupPartition, alpha: float) -> BoundCheck:
    """Representation-level bound at K = 2."""
    seq = theorem_mode_propagate(x, graph, part, alpha, k=2)
    f1, f2 = seq[1], seq[2]
    _, c2, c3 = constants(x, part)
    sim_sum = kernels.inter_group_similarity(
        f1, part, kernels.KernelConfig(alpha)) * part.n0 * part.n1
    factor = 3.0 - (1.0 / (part.n0 * part.n1 ** 2)
                    + 1.0 / (part.n0 ** 2 * part.n1)) * sim_sum
    lhs = rep_discrepancy(f2, part)
    rhs = factor * c3 + c2
    return BoundCheck(lhs, rhs, lhs <= rhs + BOUND_SLACK)


@dataclass(frozen=True)
class PredictionBoundCheck:
    lhs: float          # soft demographic-parity gap
    rhs: float
    holds: bool
    dp_hard: float      # hard-label gap, reported alongside, never mixed


def check_bound_thm1(x: np.ndarray, graph: AttributedGraph,
                     part: GroupPartition, w: np.ndarray,
                     alpha: float) -> PredictionBoundCheck:
    """Prediction-level bound at K = 2 with a linear head ``w``.

    The left side uses soft positive-class probabilities (the form the
    bound is stated for); the hard-label gap is reported separately.
    """
    w = np.asarray(w, dtype=np.float64)
    if w.ndim != 2 or w.shape[1] < 2:
        raise DataError("the linear head must map to at least two classes")
    seq = theorem_mode_propagate(x, graph, part, alpha, k=2)
    f2 = seq[2]
    logits = f2 @ w
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    probs = e / e.sum(axis=1, keepdims=True)
    soft = probs[:, 1]
    lhs = float(abs(soft[part.idx0].mean() - soft[part.idx1].mean()))
    c1, _, _ = constants(x, part)
    dev = float(np.linalg.norm(max_deviation(x)))
    rhs = 0.5 * float(np.linalg.norm(w)) * (rep_discrepancy(f2, part)
                                            + c1 * dev)
    hard = metrics.hard_labels(probs)
    dp_hard = float(abs(hard[part.idx0].mean() - hard[part.idx1].mean()))
    return PredictionBoundCheck(lhs, rhs, lhs <= rhs + BOUND_SLACK, dp_hard)


@dataclass(frozen=True)
class TheoryReport:
    mu: np.ndarray
    mu0: np.ndarray
    mu1: np.ndarray
    delta_vec: np.ndarray
    c1: float
    c2: float
    c3: float
    dp_rep: float
    sim: float
    lipschitz: float
    bound_rep: BoundCheck
    bound_pred: PredictionBoundCheck


def theory_report(x: np.ndarray, graph: AttributedGraph,
                  part: GroupPartition, w: np.ndarray,
                  alpha: float) -> TheoryReport:
    x = np.asarray(x, dtype=np.float64)
    seq = theorem_mode_propagate(x, graph, part, alpha, k=2)
    c1, c2, c3 = constants(x, part)
    mu0, mu1 = group_feature_means(x, part)
    return TheoryReport(
        mu=x.mean(axis=0), mu0=mu0, mu1=mu1,
        delta_vec=max_deviation(x), c1=c1, c2=c2, c3=c3,
        dp_rep=rep_discrepancy(seq[2], part),
        sim=kernels.inter_group_similarity(seq[1], part,
                                           kernels.KernelConfig(alpha)),
        lipschitz=1.0,
        bound_rep=check_bound_thm2(x, graph, part, alpha),
        bound_pred=check_bound_thm1(x, graph, part, w, alpha),
    )


# ---------------------------------------------------------------------------
# trace correlation
# ---------------------------------------------------------------------------

def _average_ranks(values: np.ndarray) -> np.ndarray:
    order = np.argsort(values, kind="stable")
    ranks = np.empty(values.size, dtype=np.float64)
    sv = values[order]
    boundaries = np.flatnonzero(np.diff(sv) != 0) + 1
    starts = np.concatenate([[0], boundaries])
    ends = np.concatenate([boundaries, [values.size]])
    for a, b in zip(starts, ends):
        ranks[order[a:b]] = 0.5 * (a + b + 1)
    return ranks


def spearman(x: np.ndarray, y: np.ndarray) -> float | None:
    """Rank correlation with average ranks; None when either series is
    constant (correlation undefined)."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise DataError("spearman needs two equally sized 1-D series")
    rx, ry = _average_ranks(x), _average_ranks(y)
    sx, sy = rx.std(), ry.std()
    if sx == 0 or sy == 0:
        return None
    return float(np.mean((rx - rx.mean()) * (ry - ry.mean())) / (sx * sy))


@dataclass(frozen=True)
class TraceCorrelation:
    rho: float | None
    n_epochs: int

    @property
    def defined(self) -> bool:
        return self.rho is not None


def sim_vs_dp_trace(records: list[EpochRecord]) -> TraceCorrelation:
    """Spearman correlation between the similarity trace and the test
    demographic-parity gap over a training run."""
    if len(records) < 10:
        raise DataError("trace correlation needs at least 10 epochs")
    sims = np.array([r.sim for r in records])
    dps = np.array([r.test.delta_dp for r in records])
    return TraceCorrelation(spearman(sims, dps), len(records))


# ---------------------------------------------------------------------------
# random instances for bound sweeps
# ---------------------------------------------------------------------------

def random_instance(rng: np.random.Generator, n: int = 20, dim: int = 4,
                    edge_prob: float = 0.3) -> tuple:
    """Random graph with balanced groups, U[0,1] features, and no isolated
    nodes (each gets one random neighbor so mean aggregation is defined)."""
    if n < 4:
        raise DataError("instances need at least 4 nodes")
    x = rng.uniform(0.0, 1.0, size=(n, dim))
    s = np.zeros(n, dtype=np.int64)
    s[rng.permutation(n)[:n // 2]] = 1
    iu, ju = np.triu_indices(n, k=1)
    keep = rng.uniform(size=iu.size) < edge_prob
    pairs = list(zip(iu[keep].tolist(), ju[keep].tolist()))
    deg = np.zeros(n, dtype=np.int64)
    for a, b in pairs:
        deg[a] += 1
        deg[b] += 1
    for i in np.flatnonzero(deg == 0):
        j = int(rng.integers(n - 1))
        j = j + 1 if j >= i else j
        pairs.append((i, j))
        deg[i] += 1
        deg[j] += 1
    labels = rng.integers(0, 2, size=n)
    graph = AttributedGraph.from_edge_list(x, labels, s, np.array(pairs))
    part = GroupPartition(np.flatnonzero(s == 0), np.flatnonzero(s == 1))
    return x, graph, part
