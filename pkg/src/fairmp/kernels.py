"""RBF kernel, group-discrepancy estimator, and fairness coupling matrices.

The coupling matrix P turns the gradient of the kernel two-sample statistic
into a message-passing operator: for representations F,

    grad ell(F) = -4 * alpha * (P @ F)

with P_ij = -k_ij / N_t^2 for same-group pairs (group t), +k_ij / (N0 N1)
for cross-group pairs, and P_ii = -sum of the off-diagonal row. The
simplified variant keeps only the cross-group attraction. Because every row
sums to zero, (P F)_i = sum_j w_ij (F_j - F_i) with w the off-diagonal
weights, which is the form used for the fused forward/backward below.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from fairmp import backend
from fairmp.errors import DataError, NumericError
from fairmp.graph import GroupPartition

VARIANT_FULL = "full"
VARIANT_SIMPLIFIED = "simplified"


@dataclass(frozen=True)
class KernelConfig:
    """RBF kernel k(x, z) = exp(-alpha * ||x - z||^2)."""

    alpha: float = 1.0

    def __post_init__(self):
        if not self.alpha > 0:
            raise DataError("kernel rate alpha must be positive")


def rbf_kernel(x: np.ndarray, z: np.ndarray, cfg: KernelConfig) -> float:
    x = np.asarray(x, dtype=np.float64).ravel()
    z = np.asarray(z, dtype=np.float64).ravel()
    if x.shape != z.shape:
        raise DataError("kernel arguments must have equal length")
    d = x - z
    return float(np.exp(-cfg.alpha * float(d @ d)))


def kernel_matrix(points: np.ndarray, cfg: KernelConfig) -> np.ndarray:
    """Dense RBF kernel matrix over the rows of ``points`` (unit diagonal)."""
    pts = np.ascontiguousarray(points, dtype=np.float64)
    return np.exp(-cfg.alpha * np.asarray(backend.pairwise_sq_dists(pts)))


def _group_sign(n: int, idx1) -> np.ndarray:
    g = np.zeros(n, dtype=bool)
    g[idx1] = True
    return g


def _kernel_sum(a: np.ndarray, b: np.ndarray, alpha: float,
                block: int = 4096) -> float:
    """Sum of exp(-alpha ||a_i - b_j||^2) over all pairs, in row blocks so
    large groups never materialize the full kernel matrix."""
    total = 0.0
    for lo in range(0, a.shape[0], block):
        d = np.asarray(backend.cross_sq_dists(a[lo:lo + block], b))
        total += float(np.exp(-alpha * d).sum())
    return total


def mmd(points: np.ndarray, part: GroupPartition, cfg: KernelConfig) -> float:
    """Biased (V-statistic) kernel two-sample estimator between the groups.

    All pairs contribute, including i = j; the result is a squared distance
    between kernel mean embeddings and is non-negative up to roundoff.
    """
    f = np.asarray(points, dtype=np.float64)
    if part.n0 == 0 or part.n1 == 0:
        raise DataError("both groups must be non-empty")
    f0 = np.ascontiguousarray(f[part.idx0])
    f1 = np.ascontiguousarray(f[part.idx1])
    return (_kernel_sum(f0, f0, cfg.alpha) / part.n0 ** 2
            + _kernel_sum(f1, f1, cfg.alpha) / part.n1 ** 2
            - 2.0 * _kernel_sum(f0, f1, cfg.alpha) / (part.n0 * part.n1))


def inter_group_similarity(points: np.ndarray, part: GroupPartition,
                           cfg: KernelConfig) -> float:
    """Mean cross-group kernel similarity: the attraction term of the
    two-sample statistic, in (0, 1]."""
    f = np.asarray(points, dtype=np.float64)
    total = _kernel_sum(np.ascontiguousarray(f[part.idx0]),
                        np.ascontiguousarray(f[part.idx1]), cfg.alpha)
    return float(total / (part.n0 * part.n1))


@dataclass(frozen=True)
class FairnessCoupling:
    """Dense coupling matrix over ``indices`` (a subset of the node set).

    Rows sum to zero; the matrix is symmetric. ``n0``/``n1`` are the group
    sizes used in the normalization (the sampled form uses the sample size
    for both).
    """

    indices: np.ndarray
    values: np.ndarray
    n0: int
    n1: int
    variant: str


def _coefficients(group1: np.ndarray, n0: int, n1: int,
                  variant: str) -> np.ndarray:
    """Off-diagonal pair coefficients c_ij (before kernel weighting)."""
    same1 = np.outer(group1, group1)
    same0 = np.outer(~group1, ~group1)
    cross = ~(same0 | same1)
    c = np.zeros(same0.shape, dtype=np.float64)
    c[cross] = 1.0 / (n0 * n1)
    if variant == VARIANT_FULL:
        c[same0] = -1.0 / n0 ** 2
        c[same1] = -1.0 / n1 ** 2
    elif variant != VARIANT_SIMPLIFIED:
        raise DataError(f"unknown coupling variant: {variant!r}")
    np.fill_diagonal(c, 0.0)
    return c


def _coupling_local(points: np.ndarray, group1: np.ndarray, n0: int, n1: int,
                    cfg: KernelConfig, variant: str) -> np.ndarray:
    k = kernel_matrix(points, cfg)
    w = _coefficients(group1, n0, n1, variant) * k
    p = w.copy()
    np.fill_diagonal(p, -w.sum(axis=1))
    return p


def build_coupling_full(points: np.ndarray, part: GroupPartition,
                        cfg: KernelConfig) -> FairnessCoupling:
    """Coupling with same-group repulsion and cross-group attraction."""
    if part.n0 == 0 or part.n1 == 0:
        raise DataError("both groups must be non-empty")
    f = np.asarray(points, dtype=np.float64)
    n = f.shape[0]
    g1 = _group_sign(n, part.idx1)
    values = _coupling_local(f, g1, part.n0, part.n1, cfg, VARIANT_FULL)
    return FairnessCoupling(np.arange(n, dtype=np.int64), values,
                            part.n0, part.n1, VARIANT_FULL)


def build_coupling_simplified(points: np.ndarray, part: GroupPartition,
                              cfg: KernelConfig) -> FairnessCoupling:
    """Coupling with cross-group attraction only (same-group entries zero)."""
    if part.n0 == 0 or part.n1 == 0:
        raise DataError("both groups must be non-empty")
    f = np.asarray(points, dtype=np.float64)
    n = f.shape[0]
    g1 = _group_sign(n, part.idx1)
    values = _coupling_local(f, g1, part.n0, part.n1, cfg, VARIANT_SIMPLIFIED)
    return FairnessCoupling(np.arange(n, dtype=np.int64), values,
                            part.n0, part.n1, VARIANT_SIMPLIFIED)


def build_coupling_sampled(points: np.ndarray, sampled0: np.ndarray,
                           sampled1: np.ndarray, cfg: KernelConfig,
                           variant: str = VARIANT_FULL) -> FairnessCoupling:
    """Coupling restricted to equal-size samples from each group.

    The sample size replaces both group sizes in the normalization.
    """
    s0 = np.asarray(sampled0, dtype=np.int64)
    s1 = np.asarray(sampled1, dtype=np.int64)
    if s0.size == 0 or s0.size != s1.size:
        raise DataError("samples must be non-empty and of equal size")
    if np.intersect1d(s0, s1).size:
        raise DataError("sampled groups overlap")
    ns = s0.size
    idx = np.concatenate([s0, s1])
    local = np.asarray(points, dtype=np.float64)[idx]
    g1 = np.zeros(2 * ns, dtype=bool)
    g1[ns:] = True
    values = _coupling_local(local, g1, ns, ns, cfg, variant)
    return FairnessCoupling(idx, values, ns, ns, variant)


# ---------------------------------------------------------------------------
# Fused coupling application with analytic backward, used by the tape.
# ---------------------------------------------------------------------------

def coupling_apply_forward(points: np.ndarray, group1: np.ndarray, n0: int,
                           n1: int, alpha: float, variant: str):
    """Compute P(points) @ points and keep what backward needs.

    Returns (out, cache). Using row sums of the off-diagonal weights w,
    out_i = sum_j w_ij (points_j - points_i).
    """
    f = np.ascontiguousarray(points, dtype=np.float64)
    k = np.exp(-alpha * np.asarray(backend.pairwise_sq_dists(f)))
    c = _coefficients(group1, n0, n1, variant)
    w = c * k
    rs = w.sum(axis=1)
    out = w @ f - rs[:, None] * f
    return out, (f, k, c, w, rs, alpha)


def coupling_apply_backward(cache, dout: np.ndarray,
                            kernel_grad: str) -> np.ndarray:
    """Adjoint of :func:`coupling_apply_forward`.

    ``kernel_grad='full'`` differentiates through the kernel entries as
    well; ``'detached'`` treats the coupling matrix as a constant.
    """
    f, k, c, w, rs, alpha = cache
    grad = w @ dout - rs[:, None] * dout  # P is symmetric
    if kernel_grad == "full":
        a = dout @ f.T
        diag = np.diagonal(a)
        m = a + a.T - diag[:, None] - diag[None, :]
        t = c * m * k
        trs = t.sum(axis=1)
        grad = grad - 2.0 * alpha * (trs[:, None] * f - t @ f)
    elif kernel_grad != "detached":
        raise DataError(f"unknown kernel_grad mode: {kernel_grad!r}")
    return grad


def coupling_matvec(points: np.ndarray, group1: np.ndarray, n0: int, n1: int,
                    alpha: float, variant: str,
                    block: int = 1024) -> np.ndarray:
    """P(points) @ points computed in row blocks, never materializing P.

    Matches the dense construction exactly; intended for whole-graph
    evaluation where an N x N matrix would not fit in memory.
    """
    f = np.ascontiguousarray(points, dtype=np.float64)
    n = f.shape[0]
    g1 = np.asarray(group1, dtype=bool)
    if variant == VARIANT_FULL:
        same = np.where(g1, -1.0 / n1 ** 2, -1.0 / n0 ** 2)
    elif variant == VARIANT_SIMPLIFIED:
        same = np.zeros(n)
    else:
        raise DataError(f"unknown coupling variant: {variant!r}")
    cross = 1.0 / (n0 * n1)
    out = np.empty_like(f)
    for lo in range(0, n, block):
        hi = min(lo + block, n)
        k = np.exp(-alpha * np.asarray(backend.cross_sq_dists(f[lo:hi], f)))
        c = np.where(g1[lo:hi, None] == g1[None, :], same[lo:hi, None], cross)
        c[np.arange(lo, hi) - lo, np.arange(lo, hi)] = 0.0
        w = c * k
        out[lo:hi] = w @ f - w.sum(axis=1)[:, None] * f[lo:hi]
    return out


def mmd_gradient(points: np.ndarray, part: GroupPartition,
                 cfg: KernelConfig) -> np.ndarray:
    """Analytic gradient of :func:`mmd`: -4 alpha (P_full @ points).

    Uses the blocked product so the coupling is never materialized.
    """
    f = np.asarray(points, dtype=np.float64)
    g1 = _group_sign(f.shape[0], part.idx1)
    grad = -4.0 * cfg.alpha * coupling_matvec(f, g1, part.n0, part.n1,
                                              cfg.alpha, VARIANT_FULL)
    if not np.isfinite(grad).all():
        raise NumericError("non-finite gradient of the group discrepancy")
    return grad
