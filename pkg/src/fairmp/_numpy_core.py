"""Pure-numpy implementations of the hot numeric kernels.

Mirrors the signatures of the compiled ``fairmp._speedups`` extension; the
active implementation is chosen once in :mod:`fairmp.backend`.
"""

from __future__ import annotations

import numpy as np

BACKEND_NAME = "numpy"


def csr_matmat(indptr: np.ndarray, indices: np.ndarray, data: np.ndarray,
               dense: np.ndarray) -> np.ndarray:
    """Multiply a CSR matrix by a dense matrix: out = A @ dense.

    ``dense`` has one row per column of A; result has one row per row of A.
    """
    n = indptr.shape[0] - 1
    contrib = data[:, None] * dense[indices]
    row_lengths = np.diff(indptr)
    if row_lengths.min(initial=1) > 0 and indptr[-1] == data.shape[0]:
        # reduceat is only valid when every row owns at least one entry
        return np.add.reduceat(contrib, indptr[:-1], axis=0)
    out = np.zeros((n, dense.shape[1]), dtype=np.float64)
    rows = np.repeat(np.arange(n), row_lengths)
    np.add.at(out, rows, contrib)
    return out


def pairwise_sq_dists(points: np.ndarray) -> np.ndarray:
    """Squared euclidean distances between all rows of ``points``.

    Output is symmetric with an exactly-zero diagonal; the quadratic
    expansion can go slightly negative in floating point, so it is clamped.
    """
    sq = np.einsum("ij,ij->i", points, points)
    d = sq[:, None] + sq[None, :] - 2.0 * (points @ points.T)
    np.maximum(d, 0.0, out=d)
    d = 0.5 * (d + d.T)
    np.fill_diagonal(d, 0.0)
    return d


def cross_sq_dists(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Squared euclidean distances between rows of ``a`` and rows of ``b``."""
    sa = np.einsum("ij,ij->i", a, a)
    sb = np.einsum("ij,ij->i", b, b)
    d = sa[:, None] + sb[None, :] - 2.0 * (a @ b.T)
    np.maximum(d, 0.0, out=d)
    return d
