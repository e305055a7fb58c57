"""Graph storage, normalized operators, group partitions, and homophily.

The graph is undirected and unweighted: edges are kept as a deduplicated
array of pairs (i, j) with i < j, no self loops. Self loops appear only
inside the degree-normalized operator, which acts like
``D^{-1/2} (A + I) D^{-1/2}`` with D the degree matrix of A + I.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from fairmp import backend
from fairmp.errors import DataError

# per-node split tags
SPLIT_NONE = 0
SPLIT_TRAIN = 1
SPLIT_VAL = 2
SPLIT_TEST = 3


def canonical_edges(pairs: np.ndarray, num_nodes: int) -> np.ndarray:
    """Symmetrize, deduplicate, and sort an edge list; drop self loops.

    Accepts directed pairs; the undirected edge set is returned as an
    (E, 2) int64 array with i < j per row.
    """
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    if pairs.size == 0:
        return np.zeros((0, 2), dtype=np.int64)
    if pairs.min() < 0 or pairs.max() >= num_nodes:
        raise DataError("edge endpoint out of range")
    lo = np.minimum(pairs[:, 0], pairs[:, 1])
    hi = np.maximum(pairs[:, 0], pairs[:, 1])
    keep = lo != hi
    stacked = np.stack([lo[keep], hi[keep]], axis=1)
    if stacked.shape[0] == 0:
        return np.zeros((0, 2), dtype=np.int64)
    return np.unique(stacked, axis=0)


@dataclass(frozen=True)
class AttributedGraph:
    """Undirected attributed graph with binary labels and a binary
    sensitive attribute.

    ``edges`` must already be canonical (use :meth:`from_edge_list` for raw
    input). ``split`` holds SPLIT_* tags, defaulting to SPLIT_NONE.
    """

    features: np.ndarray
    labels: np.ndarray
    sensitive: np.ndarray
    edges: np.ndarray
    split: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        x = np.ascontiguousarray(np.asarray(self.features, dtype=np.float64))
        y = np.asarray(self.labels, dtype=np.int64).ravel()
        s = np.asarray(self.sensitive, dtype=np.int64).ravel()
        e = np.asarray(self.edges, dtype=np.int64).reshape(-1, 2)
        if x.ndim != 2 or x.shape[0] == 0:
            raise DataError("feature matrix must be 2-D with at least one row")
        n = x.shape[0]
        if y.shape[0] != n or s.shape[0] != n:
            raise DataError("label/sensitive length must equal the node count")
        if not np.isin(y, (0, 1)).all():
            raise DataError("labels must be binary")
        if not np.isin(s, (0, 1)).all():
            raise DataError("sensitive attribute must be binary")
        if e.size and (e.min() < 0 or e.max() >= n):
            raise DataError("edge endpoint out of range")
        if e.size:
            if (e[:, 0] >= e[:, 1]).any():
                raise DataError("edges must be canonical pairs (i < j)")
            if np.unique(e, axis=0).shape[0] != e.shape[0]:
                raise DataError("duplicate edges")
        sp = self.split
        if sp is None:
            sp = np.full(n, SPLIT_NONE, dtype=np.int8)
        else:
            sp = np.asarray(sp, dtype=np.int8).ravel()
            if sp.shape[0] != n:
                raise DataError("split length must equal the node count")
            if not np.isin(sp, (SPLIT_NONE, SPLIT_TRAIN, SPLIT_VAL, SPLIT_TEST)).all():
                raise DataError("unknown split tag")
        for name, val in (("features", x), ("labels", y), ("sensitive", s),
                          ("edges", e), ("split", sp)):
            object.__setattr__(self, name, val)
            val.setflags(write=False)

    @classmethod
    def from_edge_list(cls, features, labels, sensitive, pairs,
                       split=None) -> "AttributedGraph":
        """Build a graph from raw (possibly directed, duplicated) pairs."""
        x = np.asarray(features, dtype=np.float64)
        return cls(x, labels, sensitive,
                   canonical_edges(np.asarray(pairs), x.shape[0]), split)

    @property
    def num_nodes(self) -> int:
        return self.features.shape[0]

    @property
    def num_edges(self) -> int:
        return self.edges.shape[0]

    @property
    def num_features(self) -> int:
        return self.features.shape[1]

    def split_mask(self, tag: int) -> np.ndarray:
        return self.split == tag

    def with_split(self, split: np.ndarray) -> "AttributedGraph":
        return AttributedGraph(self.features, self.labels, self.sensitive,
                               self.edges, split)


@dataclass(frozen=True)
class GroupPartition:
    """Node indices of the two sensitive groups."""

    idx0: np.ndarray
    idx1: np.ndarray

    @property
    def n0(self) -> int:
        return self.idx0.shape[0]

    @property
    def n1(self) -> int:
        return self.idx1.shape[0]


def partition_by_sensitive(graph: AttributedGraph) -> GroupPartition:
    """Split node indices by the binary sensitive attribute.

    Raises when either group is empty: the group-discrepancy estimator is
    undefined without two populated groups.
    """
    s = graph.sensitive
    idx0 = np.flatnonzero(s == 0)
    idx1 = np.flatnonzero(s == 1)
    if idx0.size == 0 or idx1.size == 0:
        raise DataError("both sensitive groups must be non-empty")
    return GroupPartition(idx0, idx1)


@dataclass(frozen=True)
class NormalizedOperator:
    """Sparse symmetric operator in CSR form.

    For the degree-normalized case the entry at (i, j) is
    ``(A + I)_ij / sqrt(deg_i * deg_j)`` with deg the row sums of A + I.
    """

    n: int
    indptr: np.ndarray
    indices: np.ndarray
    data: np.ndarray

    def apply(self, dense: np.ndarray) -> np.ndarray:
        """Compute self @ dense for a dense (n, d) matrix."""
        x = np.ascontiguousarray(dense, dtype=np.float64)
        squeeze = False
        if x.ndim == 1:
            x = x[:, None]
            squeeze = True
        out = np.asarray(backend.csr_matmat(self.indptr, self.indices,
                                            self.data, x))
        return out[:, 0] if squeeze else out

    def to_dense(self) -> np.ndarray:
        out = np.zeros((self.n, self.n), dtype=np.float64)
        for i in range(self.n):
            lo, hi = self.indptr[i], self.indptr[i + 1]
            out[i, self.indices[lo:hi]] = self.data[lo:hi]
        return out


def _selfloop_csr(graph: AttributedGraph):
    """CSR pattern of A + I with sorted column indices per row."""
    n = graph.num_nodes
    e = graph.edges
    src = np.concatenate([e[:, 0], e[:, 1], np.arange(n, dtype=np.int64)])
    dst = np.concatenate([e[:, 1], e[:, 0], np.arange(n, dtype=np.int64)])
    order = np.lexsort((dst, src))
    src, dst = src[order], dst[order]
    counts = np.bincount(src, minlength=n)
    indptr = np.zeros(n + 1, dtype=np.int64)
    np.cumsum(counts, out=indptr[1:])
    return indptr, dst, src


def build_normalized_adjacency(graph: AttributedGraph) -> NormalizedOperator:
    """Degree-normalized adjacency with self loops.

    Isolated nodes get degree 1 from their self loop, so the operator is
    always well defined.
    """
    indptr, cols, rows = _selfloop_csr(graph)
    deg = np.diff(indptr).astype(np.float64)
    inv_sqrt = 1.0 / np.sqrt(deg)
    data = inv_sqrt[rows] * inv_sqrt[cols]
    return NormalizedOperator(graph.num_nodes, indptr, cols,
                              np.ascontiguousarray(data))


def build_selfloop_adjacency(graph: AttributedGraph,
                             eps: float = 0.0) -> NormalizedOperator:
    """Unnormalized A + (1 + eps) I as a CSR operator (sum aggregation)."""
    indptr, cols, rows = _selfloop_csr(graph)
    data = np.where(rows == cols, 1.0 + eps, 1.0)
    return NormalizedOperator(graph.num_nodes, indptr, cols,
                              np.ascontiguousarray(data))


def neighborhood_structure(graph: AttributedGraph):
    """CSR pattern of A + I for attention layers.

    Self loops guarantee every neighborhood is non-empty. Returns
    (indptr, cols, rows) where rows repeats the row id per stored entry.
    """
    indptr, cols, rows = _selfloop_csr(graph)
    return indptr, cols, rows


def _edge_fraction_equal(graph: AttributedGraph, values: np.ndarray) -> float:
    if graph.num_edges == 0:
        raise DataError("ratio undefined on a graph with no edges")
    u, v = graph.edges[:, 0], graph.edges[:, 1]
    return float(np.mean(values[u] == values[v]))


def homophily_ratio(graph: AttributedGraph) -> float:
    """Fraction of edges whose endpoints share the class label."""
    return _edge_fraction_equal(graph, graph.labels)


def sensitive_homophily_ratio(graph: AttributedGraph) -> float:
    """Fraction of edges whose endpoints share the sensitive attribute."""
    return _edge_fraction_equal(graph, graph.sensitive)
