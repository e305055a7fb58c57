"""Synthetic attributed graphs with controllable bias structure.

Used for smoke tests, trend checks, and demo runs: the generator controls
how strongly features encode the sensitive attribute, how well they encode
the label, and the label/sensitive homophily of the edges.
"""

from __future__ import annotations

import numpy as np

from fairmp.errors import DataError
from fairmp.graph import (SPLIT_TEST, SPLIT_TRAIN, SPLIT_VAL, AttributedGraph)


def biased_graph(n_per_group: int = 40, dim: int = 6, seed: int = 0,
                 label_sens_agreement: float = 0.7,
                 sens_signal: float = 1.0, label_signal: float = 0.6,
                 p_same: float = 0.12, p_cross: float = 0.02,
                 noise: float = 0.3, normalize: bool = True,
                 edges_by: str = "sensitive") -> AttributedGraph:
    """Two equal sensitive groups with labels correlated to the group.

    Feature layout: column 0 carries the sensitive attribute with weight
    ``sens_signal``, column 1 the label with weight ``label_signal``; the
    rest is noise (min-max scaled to [0, 1] like the dataset loader unless
    disabled). ``edges_by`` selects whether edge homophily follows the
    sensitive attribute or the label. ``label_sens_agreement`` is the
    probability a node's label copies its group (0.5 = independent).
    Splits are a fixed 50/25/25 stratified interleave so that every split
    contains both groups and both labels.
    """
    if n_per_group < 8:
        raise DataError("need at least 8 nodes per group")
    rng = np.random.default_rng(seed)
    n = 2 * n_per_group
    s = np.repeat([0, 1], n_per_group)
    flip = rng.uniform(size=n) > label_sens_agreement
    y = np.where(flip, 1 - s, s)
    # every (group, label) cell needs >= 3 nodes so all three splits get
    # at least one; flip surplus nodes from the larger cell if not
    for sv in (0, 1):
        grp = np.flatnonzero(s == sv)
        for yv in (0, 1):
            short = 3 - int(np.sum(y[grp] == yv))
            if short > 0:
                donors = grp[y[grp] == 1 - yv]
                y[rng.choice(donors, size=short, replace=False)] = yv

    x = noise * rng.normal(size=(n, dim))
    x[:, 0] += sens_signal * s
    x[:, 1] += label_signal * y
    if normalize:
        from fairmp.data import normalize_features
        x = normalize_features(x)

    anchor = s if edges_by == "sensitive" else y
    iu, ju = np.triu_indices(n, k=1)
    same = anchor[iu] == anchor[ju]
    prob = np.where(same, p_same, p_cross)
    keep = rng.uniform(size=iu.size) < prob
    pairs = np.stack([iu[keep], ju[keep]], axis=1)

    # deterministic stratified split: per (s, y) cell, 50/25/25
    split = np.full(n, SPLIT_TEST, dtype=np.int8)
    for sv in (0, 1):
        for yv in (0, 1):
            cell = np.flatnonzero((s == sv) & (y == yv))
            rng.shuffle(cell)
            t = max(1, cell.size // 2)
            v = max(1, cell.size // 4)
            split[cell[:t]] = SPLIT_TRAIN
            split[cell[t:t + v]] = SPLIT_VAL
    return AttributedGraph.from_edge_list(x, y, s, pairs, split)


def separable_graph(n_per_block: int = 30, dim: int = 4, seed: int = 0,
                    p_in: float = 0.5, p_out: float = 0.02) -> AttributedGraph:
    """Two homophilous clusters whose labels equal the cluster id; linearly
    separable by construction. Sensitive groups are assigned independently
    of the label so fairness metrics stay well defined."""
    rng = np.random.default_rng(seed)
    n = 2 * n_per_block
    y = np.repeat([0, 1], n_per_block)
    x = 0.25 * rng.normal(size=(n, dim))
    x[:, 0] += 2.0 * y
    from fairmp.data import normalize_features
    x = normalize_features(x)
    s = (np.arange(n) % 2).astype(np.int64)

    iu, ju = np.triu_indices(n, k=1)
    same = y[iu] == y[ju]
    keep = rng.uniform(size=iu.size) < np.where(same, p_in, p_out)
    pairs = np.stack([iu[keep], ju[keep]], axis=1)

    split = np.full(n, SPLIT_TEST, dtype=np.int8)
    for yv in (0, 1):
        for sv in (0, 1):
            cell = np.flatnonzero((y == yv) & (s == sv))
            rng.shuffle(cell)
            t = max(1, cell.size // 2)
            v = max(1, cell.size // 4)
            split[cell[:t]] = SPLIT_TRAIN
            split[cell[t:t + v]] = SPLIT_VAL
    return AttributedGraph.from_edge_list(x, y, s, pairs, split)
