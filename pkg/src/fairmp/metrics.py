"""Utility and group-fairness evaluation.

All metrics live in [0, 1]; presentation scaling (x100) happens only in the
CLI. Hard labels come from row argmax with ties broken toward class 0.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from fairmp.errors import DataError


def hard_labels(probs: np.ndarray) -> np.ndarray:
    """Argmax per row; exact ties go to class 0 (argmax picks the first
    maximal column, which is class 0 for binary output)."""
    return np.argmax(probs, axis=1).astype(np.int64)


def accuracy(pred: np.ndarray, y: np.ndarray) -> float:
    pred, y = np.asarray(pred), np.asarray(y)
    if pred.size == 0:
        raise DataError("accuracy of an empty prediction set")
    return float(np.mean(pred == y))


def f1_binary(pred: np.ndarray, y: np.ndarray) -> float:
    """F1 of the positive class (label 1); 0 when precision+recall is 0."""
    pred, y = np.asarray(pred), np.asarray(y)
    if pred.size == 0:
        raise DataError("f1 of an empty prediction set")
    tp = float(np.sum((pred == 1) & (y == 1)))
    fp = float(np.sum((pred == 1) & (y == 0)))
    fn = float(np.sum((pred == 0) & (y == 1)))
    if 2 * tp + fp + fn == 0:
        return 0.0
    return 2 * tp / (2 * tp + fp + fn)


def auc(scores: np.ndarray, y: np.ndarray) -> float:
    """Rank statistic P(score_pos > score_neg), ties counted 1/2."""
    scores = np.asarray(scores, dtype=np.float64)
    y = np.asarray(y)
    pos = scores[y == 1]
    neg = scores[y == 0]
    if pos.size == 0 or neg.size == 0:
        raise DataError("auc needs both classes present")
    order = np.argsort(scores, kind="stable")
    ranks = np.empty(scores.size, dtype=np.float64)
    sorted_scores = scores[order]
    # average ranks over tie groups (1-based)
    boundaries = np.flatnonzero(np.diff(sorted_scores) != 0) + 1
    starts = np.concatenate([[0], boundaries])
    ends = np.concatenate([boundaries, [scores.size]])
    for a, b in zip(starts, ends):
        ranks[order[a:b]] = 0.5 * (a + b + 1)
    rank_sum = ranks[y == 1].sum()
    n1, n0 = pos.size, neg.size
    return float((rank_sum - n1 * (n1 + 1) / 2) / (n1 * n0))


def delta_dp(pred: np.ndarray, s: np.ndarray) -> float:
    """Absolute difference of positive-prediction rates between groups."""
    pred, s = np.asarray(pred), np.asarray(s)
    if not ((s == 0).any() and (s == 1).any()):
        raise DataError("demographic parity needs both groups present")
    return float(abs(pred[s == 0].mean() - pred[s == 1].mean()))


def delta_eo(pred: np.ndarray, y: np.ndarray, s: np.ndarray) -> float:
    """Absolute difference of true-positive rates between groups."""
    pred, y, s = np.asarray(pred), np.asarray(y), np.asarray(s)
    m0 = (s == 0) & (y == 1)
    m1 = (s == 1) & (y == 1)
    if not m0.any() or not m1.any():
        raise DataError("equal opportunity needs positive-label nodes in "
                        "both sensitive groups")
    return float(abs(pred[m0].mean() - pred[m1].mean()))


@dataclass(frozen=True)
class EvalReport:
    accuracy: float
    f1: float
    auc: float
    delta_dp: float
    delta_eo: float
    n_group0: int
    n_group1: int


def evaluate(probs: np.ndarray, y: np.ndarray, s: np.ndarray,
             mask: np.ndarray | None = None,
             lenient: bool = False) -> EvalReport:
    """Full report on the masked nodes (whole set when mask is None).

    With ``lenient=True``, metrics that are undefined on the masked subset
    (auc with one class, dp with one group, eo without group positives)
    come back as nan instead of raising; training loops use this so a
    degenerate epoch mask is visible in the trace rather than fatal.
    """
    probs = np.asarray(probs, dtype=np.float64)
    y = np.asarray(y)
    s = np.asarray(s)
    if mask is not None:
        sel = np.asarray(mask, dtype=bool)
        probs, y, s = probs[sel], y[sel], s[sel]
    if probs.shape[0] == 0:
        raise DataError("evaluation mask selects no nodes")
    pred = hard_labels(probs)

    def guarded(fn, *args):
        if not lenient:
            return fn(*args)
        try:
            return fn(*args)
        except DataError:
            return float("nan")

    return EvalReport(
        accuracy=accuracy(pred, y),
        f1=f1_binary(pred, y),
        auc=guarded(auc, probs[:, 1], y),
        delta_dp=guarded(delta_dp, pred, s),
        delta_eo=guarded(delta_eo, pred, y, s),
        n_group0=int(np.sum(s == 0)),
        n_group1=int(np.sum(s == 1)),
    )
