"""Ranking and classification metrics."""

from __future__ import annotations

import numpy as np

from .errors import SpecError, UndefinedMetricError

# NDCG gain convention, recorded next to every reported NDCG value.
GAIN_CONVENTION = "exponential(2^g-1)"


def dcg_at_k(grades, k: int) -> float:
    g = np.asarray(grades, dtype=np.float64)[:k]
    discounts = np.log2(np.arange(2, g.size + 2))
    return float(((2.0 ** g - 1.0) / discounts).sum())


def ndcg_at_k(ranked_grades, k: int) -> float:
    """NDCG@k of grades listed in ranked order; 0 when no grade is positive."""
    if k < 1:
        raise SpecError("k must be >= 1")
    ideal = dcg_at_k(sorted(ranked_grades, reverse=True), k)
    if ideal == 0.0:
        return 0.0
    return dcg_at_k(ranked_grades, k) / ideal


def auroc(scores, labels) -> float:
    """Probability a random positive outscores a random negative (ties count 1/2).

    Computed from midranks, which equals pair counting exactly.
    """
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).astype(bool)
    n_pos, n_neg = int(y.sum()), int((~y).sum())
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUROC needs at least one positive and one negative")
    order = np.argsort(s, kind="mergesort")
    ranks = np.empty(s.size)
    sorted_s = s[order]
    i = 0
    while i < s.size:
        j = i
        while j + 1 < s.size and sorted_s[j + 1] == sorted_s[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    u = ranks[y].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def precision_recall_at_k(ranked_flags, k: int, total_relevant: int):
    if k < 1:
        raise SpecError("k must be >= 1")
    if total_relevant < 0:
        raise SpecError("total_relevant must be >= 0")
    hits = int(np.asarray(ranked_flags[:k], dtype=bool).sum())
    recall = hits / total_relevant if total_relevant else 0.0
    return hits / k, recall


def metric_record(metric: str, k, value: float) -> dict:
    gain = GAIN_CONVENTION if metric.lower().startswith("ndcg") else None
    return {"metric": metric, "k": k, "value": value, "gain_convention": gain}
