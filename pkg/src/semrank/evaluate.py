"""Offline evaluation of ranked runs against planted grades and action logs."""

from __future__ import annotations

from typing import Mapping, Sequence

import numpy as np

from .calibration import observed_expected_ratio
from .errors import ReconciliationError, UndefinedMetricError
from .metrics import auroc, metric_record, ndcg_at_k, precision_recall_at_k
from .model import RELEVANCE_TASK


def reconcile(run: Sequence[Mapping], qrels: Mapping) -> None:
    """Every (query, doc) in the run must have a planted grade."""
    offenders = []
    for q in run:
        grades = qrels.get(q["query_id"])
        if grades is None:
            offenders.append({"query_id": q["query_id"], "doc_id": None})
            continue
        offenders += [{"query_id": q["query_id"], "doc_id": r["doc_id"]}
                      for r in q["results"] if r["doc_id"] not in grades]
    if offenders:
        raise ReconciliationError(f"{len(offenders)} run entries have no grade", offenders)


def _try_auroc(scores, labels):
    try:
        return auroc(scores, labels)
    except UndefinedMetricError:
        return None


def evaluate_run(run: Sequence[Mapping], qrels: Mapping, ks=(10,), logs: Sequence[Mapping] = (),
                 outcome_action: str = "click") -> list:
    """Metric rows: mean NDCG/P/R@k over queries, pooled AUROC, per-task AUROC and O/E.

    ``run`` rows are ``{query_id, results: [{doc_id, score, raw?, calibrated?}]}``
    with results already in ranked order.
    """
    reconcile(run, qrels)
    table = []
    for k in ks:
        nd, pk, rk = [], [], []
        for q in run:
            grades = qrels[q["query_id"]]
            ranked = [grades[r["doc_id"]] for r in q["results"]]
            nd.append(ndcg_at_k(ranked, k))
            total = sum(g > 2 for g in grades.values())
            p, r = precision_recall_at_k([g > 2 for g in ranked], k, total)
            pk.append(p)
            rk.append(r)
        table += [metric_record("ndcg", k, float(np.mean(nd))),
                  metric_record("precision", k, float(np.mean(pk))),
                  metric_record("recall", k, float(np.mean(rk)))]

    pooled = [(r["score"], qrels[q["query_id"]][r["doc_id"]] > 2) for q in run for r in q["results"]]
    if pooled:
        a = _try_auroc(*zip(*pooled))
        if a is not None:
            table.append(metric_record("auroc:score", None, a))

    by_pair = {(q["query_id"], r["doc_id"]): r for q in run for r in q["results"] if "raw" in r}
    if by_pair:
        rel = [(r["raw"][RELEVANCE_TASK], qrels[qid][d] > 2) for (qid, d), r in by_pair.items()]
        a = _try_auroc(*zip(*rel))
        if a is not None:
            table.append(metric_record(f"auroc:{RELEVANCE_TASK}", None, a))
    joined = [(by_pair[(row["query_id"], row["doc_id"])], row["actions"]) for row in logs
              if (row["query_id"], row["doc_id"]) in by_pair]
    if joined:
        tasks = sorted(set(joined[0][0]["raw"]) & set(joined[0][1]))
        for t in tasks:
            a = _try_auroc([r["raw"][t] for r, _ in joined], [acts[t] for _, acts in joined])
            if a is not None:
                table.append(metric_record(f"auroc:{t}", None, a))
        if "calibrated" in joined[0][0] and outcome_action in joined[0][1]:
            pred = [r["calibrated"][RELEVANCE_TASK] for r, _ in joined]
            obs = [acts[outcome_action] for _, acts in joined]
            try:
                table.append(metric_record(f"oe:{outcome_action}", None, observed_expected_ratio(pred, obs)))
            except UndefinedMetricError:
                pass
    return table
