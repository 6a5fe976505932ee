"""Exhaustive embedding retrieval with retrieval-as-ranking (RAR) scoring.

Documents are scored by ``S(q, d) = w0 * cos(e_q, e_d) + sum_i w_i f_i(d)``
over every candidate that passes the attribute filters; nothing is
approximated.
"""

from __future__ import annotations

import heapq
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .errors import (AlignmentError, DegenerateInputError, DivergenceError, ParameterError,
                     SchemaError, SkipQuery, SpecError, UndefinedMetricError)

NORM_TOL = 1e-6


@dataclass
class DocumentRecord:
    doc_id: object
    embedding: np.ndarray
    attributes: dict = field(default_factory=dict)
    features: dict = field(default_factory=dict)
    text: str = ""

    def to_json(self) -> dict:
        rec = {"id": self.doc_id, "attributes": self.attributes,
               "embedding": [float(np.float32(x)) for x in self.embedding],
               "features": self.features}
        if self.text:
            rec["text"] = self.text
        return rec

    @classmethod
    def from_json(cls, rec: Mapping) -> "DocumentRecord":
        return cls(rec["id"], np.asarray(rec["embedding"], dtype=np.float64),
                   dict(rec.get("attributes", {})), dict(rec.get("features", {})), rec.get("text", ""))


@dataclass
class QuerySpec:
    query_id: object
    embedding: np.ndarray
    filters: dict = field(default_factory=dict)
    k: int = 1000
    text: str = ""

    def __post_init__(self):
        if self.k < 1:
            raise SpecError("K must be >= 1")

    def to_json(self) -> dict:
        rec = {"id": self.query_id, "embedding": [float(np.float32(x)) for x in self.embedding],
               "filters": self.filters, "k": self.k}
        if self.text:
            rec["text"] = self.text
        return rec

    @classmethod
    def from_json(cls, rec: Mapping) -> "QuerySpec":
        return cls(rec["id"], np.asarray(rec["embedding"], dtype=np.float64),
                   dict(rec.get("filters", {})), int(rec.get("k", 1000)), rec.get("text", ""))


@dataclass
class RARWeights:
    w0: float = 1.0
    feature_weights: dict = field(default_factory=dict)
    lam: float = 0.5

    def __post_init__(self):
        vals = [self.w0, self.lam, *self.feature_weights.values()]
        if not all(math.isfinite(v) for v in vals):
            raise SpecError("RAR weights must be finite")

    def vector(self, feature_names: Sequence[str]) -> np.ndarray:
        missing = set(self.feature_weights) - set(feature_names)
        if missing:
            raise AlignmentError(f"weights reference unknown features {sorted(missing)}")
        return np.array([self.w0] + [self.feature_weights.get(n, 0.0) for n in feature_names])

    @classmethod
    def from_vector(cls, vec, feature_names, lam) -> "RARWeights":
        return cls(float(vec[0]), {n: float(v) for n, v in zip(feature_names, vec[1:])}, lam)

    def scaled(self, c: float) -> "RARWeights":
        return RARWeights(self.w0 * c, {k: v * c for k, v in self.feature_weights.items()}, self.lam)

    def to_json(self) -> dict:
        return {"w0": self.w0, "feature_weights": self.feature_weights, "lam": self.lam}


def cosine(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise DegenerateInputError("cosine of a zero vector is undefined")
    return float(np.dot(a, b) / (na * nb))


def rar_score(q: QuerySpec, d: DocumentRecord, w: RARWeights) -> float:
    s = w.w0 * cosine(q.embedding, d.embedding)
    for name, wi in w.feature_weights.items():
        if name not in d.features:
            raise AlignmentError(f"document {d.doc_id!r} lacks feature {name!r}")
        s += wi * float(d.features[name])
    return s


def _row_dot(cols, v, rows) -> np.ndarray:
    """Per-row dot products accumulated column by column in a fixed order.

    BLAS blocks its sums differently depending on how many rows it gets, so
    the same document could score differently in a filtered subset. This
    loop makes every row's result depend only on that row.
    """
    out = np.zeros(np.arange(cols.shape[1])[rows].size)
    for j in range(cols.shape[0]):
        out += cols[j, rows] * v[j]
    return out


class Corpus:
    """Column-oriented, immutable view of a document collection."""

    def __init__(self, docs: Sequence[DocumentRecord]):
        self.docs = list(docs)
        self.ids = [d.doc_id for d in self.docs]
        if len(set(self.ids)) != len(self.ids):
            raise SchemaError("duplicate document ids")
        emb = np.array([d.embedding for d in self.docs], dtype=np.float64)
        self.embeddings = emb.reshape(len(self.docs), -1)
        norms = np.linalg.norm(self.embeddings, axis=1)
        if self.docs and np.any(np.abs(norms - 1.0) > NORM_TOL):
            raise SpecError("document embeddings must be unit vectors")
        names = sorted(self.docs[0].features) if self.docs else []
        for d in self.docs:
            if sorted(d.features) != names:
                raise SchemaError(f"document {d.doc_id!r} has an inconsistent feature set")
        self.feature_names = names
        self.features = np.array([[d.features[n] for n in names] for d in self.docs],
                                 dtype=np.float64).reshape(len(self.docs), len(names))
        self.attribute_names = sorted({a for d in self.docs for a in d.attributes})
        self.attr_columns = {a: np.array([d.attributes.get(a) for d in self.docs], dtype=object)
                             for a in self.attribute_names}
        self.id_rank = np.empty(len(self.ids), dtype=np.int64)
        self.id_rank[sorted(range(len(self.ids)), key=self.ids.__getitem__)] = np.arange(len(self.ids))
        self._index = {d: i for i, d in enumerate(self.ids)}
        self._emb_cols = np.ascontiguousarray(self.embeddings.T)
        self._feat_cols = np.ascontiguousarray(self.features.T)

    def __len__(self):
        return len(self.docs)

    def index_of(self, doc_id) -> int:
        return self._index[doc_id]

    def scores(self, query_embedding, w: RARWeights, idx=None) -> np.ndarray:
        """Vectorized RAR scores (all documents, or the rows in ``idx``)."""
        q = np.asarray(query_embedding, dtype=np.float64)
        qn = np.linalg.norm(q)
        if qn == 0:
            raise DegenerateInputError("zero query embedding")
        rows = slice(None) if idx is None else idx
        wv = w.vector(self.feature_names)
        # rows are unit-norm, so the dot product divided by |q| is the cosine
        return wv[0] * _row_dot(self._emb_cols, q, rows) / qn + _row_dot(self._feat_cols, wv[1:], rows)

    @classmethod
    def load(cls, path) -> "Corpus":
        with open(path) as fh:
            return cls([DocumentRecord.from_json(json.loads(line)) for line in fh if line.strip()])

    def save(self, path) -> None:
        Path(path).write_text("".join(json.dumps(d.to_json(), sort_keys=True) + "\n" for d in self.docs))


def load_queries(path) -> list:
    with open(path) as fh:
        return [QuerySpec.from_json(json.loads(line)) for line in fh if line.strip()]


def _allowed_values(pred) -> list:
    if isinstance(pred, (list, tuple, set, frozenset)):
        return list(pred)
    return [pred]


def filter_candidates(corpus: Corpus, filters: Mapping) -> np.ndarray:
    """Indices of documents satisfying every predicate (conjunction).

    A predicate is either a single value (equality) or a collection of
    allowed values (membership).
    """
    keep = np.ones(len(corpus), dtype=bool)
    for attr, pred in (filters or {}).items():
        if attr not in corpus.attr_columns:
            raise SchemaError(f"unknown attribute {attr!r}")
        allowed = _allowed_values(pred)
        col = corpus.attr_columns[attr]
        keep &= np.fromiter((v in allowed for v in col), dtype=bool, count=len(col))
    return np.flatnonzero(keep)


def _topk_rows(corpus: Corpus, scores: np.ndarray, idx: np.ndarray, k: int) -> list:
    if idx.size == 0:
        return []
    s = scores
    if k < idx.size:
        kth = np.partition(s, idx.size - k)[idx.size - k]
        keep = s >= kth
        idx, s = idx[keep], s[keep]
    order = np.lexsort((corpus.id_rank[idx], -s))[:k]
    return [(int(idx[o]), float(s[o])) for o in order]


def exhaustive_topk(corpus: Corpus, query: QuerySpec, w: RARWeights, n_shards: int = 1,
                    workers: int = 1) -> list:
    """Exact top-K ``(doc_id, score)`` pairs, score descending, doc_id ascending on ties.

    With ``n_shards > 1`` the filtered candidates are scanned shard by shard
    (optionally on ``workers`` threads) and merged with a K-way selection;
    the result is identical to a single scan.
    """
    idx = filter_candidates(corpus, query.filters)
    scores = corpus.scores(query.embedding, w, idx)
    k = query.k
    if n_shards <= 1:
        rows = _topk_rows(corpus, scores, idx, k)
    else:
        bounds = np.linspace(0, idx.size, n_shards + 1).astype(int)
        parts = [(idx[a:b], scores[a:b]) for a, b in zip(bounds[:-1], bounds[1:])]

        def scan(part):
            return _topk_rows(corpus, part[1], part[0], k)

        if workers > 1:
            with ThreadPoolExecutor(workers) as pool:
                shard_rows = list(pool.map(scan, parts))
        else:
            shard_rows = [scan(p) for p in parts]
        merged = heapq.merge(*shard_rows, key=lambda r: (-r[1], corpus.id_rank[r[0]]))
        rows = [r for _, r in zip(range(k), merged)]
    return [(corpus.ids[i], s) for i, s in rows]


# -- RAR training ---------------------------------------------------------

@dataclass(frozen=True)
class LabeledPair:
    query_id: object
    doc_id: object
    grade: int
    engaged: int
    production_rank: int | None = None

    def __post_init__(self):
        if self.grade not in (1, 2, 3, 4):
            raise SpecError("grade must be 1..4")
        if self.engaged not in (0, 1):
            raise SpecError("engagement label must be 0 or 1")

    @property
    def relevant(self) -> int:
        return int(self.grade > 2)


@dataclass
class RARDataset:
    """Design matrix ``[cos, f_1..f_n]`` with relevance / engagement labels."""

    X: np.ndarray
    y_rel: np.ndarray
    y_eng: np.ndarray
    feature_names: tuple = ()

    @classmethod
    def from_pairs(cls, corpus: Corpus, queries: Mapping, pairs: Sequence[LabeledPair]) -> "RARDataset":
        rows, yr, ye = [], [], []
        for p in pairs:
            i = corpus.index_of(p.doc_id)
            c = cosine(queries[p.query_id].embedding, corpus.embeddings[i])
            rows.append(np.concatenate([[c], corpus.features[i]]))
            yr.append(p.relevant)
            ye.append(p.engaged)
        return cls(np.array(rows), np.array(yr, float), np.array(ye, float), tuple(corpus.feature_names))


def _sigmoid(z):
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def rar_loss(wvec, data: RARDataset, lam: float):
    """Mixed BCE objective on ``sigmoid(S)`` and its gradient w.r.t. the weight vector."""
    if not 0.0 <= lam <= 1.0:
        raise ParameterError("lambda must lie in [0, 1]")
    s = data.X @ wvec
    p = np.clip(_sigmoid(s), 1e-7, 1 - 1e-7)

    def bce(y):
        return float(-(y * np.log(p) + (1 - y) * np.log(1 - p)).mean())

    loss = lam * bce(data.y_rel) + (1 - lam) * bce(data.y_eng)
    target = lam * data.y_rel + (1 - lam) * data.y_eng
    grad = data.X.T @ (_sigmoid(s) - target) / len(s)
    return loss, grad


def train_rar(init: RARWeights, data: RARDataset, lam: float | None = None, lr: float = 0.1,
              epochs: int = 500, history: list | None = None) -> RARWeights:
    """Full-batch gradient descent on the RAR objective.

    Pass a list as ``history`` to collect the loss before every step and
    after the last one.
    """
    lam = init.lam if lam is None else lam
    names = data.feature_names or tuple(sorted(init.feature_weights))
    w = init.vector(names)
    for _ in range(epochs):
        loss, grad = rar_loss(w, data, lam)
        if not math.isfinite(loss) or not np.all(np.isfinite(grad)):
            raise DivergenceError("RAR loss became non-finite; try a smaller learning rate")
        if history is not None:
            history.append(loss)
        w = w - lr * grad
    final, _ = rar_loss(w, data, lam)
    if not math.isfinite(final):
        raise DivergenceError("RAR loss became non-finite; try a smaller learning rate")
    if history is not None:
        history.append(final)
    return RARWeights.from_vector(w, names, lam)


def rar_accuracy(w: RARWeights, data: RARDataset, lam: float | None = None) -> float:
    lam = w.lam if lam is None else lam
    s = data.X @ w.vector(data.feature_names)
    target = (lam * data.y_rel + (1 - lam) * data.y_eng) >= 0.5
    return float(((s > 0) == target).mean())


def separable_rar_set(seed: int = 0, n: int = 600, margin: float = 0.1) -> RARDataset:
    """Synthetic pairs linearly separable through the origin in ``[cos, f1, f2]``.

    Engagement depends on the features as well as on cosine, so a
    cosine-only ranker cannot separate it.
    """
    rng = np.random.default_rng(seed)
    plane = np.array([2.0, 1.0, -0.8])
    rows = []
    while len(rows) < n:
        x = np.array([rng.uniform(-1, 1), rng.normal(), rng.normal()])
        if abs(x @ plane) >= margin:
            rows.append(x)
    X = np.array(rows)
    y = (X @ plane > 0).astype(float)
    return RARDataset(X, y.copy(), y, ("f1", "f2"))


# -- training-data construction ------------------------------------------

@dataclass
class ContrastiveTuple:
    query_id: object
    positives: list
    negatives: list

    @property
    def has_negatives(self) -> bool:
        return bool(self.negatives)


def mine_hard_negatives(query_id, candidates: Sequence[tuple], seed: int = 0) -> ContrastiveTuple:
    """Pick 1-2 positives (grade > 2) and 2-3 top-ranked non-relevant docs.

    ``candidates`` holds ``(doc_id, grade, rank)`` triples. Raises
    :class:`SkipQuery` when no positive exists; a tuple without negatives
    reports ``has_negatives == False``.
    """
    rng = np.random.default_rng(seed)
    ranked = sorted(candidates, key=lambda c: c[2])
    pos = [c for c in ranked if c[1] > 2]
    neg = [c for c in ranked if c[1] <= 2]
    if not pos:
        raise SkipQuery(f"query {query_id!r} has no positive candidate")
    n_pos = min(int(rng.integers(1, 3)), len(pos))
    chosen = sorted(rng.choice(len(pos), size=n_pos, replace=False))
    n_neg = min(int(rng.integers(2, 4)), len(neg))
    return ContrastiveTuple(query_id, [pos[i][0] for i in chosen], [c[0] for c in neg[:n_neg]])


@dataclass
class QueryBucket:
    bucket_id: object
    target: float
    precision_baseline: float
    precision_treatment: float

    def __post_init__(self):
        for p in (self.precision_baseline, self.precision_treatment):
            if not 0.0 <= p <= 1.0:
                raise SpecError("precision must lie in [0, 1]")

    @property
    def gap(self) -> float:
        if self.precision_treatment <= 0:
            raise UndefinedMetricError("treatment precision is zero; quality gap undefined")
        return self.precision_baseline / self.precision_treatment


def bucket_resize(bucket: QueryBucket) -> float:
    """Resized bucket size: target proportion times the baseline/treatment quality gap."""
    return bucket.target * bucket.gap
