"""Synthetic corpus, queries, graded labels and action logs with planted clusters.

Every document and query belongs to one cluster. Grades follow planted
similarity: same-cluster documents grade 3-4, others 1-2, with the upper
grade in each band going to the closer half. Labeled pairs are drawn so
that the grade histogram follows a configured mixture.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .errors import SpecError
from .losses import ENGAGEMENT_ACTIONS
from .retrieval import DocumentRecord, LabeledPair, QuerySpec

REGIONS = ("na", "eu", "apac")
SENIORITY = ("junior", "mid", "senior")
FEATURE_NAMES = ("freshness", "popularity", "quality")
TOPIC_WORDS = (
    "python", "finance", "design", "sales", "nursing", "logistics", "legal", "marketing",
    "data", "security", "teaching", "retail", "cloud", "research", "support", "hardware",
    "mobile", "audit", "robotics", "media", "energy", "biology", "writing", "gaming",
)
FILES = ("corpus.jsonl", "queries.jsonl", "labels.jsonl", "logs.jsonl", "qrels.jsonl", "clusters.json")


@dataclass(frozen=True)
class GenConfig:
    n_docs: int = 1000
    n_queries: int = 40
    n_clusters: int = 20
    d_emb: int = 32
    doc_noise: float = 0.05        # per-dimension std around the cluster centre
    query_noise: float = 0.02
    n_labels: int = 2000
    grade_mix: tuple = (0.4, 0.3, 0.2, 0.1)   # P(grade = 1..4)
    log_depth: int = 25                       # positions shown per logged query
    log_sessions: int = 4                     # impressions logged per query
    filter_fraction: float = 0.25             # queries that carry a region filter
    actions: tuple = ENGAGEMENT_ACTIONS

    def __post_init__(self):
        if min(self.n_docs, self.n_queries, self.n_clusters, self.d_emb) < 1:
            raise SpecError("generator sizes must be >= 1")
        if self.n_clusters > self.n_docs:
            raise SpecError("need at least one document per cluster")
        mix = np.asarray(self.grade_mix, dtype=float)
        if mix.shape != (4,) or np.any(mix < 0) or not np.isclose(mix.sum(), 1.0):
            raise SpecError("grade_mix must be four probabilities summing to 1")
        object.__setattr__(self, "grade_mix", tuple(float(x) for x in mix))
        object.__setattr__(self, "actions", tuple(self.actions))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "GenConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise SpecError(f"unknown generator keys {sorted(unknown)}")
        return cls(**d)


@dataclass
class Dataset:
    config: GenConfig
    docs: list
    queries: list
    labels: list
    logs: list
    doc_cluster: np.ndarray
    query_cluster: np.ndarray
    extras: dict = field(default_factory=dict)

    def cluster_members(self, c: int) -> list:
        return [self.docs[i].doc_id for i in np.flatnonzero(self.doc_cluster == c)]


def _unit(x):
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


def _f32_unit(x):
    # store embeddings as float32 but keep them unit-norm after the round trip
    x32 = _unit(np.asarray(x, dtype=np.float64)).astype(np.float32).astype(np.float64)
    return _unit(x32)


def _round(x, nd=4):
    return float(round(float(x), nd))


def grade_matrix(q_emb, q_cluster, d_emb, d_cluster) -> np.ndarray:
    """Planted grade of every (query, doc) pair, shape ``[n_queries, n_docs]``."""
    cos = q_emb @ d_emb.T
    same = q_cluster[:, None] == d_cluster[None, :]
    grades = np.where(same, 3, 1)
    for qi in range(len(q_emb)):
        own, other = cos[qi, same[qi]], cos[qi, ~same[qi]]
        if own.size:
            grades[qi, same[qi] & (cos[qi] >= np.median(own))] = 4
        if other.size:
            grades[qi, ~same[qi] & (cos[qi] >= np.quantile(other, 0.9))] = 2
    return grades


def _topic(c: int) -> str:
    return TOPIC_WORDS[c % len(TOPIC_WORDS)] + ("" if c < len(TOPIC_WORDS) else f"-{c // len(TOPIC_WORDS)}")


def _query_text(cluster: int, variant: int) -> str:
    # texts double as service lookup keys, so repeated topics get a variant suffix
    base = f"{_topic(cluster)} jobs"
    return base if variant == 0 else f"{base} {variant + 1}"


def sample_grades(mix, n: int, rng: np.random.Generator) -> np.ndarray:
    return rng.choice(4, size=n, p=np.asarray(mix)) + 1


def examination_prob(position: int) -> float:
    """Chance a result at 1-based ``position`` is looked at."""
    return 1.0 / position ** 0.7


def generate(cfg: GenConfig, seed: int) -> Dataset:
    rng = np.random.default_rng(seed)
    centres = _unit(rng.normal(size=(cfg.n_clusters, cfg.d_emb)))

    doc_cluster = np.arange(cfg.n_docs) % cfg.n_clusters
    d_emb = _f32_unit(centres[doc_cluster] + cfg.doc_noise * rng.normal(size=(cfg.n_docs, cfg.d_emb)))
    feats = rng.uniform(0.0, 1.0, size=(cfg.n_docs, len(FEATURE_NAMES)))
    regions = rng.integers(0, len(REGIONS), cfg.n_docs)
    levels = rng.integers(0, len(SENIORITY), cfg.n_docs)
    docs = []
    for i in range(cfg.n_docs):
        c = int(doc_cluster[i])
        docs.append(DocumentRecord(
            f"d{i:05d}", d_emb[i],
            {"region": REGIONS[regions[i]], "seniority": SENIORITY[levels[i]]},
            {n: _round(v) for n, v in zip(FEATURE_NAMES, feats[i])},
            f"{SENIORITY[levels[i]]} {_topic(c)} role {i} in {REGIONS[regions[i]]}"))
    # keep records exactly as they will be read back from disk
    docs = [DocumentRecord.from_json(json.loads(json.dumps(d.to_json()))) for d in docs]
    d_emb = np.array([d.embedding for d in docs])

    query_cluster = np.arange(cfg.n_queries) % cfg.n_clusters
    q_emb = _f32_unit(centres[query_cluster] + cfg.query_noise * rng.normal(size=(cfg.n_queries, cfg.d_emb)))
    has_filter = rng.random(cfg.n_queries) < cfg.filter_fraction
    filter_region = rng.integers(0, len(REGIONS), cfg.n_queries)
    queries = []
    for j in range(cfg.n_queries):
        filters = {"region": [REGIONS[filter_region[j]]]} if has_filter[j] else {}
        queries.append(QuerySpec(f"q{j:04d}", q_emb[j], filters,
                                 k=min(100, cfg.n_docs), text=_query_text(int(query_cluster[j]), j // cfg.n_clusters)))
    queries = [QuerySpec.from_json(json.loads(json.dumps(q.to_json()))) for q in queries]
    q_emb = np.array([q.embedding for q in queries])

    grades = grade_matrix(q_emb, query_cluster, d_emb, doc_cluster)
    popularity = feats[:, FEATURE_NAMES.index("popularity")]

    def engaged(qi, di, r):
        z = 2.0 * (grades[qi, di] - 2.5) + 3.0 * (popularity[di] - 0.5)
        return int(r < 1.0 / (1.0 + np.exp(-z)))

    labels = []
    if cfg.n_labels:
        g_draw = sample_grades(cfg.grade_mix, cfg.n_labels, rng)
        q_draw = rng.integers(0, cfg.n_queries, cfg.n_labels)
        u_doc = rng.random(cfg.n_labels)
        u_eng = rng.random(cfg.n_labels)
        by_grade = {}
        for n in range(cfg.n_labels):
            qi, g = int(q_draw[n]), int(g_draw[n])
            pool = by_grade.get((qi, g))
            if pool is None:
                pool = by_grade[(qi, g)] = np.flatnonzero(grades[qi] == g)
            if pool.size == 0:
                continue
            di = int(pool[int(u_doc[n] * pool.size)])
            labels.append(LabeledPair(queries[qi].query_id, docs[di].doc_id, g, engaged(qi, di, u_eng[n])))

    logs = _action_logs(cfg, rng, queries, docs, q_emb, d_emb, grades, popularity)
    return Dataset(cfg, docs, queries, labels, logs, doc_cluster, query_cluster, {"grades": grades})


def _action_logs(cfg, rng, queries, docs, q_emb, d_emb, grades, popularity) -> list:
    """Impressions from a noisy production ranker; clicks need examination and relevance."""
    depth = min(cfg.log_depth, len(docs))
    # rarer actions get lower base rates
    base = {a: r for a, r in zip(cfg.actions, (0.6, 0.25, 0.08, 0.05, 0.15, 0.1, 0.1, 0.1, 0.1))}
    rows = []
    for qi, q in enumerate(queries):
        for s in range(cfg.log_sessions):
            noisy = q_emb[qi] @ d_emb.T + 0.05 * rng.normal(size=len(docs))
            shown = np.lexsort((np.arange(len(docs)), -noisy))[:depth]
            for pos, di in enumerate(shown, start=1):
                g = int(grades[qi, di])
                looked = rng.random() < examination_prob(pos)
                rel = (g - 1) / 3.0
                acts = {}
                for a in cfg.actions:
                    p = base.get(a, 0.1) * (rel if a not in ("badfit", "dismiss") else 1 - rel)
                    p *= 0.5 + popularity[di]
                    acts[a] = int(looked and rng.random() < min(p, 1.0))
                rows.append({"query_id": q.query_id, "session": s, "doc_id": docs[di].doc_id,
                             "position": pos, "grade": g, "actions": acts})
    return rows


def qrel_rows(ds: Dataset):
    """Planted grade of every (query, document) pair."""
    grades = ds.extras["grades"]
    for qi, q in enumerate(ds.queries):
        for di, d in enumerate(ds.docs):
            yield {"query_id": q.query_id, "doc_id": d.doc_id, "grade": int(grades[qi, di])}


def _jsonl(records) -> str:
    return "".join(json.dumps(r, sort_keys=True) + "\n" for r in records)


def write_dataset(ds: Dataset, out_dir) -> dict:
    """Write the dataset files; returns ``{file name: path}``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    label_rows = [{"query_id": p.query_id, "doc_id": p.doc_id, "grade": p.grade, "engaged": p.engaged}
                  for p in ds.labels]
    clusters = {"docs": {d.doc_id: int(c) for d, c in zip(ds.docs, ds.doc_cluster)},
                "queries": {q.query_id: int(c) for q, c in zip(ds.queries, ds.query_cluster)},
                "config": ds.config.to_dict()}
    texts = {
        "corpus.jsonl": _jsonl(d.to_json() for d in ds.docs),
        "queries.jsonl": _jsonl(q.to_json() for q in ds.queries),
        "labels.jsonl": _jsonl(label_rows),
        "logs.jsonl": _jsonl(ds.logs),
        "qrels.jsonl": _jsonl(qrel_rows(ds)),
        "clusters.json": json.dumps(clusters, sort_keys=True, indent=1) + "\n",
    }
    paths = {}
    for name, text in texts.items():
        (out / name).write_text(text)
        paths[name] = str(out / name)
    return paths


def gen_data(seed: int, out_dir, cfg: GenConfig | None = None) -> dict:
    return write_dataset(generate(cfg or GenConfig(), seed), out_dir)


def load_labels(path) -> list:
    with open(path) as fh:
        return [LabeledPair(r["query_id"], r["doc_id"], int(r["grade"]), int(r["engaged"]))
                for r in (json.loads(line) for line in fh if line.strip())]


def load_logs(path) -> list:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def load_clusters(path) -> dict:
    return json.loads(Path(path).read_text())


def load_qrels(path) -> dict:
    """``{query_id: {doc_id: grade}}``."""
    out: dict = {}
    with open(path) as fh:
        for line in fh:
            if line.strip():
                r = json.loads(line)
                out.setdefault(r["query_id"], {})[r["doc_id"]] = int(r["grade"])
    return out
