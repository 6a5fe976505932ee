"""Search service: retrieval, depth control, score cache, scoring engine, calibration.

The query path is split into stage functions so the offline CLI can run
the same stages one at a time through files and get identical results.
"""

from __future__ import annotations

import hashlib
import json
import threading
import time
from collections import deque
from dataclasses import asdict, dataclass, field
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Mapping, Sequence

import numpy as np

from .calibration import CalibrationHead, PositionCalibrator, calibrate
from .engine import MIXED, normalize_mode, ScoreItem, ScoreRequest, ScoringEngine, request_from_wire, substitute_embeddings
from .errors import LengthError, PayloadError, SemrankError, SpecError
from .midtier import (GIVE_UP, MISS, PIDState, RetryPolicy, ScoreCache, CacheKey, normalize_query,
                      pid_update, retry_decision)
from .model import RELEVANCE_TASK, ModelWeights
from .retrieval import Corpus, QuerySpec, RARWeights, exhaustive_topk
from .tokenizer import DEFAULT_SYSTEM, ITEM_SUFFIX, tokenize

# cost model used for deterministic depth control (same constants as the simulator)
COST_ALPHA, COST_BETA = 1.85e-7, 0.022


@dataclass
class SearchRequest:
    searcher_id: object
    query: str
    filters: dict = field(default_factory=dict)
    page_size: int = 10
    latency_sensitive: bool = False
    k: int = 100

    def __post_init__(self):
        if self.page_size < 1:
            raise SpecError("page_size must be >= 1")
        if self.k < 1:
            raise SpecError("k must be >= 1")

    @classmethod
    def from_json(cls, body: Mapping) -> "SearchRequest":
        try:
            return cls(body["searcher_id"], body["query"], dict(body.get("filters") or {}),
                       int(body.get("page_size", 10)), bool(body.get("latency_sensitive", False)),
                       int(body.get("k", 100)))
        except KeyError as exc:
            raise PayloadError(f"missing field {exc.args[0]!r}") from None


@dataclass
class RankedResult:
    doc_id: object
    rank: int
    score: float
    raw: dict
    calibrated: dict


@dataclass
class SearchResponse:
    results: list
    diagnostics: dict

    def to_json(self) -> dict:
        return {"results": [asdict(r) for r in self.results], "diagnostics": self.diagnostics}


@dataclass(frozen=True)
class ServiceConfig:
    mode: str = "ibpc"
    model_version: str = "toy-v1"
    pid_mode: str = "model"          # "off" | "model" (cost-model latency) | "wallclock"
    target_latency_ms: float = 3000.0
    pid_scale: float = 0.1
    d_min: int = 50
    d_max: int = 250
    fixed_depth: int | None = None
    use_cache: bool = True
    cache_capacity: int = 100_000
    shadow_every: int = 100          # re-score every n-th cache hit and compare
    blend: tuple = ()                # ((task, weight), ...) over calibrated probabilities
    budget_ms: float | None = None   # give up and serve retrieval order past this

    def __post_init__(self):
        if self.pid_mode not in ("off", "model", "wallclock"):
            raise SpecError("pid_mode must be off, model or wallclock")
        object.__setattr__(self, "mode", normalize_mode(self.mode))
        object.__setattr__(self, "blend", tuple(tuple(x) for x in (
            self.blend.items() if isinstance(self.blend, Mapping) else self.blend)))


# -- stages ---------------------------------------------------------------

def hashed_embedding(text: str, dim: int) -> np.ndarray:
    """Deterministic bag-of-words projection for queries missing from the fixture."""
    v = np.zeros(dim)
    for word in normalize_query(text).split() or [""]:
        seed = int.from_bytes(hashlib.sha256(word.encode()).digest()[:8], "little")
        v += np.random.default_rng(seed).normal(size=dim)
    n = np.linalg.norm(v)
    return v / n if n else np.eye(dim)[0]


def query_index(queries: Sequence[QuerySpec]) -> dict:
    """Normalized query text -> embedding; conflicting duplicates are rejected."""
    index: dict = {}
    for q in queries:
        if not q.text:
            continue
        key = normalize_query(q.text)
        if key in index and not np.array_equal(index[key], q.embedding):
            raise SpecError(f"query text {q.text!r} maps to two different embeddings")
        index[key] = q.embedding
    return index


def embed_query(text: str, index: Mapping, dim: int):
    """``(embedding, source)`` where source is ``"fixture"`` or ``"hashed"``."""
    emb = index.get(normalize_query(text))
    if emb is not None:
        return np.asarray(emb, dtype=np.float64), "fixture"
    return hashed_embedding(text, dim), "hashed"


def retrieve_stage(corpus: Corpus, embedding, filters, k: int, rar: RARWeights, query_id="q") -> list:
    return exhaustive_topk(corpus, QuerySpec(query_id, embedding, dict(filters or {}), k), rar)


def document_text(corpus: Corpus, doc_id) -> str:
    doc = corpus.docs[corpus.index_of(doc_id)]
    feats = " ".join(f"{n}: {doc.features[n]:.2f}" for n in corpus.feature_names)
    return f"Document: {doc.text}\n{feats}" if feats else f"Document: {doc.text}"


def prompt_prefix(query: str, max_seq: int) -> tuple:
    return tuple(tokenize(DEFAULT_SYSTEM + f"Query: {query}\n", max_seq))


def score_stage(engine: ScoringEngine, corpus: Corpus, query: str, doc_ids: Sequence, mode: str,
                request_id="search"):
    """Raw task scores ``{doc_id: {task: p}}`` and the engine's FLOP report."""
    if not doc_ids:
        return {}, None
    w = engine.weights
    max_seq = w.config.max_seq
    items = []
    for d in doc_ids:
        toks = tuple(tokenize(document_text(corpus, d) + ITEM_SUFFIX, max_seq))
        if mode == MIXED:
            items.append(ScoreItem(d, embeds=substitute_embeddings(w, toks)))
        else:
            items.append(ScoreItem(d, tokens=toks))
    res = engine.score(ScoreRequest(request_id, prompt_prefix(query, max_seq), items, mode))
    return {s.item_id: s.tasks for s in res.scores}, res.flops


def calibrate_stage(raw: Mapping, calibrator) -> dict:
    """Calibrated task maps; only the relevance probability is remapped."""
    head = calibrator.global_head if isinstance(calibrator, PositionCalibrator) else calibrator
    out = {}
    for d, tasks in raw.items():
        cal = dict(tasks)
        if head is not None:
            cal[RELEVANCE_TASK] = calibrate(head, tasks[RELEVANCE_TASK])
        out[d] = cal
    return out


def final_score(calibrated: Mapping, blend=()) -> float:
    if not blend:
        return float(calibrated[RELEVANCE_TASK])
    return float(sum(wt * calibrated[t] for t, wt in blend))


def rank_stage(raw: Mapping, calibrated: Mapping, blend=(), page_size: int | None = None) -> list:
    """Sort by final score descending, ``doc_id`` ascending on ties."""
    order = sorted(calibrated, key=lambda d: (-final_score(calibrated[d], blend), d))
    if page_size is not None:
        order = order[:page_size]
    return [RankedResult(d, r, final_score(calibrated[d], blend), dict(raw[d]), dict(calibrated[d]))
            for r, d in enumerate(order, start=1)]


# -- service --------------------------------------------------------------

class SearchService:
    def __init__(self, corpus: Corpus, weights: ModelWeights, rar: RARWeights | None = None,
                 calibrator=None, queries: Sequence[QuerySpec] = (), config: ServiceConfig = ServiceConfig()):
        self.corpus = corpus
        self.engine = ScoringEngine(weights)
        self.rar = rar or RARWeights(1.0, {}, 1.0)
        self.calibrator = calibrator
        self.config = config
        self.index = query_index(queries)
        self.dim = corpus.embeddings.shape[1]
        self.cache = ScoreCache(config.cache_capacity)
        self.pid = PIDState(d_min=config.d_min, d_max=config.d_max, scale=config.pid_scale)
        self._pid_lock = threading.Lock()
        self._stats_lock = threading.Lock()
        self._latencies: deque = deque(maxlen=1024)
        self.counters = {"requests": 0, "items_scored": 0, "cache_hits": 0, "cache_misses": 0,
                         "fallbacks": 0, "shadow_checks": 0, "shadow_mismatches": 0, "errors": 0}
        self._hit_counter = 0

    @property
    def model_version(self) -> str:
        return self.config.model_version

    def current_depth(self) -> int:
        if self.config.fixed_depth is not None:
            return self.config.fixed_depth
        return self.pid.depth

    def _bump(self, **kw):
        with self._stats_lock:
            for k, v in kw.items():
                self.counters[k] += v

    def handle_search(self, req: SearchRequest) -> SearchResponse:
        t0 = time.perf_counter()
        cfg = self.config
        emb, source = embed_query(req.query, self.index, self.dim)
        cands = retrieve_stage(self.corpus, emb, req.filters, req.k, self.rar)
        t_ret = time.perf_counter()
        depth = self.current_depth()
        selected = [d for d, _ in cands[:depth]]
        diag = {"embedding_source": source, "candidates": len(cands), "depth_used": depth,
                "scored": len(selected), "cache_hits": 0, "flops": 0, "fallback": False,
                "mode": cfg.mode, "model_version": cfg.model_version}

        raw, misses, keys = {}, [], {}
        for d in selected:
            key = CacheKey.for_query(req.searcher_id, req.query, req.filters, d, cfg.model_version)
            keys[d] = key
            hit = self.cache.get(key) if cfg.use_cache else MISS
            if hit is MISS:
                misses.append(d)
            else:
                raw[d] = hit
        diag["cache_hits"] = len(selected) - len(misses)

        if cfg.budget_ms is not None and misses:
            elapsed = (time.perf_counter() - t0) * 1000.0
            if retry_decision(elapsed, 0, RetryPolicy(cfg.budget_ms, cfg.budget_ms, 1)) == GIVE_UP:
                return self._fallback(cands, req, diag, t0)

        scored, fl = score_stage(self.engine, self.corpus, req.query, misses, cfg.mode)
        for d in misses:
            raw[d] = scored[d]
            if cfg.use_cache:
                self.cache.put(keys[d], scored[d])
        if fl is not None:
            diag["flops"] = fl.attention_units + fl.linear_units
        self._shadow_check(req, [d for d in selected if d not in scored], raw)
        t_score = time.perf_counter()

        cal = calibrate_stage({d: raw[d] for d in selected}, self.calibrator)
        results = rank_stage(raw, cal, cfg.blend, req.page_size)
        t_end = time.perf_counter()
        diag["stage_ms"] = {"retrieval": (t_ret - t0) * 1000.0, "scoring": (t_score - t_ret) * 1000.0,
                            "calibration": (t_end - t_score) * 1000.0}
        self._after_request(diag, (t_score - t_ret) * 1000.0, (t_end - t0) * 1000.0, len(misses))
        return SearchResponse(results, diag)

    def _fallback(self, cands, req, diag, t0) -> SearchResponse:
        diag["fallback"] = True
        diag["scored"] = 0
        results = [RankedResult(d, r, float(s), {}, {}) for r, (d, s) in enumerate(cands[:req.page_size], start=1)]
        self._bump(fallbacks=1)
        self._after_request(diag, 0.0, (time.perf_counter() - t0) * 1000.0, 0)
        return SearchResponse(results, diag)

    def _shadow_check(self, req, hits: list, raw: dict):
        every = self.config.shadow_every
        if not hits or not every:
            return
        picked = []
        with self._stats_lock:
            for d in hits:
                self._hit_counter += 1
                if self._hit_counter % every == 0:
                    picked.append(d)
        if not picked:
            return
        fresh, _ = score_stage(self.engine, self.corpus, req.query, picked, self.config.mode, "shadow")
        bad = sum(fresh[d] != raw[d] for d in picked)
        self._bump(shadow_checks=len(picked), shadow_mismatches=bad)

    def _after_request(self, diag, scoring_ms, total_ms, n_scored):
        hits = diag["cache_hits"]
        self._bump(requests=1, items_scored=n_scored, cache_hits=hits, cache_misses=diag["scored"] - hits)
        with self._stats_lock:
            self._latencies.append(total_ms)
        mode = self.config.pid_mode
        if mode == "off" or self.config.fixed_depth is not None:
            return
        observed = scoring_ms if mode == "wallclock" else (
            (COST_ALPHA * diag["flops"] + (COST_BETA if diag["flops"] else 0.0)) * 1000.0)
        with self._pid_lock:
            pid_update(self.pid, observed, self.config.target_latency_ms)

    def health_and_metrics(self) -> dict:
        with self._stats_lock:
            lat = list(self._latencies)
            counters = dict(self.counters)
        return {
            "status": "ok",
            "model_version": self.config.model_version,
            "weights_checksum": self.engine.weights.checksum(),
            "depth": self.current_depth(),
            "cache": {"size": len(self.cache), "capacity": self.cache.capacity,
                      "lookups": self.cache.lookups, "hits": self.cache.hits,
                      "evictions": self.cache.evictions},
            "latency_ms": {"p50": float(np.percentile(lat, 50)) if lat else None,
                           "p99": float(np.percentile(lat, 99)) if lat else None},
            "counters": counters,
        }

    def score_passthrough(self, body: Mapping) -> dict:
        w = self.engine.weights
        req = request_from_wire(body, w.config.d_model, w.config.max_seq)
        return self.engine.score(req).to_wire()


# -- HTTP -----------------------------------------------------------------

def _error_record(exc: Exception) -> dict:
    if isinstance(exc, SemrankError):
        return exc.to_record()
    return {"error": type(exc).__name__, "message": str(exc)}


def make_handler(service: SearchService):
    class Handler(BaseHTTPRequestHandler):
        protocol_version = "HTTP/1.1"

        def log_message(self, fmt, *args):  # keep test output quiet
            pass

        def _send(self, code: int, payload: dict):
            body = json.dumps(payload, sort_keys=True).encode()
            self.send_response(code)
            self.send_header("Content-Type", "application/json")
            self.send_header("Content-Length", str(len(body)))
            self.end_headers()
            self.wfile.write(body)

        def _body(self) -> dict:
            n = int(self.headers.get("Content-Length") or 0)
            try:
                return json.loads(self.rfile.read(n) or b"{}")
            except json.JSONDecodeError as exc:
                raise PayloadError(f"body is not valid JSON: {exc}") from None

        def do_GET(self):
            if self.path == "/healthz":
                self._send(200, {"status": "ok", "depth": service.current_depth()})
            elif self.path == "/metrics":
                self._send(200, service.health_and_metrics())
            else:
                self._send(404, {"error": "not_found", "message": self.path})

        def do_POST(self):
            try:
                if self.path == "/search":
                    resp = service.handle_search(SearchRequest.from_json(self._body()))
                    self._send(200, resp.to_json())
                elif self.path == "/score":
                    self._send(200, service.score_passthrough(self._body()))
                else:
                    self._send(404, {"error": "not_found", "message": self.path})
            except (ValueError, LengthError) as exc:
                service._bump(errors=1)
                self._send(400, _error_record(exc))
            except Exception as exc:  # report, keep serving
                service._bump(errors=1)
                self._send(500, _error_record(exc))

    return Handler


def make_server(service: SearchService, host: str = "127.0.0.1", port: int = 8080) -> ThreadingHTTPServer:
    server = ThreadingHTTPServer((host, port), make_handler(service))
    server.daemon_threads = True
    return server
