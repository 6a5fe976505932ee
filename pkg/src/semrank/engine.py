"""Prefill-only scoring engine.

Four ways to score a request whose items share one prompt prefix:

* ``naive``      one full prefill of prefix+item per item
* ``ibpc``       in-batch prefix caching: prefix prefilled once, items
                 continue from the shared KV cache
* ``multi_item`` prefix and all items concatenated into one sequence with a
                 mask forbidding cross-item attention
* ``mixed``      like ibpc, but items arrive as precomputed embedding
                 vectors injected in place of token embeddings

All four produce the same per-item scores up to float rounding.
"""

from __future__ import annotations

import base64
import threading
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import LengthError, OversizeError, PayloadError, SpecError, SplitRequired
from .model import ModelWeights, multi_head_scores, prefill
from .tokenizer import tokenize

NAIVE, IBPC, MULTI_ITEM, MIXED = "naive", "ibpc", "multi_item", "mixed"
MODES = (NAIVE, IBPC, MULTI_ITEM, MIXED)
AMORTIZED = (IBPC, MULTI_ITEM, MIXED)


def normalize_mode(mode: str) -> str:
    m = mode.replace("-", "_").lower()
    if m not in MODES:
        raise SpecError(f"unknown scoring mode {mode!r}")
    return m


@dataclass
class ScoreItem:
    item_id: object
    tokens: tuple | None = None
    embeds: np.ndarray | None = None
    text: str | None = None

    @property
    def length(self) -> int:
        if self.embeds is not None:
            return int(np.shape(self.embeds)[0])
        return len(self.tokens)


@dataclass
class ScoreRequest:
    request_id: object
    prefix_tokens: tuple
    items: list
    mode: str = IBPC
    latency_sensitive: bool = False

    def __post_init__(self):
        self.mode = normalize_mode(self.mode)
        self.prefix_tokens = tuple(int(t) for t in self.prefix_tokens)
        if not self.items:
            raise SpecError("a score request needs at least one item")
        if not self.prefix_tokens:
            raise SpecError("prefix_tokens must be non-empty")

    def tokenize_items(self, max_seq: int) -> "ScoreRequest":
        for it in self.items:
            if it.tokens is None and it.embeds is None:
                if it.text is None:
                    raise PayloadError(f"item {it.item_id!r} has no payload")
                it.tokens = tuple(tokenize(it.text, max_seq))
            elif it.tokens is not None:
                it.tokens = tuple(int(t) for t in it.tokens)
        return self

    def item_lengths(self) -> list:
        return [it.length for it in self.items]


@dataclass(frozen=True)
class FlopReport:
    """Proportional attention and linear work, in token-pair / token units."""

    attention_units: int
    linear_units: int
    T_q: int
    T_i: float
    N_i: int

    def __add__(self, other: "FlopReport") -> "FlopReport":
        n = self.N_i + other.N_i
        mean = (self.T_i * self.N_i + other.T_i * other.N_i) / n if n else 0.0
        return FlopReport(self.attention_units + other.attention_units,
                          self.linear_units + other.linear_units, self.T_q, mean, n)

    def to_dict(self) -> dict:
        return {"attention": self.attention_units, "linear": self.linear_units}


@dataclass
class ItemScore:
    item_id: object
    tasks: dict


@dataclass
class ScoreResult:
    request_id: object
    mode: str
    scores: list
    flops: FlopReport

    def task_matrix(self, task: str = "relevance") -> np.ndarray:
        return np.array([s.tasks[task] for s in self.scores])

    def to_wire(self) -> dict:
        return {"request_id": self.request_id,
                "scores": [{"id": s.item_id, "tasks": s.tasks} for s in self.scores],
                "flops": self.flops.to_dict()}


def flops(mode: str, T_q: int, T_i: int, N_i: int) -> FlopReport:
    """Closed-form cost of scoring N_i uniform items of length T_i after a T_q prefix."""
    mode = normalize_mode(mode)
    if min(T_q, T_i, N_i) < 0:
        raise SpecError("token counts must be non-negative")
    if mode == NAIVE:
        att = N_i * (T_q + T_i) ** 2
        lin = N_i * (T_q + T_i)
    else:
        att = T_q ** 2 + N_i * (2 * T_i * T_q + T_i ** 2)
        lin = T_q + N_i * T_i
    return FlopReport(att, lin, T_q, float(T_i), N_i)


def flops_for_lengths(mode: str, T_q: int, lengths: Sequence[int]) -> FlopReport:
    """Same model as :func:`flops`, summed over items of varying length."""
    mode = normalize_mode(mode)
    L = np.asarray(lengths, dtype=np.int64)
    if mode == NAIVE:
        att = int(((T_q + L) ** 2).sum())
        lin = int((T_q + L).sum())
    else:
        att = T_q ** 2 + int((2 * L * T_q + L ** 2).sum())
        lin = T_q + int(L.sum())
    mean = float(L.mean()) if L.size else 0.0
    return FlopReport(att, lin, T_q, mean, int(L.size))


def _item_scores(weights, hidden_last, item_id) -> ItemScore:
    return ItemScore(item_id, multi_head_scores(hidden_last, weights))


def _require_tokens(request: ScoreRequest):
    for it in request.items:
        if it.tokens is None:
            raise PayloadError(f"mode {request.mode} needs token items (item {it.item_id!r})")


def score_naive(weights: ModelWeights, request: ScoreRequest) -> ScoreResult:
    _require_tokens(request)
    prefix = np.asarray(request.prefix_tokens)
    out = []
    for it in request.items:
        seq = np.concatenate([prefix, np.asarray(it.tokens, dtype=np.int64)])
        hidden, _ = prefill(weights, seq)
        out.append(_item_scores(weights, hidden[-1], it.item_id))
    fl = flops_for_lengths(NAIVE, len(prefix), request.item_lengths())
    return ScoreResult(request.request_id, NAIVE, out, fl)


def score_ibpc(weights: ModelWeights, request: ScoreRequest) -> ScoreResult:
    _require_tokens(request)
    _, prefix_kv = prefill(weights, request.prefix_tokens)
    out = []
    for it in request.items:
        hidden, _ = prefill(weights, it.tokens, prefix_kv)
        out.append(_item_scores(weights, hidden[-1], it.item_id))
    fl = flops_for_lengths(IBPC, len(request.prefix_tokens), request.item_lengths())
    return ScoreResult(request.request_id, IBPC, out, fl)


@dataclass(frozen=True)
class MultiItemMask:
    """Attention permissions for prefix + concatenated items.

    Prefix positions attend causally within the prefix. A position inside
    item j attends to the whole prefix and causally within item j only.
    """

    T_q: int
    spans: tuple

    @property
    def total(self) -> int:
        return self.spans[-1][1] if self.spans else self.T_q

    def span_of(self, p: int) -> int | None:
        for j, (s, e) in enumerate(self.spans):
            if s <= p < e:
                return j
        return None

    def allowed(self, p: int) -> set:
        if p < self.T_q:
            return set(range(p + 1))
        s, _ = self.spans[self.span_of(p)]
        return set(range(self.T_q)) | set(range(s, p + 1))

    def to_dense(self) -> np.ndarray:
        n = self.total
        m = np.zeros((n, n), dtype=bool)
        m[:, :self.T_q] = np.tri(n, self.T_q, dtype=bool)
        for s, e in self.spans:
            m[s:e, s:e] = np.tri(e - s, dtype=bool)
        return m

    def positions(self) -> np.ndarray:
        """Position ids: each item restarts right after the prefix."""
        pos = [np.arange(self.T_q)]
        pos += [self.T_q + np.arange(e - s) for s, e in self.spans]
        return np.concatenate(pos)

    def allowed_pair_count(self) -> int:
        return int(self.to_dense().sum())


def build_multi_item_mask(T_q: int, item_lengths: Sequence[int]) -> MultiItemMask:
    spans, start = [], T_q
    for L in item_lengths:
        if L < 1:
            raise SpecError("every item needs at least one token")
        spans.append((start, start + int(L)))
        start += int(L)
    return MultiItemMask(int(T_q), tuple(spans))


def score_multi_item(weights: ModelWeights, request: ScoreRequest) -> ScoreResult:
    _require_tokens(request)
    T_q = len(request.prefix_tokens)
    lengths = request.item_lengths()
    total = T_q + sum(lengths)
    if total > weights.config.max_seq:
        raise SplitRequired(
            f"multi-item prompt of {total} tokens exceeds max_seq={weights.config.max_seq}; "
            "re-batch with plan_batches")
    mask = build_multi_item_mask(T_q, lengths)
    seq = np.concatenate([np.asarray(request.prefix_tokens)] +
                         [np.asarray(it.tokens, dtype=np.int64) for it in request.items])
    hidden, _ = prefill(weights, seq, mask=mask.to_dense(), positions=mask.positions())
    out = [_item_scores(weights, hidden[e - 1], it.item_id)
           for it, (_, e) in zip(request.items, mask.spans)]
    return ScoreResult(request.request_id, MULTI_ITEM, out,
                       flops_for_lengths(MULTI_ITEM, T_q, lengths))


def score_mixed(weights: ModelWeights, request: ScoreRequest) -> ScoreResult:
    d = weights.config.d_model
    _, prefix_kv = prefill(weights, request.prefix_tokens)
    out, lengths = [], []
    for it in request.items:
        if it.embeds is not None:
            emb = np.asarray(it.embeds)
            if emb.ndim != 2 or emb.shape[1] != d or emb.shape[0] < 1:
                raise PayloadError(f"item {it.item_id!r}: embedding payload must be [n>=1, {d}]")
            hidden, kv = prefill(weights, embeds=emb, kv_in=prefix_kv)
        else:
            hidden, kv = prefill(weights, it.tokens, prefix_kv)
        lengths.append(kv.seq_len - prefix_kv.seq_len)
        out.append(_item_scores(weights, hidden[-1], it.item_id))
    return ScoreResult(request.request_id, MIXED, out,
                       flops_for_lengths(MIXED, len(request.prefix_tokens), lengths))


def substitute_embeddings(weights: ModelWeights, tokens) -> np.ndarray:
    """Token-embedding rows for ``tokens``; injecting them reproduces token scoring."""
    return np.asarray(weights.compute_tensors()["tok_emb"])[np.asarray(tokens, dtype=np.int64)]


_DISPATCH = {NAIVE: score_naive, IBPC: score_ibpc, MULTI_ITEM: score_multi_item, MIXED: score_mixed}


@dataclass(frozen=True)
class BatchEntry:
    request_index: int
    item_indices: tuple


def plan_batches(requests: Sequence[ScoreRequest], max_batch_tokens: int,
                 max_seq: int = 1 << 30) -> list:
    """Greedily pack items into batches of at most ``max_batch_tokens``.

    A request contributes its prefix once per batch it appears in, plus its
    items' lengths. Item order within each request is preserved. Returns a
    list of batches, each a list of :class:`BatchEntry`.
    """
    for r in requests:
        r.tokenize_items(max_seq)
    for r in requests:
        longest = len(r.prefix_tokens) + max(r.item_lengths())
        if longest > max_batch_tokens:
            raise OversizeError(
                f"request {r.request_id!r}: prefix+item of {longest} tokens exceeds budget {max_batch_tokens}")
    batches, current, used = [], [], 0
    for ri, r in enumerate(requests):
        T_q = len(r.prefix_tokens)
        open_items: list = []
        for ii, L in enumerate(r.item_lengths()):
            cost = L + (0 if open_items else T_q)
            if used + cost > max_batch_tokens:
                if open_items:
                    current.append(BatchEntry(ri, tuple(open_items)))
                batches.append(current)
                current, used, open_items = [], 0, []
                cost = L + T_q
            open_items.append(ii)
            used += cost
        if open_items:
            current.append(BatchEntry(ri, tuple(open_items)))
    if current:
        batches.append(current)
    return batches


class ScoringEngine:
    """Thread-safe front door over the scoring functions.

    Tokenization and result assembly run on the caller's thread; model
    execution is serialized by an internal lock so results of one request
    never interleave with another's.
    """

    # Dense masked attention is quadratic in the concatenated length, so
    # multi-item prompts are packed into sub-prompts of at most this size.
    DEFAULT_MULTI_ITEM_BUDGET = 1024

    def __init__(self, weights: ModelWeights, multi_item_budget: int | None = None):
        self.weights = weights
        self.multi_item_budget = multi_item_budget or self.DEFAULT_MULTI_ITEM_BUDGET
        self._lock = threading.Lock()
        self.requests_served = 0
        self.items_scored = 0

    def score(self, request: ScoreRequest) -> ScoreResult:
        request.tokenize_items(self.weights.config.max_seq)
        for it in request.items:
            if it.tokens is not None and len(request.prefix_tokens) + len(it.tokens) > self.weights.config.max_seq:
                raise LengthError(f"item {it.item_id!r} overflows max_seq")
        with self._lock:
            if request.mode == MULTI_ITEM:
                result = self._score_multi_item_split(request)
            else:
                result = _DISPATCH[request.mode](self.weights, request)
            self.requests_served += 1
            self.items_scored += len(request.items)
        return result

    def _score_multi_item_split(self, request: ScoreRequest) -> ScoreResult:
        budget = min(self.multi_item_budget, self.weights.config.max_seq)
        plan = plan_batches([request], budget)
        scores, fl = [], None
        for batch in plan:
            (entry,) = batch
            sub = ScoreRequest(request.request_id, request.prefix_tokens,
                               [request.items[i] for i in entry.item_indices], MULTI_ITEM,
                               request.latency_sensitive)
            res = score_multi_item(self.weights, sub)
            scores.extend(res.scores)
            fl = res.flops if fl is None else fl + res.flops
        return ScoreResult(request.request_id, MULTI_ITEM, scores, fl)


def encode_embeddings(arr) -> str:
    return base64.b64encode(np.ascontiguousarray(arr, dtype="<f4").tobytes()).decode("ascii")


def decode_embeddings(payload: str, d_model: int) -> np.ndarray:
    try:
        raw = base64.b64decode(payload, validate=True)
    except ValueError as exc:
        raise PayloadError(f"bad base64 embedding payload: {exc}") from None
    if len(raw) % (4 * d_model):
        raise PayloadError(f"embedding payload of {len(raw)} bytes is not a multiple of {4 * d_model}")
    return np.frombuffer(raw, dtype="<f4").reshape(-1, d_model).astype(np.float64)


def request_from_wire(body: dict, d_model: int, max_seq: int) -> ScoreRequest:
    """Parse the JSON body of the scoring endpoint."""
    try:
        if "prefix_tokens" in body:
            prefix = body["prefix_tokens"]
        else:
            prefix = tokenize(body["prefix_text"], max_seq)
        items = []
        for raw in body["items"]:
            item = ScoreItem(raw["id"])
            if "embedding_b64" in raw:
                item.embeds = decode_embeddings(raw["embedding_b64"], d_model)
            elif "tokens" in raw:
                item.tokens = tuple(raw["tokens"])
            else:
                item.text = raw["text"]
            items.append(item)
        mode = body.get("mode", IBPC)
        if any(it.embeds is not None for it in items):
            mode = MIXED
        return ScoreRequest(body["request_id"], prefix, items, mode,
                            bool(body.get("latency_sensitive", False)))
    except KeyError as exc:
        raise PayloadError(f"missing field {exc.args[0]!r}") from None
