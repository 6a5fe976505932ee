"""Serving-side controls: score cache, scoring-depth PID, retry budget, traffic shaping."""

from __future__ import annotations

import hashlib
import json
import re
import threading
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Mapping, Sequence

from .errors import ConsistencyError, ParameterError, SpecError


def normalize_query(text: str) -> str:
    return re.sub(r"\s+", " ", text.strip().lower())


def query_signature(text: str, filters: Mapping | None = None) -> str:
    """Hash of the normalized query text and sorted filters."""
    canon_filters = {}
    for k, v in sorted((filters or {}).items()):
        vals = v if isinstance(v, (list, tuple, set, frozenset)) else [v]
        canon_filters[str(k)] = sorted(str(x) for x in vals)
    payload = json.dumps([normalize_query(text), canon_filters], sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(payload.encode()).hexdigest()[:32]


@dataclass(frozen=True)
class CacheKey:
    searcher_id: object
    query_signature: str
    entity_id: object
    model_version: str

    @classmethod
    def for_query(cls, searcher_id, query_text, filters, entity_id, model_version) -> "CacheKey":
        return cls(searcher_id, query_signature(query_text, filters), entity_id, model_version)


MISS = object()


class ScoreCache:
    """LRU map from :class:`CacheKey` to a task-score map.

    Scores are a pure function of the key, so re-inserting a key with a
    different map is a :class:`ConsistencyError`.
    """

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ParameterError("cache capacity must be >= 1")
        self.capacity = capacity
        self._entries: OrderedDict = OrderedDict()
        self._lock = threading.Lock()
        self._stamp = 0
        self.lookups = 0
        self.hits = 0
        self.evictions = 0

    def __len__(self):
        return len(self._entries)

    def __contains__(self, key):
        return key in self._entries

    def keys(self) -> list:
        """Keys from least to most recently used."""
        return list(self._entries)

    def get(self, key):
        """Return the stored map (refreshing recency) or the :data:`MISS` sentinel."""
        with self._lock:
            self.lookups += 1
            entry = self._entries.get(key)
            if entry is None:
                return MISS
            self._entries.move_to_end(key)
            self.hits += 1
            return entry[0]

    def put(self, key, scores: Mapping) -> None:
        with self._lock:
            entry = self._entries.get(key)
            if entry is not None:
                if entry[0] != scores:
                    raise ConsistencyError(f"conflicting scores cached for {key}")
                self._entries.move_to_end(key)
                return
            self._stamp += 1
            self._entries[key] = (dict(scores), self._stamp)
            while len(self._entries) > self.capacity:
                self._entries.popitem(last=False)
                self.evictions += 1

    @property
    def hit_rate(self) -> float:
        return self.hits / self.lookups if self.lookups else 0.0


def cache_get(cache: ScoreCache, key):
    return cache.get(key)


def cache_put(cache: ScoreCache, key, scores) -> None:
    cache.put(key, scores)


@dataclass
class PIDState:
    """Scoring-depth controller state.

    Each update moves the depth against the latency error:
    ``depth <- clamp(round(depth - scale * (kp*e + ki*I + kd*de/dt)))`` with
    ``e = observed - target``. The integral is clamped to
    ``+/- integral_clamp * target`` and frozen while the output saturates.
    """

    kp: float = 0.4
    ki: float = 0.05
    kd: float = 0.1
    d_min: int = 50
    d_max: int = 250
    scale: float = 1.0
    integral_clamp: float = 10.0
    integral: float = 0.0
    prev_error: float | None = None
    depth: int = None

    def __post_init__(self):
        if not 1 <= self.d_min <= self.d_max:
            raise SpecError("need 1 <= d_min <= d_max")
        if self.depth is None:
            self.depth = self.d_max

    def reset(self):
        self.integral, self.prev_error, self.depth = 0.0, None, self.d_max


def pid_update(state: PIDState, observed: float, target: float, dt: float = 1.0) -> int:
    if dt <= 0:
        raise ParameterError("dt must be > 0")
    e = observed - target
    deriv = 0.0 if state.prev_error is None else (e - state.prev_error) / dt
    limit = state.integral_clamp * abs(target)
    integral = min(max(state.integral + e * dt, -limit), limit)
    raw = state.depth - state.scale * (state.kp * e + state.ki * integral + state.kd * deriv)
    if (raw > state.d_max and e < 0) or (raw < state.d_min and e > 0):
        # anti-windup: do not integrate into a saturated output
        raw = state.depth - state.scale * (state.kp * e + state.ki * state.integral + state.kd * deriv)
    else:
        state.integral = integral
    state.prev_error = e
    state.depth = int(min(max(round(raw), state.d_min), state.d_max))
    return state.depth


@dataclass(frozen=True)
class RetryPolicy:
    attempt_timeout_ms: float = 200.0
    budget_ms: float = 500.0
    max_attempts: int = 3

    def __post_init__(self):
        if self.max_attempts < 1:
            raise SpecError("max_attempts must be >= 1")
        if self.attempt_timeout_ms > self.budget_ms:
            raise SpecError("per-attempt timeout cannot exceed the total budget")


PROCEED, RETRY, GIVE_UP = "proceed", "retry", "give_up"


def retry_decision(elapsed_ms: float, attempts_made: int, policy: RetryPolicy) -> str:
    """What to do after ``attempts_made`` attempts and ``elapsed_ms`` of budget spent.

    ``give_up`` tells the caller to serve candidates in retrieval order.
    """
    if elapsed_ms >= policy.budget_ms:
        return GIVE_UP
    if attempts_made == 0:
        return PROCEED
    if attempts_made < policy.max_attempts and elapsed_ms + policy.attempt_timeout_ms <= policy.budget_ms:
        return RETRY
    return GIVE_UP


def shape_traffic(queue: Sequence, utilization: float, threshold: float):
    """Split queued requests into ``(admit, defer)``.

    Latency-sensitive requests are always admitted; the rest only while
    utilization is strictly below ``threshold``. Order is preserved.
    """
    if not 0.0 < threshold <= 1.0:
        raise ParameterError("threshold must lie in (0, 1]")
    admit, defer = [], []
    for req in queue:
        if getattr(req, "latency_sensitive", False) or utilization < threshold:
            admit.append(req)
        else:
            defer.append(req)
    return admit, defer
