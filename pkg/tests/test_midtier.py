import threading
from dataclasses import dataclass

import pytest
from hypothesis import given
from hypothesis import strategies as st

from semrank.errors import ConsistencyError, ParameterError, SpecError
from semrank.midtier import (GIVE_UP, MISS, PROCEED, RETRY, CacheKey, PIDState, RetryPolicy, ScoreCache,
                             cache_get, cache_put, normalize_query, pid_update, query_signature,
                             retry_decision, shape_traffic)


def replay(capacity, ops):
    """Run ``("put", k) / ("get", k)`` ops; return hit/miss per get plus the final LRU order."""
    cache = ScoreCache(capacity)
    trace = []
    for op, key in ops:
        if op == "put":
            cache_put(cache, key, {"p": key})
        else:
            trace.append("hit" if cache_get(cache, key) is not MISS else "miss")
    return trace, cache.keys()


# (capacity, ops, expected get outcomes, expected LRU-to-MRU order), traced by hand
LRU_FIXTURES = [
    (2, [("put", "A"), ("put", "B"), ("put", "C"), ("get", "A")], ["miss"], ["B", "C"]),
    (2, [("put", "A"), ("put", "B"), ("get", "A"), ("put", "C"), ("get", "B"), ("get", "A")],
     ["hit", "miss", "hit"], ["C", "A"]),
    (3, [("put", "A"), ("put", "B"), ("put", "C"), ("get", "A"), ("get", "B"), ("put", "D"),
         ("get", "C"), ("get", "D")], ["hit", "hit", "miss", "hit"], ["A", "B", "D"]),
    (1, [("put", "A"), ("get", "A"), ("put", "B"), ("get", "A"), ("get", "B")], ["hit", "miss", "hit"], ["B"]),
    (2, [("put", "A"), ("put", "B"), ("put", "A"), ("put", "C"), ("get", "B"), ("get", "A")],
     ["miss", "hit"], ["C", "A"]),
    (2, [("get", "A"), ("put", "A"), ("get", "A")], ["miss", "hit"], ["A"]),
]


class TestCache:
    @pytest.mark.parametrize("capacity,ops,gets,order", LRU_FIXTURES)
    def test_hand_traced(self, capacity, ops, gets, order):
        assert replay(capacity, ops) == (gets, order)

    def test_hit_returns_identical_map(self):
        cache = ScoreCache(4)
        cache.put("k", {"relevance": 0.25, "click": 0.5})
        assert cache.get("k") == {"relevance": 0.25, "click": 0.5}

    def test_empty_miss_mutates_nothing(self):
        cache = ScoreCache(2)
        assert cache.get("x") is MISS
        assert len(cache) == 0 and cache.keys() == []

    def test_idempotent_put(self):
        cache = ScoreCache(2)
        cache.put("k", {"a": 1.0})
        cache.put("k", {"a": 1.0})
        assert len(cache) == 1

    def test_conflicting_put(self):
        cache = ScoreCache(2)
        cache.put("k", {"a": 1.0})
        with pytest.raises(ConsistencyError):
            cache.put("k", {"a": 0.5})

    def test_capacity(self):
        cache = ScoreCache(3)
        for i in range(4):
            cache.put(i, {"a": i})
        assert len(cache) == 3 and cache.evictions == 1

    def test_bad_capacity(self):
        with pytest.raises(ParameterError):
            ScoreCache(0)

    @given(st.integers(1, 6), st.lists(st.tuples(st.sampled_from(["get", "put"]), st.integers(0, 9)), max_size=80))
    def test_matches_reference_lru(self, capacity, ops):
        cache = ScoreCache(capacity)
        ref: list = []
        for op, k in ops:
            if op == "put":
                cache.put(k, {"v": k})
                if k in ref:
                    ref.remove(k)
                ref.append(k)
                del ref[:-capacity]
            else:
                hit = cache.get(k) is not MISS
                assert hit == (k in ref)
                if hit:
                    ref.remove(k)
                    ref.append(k)
            assert cache.keys() == ref
        assert cache.hits <= cache.lookups

    def test_concurrent_access(self):
        cache = ScoreCache(50)

        def work(offset):
            for i in range(2000):
                k = (i * 7 + offset) % 80
                if cache.get(k) is MISS:
                    cache.put(k, {"v": k})

        threads = [threading.Thread(target=work, args=(t,)) for t in range(8)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        assert len(cache) <= 50
        assert all(cache.get(k) == {"v": k} for k in cache.keys())


class TestCacheKey:
    def test_normalization(self):
        assert normalize_query("  Senior   PYTHON\tDev ") == "senior python dev"

    def test_equivalent_queries_hash_equal(self):
        a = query_signature("Data  Engineer", {"region": ["eu", "na"], "level": "senior"})
        b = query_signature("data engineer", {"level": ["senior"], "region": ["na", "eu"]})
        assert a == b

    def test_different_filters_differ(self):
        assert query_signature("q", {"region": "eu"}) != query_signature("q", {"region": "na"})

    def test_key_fields(self):
        k = CacheKey.for_query("u1", "Q", {}, "d1", "v1")
        assert k == CacheKey("u1", query_signature("q"), "d1", "v1")


class TestPID:
    def test_fresh_state_at_max(self):
        assert PIDState().depth == 250

    def test_zero_error_keeps_depth(self):
        s = PIDState(depth=180)
        for _ in range(20):
            assert pid_update(s, 100.0, 100.0) == 180

    def test_sustained_overload_decreases(self):
        s = PIDState()
        c = 2.0
        target = 300.0
        depths = [s.depth]
        for _ in range(30):
            depths.append(pid_update(s, c * s.depth, target))
            if c * s.depth <= target or s.depth == s.d_min:
                break
        drops = depths[:next(i for i, d in enumerate(depths) if c * d <= target) + 1]
        assert all(b < a for a, b in zip(drops, drops[1:]))

    def test_bounds(self):
        with pytest.raises(SpecError):
            PIDState(d_min=10, d_max=5)
        with pytest.raises(ParameterError):
            pid_update(PIDState(), 1.0, 1.0, dt=0.0)

    @given(st.lists(st.floats(0, 1e6), min_size=1, max_size=200), st.floats(1.0, 5000.0))
    def test_depth_always_in_bounds(self, latencies, target):
        s = PIDState()
        for obs in latencies:
            d = pid_update(s, obs, target)
            assert s.d_min <= d <= s.d_max
            assert abs(s.integral) <= s.integral_clamp * target + 1e-9

    @pytest.mark.parametrize("c", [1.25, 1.5, 2.0, 3.0])
    def test_converges_on_linear_plant(self, c):
        target = 300.0
        s = PIDState()
        lat = []
        for _ in range(50):
            lat.append(c * s.depth)
            pid_update(s, lat[-1], target)
        assert abs(c * s.depth - target) <= 0.1 * target

    def test_unreachable_target_saturates(self):
        s = PIDState()
        for _ in range(50):
            pid_update(s, 1.0 * s.depth, 300.0)
        assert s.depth == s.d_max and s.integral == 0.0

    def test_reset(self):
        s = PIDState()
        pid_update(s, 1e5, 10.0)
        s.reset()
        assert (s.depth, s.integral, s.prev_error) == (250, 0.0, None)


class TestRetry:
    policy = RetryPolicy(attempt_timeout_ms=200, budget_ms=500, max_attempts=3)

    def test_first_attempt(self):
        assert retry_decision(0.0, 0, self.policy) == PROCEED

    def test_at_budget(self):
        assert retry_decision(500.0, 1, self.policy) == GIVE_UP
        assert retry_decision(500.0, 0, self.policy) == GIVE_UP

    def test_would_exceed(self):
        assert retry_decision(350.0, 1, self.policy) == GIVE_UP

    def test_retry_fits(self):
        assert retry_decision(250.0, 1, self.policy) == RETRY

    def test_attempts_exhausted(self):
        assert retry_decision(10.0, 3, self.policy) == GIVE_UP

    def test_policy_validation(self):
        with pytest.raises(SpecError):
            RetryPolicy(attempt_timeout_ms=600, budget_ms=500)
        with pytest.raises(SpecError):
            RetryPolicy(max_attempts=0)

    @given(st.floats(0, 1000), st.integers(0, 5))
    def test_retry_never_breaks_budget(self, elapsed, attempts):
        if retry_decision(elapsed, attempts, self.policy) == RETRY:
            assert elapsed + self.policy.attempt_timeout_ms <= self.policy.budget_ms


@dataclass
class Req:
    name: str
    latency_sensitive: bool


class TestShaping:
    queue = [Req("a", False), Req("b", True), Req("c", False), Req("d", True)]

    def test_idle_admits_all(self):
        assert shape_traffic(self.queue, 0.0, 0.7) == (self.queue, [])

    def test_full_admits_sensitive_only(self):
        admit, defer = shape_traffic(self.queue, 1.0, 0.7)
        assert [r.name for r in admit] == ["b", "d"] and [r.name for r in defer] == ["a", "c"]

    def test_boundary_is_strict(self):
        admit, defer = shape_traffic(self.queue, 0.7, 0.7)
        assert [r.name for r in defer] == ["a", "c"]

    def test_bad_threshold(self):
        with pytest.raises(ParameterError):
            shape_traffic(self.queue, 0.5, 0.0)

    @given(st.lists(st.booleans(), max_size=30), st.floats(0, 1), st.floats(0.01, 1))
    def test_partition(self, flags, util, threshold):
        queue = [Req(str(i), f) for i, f in enumerate(flags)]
        admit, defer = shape_traffic(queue, util, threshold)
        assert sorted(admit + defer, key=lambda r: int(r.name)) == queue
        assert all(r in admit for r in queue if r.latency_sensitive)
        assert not any(r.latency_sensitive for r in defer)
