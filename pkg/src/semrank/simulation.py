"""Deterministic discrete-event simulation of the scoring mid-tier.

One scoring server (the "GPU") serves requests FIFO. A request's service
time comes from the FLOP cost model ``alpha * (attention + linear) + beta``
evaluated at the current scoring depth. Cache, PID depth control, retry
budgets and traffic shaping can each be toggled on or off.
"""

from __future__ import annotations

import heapq
import json
import math
from collections import deque
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .engine import flops
from .errors import SpecError
from .midtier import (GIVE_UP, MISS, RETRY, PIDState, RetryPolicy, ScoreCache, pid_update,
                      retry_decision, shape_traffic)

SENSITIVE, INSENSITIVE = "sensitive", "insensitive"


@dataclass(frozen=True)
class SimConfig:
    arrival: str = "poisson"          # "poisson" | "bursty"
    rate: float = 0.375               # requests/s (off-peak rate when bursty)
    peak_rate: float = 0.85           # bursty only
    peak_duration: float = 1000.0     # s
    offpeak_duration: float = 1000.0  # s
    sensitive_fraction: float = 0.5
    T_q: tuple = (150, 250)           # inclusive uniform ranges
    T_i: tuple = (40, 60)
    base_depth: int = 250
    # fitted with measure_cost_model() on the default toy model (ibpc, CPU)
    alpha: float = 1.85e-7            # s per flop unit
    beta: float = 0.022               # s per request
    seed: int = 0
    duration: float = 10000.0         # s
    n_keys: int = 1000
    zipf_s: float = 1.0
    cache_capacity: int = 200
    cache_probe: float = 0.025        # s
    target_latency_ms: float = 3000.0
    control_interval: float = 50.0    # s
    pid_gains: tuple = (0.4, 0.05, 0.1)
    pid_bounds: tuple = (50, 250)
    pid_scale: float = 0.1            # depth per ms of error, matched to the time scale
    attempt_timeout_ms: float = 10000.0
    budget_ms: float = 25000.0
    max_attempts: int = 3
    shaping_threshold: float = 0.5
    utilization_window: float = 5.0   # s of queued work that counts as full load
    report_interval: float = 500.0    # s
    max_requests: int | None = None

    def __post_init__(self):
        if self.arrival not in ("poisson", "bursty"):
            raise SpecError("arrival must be 'poisson' or 'bursty'")
        if self.rate < 0 or self.peak_rate < 0:
            raise SpecError("arrival rates must be >= 0")
        if self.alpha < 0 or self.beta < 0:
            raise SpecError("cost model coefficients must be >= 0")
        object.__setattr__(self, "T_q", tuple(self.T_q))
        object.__setattr__(self, "T_i", tuple(self.T_i))
        object.__setattr__(self, "pid_gains", tuple(self.pid_gains))
        object.__setattr__(self, "pid_bounds", tuple(self.pid_bounds))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SimConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise SpecError(f"unknown simulation config keys {sorted(unknown)}")
        return cls(**d)

    def with_(self, **kw) -> "SimConfig":
        return SimConfig.from_dict({**self.to_dict(), **kw})


@dataclass(frozen=True)
class Toggles:
    cache: bool = False
    pid: bool = False
    retry: bool = False
    shaping: bool = False


def standard_workload(**kw) -> SimConfig:
    return SimConfig(**kw)


def bursty_workload(**kw) -> SimConfig:
    return SimConfig(arrival="bursty", **kw)


@dataclass
class _Request:
    rid: int
    arrival: float
    key: int
    latency_sensitive: bool
    T_q: int
    T_i: int
    attempt: int = 0
    done: bool = False
    deferred: bool = False


@dataclass
class SimMetrics:
    latency_p50_ms: dict = field(default_factory=dict)
    latency_p99_ms: dict = field(default_factory=dict)
    completed: dict = field(default_factory=dict)
    cache_hit_rate: float = 0.0
    cache_lookups: int = 0
    mean_depth: float = 0.0
    deferred: int = 0
    gave_up: int = 0
    retries: int = 0
    total_flops: int = 0
    max_latency_ms: float = 0.0
    phase_mean_depth: dict = field(default_factory=dict)
    steady_mean_depth: float = 0.0
    depth_trace: list = field(default_factory=list)
    records: list = field(default_factory=list)

    def summary(self) -> dict:
        d = asdict(self)
        d.pop("depth_trace")
        d.pop("records")
        return d


def _percentile(vals, q):
    return float(np.percentile(vals, q)) if len(vals) else 0.0


def _zipf_probs(n, s):
    w = 1.0 / np.arange(1, n + 1) ** s
    return w / w.sum()


def is_peak(cfg: SimConfig, t: float) -> bool:
    if cfg.arrival != "bursty":
        return False
    period = cfg.peak_duration + cfg.offpeak_duration
    return (t % period) >= cfg.offpeak_duration


def arrival_times(cfg: SimConfig, rng: np.random.Generator) -> np.ndarray:
    """Poisson arrivals; the bursty process alternates off-peak and peak phases."""
    times, t = [], 0.0
    while t < cfg.duration:
        rate = cfg.peak_rate if is_peak(cfg, t) else cfg.rate
        if cfg.arrival == "bursty":
            period = cfg.peak_duration + cfg.offpeak_duration
            phase_start = t - (t % period)
            phase_end = phase_start + (period if is_peak(cfg, t) else cfg.offpeak_duration)
        else:
            phase_end = math.inf
        if rate <= 0:
            t = phase_end
            continue
        nxt = t + rng.exponential(1.0 / rate)
        if nxt >= phase_end:
            # memoryless: restart the clock at the phase boundary
            t = phase_end
            continue
        t = nxt
        if t < cfg.duration:
            times.append(t)
    return np.array(times)


def key_trace(cfg: SimConfig, n: int, rng: np.random.Generator) -> np.ndarray:
    return rng.choice(cfg.n_keys, size=n, p=_zipf_probs(cfg.n_keys, cfg.zipf_s))


def service_time(cfg: SimConfig, T_q: int, T_i: int, depth: int):
    f = flops("ibpc", T_q, T_i, depth)
    units = f.attention_units + f.linear_units
    return cfg.alpha * units + cfg.beta, units


def run_simulation(cfg: SimConfig, toggles: Toggles = Toggles()) -> SimMetrics:
    rng = np.random.default_rng(cfg.seed)
    times = arrival_times(cfg, rng)
    if cfg.max_requests is not None:
        times = times[:cfg.max_requests]
    n = len(times)
    keys = key_trace(cfg, n, rng)
    sens = rng.random(n) < cfg.sensitive_fraction
    tq = rng.integers(cfg.T_q[0], cfg.T_q[1] + 1, size=n)
    ti = rng.integers(cfg.T_i[0], cfg.T_i[1] + 1, size=n)

    kp, ki, kd = cfg.pid_gains
    pid = PIDState(kp, ki, kd, d_min=cfg.pid_bounds[0], d_max=cfg.pid_bounds[1], scale=cfg.pid_scale)
    policy = RetryPolicy(cfg.attempt_timeout_ms, cfg.budget_ms, cfg.max_attempts)
    cache = ScoreCache(cfg.cache_capacity)

    events: list = []
    seq = 0

    def push(t, kind, payload=None):
        nonlocal seq
        heapq.heappush(events, (t, seq, kind, payload))
        seq += 1

    for i, t in enumerate(times):
        push(float(t), "arrival", i)
    if n and toggles.pid:
        push(cfg.control_interval, "control")
    if n:
        push(cfg.report_interval, "report")

    queue: deque = deque()          # (request, attempt number)
    deferred: deque = deque()
    busy_until = 0.0
    in_service = None               # (request, attempt number, end time)
    latencies = {SENSITIVE: [], INSENSITIVE: []}
    interval_lat: list = []
    window = {SENSITIVE: [], INSENSITIVE: []}
    depth_samples: list = []        # (start time, depth)
    m = SimMetrics()
    win_flops = 0
    win_depths: list = []
    win_deferred = 0

    def current_depth():
        return pid.depth if toggles.pid else cfg.base_depth

    def utilization(now):
        backlog = max(0.0, busy_until - now) if in_service else 0.0
        d = current_depth()
        for r, a in queue:
            if not r.done and r.attempt == a:
                backlog += service_time(cfg, r.T_q, r.T_i, d)[0]
        return min(1.0, backlog / cfg.utilization_window) if cfg.utilization_window > 0 else 1.0

    def finish(r, now, from_cache=False):
        nonlocal interval_lat
        r.done = True
        lat_ms = (now - r.arrival) * 1000.0
        cls = SENSITIVE if r.latency_sensitive else INSENSITIVE
        latencies[cls].append(lat_ms)
        window[cls].append(lat_ms)
        m.max_latency_ms = max(m.max_latency_ms, lat_ms)
        if not from_cache:
            interval_lat.append(lat_ms)

    def dispatch(r, now):
        if toggles.retry and r.attempt == 0 and retry_decision((now - r.arrival) * 1000.0, 0, policy) == GIVE_UP:
            m.gave_up += 1
            finish(r, now)
            return
        r.attempt += 1
        if toggles.retry:
            remaining = cfg.budget_ms - (now - r.arrival) * 1000.0
            push(now + min(cfg.attempt_timeout_ms, remaining) / 1000.0, "timeout", (r, r.attempt))
        queue.append((r, r.attempt))

    def try_start(now):
        nonlocal busy_until, in_service, win_flops
        if in_service is not None:
            return
        while queue:
            r, a = queue.popleft()
            if r.done or r.attempt != a:
                continue
            d = current_depth()
            st, units = service_time(cfg, r.T_q, r.T_i, d)
            m.total_flops += units
            win_flops += units
            depth_samples.append((now, d))
            win_depths.append(d)
            busy_until = now + st
            in_service = (r, a, busy_until)
            push(busy_until, "done", (r, a))
            return
        if deferred:
            # idle window: release the oldest deferred request
            dispatch(deferred.popleft(), now)
            try_start(now)

    while events:
        now, _, kind, payload = heapq.heappop(events)
        if kind == "arrival":
            r = _Request(payload, now, int(keys[payload]), bool(sens[payload]),
                         int(tq[payload]), int(ti[payload]))
            if toggles.cache and cache.get(r.key) is not MISS:
                finish(r, now + cfg.cache_probe, from_cache=True)
                continue
            if toggles.shaping:
                _, defer = shape_traffic([r], utilization(now), cfg.shaping_threshold)
                if defer:
                    r.deferred = True
                    deferred.append(r)
                    m.deferred += 1
                    win_deferred += 1
                    try_start(now)
                    continue
            dispatch(r, now)
            try_start(now)
        elif kind == "done":
            r, a = payload
            in_service = None
            if not r.done and r.attempt == a:
                finish(r, now)
                if toggles.cache:
                    cache.put(r.key, {"scored": 1.0})
            try_start(now)
        elif kind == "timeout":
            r, a = payload
            if r.done or r.attempt != a:
                continue
            elapsed = (now - r.arrival) * 1000.0
            if retry_decision(elapsed, a, policy) == RETRY:
                m.retries += 1
                dispatch(r, now)
                try_start(now)
            else:
                m.gave_up += 1
                finish(r, now)
        elif kind == "control":
            if interval_lat:
                pid_update(pid, float(np.mean(interval_lat)), cfg.target_latency_ms, cfg.control_interval)
            interval_lat = []
            m.depth_trace.append((now, pid.depth))
            if now + cfg.control_interval <= cfg.duration:
                push(now + cfg.control_interval, "control")
        elif kind == "report":
            hits = cache.hit_rate if toggles.cache else 0.0
            mean_d = float(np.mean(win_depths)) if win_depths else 0.0
            for cls in (SENSITIVE, INSENSITIVE):
                m.records.append({"t": round(now, 6), "class": cls,
                                  "p50": _percentile(window[cls], 50), "p99": _percentile(window[cls], 99),
                                  "hit_rate": hits, "mean_depth": mean_d, "deferred": win_deferred,
                                  "flops": win_flops})
                window[cls] = []
            win_flops, win_depths, win_deferred = 0, [], 0
            if now + cfg.report_interval <= cfg.duration:
                push(now + cfg.report_interval, "report")

    for cls in (SENSITIVE, INSENSITIVE):
        m.latency_p50_ms[cls] = _percentile(latencies[cls], 50)
        m.latency_p99_ms[cls] = _percentile(latencies[cls], 99)
        m.completed[cls] = len(latencies[cls])
    m.cache_lookups = cache.lookups
    m.cache_hit_rate = cache.hit_rate if toggles.cache else 0.0
    if depth_samples:
        ds = np.array(depth_samples)
        m.mean_depth = float(ds[:, 1].mean())
        late = ds[ds[:, 0] >= cfg.duration / 2]
        m.steady_mean_depth = float(late[:, 1].mean()) if len(late) else m.mean_depth
        if cfg.arrival == "bursty":
            peak = np.array([is_peak(cfg, t) for t in ds[:, 0]])
            m.phase_mean_depth = {
                "peak": float(ds[peak, 1].mean()) if peak.any() else 0.0,
                "offpeak": float(ds[~peak, 1].mean()) if (~peak).any() else 0.0,
            }
    return m


def lru_replay_hit_rate(trace, capacity: int) -> float:
    """Offline oracle: hit rate of an LRU cache populated immediately on each miss."""
    order: list = []
    hits = 0
    for k in trace:
        if k in order:
            hits += 1
            order.remove(k)
        elif len(order) >= capacity:
            order.pop(0)
        order.append(k)
    return hits / len(trace) if len(trace) else 0.0


def write_metrics_jsonl(metrics: SimMetrics, path, meta: dict | None = None) -> None:
    with open(path, "w") as fh:
        for rec in metrics.records:
            out = dict(rec)
            if meta:
                out["meta"] = meta
            fh.write(json.dumps(out, sort_keys=True) + "\n")


def fit_cost_model(samples) -> tuple:
    """Least-squares ``(alpha, beta)`` from ``(flop_units, seconds)`` samples."""
    arr = np.asarray(samples, dtype=np.float64)
    A = np.column_stack([arr[:, 0], np.ones(len(arr))])
    (alpha, beta), *_ = np.linalg.lstsq(A, arr[:, 1], rcond=None)
    return max(float(alpha), 0.0), max(float(beta), 0.0)


COST_SHAPES = ((20, 10, 4), (50, 20, 8), (100, 20, 16), (150, 40, 16), (200, 50, 32), (100, 10, 64))


def measure_cost_model(weights, shapes=COST_SHAPES, repeats: int = 5, seed: int = 0):
    """Time ibpc scoring on random prompts and fit ``(alpha, beta)``.

    Returns ``((alpha, beta), samples)``; timings are medians over ``repeats``.
    """
    import time

    from .engine import ScoreItem, ScoreRequest, score_ibpc

    rng = np.random.default_rng(seed)
    samples = []
    for T_q, T_i, n in shapes:
        req = ScoreRequest("cost", tuple(rng.integers(0, 256, T_q)),
                           [ScoreItem(i, tuple(rng.integers(0, 256, T_i))) for i in range(n)], "ibpc")
        runs = []
        for _ in range(repeats):
            t0 = time.perf_counter()
            score_ibpc(weights, req)
            runs.append(time.perf_counter() - t0)
        f = flops("ibpc", T_q, T_i, n)
        samples.append((f.attention_units + f.linear_units, float(np.median(runs))))
    return fit_cost_model(samples), samples
