"""Isotonic score calibration, globally and per display rank."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import SpecError, StateError, UndefinedMetricError

MAX_RANK = 25
INTERPOLATION = "flat-within-block, linear-between-blocks"


@dataclass
class CalibrationHead:
    """Monotone step function fitted by pool-adjacent-violators.

    Block ``j`` covers raw scores ``[lower_bounds[j], breakpoints[j]]`` and
    maps them to ``values[j]``; scores falling between two blocks are
    linearly interpolated, scores outside the fitted range are clamped to
    the end values.
    """

    breakpoints: np.ndarray | None = None
    values: np.ndarray | None = None
    counts: np.ndarray | None = None
    lower_bounds: np.ndarray | None = None
    head_id: str = "global"
    rank: int | None = None
    bucket: object = None

    @property
    def fitted(self) -> bool:
        return self.values is not None and len(self.values) > 0

    def __call__(self, scores):
        return calibrate(self, scores)

    def to_json(self) -> dict:
        if not self.fitted:
            raise StateError("cannot serialize an unfitted calibration head")
        return {"head_id": self.head_id, "breakpoints": self.breakpoints.tolist(),
                "lower_bounds": self.lower_bounds.tolist(), "values": self.values.tolist(),
                "counts": self.counts.tolist(), "rank": "global" if self.rank is None else self.rank,
                "bucket": self.bucket, "interpolation": INTERPOLATION}

    @classmethod
    def from_json(cls, rec) -> "CalibrationHead":
        rank = rec.get("rank")
        return cls(np.asarray(rec["breakpoints"], float), np.asarray(rec["values"], float),
                   np.asarray(rec["counts"], np.int64),
                   np.asarray(rec.get("lower_bounds", rec["breakpoints"]), float),
                   rec.get("head_id", "global"), None if rank in (None, "global") else int(rank),
                   rec.get("bucket"))


def pav(y, w=None):
    """Weighted pool-adjacent-violators on an already ordered sequence.

    Returns ``(starts, values, weights)`` of the merged blocks.
    """
    y = np.asarray(y, dtype=np.float64)
    w = np.ones_like(y) if w is None else np.asarray(w, dtype=np.float64)
    starts, vals, wts = [], [], []
    for i in range(y.size):
        starts.append(i)
        vals.append(y[i])
        wts.append(w[i])
        while len(vals) > 1 and vals[-2] > vals[-1]:
            tw = wts[-2] + wts[-1]
            merged = (vals[-2] * wts[-2] + vals[-1] * wts[-1]) / tw
            starts.pop()
            vals.pop()
            wts.pop()
            vals[-1], wts[-1] = merged, tw
    return np.array(starts, dtype=np.int64), np.array(vals), np.array(wts)


def fit_isotonic(pairs: Sequence[tuple], head_id: str = "global", rank: int | None = None,
                 bucket=None) -> CalibrationHead:
    """Least-squares monotone fit of binary outcomes against raw scores.

    Equal raw scores are pooled first, so they always share one value.
    """
    arr = np.asarray(pairs, dtype=np.float64).reshape(-1, 2)
    if arr.shape[0] == 0:
        raise SpecError("need at least one (score, outcome) pair")
    xs, inv = np.unique(arr[:, 0], return_inverse=True)
    sums = np.bincount(inv, weights=arr[:, 1], minlength=xs.size)
    cnt = np.bincount(inv, minlength=xs.size).astype(np.float64)
    starts, vals, wts = pav(sums / cnt, cnt)
    ends = np.append(starts[1:], xs.size) - 1
    return CalibrationHead(breakpoints=xs[ends], values=np.clip(vals, 0.0, 1.0),
                           counts=wts.astype(np.int64), lower_bounds=xs[starts],
                           head_id=head_id, rank=rank, bucket=bucket)


def calibrate(head: CalibrationHead, scores):
    if head is None or not head.fitted:
        raise StateError("calibration head is not fitted")
    knots_x = np.column_stack([head.lower_bounds, head.breakpoints]).ravel()
    knots_y = np.repeat(head.values, 2)
    out = np.clip(np.interp(np.asarray(scores, dtype=np.float64), knots_x, knots_y), 0.0, 1.0)
    return float(out) if np.ndim(out) == 0 else out


@dataclass
class PositionCalibrator:
    """One isotonic head per display rank 1..25 plus a global fallback."""

    heads: list = field(default_factory=lambda: [None] * MAX_RANK)
    global_head: CalibrationHead | None = None

    def head_for(self, rank: int) -> CalibrationHead:
        if 1 <= rank <= MAX_RANK and self.heads[rank - 1] is not None:
            return self.heads[rank - 1]
        if self.global_head is None:
            raise StateError(f"no head for rank {rank} and no global fallback")
        return self.global_head

    def calibrate(self, score, rank: int):
        return calibrate(self.head_for(rank), score)

    def vector(self, score) -> np.ndarray:
        """Calibrated outcome probability at each rank 1..25."""
        return np.array([self.calibrate(score, r) for r in range(1, MAX_RANK + 1)])

    def all_heads(self) -> list:
        return [h for h in [self.global_head, *self.heads] if h is not None]


def fit_position_conditional(rows: Sequence[tuple]) -> PositionCalibrator:
    """Fit an independent head per rank from ``(score, outcome, rank)`` rows.

    Rows ranked beyond 25 are ignored. Ranks with no rows keep no head and
    fall back to the global head, which is fitted on all in-range rows.
    """
    arr = np.asarray(rows, dtype=np.float64).reshape(-1, 3)
    arr = arr[(arr[:, 2] >= 1) & (arr[:, 2] <= MAX_RANK)]
    cal = PositionCalibrator()
    if arr.shape[0]:
        cal.global_head = fit_isotonic(arr[:, :2], head_id="global")
    for r in range(1, MAX_RANK + 1):
        sel = arr[arr[:, 2] == r]
        if sel.shape[0]:
            cal.heads[r - 1] = fit_isotonic(sel[:, :2], head_id=f"rank-{r}", rank=r)
    return cal


def fit_bucketed(rows: Sequence[tuple]) -> dict:
    """One head per categorical bucket from ``(score, outcome, bucket)`` rows."""
    groups: dict = {}
    for s, y, b in rows:
        groups.setdefault(b, []).append((s, y))
    return {b: fit_isotonic(p, head_id=f"bucket-{b}", bucket=b) for b, p in sorted(groups.items(), key=lambda kv: str(kv[0]))}


def observed_expected_ratio(predictions, outcomes) -> float:
    expected = float(np.sum(predictions))
    if expected <= 0:
        raise UndefinedMetricError("expected outcome sum is zero; O/E undefined")
    return float(np.sum(outcomes)) / expected


def save_heads(heads: Sequence[CalibrationHead], path) -> None:
    Path(path).write_text("".join(json.dumps(h.to_json(), sort_keys=True) + "\n" for h in heads))


def load_heads(path) -> list:
    with open(path) as fh:
        return [CalibrationHead.from_json(json.loads(line)) for line in fh if line.strip()]


def load_position_calibrator(path) -> PositionCalibrator:
    cal = PositionCalibrator()
    for h in load_heads(path):
        if h.rank is None and h.bucket is None:
            cal.global_head = h
        elif h.rank is not None:
            cal.heads[h.rank - 1] = h
    return cal
