"""Training objectives, label transforms and sampling rules for ranking.

Every trainable loss returns ``(loss, grad)`` with an analytic gradient.
Log-based losses clamp probabilities to ``[EPS, 1 - EPS]``.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .errors import DegenerateTaskWarning, ParameterError, SpecError

EPS = 1e-7

ENGAGEMENT_ACTIONS = ("click", "apply", "badfit", "shortlist", "dismiss")
PEOPLE_ACTIONS = ("long_dwell", "connect", "follow", "message")
# Custom engagement BCE weights used for job search.
CUSTOM_TASK_WEIGHTS = {"click": 0.4, "apply": 0.4, "badfit": 0.05, "shortlist": 0.05, "dismiss": 0.1}


def infonce_loss(sim_pos: float, sims_neg: Sequence[float], tau: float = 0.05):
    """Contrastive loss of one positive against a set of negatives.

    Returns ``(loss, (d_pos, d_negs))``.
    """
    if tau <= 0:
        raise ParameterError("temperature must be > 0")
    negs = np.asarray(sims_neg, dtype=np.float64).reshape(-1)
    z = np.concatenate([[sim_pos], negs]) / tau
    top = int(np.argmax(z))
    e = np.exp(z - z[top])
    # log1p over the non-max terms avoids cancellation when one term dominates
    loss = float(z[top] - z[0] + np.log1p(np.delete(e, top).sum()))
    p = e / e.sum()
    d_negs = p[1:] / tau
    d_pos = -float(d_negs.sum())
    return max(loss, 0.0), (d_pos, d_negs)


def pairwise_margin_loss(sim_pos: float, sims_neg: Sequence[float], margin: float = 0.1):
    """Hinge ``sum max(0, m - s+ + s-)``; the subgradient at the kink is 0."""
    if margin <= 0:
        raise ParameterError("margin must be > 0")
    negs = np.asarray(sims_neg, dtype=np.float64).reshape(-1)
    slack = margin - sim_pos + negs
    active = slack > 0
    loss = float(slack[active].sum())
    return loss, (-float(active.sum()), active.astype(np.float64))


def combined_retrieval_loss(infonce: float, pair: float, lam: float) -> float:
    if not 0.0 <= lam <= 1.0:
        raise ParameterError("lambda must lie in [0, 1]")
    return lam * infonce + (1.0 - lam) * pair


@dataclass(frozen=True)
class SoftLabelMap:
    mode: str = "sigmoid"
    k: float = 2.0
    c: float = 2.5


def soft_label_map(grade: int, mapping: SoftLabelMap = SoftLabelMap()) -> float:
    """Map an ordinal grade 1..4 onto a soft target in [0, 1]."""
    if grade not in (1, 2, 3, 4):
        raise SpecError(f"grade must be 1..4, got {grade!r}")
    if mapping.mode == "linear":
        return (grade - 1) / 3.0
    if mapping.mode == "sigmoid":
        return 1.0 / (1.0 + math.exp(-mapping.k * (grade - mapping.c)))
    raise SpecError(f"unknown soft-label mode {mapping.mode!r}")


def build_ranking_pairs(scored_docs: Sequence[tuple], k: int, seed: int = 0) -> list:
    """Ordered (higher, lower) doc pairs for a pairwise ranking loss.

    ``scored_docs`` is ``[(doc_id, oracle_score), ...]`` in retrieval order.
    The pool is the first ``k`` retrieved docs plus ``k`` drawn at random
    from the rest; every pool pair with distinct scores is emitted, higher
    score first.
    """
    if len(scored_docs) < 2:
        raise SpecError("need at least two documents to form pairs")
    head = list(scored_docs[:k])
    tail = list(scored_docs[k:])
    rng = np.random.default_rng(seed)
    if tail:
        pick = rng.choice(len(tail), size=min(k, len(tail)), replace=False)
        head += [tail[i] for i in sorted(pick)]
    pairs = []
    for i in range(len(head)):
        for j in range(i + 1, len(head)):
            (a, sa), (b, sb) = head[i], head[j]
            if sa > sb:
                pairs.append((a, b))
            elif sb > sa:
                pairs.append((b, a))
    return pairs


@dataclass(frozen=True)
class TeacherSignal:
    """Teacher Bernoulli probabilities and loss weight per task."""

    probs: Mapping[str, object]
    weights: Mapping[str, float] | None = None

    def weight(self, task: str) -> float:
        if self.weights is None:
            return 1.0
        return float(self.weights.get(task, 0.0))


def _clamp(p):
    return np.clip(np.asarray(p, dtype=np.float64), EPS, 1.0 - EPS)


def kl_distillation_loss(teachers: TeacherSignal, student_logits: Mapping[str, object],
                         direction: str = "forward"):
    """Weighted per-task Bernoulli KL between teacher and student.

    ``forward`` is KL(teacher || student), ``reverse`` KL(student || teacher).
    Per-task values are averaged over rows. Returns ``(loss, grads)`` with
    grads keyed by task, taken w.r.t. the student logits.
    """
    if direction not in ("forward", "reverse"):
        raise ParameterError("direction must be 'forward' or 'reverse'")
    total, grads = 0.0, {}
    for task, z in student_logits.items():
        w = teachers.weight(task)
        if w < 0 or not math.isfinite(w):
            raise ParameterError(f"task weight for {task!r} must be finite and >= 0")
        z = np.asarray(z, dtype=np.float64)
        s_raw = 1.0 / (1.0 + np.exp(-z))
        s = _clamp(s_raw)
        t = _clamp(teachers.probs[task])
        n = z.size
        if direction == "forward":
            kl = t * np.log(t / s) + (1 - t) * np.log((1 - t) / (1 - s))
            g = s_raw - t
        else:
            kl = s * np.log(s / t) + (1 - s) * np.log((1 - s) / (1 - t))
            g = s_raw * (1 - s_raw) * (np.log(s / (1 - s)) - np.log(t / (1 - t)))
        # gradient vanishes where the student probability is clamped
        g = np.where((s_raw < EPS) | (s_raw > 1 - EPS), 0.0, g)
        total += w * float(kl.mean())
        grads[task] = w * g / n
    return total, grads


def multitask_bce(preds, labels, task_weights, mask=None):
    """Sum over tasks of ``w_t * mean BCE`` across unmasked rows.

    ``preds``/``labels``/``mask`` are ``[n_rows, n_tasks]``; ``task_weights``
    is a length-``n_tasks`` sequence. Returns ``(loss, d_loss/d_preds)``.
    A weighted task with every row masked emits a DegenerateTaskWarning and
    contributes nothing.
    """
    preds = np.atleast_2d(np.asarray(preds, dtype=np.float64))
    labels = np.atleast_2d(np.asarray(labels, dtype=np.float64))
    w = np.asarray(task_weights, dtype=np.float64).reshape(-1)
    if preds.shape != labels.shape or preds.shape[1] != w.size:
        raise SpecError("preds, labels and task weights disagree in shape")
    mask = np.ones_like(preds, dtype=bool) if mask is None else np.atleast_2d(np.asarray(mask, dtype=bool))
    p = _clamp(preds)
    counts = mask.sum(axis=0)
    for t in np.flatnonzero((counts == 0) & (w != 0)):
        warnings.warn(f"task {t} has no unmasked rows", DegenerateTaskWarning, stacklevel=2)
    denom = np.where(counts > 0, counts, 1)
    bce = -(labels * np.log(p) + (1 - labels) * np.log(1 - p))
    per_task = np.where(mask, bce, 0.0).sum(axis=0) / denom
    loss = float((w * per_task).sum())
    dp = (p - labels) / (p * (1 - p))
    inside = (preds > EPS) & (preds < 1 - EPS)
    grad = np.where(mask & inside, dp, 0.0) * (w / denom)
    return loss, grad


@dataclass
class MaskedActionBatch:
    """Per-action labels plus the loss mask produced by :func:`apply_loss_mask`.

    ``labels[i, a]`` is 1 for a positive, 0 for a negative; ``mask[i, a]`` is
    False where the cell is masked out of the loss.
    """

    query_ids: list
    doc_ids: list
    actions: tuple
    labels: np.ndarray
    mask: np.ndarray

    def cell(self, row: int, action: str) -> str:
        a = self.actions.index(action)
        if not self.mask[row, a]:
            return "masked"
        return "positive" if self.labels[row, a] else "negative"


def apply_loss_mask(rows: Sequence[Mapping], actions: Sequence[str] = PEOPLE_ACTIONS) -> MaskedActionBatch:
    """Restrict each action's negatives to queries where that action occurred.

    Rows are dicts with ``query_id``, ``doc_id`` and ``actions`` (name -> 0/1).
    Labels are OR-aggregated per query; groups without any positive for an
    action have every cell of that action masked out.
    """
    actions = tuple(actions)
    qids = [r["query_id"] for r in rows]
    labels = np.array([[int(bool(r["actions"].get(a, 0))) for a in actions] for r in rows],
                      dtype=np.int64).reshape(len(rows), len(actions))
    mask = np.zeros_like(labels, dtype=bool)
    groups: dict = {}
    for i, q in enumerate(qids):
        groups.setdefault(q, []).append(i)
    for idx in groups.values():
        any_pos = labels[idx].max(axis=0).astype(bool)
        mask[np.ix_(idx, np.flatnonzero(any_pos))] = True
    return MaskedActionBatch(qids, [r["doc_id"] for r in rows], actions, labels, mask)


def train_action_heads(features, labels, mask=None, task_weights=None, lr: float = 0.5,
                       epochs: int = 300):
    """Fit one logistic head per action with full-batch gradient descent.

    Returns ``(W, b)`` where predictions are ``sigmoid(features @ W + b)``.
    """
    X = np.asarray(features, dtype=np.float64)
    Y = np.asarray(labels, dtype=np.float64)
    n_tasks = Y.shape[1]
    w = np.ones(n_tasks) if task_weights is None else np.asarray(task_weights, dtype=np.float64)
    W = np.zeros((X.shape[1], n_tasks))
    b = np.zeros(n_tasks)
    for _ in range(epochs):
        p = 1.0 / (1.0 + np.exp(-(X @ W + b)))
        _, dp = multitask_bce(p, Y, w, mask)
        dz = dp * p * (1 - p)
        W -= lr * X.T @ dz
        b -= lr * dz.sum(axis=0)
    return W, b


@dataclass(frozen=True)
class RewardParams:
    lam_len: float = 0.5
    lam_qual: float = 0.2

    def __post_init__(self):
        if self.lam_len < 0 or self.lam_qual < 0:
            raise ParameterError("reward coefficients must be >= 0")


def summarization_reward(correct: bool, length: float, quality: float,
                         params: RewardParams = RewardParams()) -> float:
    """Reward for a profile summary: zero unless the downstream prediction is right."""
    if not correct:
        return 0.0
    return 1.0 - params.lam_len * length + params.lam_qual * quality
