"""Deterministic toy decoder-only transformer used as the scoring substrate.

Pre-norm blocks (LayerNorm without bias, causal multi-head attention, GELU
MLP) over learned absolute position embeddings. Weights are stored as
float32; the forward pass computes in the config's ``compute_dtype``
(float64 by default, so cached and monolithic passes agree to ~1e-15). The forward pass is prefill-only: it fills a KV cache and returns
final hidden states; nothing is ever decoded or sampled.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import LengthError, MaskError, PayloadError, SpecError
from .tokenizer import NO, YES

F32 = np.float32
LN_EPS = 1e-5

ENGAGEMENT_TASKS = ("click", "apply", "badfit", "shortlist", "dismiss")
RELEVANCE_TASK = "relevance"
DEFAULT_HEADS = ((RELEVANCE_TASK, 2),) + tuple((t, 1) for t in ENGAGEMENT_TASKS)


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int = 2
    d_model: int = 64
    n_heads: int = 4
    d_ff: int = 256
    vocab_size: int = 300
    max_seq: int = 4096
    yes_token_id: int = YES
    no_token_id: int = NO
    head_specs: tuple = DEFAULT_HEADS
    compute_dtype: str = "float64"

    def __post_init__(self):
        object.__setattr__(self, "head_specs", tuple((str(n), int(a)) for n, a in self.head_specs))
        if self.d_model % self.n_heads:
            raise SpecError("d_model must be divisible by n_heads")
        if self.yes_token_id == self.no_token_id:
            raise SpecError("yes_token_id and no_token_id must differ")
        if not (0 <= self.yes_token_id < self.vocab_size and 0 <= self.no_token_id < self.vocab_size):
            raise SpecError("yes/no token ids must be inside the vocabulary")
        if self.max_seq < 1:
            raise SpecError("max_seq must be >= 1")
        if self.compute_dtype not in ("float32", "float64"):
            raise SpecError("compute_dtype must be float32 or float64")
        for name, arity in self.head_specs:
            if arity not in (1, 2):
                raise SpecError(f"head {name!r}: arity must be 1 or 2")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    def to_dict(self) -> dict:
        d = asdict(self)
        d["head_specs"] = [list(h) for h in self.head_specs]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        if "head_specs" in d:
            d["head_specs"] = tuple(tuple(h) for h in d["head_specs"])
        return cls(**d)


@dataclass
class ModelWeights:
    """Named float32 tensors plus the config that shaped them.

    Treated as immutable once built; concurrent readers are safe.
    """

    config: ModelConfig
    tensors: dict = field(default_factory=dict)
    _compute: dict = field(default=None, init=False, repr=False, compare=False)

    def compute_tensors(self) -> dict:
        """Tensors cast to the config's compute dtype (cached)."""
        if self._compute is None:
            dt = np.dtype(self.config.compute_dtype)
            self._compute = {k: v.astype(dt) for k, v in self.tensors.items()}
        return self._compute

    def __getitem__(self, name):
        return self.tensors[name]

    def checksum(self) -> str:
        h = hashlib.sha256()
        for name in sorted(self.tensors):
            h.update(name.encode())
            h.update(np.ascontiguousarray(self.tensors[name], dtype="<f4").tobytes())
        return h.hexdigest()

    def validate(self):
        cfg = self.config
        for name, shape in expected_shapes(cfg).items():
            t = self.tensors.get(name)
            if t is None or t.shape != shape:
                raise SpecError(f"tensor {name}: expected {shape}, got {None if t is None else t.shape}")
            if not np.all(np.isfinite(t)):
                raise SpecError(f"tensor {name} has non-finite entries")


def expected_shapes(cfg: ModelConfig) -> dict:
    d, ff, V = cfg.d_model, cfg.d_ff, cfg.vocab_size
    shapes = {"tok_emb": (V, d), "pos_emb": (cfg.max_seq, d)}
    for i in range(cfg.n_layers):
        p = f"layers.{i}."
        shapes.update({
            p + "ln1": (d,), p + "wq": (d, d), p + "wk": (d, d), p + "wv": (d, d), p + "wo": (d, d),
            p + "ln2": (d,), p + "w1": (d, ff), p + "w2": (ff, d),
        })
    shapes["ln_f"] = (d,)
    shapes["w_out"] = (d, V)
    for name, arity in cfg.head_specs:
        if name == RELEVANCE_TASK:
            continue
        shapes[f"heads.{name}.w"] = (d, arity)
        shapes[f"heads.{name}.b"] = (arity,)
    return shapes


def init_model(config: ModelConfig, seed: int) -> ModelWeights:
    """Draw weights from a fixed-variance truncated normal scheme.

    Embeddings use std 0.5, projections 1/sqrt(fan_in); draws are clipped
    at 4 std so every entry stays well inside |w| < 10.
    """
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, shape in expected_shapes(config).items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf.startswith("ln"):
            t = np.ones(shape)
        elif leaf == "b":
            t = np.zeros(shape)
        else:
            std = 0.5 if name in ("tok_emb", "pos_emb") else 1.0 / np.sqrt(shape[0])
            t = np.clip(rng.standard_normal(shape), -4.0, 4.0) * std
        tensors[name] = t.astype(F32)
    return ModelWeights(config, tensors)


@dataclass(frozen=True)
class KVCache:
    """Per-layer keys/values, each ``[seq, n_heads, head_dim]``.

    Instances are never mutated: :func:`prefill` returns a new cache, so one
    prefix cache can back any number of item continuations.
    """

    keys: tuple
    values: tuple

    @property
    def seq_len(self) -> int:
        return 0 if not self.keys else int(self.keys[0].shape[0])

    @classmethod
    def empty(cls, config: ModelConfig) -> "KVCache":
        z = np.zeros((0, config.n_heads, config.head_dim), config.compute_dtype)
        return cls(tuple(z for _ in range(config.n_layers)), tuple(z for _ in range(config.n_layers)))


def layer_norm(x, scale):
    mu = x.mean(-1, keepdims=True)
    var = ((x - mu) ** 2).mean(-1, keepdims=True)
    return (x - mu) / np.sqrt(var + LN_EPS) * scale


def gelu(x):
    return 0.5 * x * (1.0 + np.tanh(0.7978845608028654 * (x + 0.044715 * x ** 3)))


def causal_mask(n_past: int, n_new: int) -> np.ndarray:
    """Boolean ``[n_new, n_past + n_new]``: True where attention is allowed."""
    allowed = np.ones((n_new, n_past + n_new), dtype=bool)
    allowed[:, n_past:] = np.tri(n_new, dtype=bool)
    return allowed


def prefill(weights: ModelWeights, tokens=None, kv_in: KVCache | None = None, mask=None,
            positions=None, embeds=None):
    """Run one forward pass over new tokens, attending to ``kv_in`` as well.

    Exactly one of ``tokens`` (ids) or ``embeds`` (``[n, d_model]`` vectors
    used in place of token embeddings) must be given. ``mask`` is a boolean
    ``[n_new, n_past + n_new]`` permission matrix (default: causal);
    ``positions`` overrides the absolute position ids of the new tokens.

    Returns ``(hidden, cache)`` where ``hidden`` holds the final-norm hidden
    state of every new position and ``cache`` = ``kv_in`` plus the new keys
    and values.
    """
    cfg = weights.config
    t = weights.compute_tensors()
    dt = np.dtype(cfg.compute_dtype).type
    n_past = kv_in.seq_len if kv_in is not None else 0

    if (tokens is None) == (embeds is None):
        raise PayloadError("pass exactly one of tokens or embeds")
    if embeds is not None:
        x = np.asarray(embeds, dtype=dt)
        if x.ndim != 2 or x.shape[1] != cfg.d_model:
            raise PayloadError(f"embedding tokens must be [n, {cfg.d_model}], got {x.shape}")
    else:
        ids = np.asarray(tokens, dtype=np.int64).reshape(-1)
        if ids.size and (ids.min() < 0 or ids.max() >= cfg.vocab_size):
            raise PayloadError("token id outside vocabulary")
        x = t["tok_emb"][ids]
    n = x.shape[0]
    if n_past + n > cfg.max_seq:
        raise LengthError(f"sequence of {n_past + n} exceeds max_seq={cfg.max_seq}")

    if positions is None:
        positions = np.arange(n_past, n_past + n)
    else:
        positions = np.asarray(positions, dtype=np.int64)
        if positions.shape != (n,) or (n and (positions.min() < 0 or positions.max() >= cfg.max_seq)):
            raise MaskError("positions must be n valid position ids")

    if mask is None:
        allowed = causal_mask(n_past, n)
    else:
        allowed = np.asarray(mask, dtype=bool)
        if allowed.shape != (n, n_past + n):
            raise MaskError(f"mask must be {(n, n_past + n)}, got {allowed.shape}")
        if n and not allowed.any(axis=1).all():
            raise MaskError("every position must be allowed to attend somewhere")
    bias = np.where(allowed, dt(0.0), dt(-np.inf)).astype(dt)

    x = x + t["pos_emb"][positions]
    H, hd = cfg.n_heads, cfg.head_dim
    scale = dt(1.0 / np.sqrt(hd))
    new_keys, new_values = [], []
    for i in range(cfg.n_layers):
        p = f"layers.{i}."
        h = layer_norm(x, t[p + "ln1"])
        q = (h @ t[p + "wq"]).reshape(n, H, hd)
        k = (h @ t[p + "wk"]).reshape(n, H, hd)
        v = (h @ t[p + "wv"]).reshape(n, H, hd)
        if n_past:
            k_all = np.concatenate([kv_in.keys[i], k], axis=0)
            v_all = np.concatenate([kv_in.values[i], v], axis=0)
        else:
            k_all, v_all = k, v
        new_keys.append(k_all)
        new_values.append(v_all)

        scores = np.matmul(q.transpose(1, 0, 2), k_all.transpose(1, 2, 0)) * scale + bias
        scores -= scores.max(-1, keepdims=True)
        probs = np.exp(scores)
        probs /= probs.sum(-1, keepdims=True)
        attn = np.matmul(probs, v_all.transpose(1, 0, 2)).transpose(1, 0, 2).reshape(n, cfg.d_model)
        x = x + attn @ t[p + "wo"]
        h2 = layer_norm(x, t[p + "ln2"])
        x = x + gelu(h2 @ t[p + "w1"]) @ t[p + "w2"]

    hidden = layer_norm(x, t["ln_f"])
    return hidden, KVCache(tuple(new_keys), tuple(new_values))


def vocab_logits(weights: ModelWeights, hidden) -> np.ndarray:
    return np.asarray(hidden) @ weights.compute_tensors()["w_out"]


def _logistic(z):
    z = np.asarray(z, dtype=np.float64)
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def yes_no_probability(logits, yes_id: int = YES, no_id: int = NO) -> float:
    """P(Yes) from a two-way softmax over the Yes/No logits."""
    logits = np.asarray(logits)
    return float(_logistic(float(logits[..., yes_id]) - float(logits[..., no_id])))


def multi_head_scores(hidden, weights: ModelWeights) -> dict:
    """Per-task probabilities from a final hidden vector (or a stack of them).

    The relevance task reads the reserved Yes/No vocabulary logits; every
    other task is a logistic (arity 1) or two-way softmax (arity 2) head.
    """
    cfg = weights.config
    if not cfg.head_specs:
        raise SpecError("head_specs is empty")
    t = weights.compute_tensors()
    hidden = np.asarray(hidden, dtype=t["ln_f"].dtype)
    out = {}
    for name, arity in cfg.head_specs:
        if name == RELEVANCE_TASK:
            w = t["w_out"][:, [cfg.yes_token_id, cfg.no_token_id]]
            z = hidden @ w
            p = _logistic(z[..., 0].astype(np.float64) - z[..., 1])
        else:
            z = (hidden @ t[f"heads.{name}.w"] + t[f"heads.{name}.b"]).astype(np.float64)
            p = _logistic(z[..., 0]) if arity == 1 else _logistic(z[..., 1] - z[..., 0])
        out[name] = float(p) if np.ndim(p) == 0 else p
    return out


MAGIC = b"SEMRANKW"
FORMAT_VERSION = 1


def save_weights(weights: ModelWeights, path) -> None:
    """Binary container: magic, u32 version, u32 manifest length, JSON manifest, raw <f4 data."""
    manifest = {"config": weights.config.to_dict(), "tensors": []}
    blobs, offset = [], 0
    for name in sorted(weights.tensors):
        data = np.ascontiguousarray(weights.tensors[name], dtype="<f4").tobytes()
        manifest["tensors"].append({"name": name, "shape": list(weights.tensors[name].shape),
                                    "offset": offset})
        blobs.append(data)
        offset += len(data)
    head = json.dumps(manifest, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", FORMAT_VERSION, len(head)))
        fh.write(head)
        for b in blobs:
            fh.write(b)


def load_weights(path) -> ModelWeights:
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise SpecError(f"{path}: not a semrank weight file")
    version, n = struct.unpack("<II", raw[8:16])
    if version != FORMAT_VERSION:
        raise SpecError(f"{path}: unsupported weight format version {version}")
    manifest = json.loads(raw[16:16 + n])
    base = 16 + n
    tensors = {}
    for entry in manifest["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = base + entry["offset"]
        tensors[entry["name"]] = np.frombuffer(raw, dtype="<f4", count=count, offset=start).reshape(shape).astype(F32)
    w = ModelWeights(ModelConfig.from_dict(manifest["config"]), tensors)
    w.validate()
    return w
