"""Byte-level tokenizer, prompt assembly and numeric-feature rendering."""

from __future__ import annotations

from dataclasses import dataclass, field
from decimal import ROUND_DOWN, Decimal
from typing import Mapping, Sequence

from .errors import LengthError, SpecError

# 256 byte tokens, then 8 reserved specials, then the Yes/No answer tokens.
BOS, EOS, SEP, EMB, PAD = 256, 257, 258, 259, 260
SPARE = (261, 262, 263)
YES, NO = 264, 265
N_BYTE_TOKENS = 256

DEFAULT_MAX_SEQ = 4096
DEFAULT_SYSTEM = (
    "System: You judge search results. Answer Yes if the document is relevant "
    "to the searcher's query, otherwise No.\n"
)
ITEM_SUFFIX = "\nRelevant?"


def tokenize(text: str, max_seq: int = DEFAULT_MAX_SEQ) -> list[int]:
    """Map text to its UTF-8 bytes; each byte is one token id."""
    ids = list(text.encode("utf-8"))
    if len(ids) > max_seq:
        raise LengthError(f"{len(ids)} tokens exceeds max_seq={max_seq}")
    return ids


def detokenize(tokens: Sequence[int]) -> str:
    """Inverse of :func:`tokenize`; special tokens are dropped."""
    return bytes(t for t in tokens if t < N_BYTE_TOKENS).decode("utf-8")


@dataclass(frozen=True)
class PromptParts:
    prefix_tokens: tuple[int, ...]
    item_tokens: tuple[int, ...]

    def __post_init__(self):
        if not self.prefix_tokens:
            raise SpecError("prefix_tokens must be non-empty")

    @property
    def T_q(self) -> int:
        return len(self.prefix_tokens)

    @property
    def T_i(self) -> int:
        return len(self.item_tokens)


def build_prompt(system: str, query_context: str, document: str,
                 max_seq: int = DEFAULT_MAX_SEQ, suffix: str = ITEM_SUFFIX) -> PromptParts:
    prefix = tokenize(system + query_context, max_seq)
    item = tokenize(document + suffix, max_seq)
    if len(prefix) + len(item) > max_seq:
        raise LengthError(
            f"prompt of {len(prefix) + len(item)} tokens exceeds max_seq={max_seq}")
    return PromptParts(tuple(prefix), tuple(item))


CONTINUOUS, BOOLEAN, RATIO = "continuous", "boolean", "ratio"


@dataclass(frozen=True)
class FeatureDef:
    name: str
    kind: str = CONTINUOUS
    decimals: int = 2

    def __post_init__(self):
        if self.kind not in (CONTINUOUS, BOOLEAN, RATIO):
            raise SpecError(f"unknown feature kind {self.kind!r}")
        if self.decimals < 0:
            raise SpecError("decimal places must be >= 0")


@dataclass(frozen=True)
class NumericFeatureSpec:
    features: tuple[FeatureDef, ...] = field(default_factory=tuple)

    def __post_init__(self):
        names = [f.name for f in self.features]
        if len(set(names)) != len(names):
            raise SpecError("feature names must be unique")

    @classmethod
    def of(cls, *defs) -> "NumericFeatureSpec":
        """Build from FeatureDef objects or (name, kind[, decimals]) tuples."""
        return cls(tuple(d if isinstance(d, FeatureDef) else FeatureDef(*d) for d in defs))

    def get(self, name: str) -> FeatureDef:
        for f in self.features:
            if f.name == name:
                return f
        raise SpecError(f"feature {name!r} not in spec")


def _truncate(value: float, decimals: int) -> str:
    q = Decimal(1).scaleb(-decimals)
    return str(Decimal(repr(float(value))).quantize(q, rounding=ROUND_DOWN))


def format_numeric_features(features: Mapping[str, object], spec: NumericFeatureSpec) -> str:
    """Render features one per line in schema order.

    Booleans print as True/False, continuous values are truncated (not
    rounded) to the schema's decimals, and ratio features take a
    ``(numerator, denominator)`` pair and print ``value (num/den)``.
    """
    for name in features:
        spec.get(name)
    lines = []
    for fdef in spec.features:
        if fdef.name not in features:
            continue
        v = features[fdef.name]
        if fdef.kind == BOOLEAN:
            text = str(bool(v))
        elif fdef.kind == RATIO:
            num, den = v
            ratio = num / den if den else 0.0
            text = f"{_truncate(ratio, fdef.decimals)} ({int(num)}/{int(den)})"
        else:
            text = _truncate(v, fdef.decimals)
        lines.append(f"{fdef.name}: {text}")
    return "\n".join(lines)
