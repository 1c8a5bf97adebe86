"""Attribute-to-text functions, attribute separator registry, and the two regularizers.

Three renderings of an entity's attribute-value pairs are supported:

* ``concatenation``         ``v1 v2 ... vn``
* ``sep_separation``        ``[SEP] v1 [SEP] v2 ... [SEP] vn``
* ``attribute_separation``  ``[K_1] v1 [K_2] v2 ... [K_n] vn``; attributes
  missing from the registry fall back to ``[SEP]``.

Pairs are always ordered by descending training-KB frequency first. At
training time the units may then be shuffled, and each ``[K_i]`` may be
swapped for ``[SEP]`` with probability ``oov_drop_prob``.
"""

from __future__ import annotations

import enum
import re
import warnings
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable, Mapping, NamedTuple

import numpy as np

from .ingestion import rank_attributes
from .kb import Entity, KnowledgeBase, Mention

CLS, SEP, PAD, UNK, MASK = "[CLS]", "[SEP]", "[PAD]", "[UNK]", "[MASK]"
RESERVED_TOKENS = (PAD, UNK, CLS, SEP, MASK)
DEFAULT_CAPACITY = 100
DEFAULT_P_DROP = 0.3


class Mode(str, enum.Enum):
    CONCATENATION = "concatenation"
    SEP_SEPARATION = "sep_separation"
    ATTRIBUTE_SEPARATION = "attribute_separation"


def separator_token(name: str) -> str:
    core = "".join(ch for ch in name.upper() if ch.isalnum()) or "ATTR"
    return f"[K_{core}]"


@dataclass(frozen=True)
class SeparatorRegistry:
    """Ordered map attribute name -> reserved separator token, most frequent first."""

    entries: tuple[tuple[str, str], ...] = ()
    source_kb_id: str = ""
    capacity: int = DEFAULT_CAPACITY

    def __post_init__(self):
        tokens = [t for _, t in self.entries]
        if len(set(tokens)) != len(tokens):
            raise ValueError("separator tokens must be unique")
        if set(tokens) & set(RESERVED_TOKENS):
            raise ValueError("separator token collides with a reserved token")
        object.__setattr__(self, "_by_name", dict(self.entries))
        object.__setattr__(self, "_rank", {n: i for i, (n, _) in enumerate(self.entries)})

    def __len__(self) -> int:
        return len(self.entries)

    def __contains__(self, name: object) -> bool:
        return name in self._by_name  # type: ignore[attr-defined]

    def token_for(self, name: str) -> str | None:
        return self._by_name.get(name)  # type: ignore[attr-defined]

    def rank(self, name: str) -> int | None:
        return self._rank.get(name)  # type: ignore[attr-defined]

    @property
    def names(self) -> list[str]:
        return [n for n, _ in self.entries]

    @property
    def tokens(self) -> list[str]:
        return [t for _, t in self.entries]

    @classmethod
    def from_names(cls, names, source_kb_id: str = "", capacity: int = DEFAULT_CAPACITY) -> "SeparatorRegistry":
        used: set[str] = set(RESERVED_TOKENS)
        entries = []
        for name in names:
            token = separator_token(name)
            if token in used:
                stem, i = token[:-1], 2
                while f"{stem}_{i}]" in used:
                    i += 1
                token = f"{stem}_{i}]"
            used.add(token)
            entries.append((name, token))
        return cls(tuple(entries), source_kb_id, capacity)

    def save(self, path: str | Path) -> None:
        lines = [f"# source_kb_id={self.source_kb_id}\tcapacity={self.capacity}"]
        for rank, (name, token) in enumerate(self.entries, start=1):
            if "\t" in name or "\n" in name:
                raise ValueError(f"attribute name {name!r} cannot be stored in a TSV registry")
            lines.append(f"{rank}\t{name}\t{token}")
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "SeparatorRegistry":
        source, capacity = "", DEFAULT_CAPACITY
        rows = []
        for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
            if not line.strip():
                continue
            if line.startswith("#"):
                for field in line[1:].strip().split("\t"):
                    key, _, value = field.partition("=")
                    if key == "source_kb_id":
                        source = value
                    elif key == "capacity":
                        capacity = int(value)
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise ValueError(f"{path}:{lineno}: expected rank<TAB>name<TAB>token")
            rows.append((int(parts[0]), parts[1], parts[2]))
        rows.sort()
        if [r for r, _, _ in rows] != list(range(1, len(rows) + 1)):
            raise ValueError(f"{path}: ranks must run 1..{len(rows)}")
        return cls(tuple((n, t) for _, n, t in rows), source, capacity)


def build_registry(train_kb: KnowledgeBase | Mapping[str, int], capacity: int = DEFAULT_CAPACITY,
                   source_kb_id: str | None = None) -> SeparatorRegistry:
    """Separators for the ``capacity`` most frequent training attributes (ties lexicographic)."""
    if capacity < 1:
        raise ValueError(f"capacity must be >= 1, got {capacity}")
    if isinstance(train_kb, KnowledgeBase):
        counts, source = train_kb.attribute_counts, train_kb.kb_id
    else:
        counts, source = train_kb, ""
    names = rank_attributes(counts)[:capacity]
    return SeparatorRegistry.from_names(names, source_kb_id if source_kb_id is not None else source, capacity)


@dataclass(frozen=True)
class SerializationConfig:
    mode: Mode = Mode.ATTRIBUTE_SEPARATION
    shuffle: bool = False
    oov_drop_prob: float = 0.0
    max_tokens: int = 128
    rng_seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "mode", Mode(self.mode))
        if not 0.0 <= self.oov_drop_prob <= 1.0:
            raise ValueError(f"oov_drop_prob must lie in [0, 1], got {self.oov_drop_prob}")
        if self.max_tokens < 1:
            raise ValueError("max_tokens must be positive")

    @property
    def stochastic(self) -> bool:
        return self.shuffle or (self.oov_drop_prob > 0 and self.mode is Mode.ATTRIBUTE_SEPARATION)

    def for_inference(self) -> "SerializationConfig":
        return replace(self, shuffle=False, oov_drop_prob=0.0)


def order_attributes(entity: Entity, registry: SeparatorRegistry,
                     kb_counts: Mapping[str, int] | None = None):
    """Sort pairs by training-KB rank; unseen attributes follow, by their own KB count then name.

    The registry ranks are the training-KB frequency order. The sort is stable,
    so repeated attributes keep their load order.
    """
    kb_counts = kb_counts or {}
    n_seen = len(registry)

    def key(attr):
        rank = registry.rank(attr.name)
        if rank is not None:
            return (0, rank, 0, "")
        return (1, n_seen, -kb_counts.get(attr.name, 0), attr.name)

    return sorted(entity.attributes, key=key)


def _whitespace_len(text: str) -> int:
    return len(text.split())


def serialize_units(entity: Entity, registry: SeparatorRegistry, cfg: SerializationConfig,
                    rng: np.random.Generator | None = None,
                    kb_counts: Mapping[str, int] | None = None) -> list[tuple[str | None, str]]:
    """(separator, value) units in output order; separator is ``None`` in concatenation mode."""
    if cfg.stochastic and rng is None:
        raise ValueError("an rng is required when shuffle or oov_drop_prob is active")
    attrs = order_attributes(entity, registry, kb_counts)
    if cfg.shuffle and len(attrs) > 1:
        attrs = [attrs[i] for i in rng.permutation(len(attrs))]
    units: list[tuple[str | None, str]] = []
    for attr in attrs:
        if cfg.mode is Mode.CONCATENATION:
            sep = None
        elif cfg.mode is Mode.SEP_SEPARATION:
            sep = SEP
        else:
            sep = registry.token_for(attr.name)
            if sep is None:
                sep = SEP
            elif cfg.oov_drop_prob > 0 and rng.random() < cfg.oov_drop_prob:
                sep = SEP
        units.append((sep, attr.value.strip()))
    return units


def serialize_entity(entity: Entity, registry: SeparatorRegistry, cfg: SerializationConfig,
                     rng: np.random.Generator | None = None,
                     kb_counts: Mapping[str, int] | None = None,
                     token_len: Callable[[str], int] = _whitespace_len) -> str:
    """Flatten ``entity`` into one string, truncated to ``cfg.max_tokens``.

    Truncation keeps the longest prefix of whole (separator, value) units that
    fits; only if the first unit alone overflows is its value cut word-wise.
    ``token_len`` counts tokens in a piece of text (whitespace words by default).
    """
    units = serialize_units(entity, registry, cfg, rng, kb_counts)
    pieces: list[str] = []
    used = 0
    for sep, value in units:
        text = value if sep is None else (f"{sep} {value}" if value else sep)
        n = token_len(text)
        if used + n <= cfg.max_tokens:
            pieces.append(text)
            used += n
            continue
        if not pieces:
            words, kept = text.split(), []
            for w in words:
                if used + token_len(w) > cfg.max_tokens:
                    break
                kept.append(w)
                used += token_len(w)
            pieces.append(" ".join(kept))
        break
    return " ".join(p for p in pieces if p)


class MentionInput(NamedTuple):
    text: str
    span: tuple[int, int]  # [start, end) over text.split()


def serialize_mention(mention: Mention, max_tokens: int = 128,
                      token_len: Callable[[str], int] = lambda w: 1) -> MentionInput:
    """Render ``c_l m c_r`` within ``max_tokens`` keeping the mention whole.

    Context words are removed alternately from the far left and far right ends
    until the budget fits (one side continues alone once the other is empty).
    """
    if not mention.surface.strip():
        raise ValueError(f"mention {mention.mention_id} has an empty surface form")
    left = mention.left_context.split()
    surface = mention.surface.split()
    right = mention.right_context.split()

    surface_cost = sum(token_len(w) for w in surface)
    if surface_cost > max_tokens:
        warnings.warn(f"mention {mention.mention_id} exceeds {max_tokens} tokens; truncating its tail",
                      stacklevel=2)
        kept, used = [], 0
        for w in surface:
            if used + token_len(w) > max_tokens:
                break
            kept.append(w)
            used += token_len(w)
        surface, left, right = kept or surface[:1], [], []

    costs_l = [token_len(w) for w in left]
    costs_r = [token_len(w) for w in right]
    total = surface_cost + sum(costs_l) + sum(costs_r)
    lo, hi = 0, len(right)  # left[lo:], right[:hi]
    from_left = True
    while total > max_tokens and (lo < len(left) or hi > 0):
        if (from_left and lo < len(left)) or hi == 0:
            total -= costs_l[lo]
            lo += 1
        else:
            hi -= 1
            total -= costs_r[hi]
        from_left = not from_left
    left, right = left[lo:], right[:hi]
    words = left + surface + right
    return MentionInput(" ".join(words), (len(left), len(left) + len(surface)))


_UNIT_RE = re.compile(r"(\[SEP\]|\[K_[^\]\s]*\])")


def parse_units(text: str) -> list[tuple[str, str]]:
    """Inverse of separator rendering: ``"[K_A] x y [SEP] z"`` -> [("[K_A]", "x y"), ("[SEP]", "z")]."""
    parts = _UNIT_RE.split(text)
    out = []
    for i in range(1, len(parts), 2):
        out.append((parts[i], parts[i + 1].strip()))
    return out
