"""Reading and writing KB / mention JSONL files and the top-N attribute filter."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Mapping

from .errors import DataError, ParseError
from .kb import AttributeValue, Entity, KnowledgeBase, Mention

log = logging.getLogger(__name__)

SPLIT_NAMES = ("train", "validation", "test")


@dataclass(frozen=True)
class DatasetSplit:
    name: str
    mentions: tuple[Mention, ...]
    kb_id: str
    dropped_nil: int = 0
    source: str | None = field(default=None, compare=False)

    def __post_init__(self):
        if not isinstance(self.mentions, tuple):
            object.__setattr__(self, "mentions", tuple(self.mentions))
        bad = [m.mention_id for m in self.mentions if m.kb_id != self.kb_id]
        if bad:
            raise ValueError(f"mentions {bad[:3]} do not reference KB {self.kb_id!r}")

    def __len__(self) -> int:
        return len(self.mentions)

    def __iter__(self) -> Iterator[Mention]:
        return iter(self.mentions)

    @property
    def document_ids(self) -> list[str]:
        """Distinct document ids in first-appearance order."""
        return list(dict.fromkeys(m.document_id for m in self.mentions))

    def subset(self, mentions: Iterable[Mention], name: str | None = None) -> "DatasetSplit":
        return DatasetSplit(name or self.name, tuple(mentions), self.kb_id, 0, self.source)


def _iter_json_lines(path: Path) -> Iterator[tuple[int, dict]]:
    try:
        fh = path.open(encoding="utf-8")
    except FileNotFoundError:
        raise DataError(f"file not found: {path}") from None
    with fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(path, lineno, f"malformed JSON ({exc.msg})") from None
            if not isinstance(record, dict):
                raise ParseError(path, lineno, "expected a JSON object")
            yield lineno, record


def _require_str(record: dict, key: str, path: Path, lineno: int, allow_empty=False) -> str:
    if key not in record:
        raise ParseError(path, lineno, f'missing "{key}" field')
    value = record[key]
    if not isinstance(value, str) or (not allow_empty and not value):
        raise ParseError(path, lineno, f'"{key}" must be a {"" if allow_empty else "non-empty "}string')
    return value


def load_kb(path: str | Path, kb_id: str) -> KnowledgeBase:
    """Load a KB from JSONL: ``{"id": ..., "attributes": [{"name", "value"}, ...]}`` per line."""
    path = Path(path)
    entities: list[Entity] = []
    first_line: dict[str, int] = {}
    for lineno, record in _iter_json_lines(path):
        entity_id = _require_str(record, "id", path, lineno)
        attrs = record.get("attributes", [])
        if not isinstance(attrs, list):
            raise ParseError(path, lineno, '"attributes" must be a list')
        pairs = []
        for j, attr in enumerate(attrs):
            if not isinstance(attr, dict) or "name" not in attr or "value" not in attr:
                raise ParseError(path, lineno, f"attribute #{j} must be an object with name and value")
            value = attr["value"]
            if not isinstance(value, str):
                # richer value types are flattened to strings
                value = json.dumps(value, ensure_ascii=False) if not isinstance(value, (int, float)) else str(value)
            try:
                pairs.append(AttributeValue(str(attr["name"]), value))
            except ValueError as exc:
                raise ParseError(path, lineno, str(exc)) from None
        if entity_id in first_line:
            raise ParseError(path, lineno, f"duplicate entity id {entity_id!r} (first seen on line {first_line[entity_id]})")
        first_line[entity_id] = lineno
        entities.append(Entity(entity_id, tuple(pairs)))
    return KnowledgeBase(kb_id, tuple(entities))


def dump_kb(kb: KnowledgeBase, path: str | Path) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for e in kb.entities:
            record = {"id": e.entity_id, "attributes": [{"name": a.name, "value": a.value} for a in e.attributes]}
            fh.write(json.dumps(record, ensure_ascii=False) + "\n")


def rank_attributes(counts: Mapping[str, int]) -> list[str]:
    """Attribute names by descending count; ties broken lexicographically."""
    return sorted(counts, key=lambda name: (-counts[name], name))


def top_attributes(counts: Mapping[str, int], n: int) -> list[str]:
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    return rank_attributes(counts)[:n]


def filter_top_attributes(kb: KnowledgeBase, n: int) -> KnowledgeBase:
    """Keep only attributes whose name ranks in the top ``n`` of ``kb``'s own counts."""
    keep = set(top_attributes(kb.attribute_counts, n))
    if keep >= set(kb.attribute_counts):
        return kb
    entities = tuple(
        Entity(e.entity_id, tuple(a for a in e.attributes if a.name in keep)) for e in kb.entities
    )
    return KnowledgeBase(kb.kb_id, entities)


def load_mentions(path: str | Path, kb: KnowledgeBase, name: str = "test") -> DatasetSplit:
    """Load linkable mentions; those whose gold entity is not in ``kb`` are dropped and counted."""
    path = Path(path)
    mentions: list[Mention] = []
    dropped = 0
    seen: set[str] = set()
    for lineno, record in _iter_json_lines(path):
        mention_id = _require_str(record, "mention_id", path, lineno)
        document_id = _require_str(record, "document_id", path, lineno)
        surface = _require_str(record, "mention", path, lineno)
        left = _require_str(record, "left_context", path, lineno, allow_empty=True)
        right = _require_str(record, "right_context", path, lineno, allow_empty=True)
        gold = _require_str(record, "label_entity_id", path, lineno, allow_empty=True)
        if mention_id in seen:
            raise ParseError(path, lineno, f"duplicate mention id {mention_id!r}")
        seen.add(mention_id)
        if gold not in kb:
            dropped += 1
            continue
        mentions.append(Mention(mention_id, document_id, surface, left, right, gold, kb.kb_id))
    if dropped:
        log.info("%s: dropped %d mention(s) without a KB entity", path, dropped)
    return DatasetSplit(name, tuple(mentions), kb.kb_id, dropped, str(path))


def dump_mentions(mentions: Iterable[Mention], path: str | Path) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for m in mentions:
            record = {
                "mention_id": m.mention_id,
                "document_id": m.document_id,
                "mention": m.surface,
                "left_context": m.left_context,
                "right_context": m.right_context,
                "label_entity_id": m.gold_entity_id,
            }
            fh.write(json.dumps(record, ensure_ascii=False) + "\n")


def split_by_documents(split: DatasetSplit, fraction: float, seed: int,
                       names: tuple[str, str] = ("train", "validation")) -> tuple[DatasetSplit, DatasetSplit]:
    """Hold out ``fraction`` of documents (at least one if there are two or more)."""
    import numpy as np

    docs = split.document_ids
    n_held = int(round(fraction * len(docs)))
    if fraction > 0 and len(docs) > 1:
        n_held = min(max(n_held, 1), len(docs) - 1)
    rng = np.random.default_rng(seed)
    held = {docs[i] for i in rng.permutation(len(docs))[:n_held]}
    keep = [m for m in split.mentions if m.document_id not in held]
    out = [m for m in split.mentions if m.document_id in held]
    return split.subset(keep, names[0]), split.subset(out, names[1])
