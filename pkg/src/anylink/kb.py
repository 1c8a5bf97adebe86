"""Core domain types: entities as ordered attribute-value pairs, KBs, mentions."""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Mapping


@dataclass(frozen=True)
class AttributeValue:
    name: str
    value: str

    def __post_init__(self):
        if not isinstance(self.name, str) or not self.name.strip():
            raise ValueError(f"attribute name must be a non-empty string, got {self.name!r}")
        if not isinstance(self.value, str):
            raise TypeError(f"attribute value must be a string, got {type(self.value).__name__}")
        # serialized entities are single-line token streams
        flat = self.value.replace("\r\n", " ").replace("\n", " ").replace("\r", " ")
        if flat != self.value:
            object.__setattr__(self, "value", flat)


@dataclass(frozen=True)
class Entity:
    entity_id: str
    attributes: tuple[AttributeValue, ...] = ()

    def __post_init__(self):
        if not isinstance(self.attributes, tuple):
            object.__setattr__(self, "attributes", tuple(self.attributes))

    @classmethod
    def from_pairs(cls, entity_id: str, pairs: Iterable[tuple[str, str]]) -> "Entity":
        return cls(entity_id, tuple(AttributeValue(k, v) for k, v in pairs))

    def pairs(self) -> list[tuple[str, str]]:
        return [(a.name, a.value) for a in self.attributes]


def count_attributes(entities: Iterable[Entity]) -> dict[str, int]:
    """Occurrences of each attribute name, counting repeats within an entity."""
    counts: Counter[str] = Counter()
    for entity in entities:
        counts.update(a.name for a in entity.attributes)
    return dict(counts)


@dataclass(frozen=True, eq=True)
class KnowledgeBase:
    """Entity collection plus the attribute frequency table that defines its schema.

    ``entities`` keeps load order. Construction does not enforce invariants so
    that :func:`validate_kb` can report on malformed KBs; use
    :meth:`from_entities` for a checked build.
    """

    kb_id: str
    entities: tuple[Entity, ...] = ()
    attribute_counts: Mapping[str, int] = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        if not isinstance(self.entities, tuple):
            object.__setattr__(self, "entities", tuple(self.entities))
        if self.attribute_counts is None:
            object.__setattr__(self, "attribute_counts", count_attributes(self.entities))
        else:
            object.__setattr__(self, "attribute_counts", dict(self.attribute_counts))
        object.__setattr__(self, "_index", {e.entity_id: e for e in self.entities})

    @classmethod
    def from_entities(cls, kb_id: str, entities: Iterable[Entity]) -> "KnowledgeBase":
        entities = tuple(entities)
        seen: set[str] = set()
        for e in entities:
            if e.entity_id in seen:
                raise ValueError(f"duplicate entity_id {e.entity_id!r} in KB {kb_id!r}")
            seen.add(e.entity_id)
        return cls(kb_id, entities)

    def __len__(self) -> int:
        return len(self.entities)

    def __contains__(self, entity_id: object) -> bool:
        return entity_id in self._index  # type: ignore[attr-defined]

    def __getitem__(self, entity_id: str) -> Entity:
        return self._index[entity_id]  # type: ignore[attr-defined]

    def get(self, entity_id: str) -> Entity | None:
        return self._index.get(entity_id)  # type: ignore[attr-defined]

    @property
    def entity_ids(self) -> list[str]:
        return [e.entity_id for e in self.entities]

    @property
    def schema(self) -> set[str]:
        return set(self.attribute_counts)


@dataclass(frozen=True)
class Mention:
    mention_id: str
    document_id: str
    surface: str
    left_context: str
    right_context: str
    gold_entity_id: str
    kb_id: str

    @property
    def text(self) -> str:
        return " ".join(p for p in (self.left_context, self.surface, self.right_context) if p)


@dataclass(frozen=True)
class CandidateList:
    mention_id: str
    candidates: tuple[tuple[str, float], ...]

    @property
    def entity_ids(self) -> list[str]:
        return [eid for eid, _ in self.candidates]

    @property
    def scores(self) -> list[float]:
        return [s for _, s in self.candidates]

    def __len__(self) -> int:
        return len(self.candidates)

    def __contains__(self, entity_id: object) -> bool:
        return any(eid == entity_id for eid, _ in self.candidates)

    def rank_of(self, entity_id: str) -> int | None:
        for i, (eid, _) in enumerate(self.candidates):
            if eid == entity_id:
                return i
        return None


@dataclass(frozen=True)
class Violation:
    rule: str
    entity_id: str | None
    detail: str

    def __str__(self) -> str:
        where = f" [{self.entity_id}]" if self.entity_id is not None else ""
        return f"{self.rule}{where}: {self.detail}"


def validate_kb(kb: KnowledgeBase) -> list[Violation]:
    """Report every invariant violation in ``kb``; an empty list means valid."""
    violations: list[Violation] = []
    seen: set[str] = set()
    reported: set[str] = set()
    for e in kb.entities:
        if not isinstance(e.entity_id, str) or not e.entity_id:
            violations.append(Violation("empty-id", e.entity_id, "entity_id must be a non-empty string"))
        if e.entity_id in seen and e.entity_id not in reported:
            violations.append(Violation("duplicate-id", e.entity_id, "entity_id occurs more than once"))
            reported.add(e.entity_id)
        seen.add(e.entity_id)

    actual = count_attributes(kb.entities)
    for name in sorted(set(actual) | set(kb.attribute_counts)):
        stored = kb.attribute_counts.get(name, 0)
        if stored != actual.get(name, 0):
            violations.append(
                Violation(
                    "count-mismatch", None,
                    f"attribute {name!r}: attribute_counts says {stored}, entities contain {actual.get(name, 0)}",
                )
            )
    return violations


def validate_candidates(cands: CandidateList, k: int | None = None) -> list[Violation]:
    violations = []
    ids = cands.entity_ids
    if len(set(ids)) != len(ids):
        violations.append(Violation("duplicate-candidate", None, f"mention {cands.mention_id}"))
    scores = cands.scores
    if any(b > a for a, b in zip(scores, scores[1:])):
        violations.append(Violation("not-descending", None, f"mention {cands.mention_id}"))
    if k is not None and len(ids) > k:
        violations.append(Violation("too-long", None, f"{len(ids)} > {k}"))
    return violations
