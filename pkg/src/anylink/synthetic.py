"""Synthetic train/test KB pairs with controllable schema overlap.

Both KBs draw values from one shared pseudo-word pool, so only the schema
differs across them. Attribute frequencies are Zipf-like with shared
attributes at the head of both schemas.

Some entities are look-alike siblings of an earlier entity:

* shift sibling: the token stream of two adjacent values is unchanged but
  the boundary between them moves (``"x y" | "z"`` -> ``"x" | "y z"``);
* rename sibling: one attribute's value is kept but filed under another
  attribute name.

Mention contexts cite one to three ``name value`` phrases of the gold entity,
plus distractor words drawn from other entities. Citations are chosen so that
the phrase-overlap scorer :func:`overlap_scores` ranks the gold entity strictly
first.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .ingestion import DatasetSplit, dump_kb, dump_mentions
from .kb import AttributeValue, Entity, KnowledgeBase, Mention

_CONSONANTS = "bcdfghjklmnprstvz"
_VOWELS = "aeiou"


@dataclass(frozen=True)
class SyntheticSpec:
    num_entities: int = 200
    attributes_per_entity: tuple[int, int] = (3, 5)
    schema_size: int = 10
    schema_overlap: float = 0.3
    mentions_per_entity: int = 2
    seed: int = 0
    test_num_entities: int | None = None
    test_mentions_per_entity: int | None = None
    target_mentions_per_entity: int = 0  # labelled test-KB mentions for fine-tuning
    value_vocab: int = 150
    value_words: tuple[int, int] = (1, 3)
    sibling_rate: float = 0.5
    max_siblings: int = 2
    distractors: tuple[int, int] = (1, 3)
    mentions_per_document: int = 4
    zipf_exponent: float = 1.0
    train_kb_id: str = "synth-train"
    test_kb_id: str = "synth-test"
    mention_prefix: str = ""  # prepended to mention and document ids, for mixing generated sets

    def __post_init__(self):
        object.__setattr__(self, "attributes_per_entity", tuple(self.attributes_per_entity))
        object.__setattr__(self, "value_words", tuple(self.value_words))
        object.__setattr__(self, "distractors", tuple(self.distractors))

    @property
    def n_shared(self) -> int:
        return int(round(self.schema_overlap * self.schema_size))

    def validate(self) -> None:
        lo, hi = self.attributes_per_entity
        problems = []
        if self.num_entities < 1 or (self.test_num_entities is not None and self.test_num_entities < 1):
            problems.append("num_entities must be positive")
        if self.schema_size < 1:
            problems.append("schema_size must be positive")
        if not 0.0 <= self.schema_overlap <= 1.0:
            problems.append("schema_overlap must lie in [0, 1]")
        elif abs(self.schema_overlap * self.schema_size - self.n_shared) > 1e-6:
            problems.append(f"schema_overlap*schema_size = {self.schema_overlap * self.schema_size} is not an integer")
        if not 0 <= lo <= hi:
            problems.append("attributes_per_entity must be an increasing non-negative range")
        if hi > self.schema_size:
            problems.append(f"attributes_per_entity max {hi} exceeds schema_size {self.schema_size}")
        if self.mentions_per_entity < 0 or self.target_mentions_per_entity < 0:
            problems.append("mentions_per_entity must be non-negative")
        if self.mentions_per_entity > 0 and hi < 1:
            problems.append("mentions need at least one attribute per entity")
        if not 1 <= self.value_words[0] <= self.value_words[1]:
            problems.append("value_words must be a positive range")
        if self.value_vocab < 10:
            problems.append("value_vocab must be at least 10")
        if self.seed < 0:
            problems.append("seed must be unsigned")
        if problems:
            raise ValueError("infeasible synthetic spec: " + "; ".join(problems))


@dataclass(frozen=True)
class SyntheticData:
    train_kb: KnowledgeBase
    test_kb: KnowledgeBase
    train_split: DatasetSplit
    test_split: DatasetSplit
    target_split: DatasetSplit | None = None

    FILES = ("train_kb.jsonl", "test_kb.jsonl", "train_mentions.jsonl", "test_mentions.jsonl")
    TARGET_FILE = "target_mentions.jsonl"

    def write(self, out_dir: str | Path) -> dict[str, Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        paths = {name: out / name for name in self.FILES}
        dump_kb(self.train_kb, paths["train_kb.jsonl"])
        dump_kb(self.test_kb, paths["test_kb.jsonl"])
        dump_mentions(self.train_split.mentions, paths["train_mentions.jsonl"])
        dump_mentions(self.test_split.mentions, paths["test_mentions.jsonl"])
        if self.target_split is not None:
            paths[self.TARGET_FILE] = out / self.TARGET_FILE
            dump_mentions(self.target_split.mentions, paths[self.TARGET_FILE])
        return paths


def _pseudo_words(rng: np.random.Generator, n: int, taken: set[str], syllables=(2, 3)) -> list[str]:
    words: list[str] = []
    while len(words) < n:
        k = int(rng.integers(syllables[0], syllables[1] + 1))
        w = "".join(_CONSONANTS[rng.integers(len(_CONSONANTS))] + _VOWELS[rng.integers(len(_VOWELS))]
                    for _ in range(k))
        if w not in taken:
            taken.add(w)
            words.append(w)
    return words


def overlap_scores(text: str, entities) -> list[int]:
    """Brute-force phrase overlap: sum of (1 + |value|) over pairs whose ``name value`` occurs in ``text``."""
    padded = f" {' '.join(text.split())} "
    scores = []
    for e in entities:
        s = 0
        for a in e.attributes:
            if f" {a.name} {' '.join(a.value.split())} " in padded:
                s += 1 + len(a.value.split())
        scores.append(s)
    return scores


class _KBBuilder:
    def __init__(self, spec: SyntheticSpec, rng, kb_id: str, schema: list[str], values: list[str],
                 n_entities: int):
        self.spec, self.rng, self.kb_id = spec, rng, kb_id
        self.schema = schema
        self.values = values
        ranks = np.arange(1, len(schema) + 1, dtype=float)
        w = ranks ** -spec.zipf_exponent
        self.weights = w / w.sum()
        self.rank = {k: i for i, k in enumerate(schema)}
        self.n_entities = n_entities
        self.entities: list[list[tuple[str, str]]] = []
        self.family: list[int] = []

    def _value(self) -> str:
        lo, hi = self.spec.value_words
        n = int(self.rng.integers(lo, hi + 1))
        return " ".join(self.values[i] for i in self.rng.integers(len(self.values), size=n))

    def _fresh(self) -> list[tuple[str, str]]:
        lo, hi = self.spec.attributes_per_entity
        n = int(self.rng.integers(lo, hi + 1))
        idx = self.rng.choice(len(self.schema), size=n, replace=False, p=self.weights)
        names = sorted((self.schema[i] for i in idx), key=self.rank.get)
        return [(k, self._value()) for k in names]

    def _shift(self, pairs):
        """Move one boundary between two rank-adjacent attributes."""
        options = []
        for i in range(len(pairs) - 1):
            a, b = pairs[i][1].split(), pairs[i + 1][1].split()
            if len(a) > 1:
                options.append((i, "left"))
            if len(b) > 1:
                options.append((i, "right"))
        if not options:
            return None
        i, way = options[int(self.rng.integers(len(options)))]
        a, b = pairs[i][1].split(), pairs[i + 1][1].split()
        if way == "left":
            a, b = a[:-1], a[-1:] + b
        else:
            a, b = a + b[:1], b[1:]
        out = list(pairs)
        out[i] = (pairs[i][0], " ".join(a))
        out[i + 1] = (pairs[i + 1][0], " ".join(b))
        return out

    def _rename(self, pairs):
        present = {k for k, _ in pairs}
        free = [k for k in self.schema if k not in present]
        if not free or not pairs:
            return None
        i = int(self.rng.integers(len(pairs)))
        p = np.array([self.weights[self.rank[k]] for k in free])
        new = free[int(self.rng.choice(len(free), p=p / p.sum()))]
        out = list(pairs)
        out[i] = (new, pairs[i][1])
        return sorted(out, key=lambda kv: self.rank[kv[0]])

    def build(self) -> list[Entity]:
        bases: list[int] = []  # entities that may still receive a sibling
        n_sib: dict[int, int] = {}
        while len(self.entities) < self.n_entities:
            sibling = None
            if bases and self.rng.random() < self.spec.sibling_rate:
                base = bases[int(self.rng.integers(len(bases)))]
                n_sib[base] = n_sib.get(base, 0) + 1
                if n_sib[base] >= self.spec.max_siblings:
                    bases.remove(base)
                op = self._shift if self.rng.random() < 0.5 else self._rename
                sibling = op(self.entities[base]) or (self._rename if op is self._shift else self._shift)(self.entities[base])
                if sibling is not None and sibling in self.entities:
                    sibling = None
            if sibling is not None:
                self.family.append(self.family[base])
                self.entities.append(sibling)
            else:
                self.family.append(len(self.entities))
                bases.append(len(self.entities))
                self.entities.append(self._fresh())
        width = max(4, len(str(self.n_entities)))
        return [
            Entity(f"{self.kb_id}:E{i:0{width}d}", tuple(AttributeValue(k, v) for k, v in pairs))
            for i, pairs in enumerate(self.entities)
        ]


def _make_mentions(spec: SyntheticSpec, rng, kb: KnowledgeBase, family: list[int],
                   per_entity: int, prefix: str) -> list[Mention]:
    entities = list(kb.entities)
    members: dict[int, list[int]] = {}
    for i, f in enumerate(family):
        members.setdefault(f, []).append(i)
    all_words = [w for e in entities for a in e.attributes for w in a.value.split()]
    mentions: list[Mention] = []
    order: list[tuple[int, int]] = [(i, j) for i in range(len(entities)) for j in range(per_entity)]
    order = [order[i] for i in rng.permutation(len(order))]
    for n, (ei, _) in enumerate(order):
        e = entities[ei]
        pairs = [(a.name, a.value) for a in e.attributes]
        if not pairs:
            continue
        others = [entities[o] for o in members[family[ei]] if o != ei]
        for attempt in range(50):
            cited = _choose_citations(rng, pairs, others, attempt)
            left, surface, right = _render_context(rng, spec, cited, all_words)
            text = " ".join(x for x in (left, surface, right) if x)
            scores = overlap_scores(text, entities)
            best = max(scores)
            if scores[ei] == best and scores.count(best) == 1:
                break
        else:  # pragma: no cover - vanishingly unlikely with pseudo-word vocabularies
            raise RuntimeError(f"could not build a solvable context for {e.entity_id}")
        doc = n // max(1, spec.mentions_per_document)
        tag = spec.mention_prefix + prefix
        mentions.append(Mention(f"{tag}-M{n:05d}", f"{tag}-D{doc:04d}", surface, left, right,
                                e.entity_id, kb.kb_id))
    return mentions


def _choose_citations(rng, pairs, others, attempt):
    target = int(rng.integers(1, min(3, len(pairs)) + 1))
    cited: list[int] = []
    for o in others:
        o_pairs = {(a.name, a.value) for a in o.attributes}
        if any(pairs[c] not in o_pairs for c in cited):
            continue
        distinct = [i for i, p in enumerate(pairs) if p not in o_pairs]
        cited.append(distinct[int(rng.integers(len(distinct)))])
    rest = [i for i in range(len(pairs)) if i not in cited]
    rest = [rest[i] for i in rng.permutation(len(rest))]
    extra = attempt // 10  # widen the citation set if rejection keeps failing
    while len(cited) < target + extra and rest:
        cited.append(rest.pop())
    cited = [cited[i] for i in rng.permutation(len(cited))]
    return [pairs[i] for i in cited]


def _render_context(rng, spec, cited, all_words):
    lo, hi = spec.distractors

    def noise():
        n = int(rng.integers(lo, hi + 1))
        return [all_words[i] for i in rng.integers(len(all_words), size=n)]

    (head_name, surface), rest = cited[0], cited[1:]
    left_phrases, right_phrases = [], []
    for name, value in rest:
        (left_phrases if rng.random() < 0.5 else right_phrases).append(f"{name} {value}")
    left = noise() + [w for p in left_phrases for w in (p.split() + noise()[:1])] + [head_name]
    right = noise()[:1] + [w for p in right_phrases for w in (p.split() + noise()[:1])] + noise()
    return " ".join(left), surface, " ".join(right)


def generate_synthetic(spec: SyntheticSpec) -> SyntheticData:
    """Deterministic (train KB, test KB, train mentions, test mentions) under ``spec.seed``."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    taken: set[str] = set()
    values = _pseudo_words(rng, spec.value_vocab, taken)
    n_shared = spec.n_shared
    names = _pseudo_words(rng, 2 * spec.schema_size - n_shared, taken, syllables=(3, 3))
    shared = names[:n_shared]
    train_only = names[n_shared:spec.schema_size]
    test_only = names[spec.schema_size:]
    train_schema = shared + train_only
    test_schema = shared + test_only

    train_b = _KBBuilder(spec, rng, spec.train_kb_id, train_schema, values, spec.num_entities)
    train_kb = KnowledgeBase.from_entities(spec.train_kb_id, train_b.build())
    test_b = _KBBuilder(spec, rng, spec.test_kb_id, test_schema, values,
                        spec.test_num_entities or spec.num_entities)
    test_kb = KnowledgeBase.from_entities(spec.test_kb_id, test_b.build())

    train_m = _make_mentions(spec, rng, train_kb, train_b.family, spec.mentions_per_entity, "trn")
    test_per = spec.test_mentions_per_entity if spec.test_mentions_per_entity is not None else spec.mentions_per_entity
    test_m = _make_mentions(spec, rng, test_kb, test_b.family, test_per, "tst")
    target = None
    if spec.target_mentions_per_entity:
        target_m = _make_mentions(spec, rng, test_kb, test_b.family, spec.target_mentions_per_entity, "tgt")
        target = DatasetSplit("train", tuple(target_m), test_kb.kb_id)
    return SyntheticData(
        train_kb, test_kb,
        DatasetSplit("train", tuple(train_m), train_kb.kb_id),
        DatasetSplit("test", tuple(test_m), test_kb.kb_id),
        target,
    )


def spec_to_dict(spec: SyntheticSpec) -> dict:
    d = asdict(spec)
    for k in ("attributes_per_entity", "value_words", "distractors"):
        d[k] = list(d[k])
    return d
