"""Cross-KB evaluation: retrieve with a fixed candidate generator, rerank, aggregate over seeds."""

from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

from .encoders import BiEncoder, CrossEncoder
from .errors import CheckpointMismatch, ProvenanceError
from .ingestion import DatasetSplit
from .kb import CandidateList, KnowledgeBase
from .retrieval import EntityIndex, build_index, recall_at_k, retrieve_mentions
from .serialization import SeparatorRegistry, SerializationConfig
from .training import rerank_accuracy

RESULT_FILE = "result.json"


def mean_std(values: Sequence[float]) -> tuple[float | None, float | None]:
    """Mean and sample standard deviation (ddof=1); std is None below two values."""
    vals = [float(v) for v in values]
    if not vals:
        return None, None
    mean = math.fsum(vals) / len(vals)
    if len(vals) < 2:
        return mean, None
    var = math.fsum((v - mean) ** 2 for v in vals) / (len(vals) - 1)
    return mean, math.sqrt(var)


@dataclass
class ExperimentResult:
    config_digest: str
    seeds: list[int]
    accuracy: list[float]
    recall_at_k: list[float]
    k: int
    dropped_nil_count: int = 0
    runtime_s: float = 0.0
    label: str = ""
    mean: float | None = field(default=None)
    std: float | None = field(default=None)
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.accuracy) != len(self.seeds) or len(self.recall_at_k) != len(self.seeds):
            raise ValueError("per-seed lists must align with seeds")
        self.mean, self.std = mean_std(self.accuracy)

    @property
    def recall_mean(self) -> float | None:
        return mean_std(self.recall_at_k)[0]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["recall_mean"] = self.recall_mean
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentResult":
        keys = ("config_digest", "seeds", "accuracy", "recall_at_k", "k", "dropped_nil_count", "runtime_s",
                "label", "extra")
        return cls(**{k: d[k] for k in keys if k in d})

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "ExperimentResult":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def check_provenance(test_kb_id: str, training_kb_ids: Iterable[str], schema_aware: bool = False) -> None:
    """A cross-KB evaluation must not have seen the test KB in training (unless marked schema-aware)."""
    seen = set(training_kb_ids)
    if test_kb_id in seen and not schema_aware:
        raise ProvenanceError(
            f"test KB {test_kb_id!r} appears among training KBs {sorted(seen)}; "
            "mark the run schema-aware to allow this")


def retrieve_split(candgen: BiEncoder, kb: KnowledgeBase, split: DatasetSplit, registry: SeparatorRegistry,
                   cfg: SerializationConfig, k: int, index: EntityIndex | None = None,
                   digest: str = "") -> tuple[dict[str, CandidateList], EntityIndex]:
    if index is None:
        index = build_index(kb, candgen, registry, cfg.for_inference(), digest)
    elif index.kb_id != kb.kb_id:
        raise CheckpointMismatch(f"index built for KB {index.kb_id!r}, not {kb.kb_id!r}")
    elif digest and index.checkpoint_digest != digest:
        raise CheckpointMismatch("index was built from a different candidate-generator checkpoint")
    lists = retrieve_mentions(candgen, split.mentions, index, k, cfg.max_tokens)
    return {cl.mention_id: cl for cl in lists}, index


def evaluate(candidates: dict[str, CandidateList], rerankers: Sequence[CrossEncoder], seeds: Sequence[int],
             test_kb: KnowledgeBase, test_split: DatasetSplit, registry: SeparatorRegistry,
             ser_cfg: SerializationConfig, k: int, training_kb_ids: Iterable[str] = (),
             schema_aware: bool = False, config_digest: str = "", label: str = "",
             started: float | None = None) -> tuple[ExperimentResult, list[list[str | None]]]:
    """Accuracy of each reranker on ``test_split``; a gold missing from the top-``k`` counts as an error.

    Returns the result and per-seed predictions (aligned with ``test_split.mentions``).
    """
    t0 = time.perf_counter() if started is None else started
    check_provenance(test_kb.kb_id, training_kb_ids, schema_aware)
    if len(rerankers) != len(seeds):
        raise ValueError("one reranker per seed is required")
    missing = [m.mention_id for m in test_split.mentions if m.mention_id not in candidates]
    if missing:
        raise ValueError(f"no candidates for mentions {missing[:3]}")
    topk = {mid: CandidateList(cl.mention_id, cl.candidates[:k]) for mid, cl in candidates.items()}
    gold = {m.mention_id: m.gold_entity_id for m in test_split.mentions}
    recall = recall_at_k([topk[m.mention_id] for m in test_split.mentions], gold)
    kbs = {test_kb.kb_id: test_kb}
    accs, preds = [], []
    for model in rerankers:
        acc, p = rerank_accuracy(model, test_split.mentions, topk, kbs, registry, ser_cfg)
        accs.append(acc)
        preds.append(p)
    result = ExperimentResult(config_digest, [int(s) for s in seeds], accs, [recall] * len(seeds), k,
                              test_split.dropped_nil, round(time.perf_counter() - t0, 3), label)
    return result, preds
