"""Training loops for the bi-encoder candidate generator and the cross-encoder reranker.

Also holds multi-dataset mixing and document-level fractional fine-tuning.
"""

from __future__ import annotations

import copy
import functools
import json
import logging
import math
import time
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .encoders import (
    BiEncoder,
    Batch,
    CrossEncoder,
    entity_sequence,
    mention_pieces,
    mention_sequence,
    pair_sequence,
    save_checkpoint,
)
from .errors import TrainingDivergence
from .ingestion import DatasetSplit
from .kb import CandidateList, KnowledgeBase, Mention
from .retrieval import EntityIndex, build_index, recall_at_k, retrieve_mentions
from .serialization import DEFAULT_CAPACITY, SeparatorRegistry, SerializationConfig, build_registry, serialize_entity

log = logging.getLogger(__name__)

STAGES = ("candgen", "rerank", "finetune")
SCHEDULES = ("linear", "constant")
FINETUNE_FRACTIONS = (0.01, 0.05, 0.1, 0.25, 0.5, 0.75, 1.0)


@dataclass(frozen=True)
class TrainConfig:
    stage: str = "candgen"
    epochs: int = 200
    batch_size: int = 256
    peak_lr: float = 2e-5
    warmup_fraction: float = 0.1  # of the first epoch
    lr_schedule: str = "linear"  # linear warmup then linear decay, or constant
    negatives_per_example: int | None = None  # candgen; None = all other in-batch golds
    k: int = 32
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    max_tokens: int = 128
    weight_decay: float = 0.01
    grad_clip: float | None = 1.0
    eval_every: int = 1

    def __post_init__(self):
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        if self.stage not in STAGES:
            raise ValueError(f"stage must be one of {STAGES}")
        if self.lr_schedule not in SCHEDULES:
            raise ValueError(f"lr_schedule must be one of {SCHEDULES}")
        if self.epochs < 0 or self.batch_size < 1 or self.k < 1:
            raise ValueError("epochs must be >= 0, batch_size and k >= 1")

    @classmethod
    def defaults(cls, stage: str, **overrides) -> "TrainConfig":
        base = {
            "candgen": dict(epochs=200, batch_size=256, peak_lr=2e-5),
            "rerank": dict(epochs=4, batch_size=2, peak_lr=2e-5, k=32),
            "finetune": dict(epochs=4, batch_size=2, peak_lr=2e-6, lr_schedule="constant", k=32),
        }[stage]
        return cls(stage=stage, **{**base, **overrides})


def warmup_steps_for(cfg: TrainConfig, steps_per_epoch: int) -> int:
    if cfg.lr_schedule == "constant":
        return 0
    return max(1, int(math.ceil(cfg.warmup_fraction * steps_per_epoch)))


def lr_at(step: int, total_steps: int, peak: float, warmup: int, schedule: str = "linear") -> float:
    """Learning rate for 0-based ``step``: 0 at step 0, ``peak`` at ``warmup``, 0 at the last step."""
    if schedule == "constant":
        return peak
    if step < warmup:
        return peak * step / warmup
    last = total_steps - 1
    if last <= warmup:
        return peak
    return peak * max(0.0, (last - step) / (last - warmup))


def set_determinism(seed: int, single_threaded: bool = True) -> None:
    torch.manual_seed(seed)
    if single_threaded:
        torch.set_num_threads(1)
    torch.use_deterministic_algorithms(True)


def _flush_denormals(fn):
    # late in a decaying schedule Adam's moments go subnormal and CPU kernels
    # slow down several-fold; flushing them is deterministic, but the flag is
    # process-wide, so it is cleared again on the way out
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        torch.set_flush_denormal(True)
        try:
            return fn(*args, **kwargs)
        finally:
            torch.set_flush_denormal(False)
    return wrapper


def make_optimizer(model: torch.nn.Module, cfg: TrainConfig) -> torch.optim.Optimizer:
    decay, no_decay = [], []
    for name, p in model.named_parameters():
        if not p.requires_grad:
            continue
        (no_decay if p.ndim < 2 or "norm" in name or "emb" in name else decay).append(p)
    groups = [{"params": decay, "weight_decay": cfg.weight_decay}, {"params": no_decay, "weight_decay": 0.0}]
    return torch.optim.AdamW([g for g in groups if g["params"]], lr=cfg.peak_lr)


# --------------------------------------------------------------------------- datasets

@dataclass
class MixedDataset:
    """Mentions from one or more (split, KB) pairs; each mention resolves against its own KB."""

    splits: list[DatasetSplit]
    kbs: dict[str, KnowledgeBase]
    registry: SeparatorRegistry

    @property
    def mentions(self) -> list[Mention]:
        return [m for s in self.splits for m in s.mentions]

    def __len__(self) -> int:
        return sum(len(s) for s in self.splits)

    def kb_of(self, mention: Mention) -> KnowledgeBase:
        return self.kbs[mention.kb_id]

    @property
    def kb_ids(self) -> list[str]:
        return list(self.kbs)


def pooled_counts(kbs: Iterable[KnowledgeBase]) -> dict[str, int]:
    total: Counter[str] = Counter()
    for kb in kbs:
        total.update(kb.attribute_counts)
    return dict(total)


def mix_datasets(components: Sequence[tuple[DatasetSplit, KnowledgeBase]],
                 capacity: int = DEFAULT_CAPACITY) -> MixedDataset:
    """Stack training sets; the registry is the top-``capacity`` of pooled attribute counts."""
    if not components:
        raise ValueError("need at least one component")
    kbs: dict[str, KnowledgeBase] = {}
    owner: dict[str, str] = {}
    for split, kb in components:
        if split.kb_id != kb.kb_id:
            raise ValueError(f"split {split.name} references {split.kb_id}, not {kb.kb_id}")
        kbs[kb.kb_id] = kb
        # candidate lists and predictions are keyed by mention id
        for m in split.mentions:
            if owner.setdefault(m.mention_id, kb.kb_id) != kb.kb_id:
                raise ValueError(f"mention id {m.mention_id!r} occurs in both {owner[m.mention_id]} and {kb.kb_id}; "
                                 "mixed datasets need distinct mention ids")
    counts = pooled_counts(kbs.values())
    registry = build_registry(counts, capacity, source_kb_id="+".join(kbs))
    return MixedDataset([s for s, _ in components], kbs, registry)


def as_dataset(data, kb: KnowledgeBase | None = None, registry: SeparatorRegistry | None = None) -> MixedDataset:
    if isinstance(data, MixedDataset):
        return data
    if kb is None:
        raise ValueError("a KB is required with a plain split")
    return MixedDataset([data], {kb.kb_id: kb}, registry if registry is not None else build_registry(kb))


# --------------------------------------------------------------------------- logging

@dataclass
class EpochRecord:
    stage: str
    epoch: int
    loss: float
    val_metric: float | None
    lr: float
    seed: int
    wall_time_s: float

    def to_json(self) -> str:
        return json.dumps(self.__dict__, sort_keys=True)


@dataclass
class TrainResult:
    model: torch.nn.Module
    history: list[EpochRecord] = field(default_factory=list)
    best_epoch: int | None = None
    best_metric: float | None = None

    @property
    def final_loss(self) -> float | None:
        return self.history[-1].loss if self.history else None


class MetricsLog:
    def __init__(self, path: str | Path | None):
        self.path = Path(path) if path else None
        if self.path:
            self.path.parent.mkdir(parents=True, exist_ok=True)

    def write(self, record: EpochRecord) -> None:
        if self.path:
            with self.path.open("a", encoding="utf-8") as fh:
                fh.write(record.to_json() + "\n")


def _check_finite(loss: torch.Tensor, stage: str, epoch: int, step: int) -> None:
    if not torch.isfinite(loss):
        raise TrainingDivergence(f"{stage}: non-finite loss {loss.item()} at epoch {epoch}, step {step}")


class _EntityText:
    """Per-encounter entity strings: fresh shuffle/OOV draws when training, cached at inference."""

    def __init__(self, data: MixedDataset, cfg: SerializationConfig, token_len):
        self.data, self.cfg, self.token_len = data, cfg, token_len
        self._cache: dict[tuple[str, str], str] = {}

    def __call__(self, kb: KnowledgeBase, entity_id: str, rng) -> str:
        if not self.cfg.stochastic:
            key = (kb.kb_id, entity_id)
            if key not in self._cache:
                self._cache[key] = serialize_entity(kb[entity_id], self.data.registry, self.cfg, None,
                                                    kb.attribute_counts, self.token_len)
            return self._cache[key]
        return serialize_entity(kb[entity_id], self.data.registry, self.cfg, rng, kb.attribute_counts,
                                self.token_len)


# --------------------------------------------------------------------------- candidate generation

def candgen_recall(model: BiEncoder, split: DatasetSplit, kb: KnowledgeBase, registry: SeparatorRegistry,
                   ser_cfg: SerializationConfig, k: int) -> float:
    index = build_index(kb, model, registry, ser_cfg.for_inference())
    cands = retrieve_mentions(model, split.mentions, index, k, ser_cfg.max_tokens)
    return recall_at_k(cands, {m.mention_id: m.gold_entity_id for m in split.mentions})


@_flush_denormals
def train_candgen(data, model: BiEncoder, cfg: TrainConfig, seed: int, ser_cfg: SerializationConfig,
                  kb: KnowledgeBase | None = None, val: tuple[DatasetSplit, KnowledgeBase] | None = None,
                  val_k: int = 1, out_dir: str | Path | None = None, metrics_path: str | Path | None = None,
                  on_epoch: Callable[[EpochRecord], None] | None = None) -> TrainResult:
    """Fit both towers with cross-entropy over dot products against in-batch gold entities.

    Other mentions' gold entities in the batch act as negatives; columns that
    hold the same entity as the row's gold are masked out.
    """
    data = as_dataset(data, kb)
    mentions = data.mentions
    if not mentions:
        raise ValueError("training split is empty")
    set_determinism(seed)
    rng = np.random.default_rng(seed)
    tok = model.spec.tokenizer()
    texts = _EntityText(data, ser_cfg, tok.word_len)
    msgs = [mention_sequence(tok, m, ser_cfg.max_tokens) for m in mentions]
    steps_per_epoch = math.ceil(len(mentions) / cfg.batch_size)
    total = steps_per_epoch * cfg.epochs
    warmup = warmup_steps_for(cfg, steps_per_epoch)
    opt = make_optimizer(model, cfg)
    mlog = MetricsLog(metrics_path)
    result = TrainResult(model)
    best_state = None
    step = 0
    t0 = time.perf_counter()
    for epoch in range(cfg.epochs):
        model.train()
        order = rng.permutation(len(mentions))
        losses = []
        lr = 0.0
        for b in range(steps_per_epoch):
            idx = order[b * cfg.batch_size:(b + 1) * cfg.batch_size]
            batch_m = [mentions[i] for i in idx]
            golds = [(m.kb_id, m.gold_entity_id) for m in batch_m]
            uniq = list(dict.fromkeys(golds))
            col = {g: j for j, g in enumerate(uniq)}
            ent_seqs = [entity_sequence(tok, texts(data.kbs[g[0]], g[1], rng), ser_cfg.max_tokens) for g in uniq]
            mv = model.encode_mentions(Batch.from_sequences([msgs[i] for i in idx], tok.pad_id))
            ev = model.encode_entities(Batch.from_sequences(ent_seqs, tok.pad_id))
            logits = mv @ ev.T
            target = torch.tensor([col[g] for g in golds])
            if cfg.negatives_per_example is not None and cfg.negatives_per_example < len(uniq) - 1:
                keep = torch.zeros_like(logits, dtype=torch.bool)
                for r, t in enumerate(target.tolist()):
                    others = [j for j in range(len(uniq)) if j != t]
                    pick = rng.choice(len(others), size=cfg.negatives_per_example, replace=False)
                    keep[r, t] = True
                    keep[r, [others[p] for p in pick]] = True
                logits = logits.masked_fill(~keep, torch.finfo(logits.dtype).min)
            loss = F.cross_entropy(logits, target)
            _check_finite(loss, "candgen", epoch, step)
            lr = lr_at(step, total, cfg.peak_lr, warmup, cfg.lr_schedule)
            for g in opt.param_groups:
                g["lr"] = lr
            opt.zero_grad()
            loss.backward()
            if cfg.grad_clip:
                torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
            opt.step()
            losses.append(loss.item())
            step += 1
        val_metric = None
        if val is not None and ((epoch + 1) % cfg.eval_every == 0 or epoch + 1 == cfg.epochs):
            model.eval()
            vsplit, vkb = val
            val_metric = candgen_recall(model, vsplit, vkb, data.registry, ser_cfg, val_k)
            if result.best_metric is None or val_metric > result.best_metric:
                result.best_metric, result.best_epoch = val_metric, epoch
                best_state = copy.deepcopy(model.state_dict())
                if out_dir:
                    save_checkpoint(model, Path(out_dir) / "best", data.registry, {"epoch": epoch, "stage": "candgen"})
        rec = EpochRecord("candgen", epoch, float(np.mean(losses)), val_metric, lr, seed,
                          round(time.perf_counter() - t0, 3))
        result.history.append(rec)
        mlog.write(rec)
        if on_epoch:
            on_epoch(rec)
    if best_state is not None:
        model.load_state_dict(best_state)
    model.eval()
    return result


# --------------------------------------------------------------------------- reranking

def precompute_candidates(candgen: BiEncoder, data: MixedDataset, registry: SeparatorRegistry,
                          ser_cfg: SerializationConfig, k: int,
                          indexes: dict[str, EntityIndex] | None = None) -> dict[str, CandidateList]:
    """Top-``k`` lists from a fixed candidate generator, per mention, against each mention's own KB."""
    out: dict[str, CandidateList] = {}
    indexes = dict(indexes or {})
    for split in data.splits:
        kb = data.kbs[split.kb_id]
        if kb.kb_id not in indexes:
            indexes[kb.kb_id] = build_index(kb, candgen, registry, ser_cfg.for_inference())
        for cl in retrieve_mentions(candgen, split.mentions, indexes[kb.kb_id], k, ser_cfg.max_tokens):
            out[cl.mention_id] = cl
    return out


def training_candidates(cands: CandidateList, gold: str) -> list[str]:
    """Candidate ids for a training example, with the gold swapped in for the last entry if missed."""
    ids = cands.entity_ids
    if gold in ids:
        return ids
    if not ids:
        return [gold]
    return ids[:-1] + [gold]


def pair_batch(tok, mention_ids_span, entity_texts: Sequence[str], max_tokens: int, max_positions: int) -> Batch:
    men, span = mention_ids_span
    seqs = [pair_sequence(tok, men, span, t, max_tokens, max_positions) for t in entity_texts]
    return Batch.from_sequences(seqs, tok.pad_id)


def rerank_scores(model: CrossEncoder, mention: Mention, entity_texts: Sequence[str], max_tokens: int = 128,
                  tok=None) -> np.ndarray:
    tok = tok or model.spec.tokenizer()
    mp = mention_pieces(tok, mention, max_tokens)
    with torch.no_grad():
        return model(pair_batch(tok, mp, entity_texts, max_tokens, model.spec.max_positions)).double().numpy()


def rerank_accuracy(model: CrossEncoder, mentions: Sequence[Mention], cands: dict[str, CandidateList],
                    kbs: dict[str, KnowledgeBase], registry: SeparatorRegistry, ser_cfg: SerializationConfig) -> tuple[float, list[str | None]]:
    """Accuracy of argmax reranking; a mention whose gold is not retrieved counts as an error."""
    from .encoders import pick_best

    model.eval()
    tok = model.spec.tokenizer()
    cfg = ser_cfg.for_inference()
    cache: dict[tuple[str, str], str] = {}
    correct = 0
    preds: list[str | None] = []
    for m in mentions:
        ids = cands[m.mention_id].entity_ids
        if not ids:
            preds.append(None)
            continue
        kb = kbs[m.kb_id]
        texts = []
        for eid in ids:
            key = (kb.kb_id, eid)
            if key not in cache:
                cache[key] = serialize_entity(kb[eid], registry, cfg, None, kb.attribute_counts, tok.word_len)
            texts.append(cache[key])
        scores = rerank_scores(model, m, texts, cfg.max_tokens, tok)
        pred = pick_best(list(scores), ids)
        preds.append(pred)
        correct += pred == m.gold_entity_id
    return (correct / len(mentions) if mentions else 0.0), preds


def rerank_loss(scores: torch.Tensor, sizes: Sequence[int], targets: Sequence[int]) -> torch.Tensor:
    """Mean cross-entropy over per-mention candidate groups laid out back to back in ``scores``."""
    loss = torch.zeros((), dtype=scores.dtype)
    offset = 0
    for n, t in zip(sizes, targets):
        loss = loss - F.log_softmax(scores[offset:offset + n], dim=0)[t]
        offset += n
    return loss / len(sizes)


@_flush_denormals
def train_rerank(data, model: CrossEncoder, cfg: TrainConfig, seed: int, ser_cfg: SerializationConfig,
                 candidates: dict[str, CandidateList], kb: KnowledgeBase | None = None,
                 val: tuple[Sequence[Mention], dict[str, CandidateList], dict[str, KnowledgeBase]] | None = None,
                 out_dir: str | Path | None = None, metrics_path: str | Path | None = None,
                 stage: str = "rerank", on_epoch: Callable[[EpochRecord], None] | None = None) -> TrainResult:
    """Cross-entropy over the K candidate scores, gold as target.

    ``candidates`` are precomputed once from a fixed candidate generator. If the
    gold was not retrieved it replaces the lowest-ranked candidate (training only).
    """
    data = as_dataset(data, kb)
    mentions = data.mentions
    if not mentions:
        raise ValueError("training split is empty")
    set_determinism(seed)
    rng = np.random.default_rng(seed)
    tok = model.spec.tokenizer()
    texts = _EntityText(data, ser_cfg, tok.word_len)
    mps = [mention_pieces(tok, m, ser_cfg.max_tokens) for m in mentions]
    cand_ids = [training_candidates(candidates[m.mention_id], m.gold_entity_id)[: cfg.k] for m in mentions]
    for m, ids in zip(mentions, cand_ids):
        if m.gold_entity_id not in ids:
            ids[-1] = m.gold_entity_id
    steps_per_epoch = math.ceil(len(mentions) / cfg.batch_size)
    total = steps_per_epoch * cfg.epochs
    warmup = warmup_steps_for(cfg, steps_per_epoch)
    opt = make_optimizer(model, cfg)
    mlog = MetricsLog(metrics_path)
    result = TrainResult(model)
    best_state = None
    step = 0
    t0 = time.perf_counter()
    for epoch in range(cfg.epochs):
        model.train()
        order = rng.permutation(len(mentions))
        losses = []
        lr = 0.0
        for b in range(steps_per_epoch):
            idx = order[b * cfg.batch_size:(b + 1) * cfg.batch_size]
            seqs, sizes, targets = [], [], []
            for i in idx:
                m = mentions[i]
                kb_m = data.kbs[m.kb_id]
                men, span = mps[i]
                for eid in cand_ids[i]:
                    seqs.append(pair_sequence(tok, men, span, texts(kb_m, eid, rng), ser_cfg.max_tokens,
                                              model.spec.max_positions))
                sizes.append(len(cand_ids[i]))
                targets.append(cand_ids[i].index(m.gold_entity_id))
            loss = rerank_loss(model(Batch.from_sequences(seqs, tok.pad_id)), sizes, targets)
            _check_finite(loss, stage, epoch, step)
            lr = lr_at(step, total, cfg.peak_lr, warmup, cfg.lr_schedule)
            for g in opt.param_groups:
                g["lr"] = lr
            opt.zero_grad()
            loss.backward()
            if cfg.grad_clip:
                torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
            opt.step()
            losses.append(loss.item())
            step += 1
        val_metric = None
        if val is not None and ((epoch + 1) % cfg.eval_every == 0 or epoch + 1 == cfg.epochs):
            vm, vc, vkbs = val
            val_metric, _ = rerank_accuracy(model, vm, vc, vkbs, data.registry, ser_cfg)
            if result.best_metric is None or val_metric > result.best_metric:
                result.best_metric, result.best_epoch = val_metric, epoch
                best_state = copy.deepcopy(model.state_dict())
                if out_dir:
                    save_checkpoint(model, Path(out_dir) / "best", data.registry, {"epoch": epoch, "stage": stage})
        rec = EpochRecord(stage, epoch, float(np.mean(losses)), val_metric, lr, seed,
                          round(time.perf_counter() - t0, 3))
        result.history.append(rec)
        mlog.write(rec)
        if on_epoch:
            on_epoch(rec)
    if best_state is not None:
        model.load_state_dict(best_state)
    model.eval()
    return result


# --------------------------------------------------------------------------- fine-tuning

def n_documents_for(fraction: float, n_docs: int) -> int:
    if not 0 < fraction <= 1:
        raise ValueError(f"fraction must lie in (0, 1], got {fraction}")
    return int(math.floor(round(fraction * n_docs, 9) + 0.5))


def hold_out_documents(split: DatasetSplit, n_held: int, seed: int = 0) -> tuple[list[str], list[str]]:
    """(pool, held-out) document ids; the held-out draw depends only on ``seed``."""
    docs = split.document_ids
    n_held = min(n_held, max(0, len(docs) - 1))
    perm = np.random.default_rng(seed).permutation(len(docs))
    held = sorted(docs[i] for i in perm[:n_held])
    held_set = set(held)
    return [d for d in docs if d not in held_set], held


def sample_documents(doc_ids: Sequence[str], fraction: float, seed: int) -> list[str]:
    """Documents drawn without replacement so that ``fraction`` of them are kept."""
    n = n_documents_for(fraction, len(doc_ids))
    if n == 0:
        raise ValueError(f"fraction {fraction} of {len(doc_ids)} documents selects no documents")
    perm = np.random.default_rng(seed).permutation(len(doc_ids))
    chosen = set(perm[:n].tolist())
    return [d for i, d in enumerate(doc_ids) if i in chosen]


def finetune(model: CrossEncoder, target: DatasetSplit, kb: KnowledgeBase, fraction: float, cfg: TrainConfig,
             seed: int, ser_cfg: SerializationConfig, candidates: dict[str, CandidateList],
             registry: SeparatorRegistry, held_out: Sequence[str] = (), metrics_path=None,
             out_dir=None) -> TrainResult:
    """Continue reranker training on a document-level sample of ``target`` (constant LR by default)."""
    held = set(held_out)
    pool = [d for d in target.document_ids if d not in held]
    chosen = set(sample_documents(pool, fraction, seed))
    subset = target.subset([m for m in target.mentions if m.document_id in chosen], "finetune")
    val = None
    if held:
        val_m = [m for m in target.mentions if m.document_id in held]
        val = (val_m, candidates, {kb.kb_id: kb})
    data = MixedDataset([subset], {kb.kb_id: kb}, registry)
    return train_rerank(data, model, cfg, seed, ser_cfg, candidates, val=val, stage="finetune",
                        metrics_path=metrics_path, out_dir=out_dir)
