"""End-to-end orchestration: ingest -> registry -> candgen -> index -> rerank -> (finetune) -> evaluate.

Every artifact lands under the experiment's output directory::

    data/            generated synthetic inputs (if any)
    registry.tsv     separator registry of the training KB(s)
    vocab.txt        tokenizer vocabulary
    candgen/         bi-encoder checkpoint
    index/           entity indexes, one per KB
    candidates/      top-K lists (TSV)
    rerank/seed_N/   reranker checkpoints
    finetune/        fine-tuned checkpoints per fraction and seed
    metrics/         JSONL training logs
    result.json
"""

from __future__ import annotations

import copy
import csv
import hashlib
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

from .config import ExperimentConfig
from .encoders import BiEncoder, CrossEncoder, augment_vocabulary, base_spec, save_checkpoint
from .errors import AnylinkError, DataError
from .evaluation import RESULT_FILE, ExperimentResult, check_provenance, evaluate, mean_std, retrieve_split
from .ingestion import DatasetSplit, filter_top_attributes, load_kb, load_mentions, split_by_documents
from .kb import CandidateList, KnowledgeBase
from .retrieval import EntityIndex
from .serialization import SeparatorRegistry, build_registry
from .synthetic import generate_synthetic
from .tokenizer import Tokenizer, build_vocab
from .training import (
    MixedDataset,
    hold_out_documents,
    n_documents_for,
    finetune,
    set_determinism,
    train_candgen,
    train_rerank,
)

log = logging.getLogger(__name__)


class StageError(AnylinkError):
    """Wraps a failure with the pipeline stage it happened in; keeps the cause's exit code."""

    def __init__(self, stage: str, cause: Exception):
        self.stage = stage
        self.cause = cause
        self.exit_code = getattr(cause, "exit_code", 1)
        super().__init__(f"stage {stage}: {cause}")


class _Stage:
    def __init__(self, name: str, progress: Callable[[str], None] | None):
        self.name, self.progress = name, progress

    def __enter__(self):
        if self.progress:
            self.progress(self.name)
        return self

    def __exit__(self, exc_type, exc, tb):
        if exc is not None and not isinstance(exc, StageError) and isinstance(exc, Exception):
            raise StageError(self.name, exc) from exc
        return False


@dataclass
class Inputs:
    train_kb: KnowledgeBase
    train: DatasetSplit
    validation: DatasetSplit
    test_kb: KnowledgeBase
    test: DatasetSplit
    target: DatasetSplit | None = None
    files: dict[str, Path] = field(default_factory=dict)


def file_digest(path: str | Path) -> str:
    h = hashlib.sha256()
    with Path(path).open("rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def load_inputs(cfg: ExperimentConfig, out: Path) -> Inputs:
    d = cfg.data
    target = None
    if cfg.synthetic is not None:
        synth = generate_synthetic(cfg.synthetic)
        files = synth.write(out / "data")
        train_kb, test_kb = synth.train_kb, synth.test_kb
        train_all, test, target = synth.train_split, synth.test_split, synth.target_split
    else:
        files = {k: cfg.path(getattr(d, k)) for k in ("train_kb", "train_mentions", "test_kb", "test_mentions")}
        for key, p in files.items():
            if not p.is_file():
                raise DataError(f"[data] {key}: file not found: {p}")
        train_kb = load_kb(files["train_kb"], d.train_kb_id)
        test_kb = load_kb(files["test_kb"], d.test_kb_id)
        train_all = load_mentions(files["train_mentions"], train_kb, "train")
        test = load_mentions(files["test_mentions"], test_kb, "test")
    if cfg.finetune_plan is not None and cfg.finetune_plan.target_mentions:
        p = cfg.path(cfg.finetune_plan.target_mentions)
        if not p.is_file():
            raise DataError(f"[train.finetune] target_mentions: file not found: {p}")
        files["target_mentions"] = p
        target = load_mentions(p, test_kb, "train")
    if d.top_attributes is not None:
        train_kb = filter_top_attributes(train_kb, d.top_attributes)
    if not train_all.mentions:
        raise DataError("training split has no linkable mentions")
    train, validation = split_by_documents(train_all, d.validation_fraction, d.validation_seed)
    return Inputs(train_kb, train, validation, test_kb, test, target, files)


def vocab_texts(inputs: Inputs, sources) -> list[str]:
    texts: list[str] = []
    for src in sources:
        if src in ("train_kb", "test_kb"):
            kb = inputs.train_kb if src == "train_kb" else inputs.test_kb
            texts.extend(f"{a.name} {a.value}" for e in kb.entities for a in e.attributes)
        elif src == "train_mentions":
            texts.extend(m.text for s in (inputs.train, inputs.validation) for m in s.mentions)
        elif src == "test_mentions":
            splits = [inputs.test] + ([inputs.target] if inputs.target is not None else [])
            texts.extend(m.text for s in splits for m in s.mentions)
    return texts


def make_tokenizer(cfg: ExperimentConfig, inputs: Inputs) -> Tokenizer:
    if cfg.encoder.vocab:
        return Tokenizer.load(cfg.path(cfg.encoder.vocab))
    return build_vocab(vocab_texts(inputs, cfg.encoder.vocab_sources))


def build_candgen(cfg: ExperimentConfig, tok: Tokenizer, registry: SeparatorRegistry, seed: int) -> BiEncoder:
    set_determinism(seed)
    model = BiEncoder(base_spec(tok, **cfg.encoder.spec_kwargs()), share_towers=cfg.encoder.share_towers)
    return augment_vocabulary(model, registry, seed)


def build_reranker(cfg: ExperimentConfig, tok: Tokenizer, registry: SeparatorRegistry, seed: int) -> CrossEncoder:
    set_determinism(seed)
    model = CrossEncoder(base_spec(tok, **cfg.rerank_encoder.spec_kwargs()))
    return augment_vocabulary(model, registry, seed)


def write_candidates(path: Path, cands: dict[str, CandidateList], gold: dict[str, str]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(["mention_id", "rank", "entity_id", "score", "is_gold"])
        for mid, cl in cands.items():
            for r, (eid, score) in enumerate(cl.candidates, 1):
                w.writerow([mid, r, eid, f"{score:.6g}", int(gold.get(mid) == eid)])


def write_predictions(path: Path, split: DatasetSplit, seeds, preds) -> None:
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(["seed", "mention_id", "gold_entity_id", "predicted_entity_id", "correct"])
        for seed, p in zip(seeds, preds):
            for m, pred in zip(split.mentions, p):
                w.writerow([seed, m.mention_id, m.gold_entity_id, pred or "", int(pred == m.gold_entity_id)])


@dataclass
class Prepared:
    """Loaded inputs plus the artifacts every later stage depends on."""

    cfg: ExperimentConfig
    out: Path
    inputs: Inputs
    registry: SeparatorRegistry
    tokenizer: Tokenizer

    @property
    def train_kbs(self) -> dict[str, KnowledgeBase]:
        return {self.inputs.train_kb.kb_id: self.inputs.train_kb}

    @property
    def data(self) -> MixedDataset:
        return MixedDataset([self.inputs.train], self.train_kbs, self.registry)

    @property
    def splits(self) -> list[tuple[DatasetSplit, KnowledgeBase]]:
        i = self.inputs
        out = [(i.train, i.train_kb), (i.validation, i.train_kb), (i.test, i.test_kb)]
        if i.target is not None:
            out.append((i.target, i.test_kb))
        return out


def prepare(cfg: ExperimentConfig, out: Path, tokenizer: Tokenizer | None = None) -> Prepared:
    """Ingest, provenance check, separator registry and vocabulary."""
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics").mkdir(exist_ok=True)
    inputs = load_inputs(cfg, out)
    if cfg.experiment.cross_kb:
        check_provenance(inputs.test_kb.kb_id, [inputs.train_kb.kb_id], cfg.experiment.schema_aware)
    registry = build_registry(inputs.train_kb, cfg.serialization.registry_capacity)
    registry.save(out / "registry.tsv")
    tok = tokenizer or make_tokenizer(cfg, inputs)
    tok.save(out / "vocab.txt")
    return Prepared(cfg, out, inputs, registry, tok)


def base_tokenizer(model, registry: SeparatorRegistry) -> Tokenizer:
    """The pre-augmentation tokenizer of a checkpointed model (separator rows stripped)."""
    seps = set(registry.tokens)
    return Tokenizer([t for t in model.spec.vocab if t not in seps])


def stage_candgen(prep: Prepared, seed: int | None = None) -> tuple[BiEncoder, str]:
    cfg = prep.cfg
    seed = cfg.experiment.seeds[0] if seed is None else seed
    candgen = build_candgen(cfg, prep.tokenizer, prep.registry, seed)
    train_candgen(prep.data, candgen, cfg.candgen, seed, cfg.serialization.for_candgen(),
                  val=(prep.inputs.validation, prep.inputs.train_kb), val_k=cfg.rerank.k,
                  metrics_path=prep.out / "metrics" / "candgen.jsonl")
    digest = save_checkpoint(candgen, prep.out / "candgen", prep.registry, {"stage": "candgen", "seed": seed})
    return candgen, digest


def stage_candidates(prep: Prepared, candgen: BiEncoder, digest: str,
                     indexes: dict[str, EntityIndex] | None = None) -> dict[str, CandidateList]:
    """Index every KB once and retrieve top-K lists for all splits; writes index files and a TSV."""
    cfg = prep.cfg
    k = max(cfg.rerank.k, cfg.finetune.k if cfg.finetune is not None else 1)
    (prep.out / "index").mkdir(exist_ok=True)
    indexes = dict(indexes or {})
    cands: dict[str, CandidateList] = {}
    gold = {}
    for split, kb in prep.splits:
        got, indexes[kb.kb_id] = retrieve_split(candgen, kb, split, prep.registry, cfg.serialization.for_candgen(),
                                                k, indexes.get(kb.kb_id), digest)
        cands.update(got)
        gold.update({m.mention_id: m.gold_entity_id for m in split.mentions})
    for kb_id, index in indexes.items():
        index.save(prep.out / "index" / f"{kb_id}.idx")
    write_candidates(prep.out / "candidates" / "candidates.tsv", cands, gold)
    return cands


def stage_rerank(prep: Prepared, cands: dict[str, CandidateList], seed: int) -> CrossEncoder:
    cfg = prep.cfg
    model = build_reranker(cfg, prep.tokenizer, prep.registry, seed)
    train_rerank(prep.data, model, cfg.rerank, seed, cfg.serialization.for_rerank(seed), cands,
                 val=(prep.inputs.validation.mentions, cands, prep.train_kbs),
                 metrics_path=prep.out / "metrics" / f"rerank_seed{seed}.jsonl")
    save_checkpoint(model, prep.out / "rerank" / f"seed_{seed}", prep.registry, {"stage": "rerank", "seed": seed})
    return model


def stage_evaluate(prep: Prepared, cands, rerankers, seeds, started: float | None = None) -> ExperimentResult:
    cfg = prep.cfg
    result, preds = evaluate(cands, rerankers, seeds, prep.inputs.test_kb, prep.inputs.test, prep.registry,
                             cfg.serialization.for_rerank(), cfg.rerank.k, prep.train_kbs,
                             cfg.experiment.schema_aware, cfg.digest(), cfg.experiment.name, started=started)
    write_predictions(prep.out / "predictions.tsv", prep.inputs.test, seeds, preds)
    return result


def finalize(prep: Prepared, result: ExperimentResult, t0: float, **extra) -> ExperimentResult:
    result.runtime_s = round(time.perf_counter() - t0, 3)
    result.extra.update({
        "config": prep.cfg.to_dict(),
        "inputs": {k: file_digest(p) for k, p in sorted(prep.inputs.files.items())},
        "registry_size": len(prep.registry),
        "vocab_size": len(prep.tokenizer),
        "counts": {"train": len(prep.inputs.train), "validation": len(prep.inputs.validation),
                   "test": len(prep.inputs.test)},
        **extra,
    })
    result.save(prep.out / RESULT_FILE)
    return result


def run_experiment(cfg: ExperimentConfig, out_dir: str | Path | None = None,
                   progress: Callable[[str], None] | None = None) -> ExperimentResult:
    """Run the whole pipeline; per-seed results are reproducible bit for bit in single-threaded mode."""
    t0 = time.perf_counter()
    out = Path(out_dir) if out_dir is not None else cfg.output_dir
    seeds = list(cfg.experiment.seeds)
    with _Stage("ingest", progress):
        prep = prepare(cfg, out)
    with _Stage("train-candgen", progress):
        candgen, digest = stage_candgen(prep)
    with _Stage("index", progress):
        cands = stage_candidates(prep, candgen, digest)
    rerankers = []
    for seed in seeds:
        with _Stage(f"train-rerank[seed={seed}]", progress):
            rerankers.append(stage_rerank(prep, cands, seed))
    with _Stage("evaluate", progress):
        result = stage_evaluate(prep, cands, rerankers, seeds, t0)
    if cfg.finetune is not None:
        with _Stage("finetune", progress):
            result.extra["finetune"] = run_finetune(prep, rerankers, seeds, cands, result)
    return finalize(prep, result, t0, candgen_digest=digest)


def run_finetune(prep: Prepared, rerankers, seeds, cands, base: ExperimentResult,
                 fractions: Sequence[float] | None = None) -> dict:
    """Test accuracy per fine-tuning fraction; fraction 0 is the un-finetuned reranker."""
    cfg, inputs = prep.cfg, prep.inputs
    if inputs.target is None:
        raise DataError("fine-tuning requested but no target-KB training mentions are configured")
    plan = cfg.finetune_plan
    pool, held = hold_out_documents(inputs.target, plan.held_out_documents, plan.held_out_seed)
    ser = cfg.serialization
    table: dict = {"0": {"accuracy": list(base.accuracy), "documents": 0}}
    for fraction in (plan.fractions if fractions is None else fractions):
        models = []
        for seed, model in zip(seeds, rerankers):
            ft = copy.deepcopy(model)
            finetune(ft, inputs.target, inputs.test_kb, fraction, cfg.finetune, seed, ser.for_rerank(seed),
                     cands, prep.registry, held,
                     metrics_path=prep.out / "metrics" / f"finetune_{fraction:g}_seed{seed}.jsonl")
            save_checkpoint(ft, prep.out / "finetune" / f"f{fraction:g}" / f"seed_{seed}", prep.registry,
                            {"stage": "finetune", "seed": seed, "fraction": fraction})
            models.append(ft)
        r, _ = evaluate(cands, models, seeds, inputs.test_kb, inputs.test, prep.registry, ser.for_rerank(),
                        cfg.finetune.k, prep.train_kbs, schema_aware=True)
        table[f"{fraction:g}"] = {"accuracy": r.accuracy, "documents": n_documents_for(fraction, len(pool))}
    for row in table.values():
        row["mean"], row["std"] = mean_std(row["accuracy"])
    return {"fractions": table, "held_out_documents": len(held), "pool_documents": len(pool)}
