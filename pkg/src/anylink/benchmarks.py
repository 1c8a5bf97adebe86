"""Shipped synthetic benchmarks.

``crossschema``  reranker serialization arms on an unseen-schema test KB, one shared candidate generator
``finetune``     the full arm of ``crossschema`` fine-tuned on document samples of the target KB
``overfit``      20-entity sanity task: both stages must fit their training data
``mixing``       two training datasets with disjoint schemas stacked into one run
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path
from typing import Callable, Mapping, Sequence

from .config import ExperimentConfig, apply_overrides, config_from_sections, read_sections
from .encoders import save_checkpoint
from .evaluation import ExperimentResult, mean_std
from .ingestion import rank_attributes
from .kb import CandidateList
from .pipeline import (
    Prepared,
    build_candgen,
    build_reranker,
    prepare,
    run_finetune,
    stage_candgen,
    stage_candidates,
    stage_evaluate,
    stage_rerank,
)
from .report import report_results, write_tsv
from .retrieval import recall_at_k
from .serialization import Mode, SerializationConfig
from .synthetic import SyntheticSpec, generate_synthetic
from .tokenizer import build_vocab
from .training import (
    TrainConfig,
    candgen_recall,
    mix_datasets,
    pooled_counts,
    precompute_candidates,
    rerank_accuracy,
    train_candgen,
    train_rerank,
    training_candidates,
)

FULL_ARM = "attribute_separation+oov+shuffle"
ARMS: dict[str, dict] = {
    "concatenation": {"mode": "concatenation", "shuffle": False, "oov_drop_prob": 0.0},
    "sep_separation": {"mode": "sep_separation", "shuffle": False, "oov_drop_prob": 0.0},
    FULL_ARM: {"mode": "attribute_separation", "shuffle": True, "oov_drop_prob": 0.3},
}
# the wider ablation grid, for runs that can afford it
ABLATION_ARMS: dict[str, dict] = {
    **ARMS,
    "attribute_separation": {"mode": "attribute_separation", "shuffle": False, "oov_drop_prob": 0.0},
    "attribute_separation+oov": {"mode": "attribute_separation", "shuffle": False, "oov_drop_prob": 0.3},
    "attribute_separation+shuffle": {"mode": "attribute_separation", "shuffle": True, "oov_drop_prob": 0.0},
}


def packaged_config_text(name: str) -> str:
    return resources.files("anylink").joinpath("data", f"{name}.cfg").read_text(encoding="utf-8")


def packaged_config(name: str, overrides: Mapping[tuple[str, str], str] | None = None,
                    force: Mapping[tuple[str, str], str] | None = None) -> ExperimentConfig:
    """A shipped config; ``overrides`` fill unset keys, ``force`` replaces keys outright."""
    sections = read_sections(packaged_config_text(name), f"<anylink:{name}.cfg>")
    apply_overrides(sections, dict(overrides or {}))
    for (section, key), value in (force or {}).items():
        sections.setdefault(section, {})[key] = value
    return config_from_sections(sections, f"{name}.cfg")


def with_serialization(cfg: ExperimentConfig, arm: Mapping, label: str) -> ExperimentConfig:
    ser = replace(cfg.serialization, **arm)
    Mode(ser.mode)
    return replace(cfg, serialization=ser, experiment=replace(cfg.experiment, name=label))


@dataclass
class BenchmarkOutcome:
    name: str
    results: dict[str, ExperimentResult]
    runtime_s: float
    metrics: dict = field(default_factory=dict)
    files: dict[str, Path] = field(default_factory=dict)

    def summary(self) -> str:
        lines = [f"benchmark {self.name}: {self.runtime_s:.1f}s"]
        for label, r in self.results.items():
            std = "n/a" if r.std is None else f"{100 * r.std:.1f}"
            lines.append(f"  {label:36s} accuracy {100 * r.mean:5.1f} +- {std:>4s}  {['%.3f' % a for a in r.accuracy]}")
        for k, v in self.metrics.items():
            if not isinstance(v, (dict, list)):
                lines.append(f"  {k}: {v}")
        return "\n".join(lines)

    def to_dict(self) -> dict:
        return {"name": self.name, "runtime_s": self.runtime_s, "metrics": self.metrics,
                "results": {k: r.to_dict() for k, r in self.results.items()}}


def run_arms(cfg: ExperimentConfig, arms: Mapping[str, Mapping], out: Path,
             progress: Callable[[str], None] | None = None) -> tuple[Prepared, dict, dict[str, ExperimentResult], dict]:
    """Shared ingest, candidate generator and candidate lists; one set of seeded rerankers per arm."""
    t0 = time.perf_counter()
    say = progress or (lambda s: None)
    say("ingest")
    prep = prepare(cfg, out)
    say("train-candgen")
    candgen, digest = stage_candgen(prep)
    say("index")
    cands = stage_candidates(prep, candgen, digest)
    shared_s = time.perf_counter() - t0
    results: dict[str, ExperimentResult] = {}
    models: dict[str, list] = {}
    seeds = list(cfg.experiment.seeds)
    for label, arm in arms.items():
        t_arm = time.perf_counter()
        arm_cfg = with_serialization(cfg, arm, label)
        arm_out = out / "arms" / label
        (arm_out / "metrics").mkdir(parents=True, exist_ok=True)
        arm_prep = replace(prep, cfg=arm_cfg, out=arm_out)
        models[label] = []
        for seed in seeds:
            say(f"train-rerank[{label}, seed={seed}]")
            models[label].append(stage_rerank(arm_prep, cands, seed))
        result = stage_evaluate(arm_prep, cands, models[label], seeds, t_arm)
        result.extra["serialization"] = dict(arm)
        result.save(arm_out / "result.json")
        results[label] = result
    test = prep.inputs.test
    gold = {m.mention_id: m.gold_entity_id for m in test.mentions}
    info = {
        "shared_stage_s": round(shared_s, 3),
        "candgen_digest": digest,
        "test_recall@1": recall_at_k([cands[m.mention_id] for m in test.mentions], gold, 1),
        f"test_recall@{cfg.rerank.k}": recall_at_k([cands[m.mention_id] for m in test.mentions], gold, cfg.rerank.k),
    }
    return prep, cands, results, {"models": models, **info}


def crossschema(out: Path, seeds: Sequence[int] | None = None, progress=None, finetune: bool = False,
                arms: Mapping[str, Mapping] = ARMS, config: ExperimentConfig | None = None) -> BenchmarkOutcome:
    t0 = time.perf_counter()
    out = Path(out)
    cfg = config or packaged_config("crossschema")
    if seeds:
        cfg = replace(cfg, experiment=replace(cfg.experiment, seeds=tuple(int(s) for s in seeds)))
    prep, cands, results, info = run_arms(cfg, arms, out, progress)
    models = info.pop("models")
    arms_s = time.perf_counter() - t0
    metrics = {**info, "arms_runtime_s": round(arms_s, 3)}
    if finetune:
        if progress:
            progress("finetune")
        t_ft = time.perf_counter()
        full = FULL_ARM if FULL_ARM in results else next(iter(results))
        arm_prep = replace(prep, cfg=with_serialization(cfg, arms[full], full), out=out / "arms" / full)
        table = run_finetune(arm_prep, models[full], list(cfg.experiment.seeds), cands, results[full])
        results[full].extra["finetune"] = table
        metrics["finetune"] = table
        metrics["finetune_runtime_s"] = round(time.perf_counter() - t_ft, 3)
    outcome = BenchmarkOutcome("crossschema", results, round(time.perf_counter() - t0, 3), metrics)
    outcome.files = report_results(list(results.values()), out / "report", "crossschema",
                                   "cross-schema transfer (synthetic)")
    (out / "benchmark.json").write_text(json.dumps(outcome.to_dict(), indent=2, sort_keys=True) + "\n")
    outcome.files["json"] = out / "benchmark.json"
    return outcome


def finetune_benchmark(out: Path, seeds=None, progress=None) -> BenchmarkOutcome:
    return crossschema(out, seeds, progress, finetune=True, arms={FULL_ARM: ARMS[FULL_ARM]})


def overfit(out: Path, seeds: Sequence[int] | None = None, progress=None) -> BenchmarkOutcome:
    """Train recall@1 of the candidate generator and train accuracy of the reranker on 20 entities."""
    t0 = time.perf_counter()
    out = Path(out)
    cfg = packaged_config("overfit")
    if seeds:
        cfg = replace(cfg, experiment=replace(cfg.experiment, seeds=tuple(int(s) for s in seeds)))
    say = progress or (lambda s: None)
    say("ingest")
    prep = prepare(cfg, out)
    say("train-candgen")
    candgen, digest = stage_candgen(prep)
    train = prep.inputs.train
    cg_recall = candgen_recall(candgen, train, prep.inputs.train_kb, prep.registry,
                               cfg.serialization.for_candgen(), 1)
    cands = stage_candidates(prep, candgen, digest)
    accs = []
    for seed in cfg.experiment.seeds:
        say(f"train-rerank[seed={seed}]")
        model = stage_rerank(prep, cands, seed)
        # training candidates carry the injected gold, as in training
        train_lists = {m.mention_id: CandidateList(m.mention_id, tuple(
            (e, 0.0) for e in training_candidates(cands[m.mention_id], m.gold_entity_id)[: cfg.rerank.k]))
            for m in train.mentions}
        acc, _ = rerank_accuracy(model, train.mentions, train_lists, prep.train_kbs, prep.registry,
                                 cfg.serialization.for_rerank())
        accs.append(acc)
    runtime = round(time.perf_counter() - t0, 3)
    metrics = {"candgen_train_recall@1": cg_recall, "rerank_train_accuracy": accs,
               "rerank_train_accuracy_min": min(accs), "n_train_mentions": len(train)}
    path = write_tsv(out / "overfit.tsv", ["metric", "value"],
                     [["candgen_train_recall@1", cg_recall]] + [[f"rerank_train_accuracy_seed{s}", a]
                                                                  for s, a in zip(cfg.experiment.seeds, accs)]
                     + [["runtime_s", runtime]])
    return BenchmarkOutcome("overfit", {}, runtime, metrics, {"table": path})


def mixing(out: Path, seeds: Sequence[int] | None = None, progress=None) -> BenchmarkOutcome:
    """Two synthetic training sets with disjoint 60-attribute schemas, trained as one dataset."""
    t0 = time.perf_counter()
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    seed = int(seeds[0]) if seeds else 0
    base = dict(num_entities=80, schema_size=60, schema_overlap=0.0, attributes_per_entity=(3, 6),
                mentions_per_entity=1, zipf_exponent=0.5, value_vocab=300)
    a = generate_synthetic(SyntheticSpec(seed=seed, train_kb_id="mix-a", test_kb_id="mix-a-test",
                                         mention_prefix="a-", **base))
    b = generate_synthetic(SyntheticSpec(seed=seed + 1, train_kb_id="mix-b", test_kb_id="mix-b-test",
                                         mention_prefix="b-", **base))
    mixed = mix_datasets([(a.train_split, a.train_kb), (b.train_split, b.train_kb)])
    counts = pooled_counts([a.train_kb, b.train_kb])
    brute = sorted(counts, key=lambda n: (-counts[n], n))[:100]
    texts = [m.text for m in mixed.mentions] + [f"{x.name} {x.value}" for kb in mixed.kbs.values()
                                                 for e in kb.entities for x in e.attributes]
    tok = build_vocab(texts)
    cfg = packaged_config("crossschema")
    say = progress or (lambda s: None)
    say("train-candgen[mixed]")
    candgen = build_candgen(cfg, tok, mixed.registry, seed)
    ser = SerializationConfig("attribute_separation", True, 0.3)
    cg_cfg = TrainConfig.defaults("candgen", epochs=2, batch_size=16, peak_lr=1e-3)
    train_candgen(mixed, candgen, cg_cfg, seed, ser.for_inference())
    cands = precompute_candidates(candgen, mixed, mixed.registry, ser.for_inference(), 4)
    say("train-rerank[mixed]")
    reranker = build_reranker(cfg, tok, mixed.registry, seed)
    rr = train_rerank(mixed, reranker, TrainConfig.defaults("rerank", epochs=1, batch_size=4, peak_lr=1e-3, k=4),
                      seed, ser, cands)
    save_checkpoint(reranker, out / "rerank", mixed.registry, {"stage": "rerank", "mixed": mixed.kb_ids})
    overlap = set(a.train_kb.attribute_counts) & set(b.train_kb.attribute_counts)
    metrics = {
        "examples": len(mixed),
        "schema_overlap": len(overlap),
        "registry_size": len(mixed.registry),
        "registry_matches_bruteforce": mixed.registry.names == brute,
        "registry_ranked": mixed.registry.names == rank_attributes(counts)[:100],
        "rerank_loss": rr.final_loss,
    }
    mixed.registry.save(out / "registry.tsv")
    path = write_tsv(out / "mixing.tsv", ["metric", "value"], [[k, v] for k, v in metrics.items()])
    return BenchmarkOutcome("mixing", {}, round(time.perf_counter() - t0, 3), metrics,
                            {"table": path, "registry": out / "registry.tsv"})


BENCHMARKS: dict[str, Callable[..., BenchmarkOutcome]] = {
    "crossschema": crossschema,
    "finetune": finetune_benchmark,
    "overfit": overfit,
    "mixing": mixing,
}


def improvement(results: Mapping[str, ExperimentResult], a: str, b: str) -> float:
    """Difference of mean accuracies, in points."""
    return 100 * (results[a].mean - results[b].mean)


def fraction_means(table: Mapping) -> list[tuple[float, float, float | None]]:
    rows = []
    for f, v in table["fractions"].items():
        m, s = mean_std(v["accuracy"])
        rows.append((float(f), m, s))
    return sorted(rows)
