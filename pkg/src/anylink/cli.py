"""Command-line interface: ``anylink <verb> ...``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 training divergence.
Config keys can be supplied with ``--set section.key=value``; a key the
config file already sets keeps the file's value and a warning is printed.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

from . import __version__
from .errors import AnylinkError, ConfigError, DataError

log = logging.getLogger("anylink")


def _add_config(p: argparse.ArgumentParser, required: bool = True) -> None:
    p.add_argument("--config", "-c", required=required, help="experiment config (.cfg)")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE",
                   help="config key; ignored with a warning when the file sets it")
    p.add_argument("--seeds", help="shorthand for --set experiment.seeds=...")
    p.add_argument("--output-dir", help="shorthand for --set experiment.output_dir=...")


def _load(args):
    from .config import load_config

    overrides = list(args.overrides)
    if getattr(args, "seeds", None):
        overrides.append(f"experiment.seeds={args.seeds}")
    if getattr(args, "output_dir", None):
        overrides.append(f"experiment.output_dir={args.output_dir}")
    cfg, warnings = load_config(args.config, overrides)
    for w in warnings:
        print(f"warning: {w}", file=sys.stderr)
    return cfg


def _out(args, cfg) -> Path:
    return Path(args.out) if getattr(args, "out", None) else cfg.output_dir


def _progress(stage: str) -> None:
    print(f"[{time.strftime('%H:%M:%S')}] {stage}", file=sys.stderr, flush=True)


def _print_result(result) -> None:
    std = "n/a" if result.std is None else f"{100 * result.std:.1f}"
    print(f"{result.label or 'result'}: accuracy {100 * result.mean:.1f} +- {std} over {len(result.seeds)} seed(s); "
          f"recall@{result.k} {100 * result.recall_mean:.1f}; runtime {result.runtime_s:.1f}s")


# --------------------------------------------------------------------------- verbs

def cmd_synth(args) -> int:
    from dataclasses import replace

    from .synthetic import SyntheticSpec, generate_synthetic, spec_to_dict

    spec = SyntheticSpec()
    if args.config:
        cfg = _load(args)
        if cfg.synthetic is None:
            raise ConfigError(f"{args.config} has no [synthetic] section")
        spec = cfg.synthetic
    flags = {"num_entities": args.entities, "schema_size": args.schema_size, "schema_overlap": args.overlap,
             "mentions_per_entity": args.mentions_per_entity, "seed": args.seed}
    spec = replace(spec, **{k: v for k, v in flags.items() if v is not None})
    try:
        spec.validate()
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    data = generate_synthetic(spec)
    paths = data.write(args.out)
    (Path(args.out) / "synthetic.json").write_text(json.dumps(spec_to_dict(spec), indent=2) + "\n")
    for name, p in paths.items():
        print(f"{name}\t{p}")
    return 0


def cmd_ingest(args) -> int:
    from .ingestion import load_kb, load_mentions, rank_attributes
    from .kb import validate_kb
    from .report import write_tsv

    kb = load_kb(args.kb, args.kb_id)
    problems = validate_kb(kb)
    for v in problems:
        print(f"violation\t{v.rule}\t{v.entity_id}\t{v.detail}", file=sys.stderr)
    print(f"kb\t{kb.kb_id}\tentities={len(kb)}\tattributes={len(kb.attribute_counts)}")
    if args.mentions:
        split = load_mentions(args.mentions, kb)
        print(f"mentions\t{len(split)}\tdropped_nil={split.dropped_nil}\tdocuments={len(split.document_ids)}")
    if args.out:
        counts = kb.attribute_counts
        path = write_tsv(args.out, ["rank", "attribute", "count"],
                         ((i + 1, a, counts[a]) for i, a in enumerate(rank_attributes(counts))))
        print(f"schema\t{path}")
    return 3 if problems else 0


def cmd_registry(args) -> int:
    from .ingestion import load_kb
    from .serialization import build_registry
    from .training import pooled_counts

    if len(args.kb) != len(args.kb_id):
        raise ConfigError("give one --kb-id per --kb")
    kbs = [load_kb(p, i) for p, i in zip(args.kb, args.kb_id)]
    counts = pooled_counts(kbs) if len(kbs) > 1 else kbs[0].attribute_counts
    reg = build_registry(counts, args.capacity, source_kb_id="+".join(args.kb_id))
    reg.save(args.out)
    print(f"registry\t{args.out}\tentries={len(reg)}")
    return 0


def cmd_train_candgen(args) -> int:
    from .pipeline import prepare, stage_candgen

    cfg = _load(args)
    prep = prepare(cfg, _out(args, cfg))
    _, digest = stage_candgen(prep, args.seed)
    print(f"candgen\t{prep.out / 'candgen'}\tdigest={digest}")
    return 0


def _candgen_ckpt(path):
    from .encoders import BiEncoder, load_checkpoint
    from .errors import CheckpointMismatch

    ck = load_checkpoint(path)
    if not isinstance(ck.model, BiEncoder):
        raise CheckpointMismatch(f"{path} is not a candidate-generator checkpoint")
    return ck


def cmd_index(args) -> int:
    from .ingestion import load_kb
    from .retrieval import build_index
    from .serialization import Mode, SerializationConfig

    ck = _candgen_ckpt(args.checkpoint)
    kb = load_kb(args.kb, args.kb_id)
    index = build_index(kb, ck.model, ck.registry, SerializationConfig(Mode(args.mode), max_tokens=args.max_tokens),
                        ck.digest)
    index.save(args.out)
    print(f"index\t{args.out}\trows={len(index)}\thidden={index.hidden_size}")
    return 0


def _prepared_with_candgen(args, cfg):
    from .pipeline import base_tokenizer, prepare, stage_candidates

    ck = _candgen_ckpt(args.candgen)
    prep = prepare(cfg, _out(args, cfg), base_tokenizer(ck.model, ck.registry))
    if ck.registry.names != prep.registry.names:
        from .errors import CheckpointMismatch

        raise CheckpointMismatch("candgen checkpoint registry differs from the config's training KB registry")
    cands = stage_candidates(prep, ck.model, ck.digest)
    return prep, cands, ck


def cmd_train_rerank(args) -> int:
    from .pipeline import stage_rerank

    cfg = _load(args)
    prep, cands, _ = _prepared_with_candgen(args, cfg)
    seeds = [args.seed] if args.seed is not None else list(cfg.experiment.seeds)
    for seed in seeds:
        stage_rerank(prep, cands, seed)
        print(f"rerank\t{prep.out / 'rerank' / f'seed_{seed}'}")
    return 0


def _rerankers(paths):
    from .encoders import CrossEncoder, load_checkpoint
    from .errors import CheckpointMismatch

    models = []
    for p in paths:
        ck = load_checkpoint(p)
        if not isinstance(ck.model, CrossEncoder):
            raise CheckpointMismatch(f"{p} is not a reranker checkpoint")
        models.append(ck)
    return models


def cmd_finetune(args) -> int:
    from .evaluation import ExperimentResult
    from .pipeline import run_finetune

    cfg = _load(args)
    if cfg.finetune is None:
        raise ConfigError("config has no [train.finetune] section")
    prep, cands, _ = _prepared_with_candgen(args, cfg)
    cks = _rerankers(args.reranker)
    seeds = [ck.extra.get("seed", i) for i, ck in enumerate(cks)]
    fractions = [args.fraction] if args.fraction is not None else None
    base = ExperimentResult("", seeds, [float("nan")] * len(seeds), [float("nan")] * len(seeds), cfg.finetune.k)
    table = run_finetune(prep, [ck.model for ck in cks], seeds, cands, base, fractions)
    del table["fractions"]["0"]
    print(json.dumps(table, indent=2))
    return 0


def cmd_evaluate(args) -> int:
    from .pipeline import finalize, stage_evaluate

    t0 = time.perf_counter()
    cfg = _load(args)
    prep, cands, ck = _prepared_with_candgen(args, cfg)
    cks = _rerankers(args.reranker)
    seeds = [c.extra.get("seed", i) for i, c in enumerate(cks)]
    result = stage_evaluate(prep, cands, [c.model for c in cks], seeds, t0)
    finalize(prep, result, t0, candgen_digest=ck.digest)
    _print_result(result)
    return 0


def cmd_run(args) -> int:
    from .pipeline import run_experiment
    from .report import plot_training_curves, report_results

    cfg = _load(args)
    out = _out(args, cfg)
    result = run_experiment(cfg, out, progress=_progress)
    _print_result(result)
    files = report_results([result], out / "report", "summary", cfg.experiment.name)
    files["curves"] = plot_training_curves(sorted((out / "metrics").glob("*.jsonl")), out / "report" / "curves.png")
    for name, path in files.items():
        print(f"{name}\t{path}")
    return 0


def cmd_benchmark(args) -> int:
    from .benchmarks import BENCHMARKS

    if args.name not in BENCHMARKS:
        raise ConfigError(f"unknown benchmark {args.name!r}; choose from {', '.join(BENCHMARKS)}")
    outcome = BENCHMARKS[args.name](Path(args.out), seeds=_seed_list(args.seeds), progress=_progress)
    print(outcome.summary())
    for name, path in outcome.files.items():
        print(f"{name}\t{path}")
    return 0


def _seed_list(text):
    if not text:
        return None
    try:
        return [int(s) for s in text.replace(",", " ").split()]
    except ValueError:
        raise ConfigError(f"--seeds: not a list of integers: {text!r}") from None


def cmd_report(args) -> int:
    from .evaluation import ExperimentResult
    from .report import report_results

    results = []
    for p in args.results:
        try:
            results.append(ExperimentResult.load(p))
        except (OSError, ValueError, KeyError) as exc:
            raise DataError(f"{p}: cannot read result file ({exc})") from None
    for name, path in report_results(results, args.out, args.name, args.title).items():
        print(f"{name}\t{path}")
    return 0


# --------------------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="anylink", description="Schema-agnostic entity linking to unseen KBs.")
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    ap.add_argument("-v", "--verbose", action="count", default=0)
    sub = ap.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("synth", help="write a synthetic train/test KB pair with mentions")
    _add_config(p, required=False)
    p.add_argument("--out", required=True)
    p.add_argument("--entities", type=int, help="entities per KB")
    p.add_argument("--schema-size", type=int)
    p.add_argument("--overlap", type=float, help="fraction of schema names shared by the two KBs")
    p.add_argument("--mentions-per-entity", type=int)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("ingest", help="validate a JSONL KB (and mentions) and print schema statistics")
    p.add_argument("--kb", required=True)
    p.add_argument("--kb-id", required=True)
    p.add_argument("--mentions")
    p.add_argument("--out", help="write attribute counts as TSV")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("registry", help="build a separator registry from one or more KBs")
    p.add_argument("--kb", action="append", required=True)
    p.add_argument("--kb-id", action="append", required=True)
    p.add_argument("--capacity", type=int, default=100)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_registry)

    p = sub.add_parser("train-candgen", help="train the bi-encoder candidate generator")
    _add_config(p)
    p.add_argument("--out")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_train_candgen)

    p = sub.add_parser("index", help="encode a KB with a candidate-generator checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--kb", required=True)
    p.add_argument("--kb-id", required=True)
    p.add_argument("--mode", default="sep_separation")
    p.add_argument("--max-tokens", type=int, default=128)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_index)

    p = sub.add_parser("train-rerank", help="train cross-encoder rerankers on top-K candidates")
    _add_config(p)
    p.add_argument("--candgen", required=True)
    p.add_argument("--out")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_train_rerank)

    p = sub.add_parser("finetune", help="continue reranker training on a document sample of the target KB")
    _add_config(p)
    p.add_argument("--candgen", required=True)
    p.add_argument("--reranker", action="append", required=True)
    p.add_argument("--fraction", type=float)
    p.add_argument("--out")
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("evaluate", help="cross-KB accuracy and recall@K of trained rerankers")
    _add_config(p)
    p.add_argument("--candgen", required=True)
    p.add_argument("--reranker", action="append", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("run", help="full pipeline from a config, then a report")
    _add_config(p)
    p.add_argument("--out")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("benchmark", help="run a shipped synthetic benchmark")
    p.add_argument("name")
    p.add_argument("--out", required=True)
    p.add_argument("--seeds")
    p.set_defaults(func=cmd_benchmark)

    p = sub.add_parser("report", help="TSV tables and PNG figures from result.json files")
    p.add_argument("results", nargs="+")
    p.add_argument("--out", required=True)
    p.add_argument("--name", default="summary")
    p.add_argument("--title", default="")
    p.set_defaults(func=cmd_report)
    return ap


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except AnylinkError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
