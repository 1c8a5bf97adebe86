"""Acceptance criteria 1-10, each at its stated tolerance.

Every test records one ``PASS criterion N`` / ``FAIL criterion N`` line, which
is printed in the terminal summary. Criteria 6, 7, 8 and 10 train models and
take minutes; 7 and 8 share one benchmark run.
"""

import json
import time
from pathlib import Path

import numpy as np
import pytest
import torch

from anylink import benchmarks
from anylink.config import load_config
from anylink.encoders import CrossEncoder, augment_vocabulary, base_spec, checkpoint_digest, mention_pieces, \
    pair_sequence, Batch
from anylink.kb import CandidateList, Entity
from anylink.pipeline import prepare, stage_candgen, stage_candidates, stage_evaluate, stage_rerank
from anylink.retrieval import EntityIndex, recall_at_k, retrieve, retrieve_batch
from anylink.serialization import (
    SEP,
    Mode,
    SeparatorRegistry,
    SerializationConfig,
    build_registry,
    parse_units,
    serialize_entity,
)
from anylink.tokenizer import build_vocab
from anylink.training import n_documents_for, rerank_loss, sample_documents

from conftest import ACCEPTANCE_LINES, mention

ROOT = Path(__file__).resolve().parents[1]
NAMES = ["name", "occupation", "born", "capital", "genre", "team", "league", "country", "color", "author"]
WORDS = ["alpha", "beta", "gamma", "delta", "kappa", "omega", "sigma", "theta"]


def record(n, ok, detail):
    ACCEPTANCE_LINES.append(f"{'PASS' if ok else 'FAIL'} criterion {n}: {detail}")
    assert ok, detail


def random_entities(n, seed):
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        k = int(rng.integers(0, 8))
        names = rng.choice(NAMES, size=k, replace=False)
        pairs = [(str(a), " ".join(rng.choice(WORDS, size=int(rng.integers(1, 4))))) for a in names]
        out.append(Entity.from_pairs(f"e{i}", pairs))
    return out


REGISTRY = build_registry({n: 100 - i for i, n in enumerate(NAMES[:6])})


# --------------------------------------------------------------------------- 1-3 serialization

def test_criterion_1_serialization_conformance():
    adams = Entity.from_pairs("Q42", [("name", "Douglas Adams"), ("occupation", "author")])
    reg = build_registry({"name": 2, "occupation": 1})
    got = {m: serialize_entity(adams, reg, SerializationConfig(m)) for m in Mode}
    want = {
        Mode.CONCATENATION: "Douglas Adams author",
        Mode.SEP_SEPARATION: "[SEP] Douglas Adams [SEP] author",
        Mode.ATTRIBUTE_SEPARATION: "[K_NAME] Douglas Adams [K_OCCUPATION] author",
    }
    empty = SeparatorRegistry.from_names([])
    mismatches = sum(
        serialize_entity(e, empty, SerializationConfig(Mode.ATTRIBUTE_SEPARATION))
        != serialize_entity(e, empty, SerializationConfig(Mode.SEP_SEPARATION))
        for e in random_entities(1000, 1)
    )
    record(1, got == want and mismatches == 0,
           f"figure strings {'match' if got == want else got}; {mismatches}/1000 empty-registry mismatches")


def test_criterion_2_regularizer_statistics():
    ents = random_entities(6000, 2)
    rng = np.random.default_rng(0)
    drop = SerializationConfig(Mode.ATTRIBUTE_SEPARATION, oov_drop_prob=0.3)
    attr = SerializationConfig(Mode.ATTRIBUTE_SEPARATION)
    seen = replaced = 0
    for e in ents:
        before = parse_units(serialize_entity(e, REGISTRY, attr))
        after = parse_units(serialize_entity(e, REGISTRY, drop, rng))
        pairs = [(a, b) for (a, _), (b, _) in zip(before, after) if a != SEP]
        seen += len(pairs)
        replaced += sum(b == SEP for _, b in pairs)
    rate = replaced / seen
    sep = SerializationConfig(Mode.SEP_SEPARATION)
    p0 = all(serialize_entity(e, REGISTRY, SerializationConfig(Mode.ATTRIBUTE_SEPARATION, oov_drop_prob=0.0), rng)
             == serialize_entity(e, REGISTRY, attr) for e in ents[:1000])
    p1 = all(serialize_entity(e, REGISTRY, SerializationConfig(Mode.ATTRIBUTE_SEPARATION, oov_drop_prob=1.0), rng)
             == serialize_entity(e, REGISTRY, sep) for e in ents[:1000])
    record(2, seen >= 10_000 and 0.28 <= rate <= 0.32 and p0 and p1,
           f"replacement rate {rate:.4f} over {seen} separators; p=0 identity {p0}; p=1 identity {p1}")


def test_criterion_3_shuffle_invariance():
    rng = np.random.default_rng(3)
    cfg = SerializationConfig(Mode.ATTRIBUTE_SEPARATION, shuffle=True)
    plain = SerializationConfig(Mode.ATTRIBUTE_SEPARATION)
    bad = sum(sorted(parse_units(serialize_entity(e, REGISTRY, cfg, rng)))
              != sorted(parse_units(serialize_entity(e, REGISTRY, plain)))
              for e in random_entities(1000, 3))
    record(3, bad == 0, f"{bad}/1000 entities changed their (separator, value) multiset")


# --------------------------------------------------------------------------- 4 retrieval

def oracle_top_k(matrix, q, k):
    scores = [sum(float(a) * float(b) for a, b in zip(row, q)) for row in matrix.tolist()]
    return sorted(range(len(scores)), key=lambda i: (-scores[i], i))[:k]


def test_criterion_4_retrieval_exactness():
    rng = np.random.default_rng(4)
    failures, ties = 0, 0
    for t in range(100):
        n = 10_000 if t == 0 else int(rng.integers(1, 400))
        d = 64 if t == 0 else int(rng.integers(1, 65))
        if t % 2:  # small integers force tied scores
            m = rng.integers(-2, 3, size=(n, d)).astype(np.float32)
            q = rng.integers(-2, 3, size=d).astype(np.float32)
        else:
            m = rng.normal(size=(n, d)).astype(np.float32)
            q = rng.normal(size=d).astype(np.float32)
            if n > 2:
                m[n // 2] = m[0]  # an exact duplicate row
        k = int(rng.integers(1, min(n, 40) + 1))
        index = EntityIndex("kb", m, tuple(f"e{i}" for i in range(n)))
        want = [f"e{i}" for i in oracle_top_k(m, q, k)]
        got = list(retrieve(q, index, k).entity_ids)
        batch = list(retrieve_batch(q[None], index, k)[0].entity_ids)
        failures += got != want or batch != want
        scores = m.astype(np.float64) @ q.astype(np.float64)
        ties += len(np.unique(scores)) < n
    lists = [CandidateList(f"m{i}", tuple((f"e{j}", 0.0) for j in rng.permutation(20)[:10])) for i in range(200)]
    gold = {f"m{i}": f"e{rng.integers(20)}" for i in range(200)}
    recalls = [recall_at_k(lists, gold, k) for k in range(1, 11)]
    monotone = all(a <= b for a, b in zip(recalls, recalls[1:]))
    record(4, failures == 0 and ties >= 40 and monotone,
           f"{failures}/100 mismatches ({ties} instances with ties); recall@1..10 monotone {monotone}")


# --------------------------------------------------------------------------- 5 gradient check

def test_criterion_5_gradient_check():
    torch.manual_seed(5)
    tok = build_vocab(["the author douglas adams wrote books", "new delhi is the capital of india"])
    reg = SeparatorRegistry.from_names(["name", "occupation", "capital"])
    model = augment_vocabulary(CrossEncoder(base_spec(tok, layers=2, hidden_size=16, heads=2)), reg, 5).double()
    tok = model.spec.tokenizer()
    men, span = mention_pieces(tok, mention("m", "e", surface="douglas adams", left="the author", right="wrote"))
    ents = ["[K_NAME] douglas adams [K_OCCUPATION] author", "[K_CAPITAL] new delhi [SEP] india",
            "[K_NAME] the books [K_OCCUPATION] capital", "[SEP] adams"]
    batch = Batch.from_sequences([pair_sequence(tok, men, span, e, 128, model.spec.max_positions) for e in ents],
                                 tok.pad_id)
    sizes, targets = [2, 2], [0, 1]
    emb = model.encoder.token_emb.weight
    sep_rows = [tok.vocab.index(t) for t in reg.tokens]

    def loss():
        return rerank_loss(model(batch), sizes, targets)

    model.zero_grad()
    loss().backward()
    analytic = torch.cat([model.w.grad, emb.grad[sep_rows].flatten()])
    params = [(model.w.data, i) for i in range(model.w.numel())]
    params += [(emb.data[r], i) for r in sep_rows for i in range(emb.shape[1])]
    eps = 1e-6
    numeric = []
    with torch.no_grad():
        for tensor, i in params:
            old = tensor[i].item()
            tensor[i] = old + eps
            up = loss().item()
            tensor[i] = old - eps
            down = loss().item()
            tensor[i] = old
            numeric.append((up - down) / (2 * eps))
    numeric = torch.tensor(numeric, dtype=torch.float64)
    rel = ((analytic - numeric).norm() / max(analytic.norm(), numeric.norm())).item()
    worst = ((analytic - numeric).abs() / (analytic.abs() + numeric.abs()).clamp_min(1e-6)).max().item()
    record(5, rel <= 1e-3 and worst <= 1e-3 and analytic.norm() > 0,
           f"relative error {rel:.2e} (worst coordinate {worst:.2e}) over {len(params)} coordinates")


# --------------------------------------------------------------------------- 6 overfit

@pytest.mark.slow
def test_criterion_6_overfit(tmp_path):
    t0 = time.perf_counter()
    o = benchmarks.overfit(tmp_path / "overfit")
    elapsed = time.perf_counter() - t0
    r1, acc = o.metrics["candgen_train_recall@1"], o.metrics["rerank_train_accuracy_min"]
    record(6, r1 == 1.0 and acc >= 0.95 and elapsed < 300,
           f"candgen train recall@1 {r1:.3f}; reranker train accuracy {acc:.3f}; {elapsed:.0f}s")


# --------------------------------------------------------------------------- 7-8 cross-schema benchmark

@pytest.fixture(scope="session")
def crossschema_run(tmp_path_factory):
    return benchmarks.crossschema(tmp_path_factory.mktemp("crossschema"), finetune=True)


@pytest.mark.slow
def test_criterion_7_directional_transfer(crossschema_run):
    res = crossschema_run.results
    full, sep, concat = (res[k].mean for k in (benchmarks.FULL_ARM, "sep_separation", "concatenation"))
    gap = 100 * (full - concat)
    runtime = crossschema_run.metrics["arms_runtime_s"]
    ok = full > sep > concat and gap >= 2.0 and runtime < 900 and all(len(r.seeds) == 5 for r in res.values())
    record(7, ok, f"full {100 * full:.1f} / sep {100 * sep:.1f} / concat {100 * concat:.1f}; "
                  f"gap {gap:.1f} points; {runtime:.0f}s")


@pytest.mark.slow
def test_criterion_8_finetune_schedule(crossschema_run):
    arithmetic = n_documents_for(0.01, 1300) == 13 and len(sample_documents(
        [f"d{i}" for i in range(1300)], 0.01, 0)) == 13
    table = crossschema_run.metrics["finetune"]["fractions"]
    rows = [table[f] for f in ("0", "0.25", "1")]
    means = [r["mean"] for r in rows]
    inversions = [(a, b) for a, b in zip(rows, rows[1:]) if b["mean"] < a["mean"]]
    within = all(a["mean"] - b["mean"] <= max(a["std"] or 0.0, b["std"] or 0.0) for a, b in inversions)
    ok = arithmetic and len(inversions) <= 1 and within and all(len(r["accuracy"]) == 5 for r in rows)
    record(8, ok, f"13/1300 arithmetic {arithmetic}; accuracy at 0/0.25/1.0 = "
                  f"{' / '.join(f'{100 * m:.1f}' for m in means)}; {len(inversions)} inversion(s)")


# --------------------------------------------------------------------------- 9 determinism

TOY = ROOT / "configs" / "toy"
DETERMINISM_CFG = f"""
[experiment]
name = determinism
seeds = 0
[data]
train_kb = {TOY}/train_kb.jsonl
train_kb_id = synth-train
train_mentions = {TOY}/train_mentions.jsonl
test_kb = {TOY}/test_kb.jsonl
test_kb_id = synth-test
test_mentions = {TOY}/test_mentions.jsonl
[serialization]
mode = attribute_separation
shuffle = true
oov_drop_prob = 0.3
[encoder]
layers = 2
hidden_size = 32
heads = 4
[train.candgen]
epochs = 2
batch_size = 16
eval_every = 1
[train.rerank]
epochs = 2
batch_size = 4
k = 4
"""


def run_stages(cfg, out):
    prep = prepare(cfg, out)
    candgen, digest = stage_candgen(prep)
    cands = stage_candidates(prep, candgen, digest)
    model = stage_rerank(prep, cands, 0)
    result = stage_evaluate(prep, cands, [model], [0])
    files = ["registry.tsv", "vocab.txt", "candidates/candidates.tsv", "predictions.tsv",
             "metrics/candgen.jsonl", "metrics/rerank_seed0.jsonl", "index/synth-test.idx"]
    return {
        "candgen": digest,
        "rerank": checkpoint_digest(out / "rerank" / "seed_0"),
        "accuracy": result.accuracy,
        **{f: (out / f).read_bytes() for f in files},
    }


@pytest.mark.slow
def test_criterion_9_determinism(tmp_path):
    path = tmp_path / "det.cfg"
    path.write_text(DETERMINISM_CFG)
    cfg, _ = load_config(path)
    # wall-clock fields differ between runs by design; everything else must not
    a, b = (run_stages(cfg, tmp_path / r) for r in ("a", "b"))
    for d in (a, b):
        for key in ("metrics/candgen.jsonl", "metrics/rerank_seed0.jsonl"):
            d[key] = [{k: v for k, v in json.loads(l).items() if k != "wall_time_s"} for l in d[key].splitlines()]
    differing = sorted(k for k in a if a[k] != b[k])
    record(9, not differing, f"{len(a)} artifacts compared; differing: {differing or 'none'}")


# --------------------------------------------------------------------------- 10 mixing

@pytest.mark.slow
def test_criterion_10_mixing(tmp_path):
    o = benchmarks.mixing(tmp_path / "mixing")
    m = o.metrics
    ok = m["schema_overlap"] == 0 and m["registry_matches_bruteforce"] and np.isfinite(m["rerank_loss"])
    record(10, ok, f"{m['examples']} mixed examples; disjoint schemas {m['schema_overlap'] == 0}; "
                   f"registry of {m['registry_size']} equals brute-force top-100 {m['registry_matches_bruteforce']}; "
                   f"final loss {m['rerank_loss']:.3f}")
