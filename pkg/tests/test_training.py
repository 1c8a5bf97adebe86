import copy

import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from anylink.encoders import BiEncoder, CrossEncoder, augment_vocabulary, base_spec
from anylink.errors import TrainingDivergence
from anylink.ingestion import DatasetSplit
from anylink.kb import CandidateList
from anylink.serialization import SerializationConfig
from anylink.synthetic import SyntheticSpec, generate_synthetic
from anylink.tokenizer import build_vocab
from anylink.training import (
    TrainConfig,
    as_dataset,
    hold_out_documents,
    lr_at,
    mix_datasets,
    n_documents_for,
    precompute_candidates,
    rerank_loss,
    sample_documents,
    train_candgen,
    train_rerank,
    training_candidates,
    warmup_steps_for,
)

from conftest import mention


@pytest.fixture(scope="module")
def synth():
    return generate_synthetic(SyntheticSpec(num_entities=12, mentions_per_entity=2, schema_size=6, schema_overlap=0.5,
                                            attributes_per_entity=(2, 4), value_vocab=60, seed=5))


def models(data, seed=0):
    texts = [m.text for m in data.train_split.mentions] + [
        v for e in data.train_kb.entities for a in e.attributes for v in (a.name, a.value)]
    tok = build_vocab(texts)
    registry = as_dataset(data.train_split, data.train_kb).registry
    torch.manual_seed(seed)
    spec = base_spec(tok, layers=1, hidden_size=16, heads=2)
    cg = augment_vocabulary(BiEncoder(spec, share_towers=True), registry, seed)
    rr = augment_vocabulary(CrossEncoder(spec), registry, seed)
    return cg, rr, registry


def test_reference_defaults():
    cg, rr, ft = (TrainConfig.defaults(s) for s in ("candgen", "rerank", "finetune"))
    assert (cg.epochs, cg.batch_size, cg.peak_lr, cg.warmup_fraction) == (200, 256, 2e-5, 0.1)
    assert (rr.epochs, rr.batch_size, rr.k) == (4, 2, 32)
    assert (ft.peak_lr, ft.lr_schedule) == (2e-6, "constant")
    with pytest.raises(ValueError):
        TrainConfig(stage="pretrain")


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 50), st.integers(1, 20), st.floats(1e-6, 1e-2))
def test_lr_schedule_shape(steps_per_epoch, epochs, peak):
    cfg = TrainConfig(epochs=epochs, peak_lr=peak)
    warm = warmup_steps_for(cfg, steps_per_epoch)
    total = steps_per_epoch * epochs
    lrs = [lr_at(s, total, peak, warm) for s in range(total)]
    assert lrs[0] == 0.0 or total == 1
    assert max(lrs) <= peak * (1 + 1e-12)
    if warm < total - 1:
        assert lrs[warm] == pytest.approx(peak)
        assert lrs[-1] <= peak / total
    assert all(a <= b for a, b in zip(lrs[:warm], lrs[1:warm + 1]))
    assert all(a >= b for a, b in zip(lrs[warm:], lrs[warm + 1:]))


def test_constant_schedule():
    assert {lr_at(s, 10, 2e-6, 0, "constant") for s in range(10)} == {2e-6}


def test_document_arithmetic():
    assert n_documents_for(0.01, 1300) == 13
    assert n_documents_for(1.0, 1300) == 1300
    with pytest.raises(ValueError):
        n_documents_for(0.0, 10)
    docs = [f"d{i}" for i in range(1300)]
    assert len(sample_documents(docs, 0.01, 0)) == 13
    assert sample_documents(docs, 0.05, 4) == sample_documents(docs, 0.05, 4)
    with pytest.raises(ValueError):
        sample_documents(docs[:10], 0.01, 0)


def test_hold_out_excluded_and_documents_whole():
    ms = [mention(f"m{i}", "e1", doc=f"d{i % 30}") for i in range(90)]
    split = DatasetSplit("train", tuple(ms), "kb")
    pool, held = hold_out_documents(split, 10, seed=2)
    assert len(held) == 10 and set(pool).isdisjoint(held) and len(pool) == 20
    chosen = set(sample_documents(pool, 0.25, 1))
    assert not chosen & set(held)
    inside = [m for m in ms if m.document_id in chosen]
    assert len(inside) == 3 * len(chosen)
    assert set(sample_documents(pool, 1.0, 1)) == set(pool)


def test_mixing_sizes_and_registry(synth):
    other = generate_synthetic(SyntheticSpec(num_entities=6, mentions_per_entity=1, schema_size=4, schema_overlap=0.5,
                                             attributes_per_entity=(1, 2), seed=9, train_kb_id="other",
                                             test_kb_id="other-test", mention_prefix="o-"))
    single = mix_datasets([(synth.train_split, synth.train_kb)])
    assert single.mentions == list(synth.train_split.mentions)
    mixed = mix_datasets([(synth.train_split, synth.train_kb), (other.train_split, other.train_kb)])
    assert len(mixed) == len(synth.train_split) + len(other.train_split)
    assert mixed.kb_of(other.train_split.mentions[0]) is other.train_kb
    pooled = dict(synth.train_kb.attribute_counts)
    for k, v in other.train_kb.attribute_counts.items():
        pooled[k] = pooled.get(k, 0) + v
    assert mixed.registry.names == sorted(pooled, key=lambda k: (-pooled[k], k))[:100]
    with pytest.raises(ValueError):
        mix_datasets([(synth.train_split, other.train_kb)])
    clash = generate_synthetic(SyntheticSpec(num_entities=6, mentions_per_entity=1, schema_size=4, schema_overlap=0.5,
                                             attributes_per_entity=(1, 2), seed=9, train_kb_id="clash"))
    with pytest.raises(ValueError, match="distinct mention ids"):
        mix_datasets([(synth.train_split, synth.train_kb), (clash.train_split, clash.train_kb)])


def test_gold_injection():
    cl = CandidateList("m", (("a", 3.0), ("b", 2.0), ("c", 1.0)))
    assert training_candidates(cl, "b") == ["a", "b", "c"]
    assert training_candidates(cl, "z") == ["a", "b", "z"]
    assert training_candidates(CandidateList("m", ()), "z") == ["z"]


def test_single_candidate_loss_is_zero():
    scores = torch.tensor([1.7, -0.3], requires_grad=True)
    assert rerank_loss(scores, [1, 1], [0, 0]).item() == 0.0
    ref = torch.nn.functional.cross_entropy(torch.tensor([[0.5, 1.0, -1.0]]), torch.tensor([2]))
    assert rerank_loss(torch.tensor([0.5, 1.0, -1.0]), [3], [2]).item() == pytest.approx(ref.item())


def sep_cfg():
    return SerializationConfig("sep_separation")


def test_zero_epochs_keeps_init(synth):
    cg, _, _ = models(synth)
    before = copy.deepcopy(cg.state_dict())
    train_candgen(synth.train_split, cg, TrainConfig(epochs=0, batch_size=8), 0, sep_cfg(), kb=synth.train_kb)
    assert all(torch.equal(before[k], v) for k, v in cg.state_dict().items())


def test_candgen_same_seed_same_loss(synth, tmp_path):
    runs = []
    for _ in range(2):
        cg, _, _ = models(synth)
        r = train_candgen(synth.train_split, cg, TrainConfig(epochs=2, batch_size=8, peak_lr=1e-3), 0, sep_cfg(),
                          kb=synth.train_kb)
        runs.append([h.loss for h in r.history])
    assert runs[0] == runs[1]


def test_rerank_regularizers_change_loss(synth):
    cg, _, registry = models(synth)
    data = as_dataset(synth.train_split, synth.train_kb)
    cands = precompute_candidates(cg, data, registry, sep_cfg(), 4)
    cfg = TrainConfig(stage="rerank", epochs=1, batch_size=4, peak_lr=1e-3, k=4)
    losses = {}
    for name, ser in {"off": SerializationConfig(), "on": SerializationConfig(shuffle=True, oov_drop_prob=0.3)}.items():
        _, rr, _ = models(synth)
        losses[name] = train_rerank(data, rr, cfg, 0, ser, cands).final_loss
    assert losses["on"] != losses["off"]


def test_divergence_raises(synth):
    cg, rr, registry = models(synth)
    with torch.no_grad():
        rr.w.fill_(float("nan"))
    data = as_dataset(synth.train_split, synth.train_kb)
    cands = precompute_candidates(cg, data, registry, sep_cfg(), 3)
    with pytest.raises(TrainingDivergence):
        train_rerank(data, rr, TrainConfig(stage="rerank", epochs=1, batch_size=4, k=3), 0, sep_cfg(), cands)


def test_metrics_log_records(synth, tmp_path):
    cg, _, _ = models(synth)
    path = tmp_path / "m.jsonl"
    train_candgen(synth.train_split, cg, TrainConfig(epochs=2, batch_size=8), 0, sep_cfg(), kb=synth.train_kb,
                  val=(synth.train_split, synth.train_kb), metrics_path=path)
    import json
    recs = [json.loads(l) for l in path.read_text().splitlines()]
    assert [r["epoch"] for r in recs] == [0, 1]
    assert set(recs[0]) == {"stage", "epoch", "loss", "val_metric", "lr", "seed", "wall_time_s"}
