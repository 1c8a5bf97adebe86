import re

import pytest

from anylink.synthetic import SyntheticSpec, generate_synthetic

SPEC = dict(num_entities=40, schema_size=10, schema_overlap=0.3, mentions_per_entity=2, seed=7)


def phrase_oracle(text, entity):
    """Independent scorer: regex word-boundary search for each ``name value`` phrase."""
    score = 0
    for a in entity.attributes:
        phrase = r"\s+".join(map(re.escape, [a.name] + a.value.split()))
        if re.search(rf"(?<!\S){phrase}(?!\S)", text):
            score += 1 + len(a.value.split())
    return score


def test_byte_identical_under_seed(tmp_path):
    a = generate_synthetic(SyntheticSpec(**SPEC)).write(tmp_path / "a")
    b = generate_synthetic(SyntheticSpec(**SPEC)).write(tmp_path / "b")
    for name in a:
        assert a[name].read_bytes() == b[name].read_bytes()


@pytest.mark.parametrize("overlap,shared", [(0.0, 0), (0.3, 3), (1.0, 10)])
def test_schema_overlap_exact(overlap, shared):
    d = generate_synthetic(SyntheticSpec(**{**SPEC, "schema_overlap": overlap, "num_entities": 80}))
    # every attribute name in the schemas is drawn at least once at this size
    assert len(d.train_kb.schema & d.test_kb.schema) == shared
    if overlap == 1.0:
        assert d.train_kb.schema == d.test_kb.schema


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_every_mention_solvable_by_overlap(seed):
    d = generate_synthetic(SyntheticSpec(**{**SPEC, "seed": seed, "test_mentions_per_entity": 1,
                                           "target_mentions_per_entity": 1}))
    for split, kb in ((d.train_split, d.train_kb), (d.test_split, d.test_kb), (d.target_split, d.test_kb)):
        correct = 0
        for m in split.mentions:
            assert m.gold_entity_id in kb
            scores = {e.entity_id: phrase_oracle(m.text, e) for e in kb.entities}
            best = max(scores.values())
            top = [e for e, s in scores.items() if s == best]
            correct += top == [m.gold_entity_id]
            gold_words = {w for a in kb[m.gold_entity_id].attributes for w in a.value.split()}
            assert gold_words & set(m.text.split())
        assert correct == len(split)


def test_constant_predictor_is_weak():
    d = generate_synthetic(SyntheticSpec(**SPEC))
    golds = [m.gold_entity_id for m in d.train_split.mentions]
    assert max(golds.count(g) for g in set(golds)) / len(golds) < 0.1


@pytest.mark.parametrize("bad", [
    dict(attributes_per_entity=(3, 12)),
    dict(schema_overlap=0.25),
    dict(num_entities=0),
    dict(mentions_per_entity=-1),
])
def test_infeasible_specs(bad):
    with pytest.raises(ValueError, match="infeasible"):
        generate_synthetic(SyntheticSpec(**{**SPEC, **bad}))


def test_documents_group_mentions():
    d = generate_synthetic(SyntheticSpec(**{**SPEC, "mentions_per_document": 4}))
    docs = d.train_split.document_ids
    assert len(docs) == -(-len(d.train_split) // 4)
