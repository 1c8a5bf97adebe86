import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from anylink.errors import CheckpointMismatch
from anylink.kb import CandidateList, validate_candidates
from anylink.retrieval import EntityIndex, recall_at_k, retrieve, retrieve_batch


def oracle_top_k(matrix, q, k):
    """Independent oracle: full sort by (-score, row) using Python tuples."""
    scores = [float(np.dot(row.astype(np.float64), q.astype(np.float64))) for row in matrix]
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    return order[:k]


def index_of(matrix, digest=""):
    return EntityIndex("kb", np.asarray(matrix, dtype=np.float32), tuple(f"e{i}" for i in range(len(matrix))), digest)


def test_toy_2d():
    idx = index_of([[1, 0], [0, 1]])
    assert retrieve(np.array([0.9, 0.1]), idx, 1).entity_ids == ["e0"]
    assert retrieve(np.array([0.9, 0.1]), idx, 5).entity_ids == ["e0", "e1"]


def test_orthogonal_query_keeps_id_order():
    idx = index_of(np.tile([1.0, 0.0, 0.0], (6, 1)))
    got = retrieve(np.array([0.0, 1.0, 0.0]), idx, 6)
    assert got.entity_ids == [f"e{i}" for i in range(6)]
    assert got.scores == [0.0] * 6


def test_errors():
    with pytest.raises(ValueError):
        retrieve(np.ones(2), index_of(np.zeros((0, 2))), 1)
    with pytest.raises(ValueError):
        retrieve(np.ones(2), index_of(np.ones((1, 2))), 0)


@pytest.mark.parametrize("seed", range(25))
def test_matches_oracle_random(seed):
    rng = np.random.default_rng(seed)
    n, h = int(rng.integers(1, 400)), int(rng.integers(1, 64))
    # small integer entries make exact ties common
    m = rng.integers(-2, 3, size=(n, h)).astype(np.float32)
    qs = rng.integers(-2, 3, size=(4, h)).astype(np.float32)
    k = int(rng.integers(1, n + 3))
    idx = index_of(m)
    for q, cl in zip(qs, retrieve_batch(qs, idx, k)):
        assert [int(e[1:]) for e in cl.entity_ids] == oracle_top_k(m, q, k)
        assert retrieve(q, idx, k) == cl
        assert validate_candidates(cl, k) == []


def test_large_index_matches_oracle():
    rng = np.random.default_rng(0)
    m = rng.standard_normal((10_000, 64)).astype(np.float32)
    q = rng.standard_normal(64).astype(np.float32)
    assert [int(e[1:]) for e in retrieve(q, index_of(m), 32).entity_ids] == oracle_top_k(m, q, 32)


def test_permutation_changes_only_ties():
    rng = np.random.default_rng(1)
    m = rng.integers(0, 3, size=(50, 4)).astype(np.float32)
    q = np.array([1.0, 2.0, 0.0, 1.0])
    perm = rng.permutation(50)
    a = retrieve(q, index_of(m), 50)
    b = retrieve(q, EntityIndex("kb", m[perm], tuple(f"e{i}" for i in perm)), 50)
    assert a.scores == b.scores
    groups = lambda cl: [set(e for e, s in cl.candidates if s == v) for v in sorted(set(cl.scores))]
    assert groups(a) == groups(b)


def test_index_file_roundtrip(tmp_path):
    idx = index_of(np.arange(12).reshape(4, 3), digest="abc")
    idx.save(tmp_path / "x.idx")
    back = EntityIndex.load(tmp_path / "x.idx", expected_digest="abc")
    assert back.id_order == idx.id_order and np.array_equal(back.matrix, idx.matrix)
    with pytest.raises(CheckpointMismatch):
        EntityIndex.load(tmp_path / "x.idx", expected_digest="other")


def test_recall_counts():
    lists = [CandidateList("a", (("x", 1.0),)), CandidateList("b", (("y", 1.0),)), CandidateList("c", (("z", 1.0),))]
    assert recall_at_k(lists, {"a": "x", "b": "q", "c": "z"}) == pytest.approx(2 / 3)
    with pytest.raises(KeyError):
        recall_at_k(lists, {"a": "x"})


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 40), st.integers(1, 10), st.integers(0, 10_000))
def test_recall_monotone_in_k(n, h, seed):
    rng = np.random.default_rng(seed)
    idx = index_of(rng.standard_normal((n, h)))
    qs = rng.standard_normal((15, h))
    gold = {f"m{i}": f"e{int(rng.integers(n))}" for i in range(15)}
    lists = retrieve_batch(qs, idx, n, list(gold))
    recalls = [recall_at_k(lists, gold, k) for k in range(1, n + 1)]
    assert all(a <= b for a, b in zip(recalls, recalls[1:]))
    assert recalls[-1] == 1.0
