"""Exact dot-product entity index, top-K candidate retrieval and recall@K."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
import torch

from .encoders import BiEncoder, Batch, entity_sequence, mention_sequence
from .errors import CheckpointMismatch, DataError
from .kb import CandidateList, KnowledgeBase, Mention
from .serialization import SeparatorRegistry, SerializationConfig, serialize_entity

DEFAULT_K = 32
_MAGIC = b"ANYLIDX1"


@dataclass(frozen=True, eq=False)
class EntityIndex:
    kb_id: str
    matrix: np.ndarray  # (n_entities, hidden), row i <-> id_order[i]
    id_order: tuple[str, ...]
    checkpoint_digest: str = ""
    metric: str = "dot"

    def __post_init__(self):
        if self.matrix.ndim != 2 or self.matrix.shape[0] != len(self.id_order):
            raise ValueError("index matrix rows must align with id_order")
        object.__setattr__(self, "id_order", tuple(self.id_order))

    def __len__(self) -> int:
        return len(self.id_order)

    @property
    def hidden_size(self) -> int:
        return self.matrix.shape[1]

    def save(self, path: str | Path) -> None:
        header = json.dumps({
            "kb_id": self.kb_id,
            "rows": len(self),
            "hidden": self.hidden_size,
            "checkpoint_digest": self.checkpoint_digest,
            "dtype": "float32",
            "metric": self.metric,
        }, sort_keys=True).encode("utf-8")
        ids = "\n".join(self.id_order).encode("utf-8")
        with Path(path).open("wb") as fh:
            fh.write(_MAGIC)
            fh.write(struct.pack("<I", len(header)))
            fh.write(header)
            fh.write(np.ascontiguousarray(self.matrix, dtype="<f4").tobytes())
            fh.write(struct.pack("<Q", len(ids)))
            fh.write(ids)

    @classmethod
    def load(cls, path: str | Path, expected_digest: str | None = None) -> "EntityIndex":
        data = Path(path).read_bytes()
        if data[:8] != _MAGIC:
            raise DataError(f"{path}: not an entity index file")
        (hlen,) = struct.unpack_from("<I", data, 8)
        header = json.loads(data[12:12 + hlen])
        off = 12 + hlen
        nbytes = header["rows"] * header["hidden"] * 4
        matrix = np.frombuffer(data, dtype="<f4", count=header["rows"] * header["hidden"], offset=off)
        matrix = matrix.reshape(header["rows"], header["hidden"]).astype(np.float32)
        off += nbytes
        (ilen,) = struct.unpack_from("<Q", data, off)
        raw = data[off + 8: off + 8 + ilen].decode("utf-8")
        ids = tuple(raw.split("\n")) if header["rows"] else ()
        if expected_digest is not None and header["checkpoint_digest"] != expected_digest:
            raise CheckpointMismatch(
                f"{path}: built from checkpoint {header['checkpoint_digest'][:12]}, expected {expected_digest[:12]}")
        return cls(header["kb_id"], matrix, ids, header["checkpoint_digest"], header.get("metric", "dot"))


def entity_strings(kb: KnowledgeBase, registry: SeparatorRegistry, cfg: SerializationConfig,
                   token_len=None, rng: np.random.Generator | None = None) -> list[str]:
    kw = {"token_len": token_len} if token_len else {}
    return [serialize_entity(e, registry, cfg, rng, kb.attribute_counts, **kw) for e in kb.entities]


def _batched_vectors(encode, seqs, pad_id: int, batch_size: int) -> np.ndarray:
    out = []
    with torch.no_grad():
        for i in range(0, len(seqs), batch_size):
            out.append(encode(Batch.from_sequences(seqs[i:i + batch_size], pad_id)).float().cpu().numpy())
    return np.concatenate(out) if out else np.zeros((0, 0), dtype=np.float32)


def encode_entity_texts(model: BiEncoder, texts: Sequence[str], max_tokens: int = 128,
                        batch_size: int = 64) -> np.ndarray:
    tok = model.spec.tokenizer()
    seqs = [entity_sequence(tok, t, max_tokens) for t in texts]
    was_training = model.training
    model.eval()
    try:
        vecs = _batched_vectors(model.encode_entities, seqs, tok.pad_id, batch_size)
    finally:
        model.train(was_training)
    return vecs.reshape(len(texts), model.spec.hidden_size)


def encode_mentions(model: BiEncoder, mentions: Sequence[Mention], max_tokens: int = 128,
                    batch_size: int = 64) -> np.ndarray:
    tok = model.spec.tokenizer()
    seqs = [mention_sequence(tok, m, max_tokens) for m in mentions]
    was_training = model.training
    model.eval()
    try:
        vecs = _batched_vectors(model.encode_mentions, seqs, tok.pad_id, batch_size)
    finally:
        model.train(was_training)
    return vecs.reshape(len(mentions), model.spec.hidden_size)


def build_index(kb: KnowledgeBase, model: BiEncoder, registry: SeparatorRegistry, cfg: SerializationConfig,
                checkpoint_digest: str = "", batch_size: int = 64) -> EntityIndex:
    """Encode every entity of ``kb`` with the entity tower (inference-mode serialization)."""
    if cfg.stochastic:
        raise ValueError("index building requires inference-mode serialization (no shuffle, no OOV drop)")
    tok = model.spec.tokenizer()
    texts = entity_strings(kb, registry, cfg, tok.word_len)
    matrix = encode_entity_texts(model, texts, cfg.max_tokens, batch_size)
    return EntityIndex(kb.kb_id, matrix.astype(np.float32), tuple(kb.entity_ids), checkpoint_digest)


def _top_k_rows(scores: np.ndarray, k: int) -> np.ndarray:
    # stable sort on negated scores: ties keep id_order
    return np.argsort(-scores, axis=-1, kind="stable")[..., :k]


def retrieve(mention_vec: np.ndarray, index: EntityIndex, k: int = DEFAULT_K,
             mention_id: str = "") -> CandidateList:
    """Exact top-``k`` entities by dot product; ties resolved by index row order."""
    if k < 1:
        raise ValueError("k must be >= 1")
    if len(index) == 0:
        raise ValueError("cannot retrieve from an empty index")
    q = np.asarray(mention_vec, dtype=np.float64)
    scores = index.matrix.astype(np.float64) @ q
    rows = _top_k_rows(scores, k)
    return CandidateList(mention_id, tuple((index.id_order[r], float(scores[r])) for r in rows))


def retrieve_batch(mention_vecs: np.ndarray, index: EntityIndex, k: int = DEFAULT_K,
                   mention_ids: Sequence[str] | None = None) -> list[CandidateList]:
    if k < 1:
        raise ValueError("k must be >= 1")
    if len(index) == 0:
        raise ValueError("cannot retrieve from an empty index")
    q = np.asarray(mention_vecs, dtype=np.float64)
    scores = q @ index.matrix.astype(np.float64).T
    rows = _top_k_rows(scores, k)
    ids = mention_ids if mention_ids is not None else [""] * len(q)
    return [
        CandidateList(mid, tuple((index.id_order[r], float(scores[i, r])) for r in rows[i]))
        for i, mid in enumerate(ids)
    ]


def retrieve_mentions(model: BiEncoder, mentions: Sequence[Mention], index: EntityIndex,
                      k: int = DEFAULT_K, max_tokens: int = 128) -> list[CandidateList]:
    vecs = encode_mentions(model, mentions, max_tokens)
    return retrieve_batch(vecs, index, k, [m.mention_id for m in mentions])


def recall_at_k(candidate_lists: Iterable[CandidateList], gold: Mapping[str, str],
                k: int | None = None) -> float:
    """Fraction of mentions whose gold entity is among their (top-``k``) candidates."""
    lists = list(candidate_lists)
    if not lists:
        return 0.0
    hits = 0
    for cl in lists:
        if cl.mention_id not in gold:
            raise KeyError(f"no gold entity for mention {cl.mention_id!r}")
        ids = cl.entity_ids if k is None else cl.entity_ids[:k]
        hits += gold[cl.mention_id] in ids
    return hits / len(lists)
