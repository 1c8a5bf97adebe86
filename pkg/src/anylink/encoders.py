"""Transformer encoders: mention/entity towers for candidate generation and a cross-encoder reranker."""

from __future__ import annotations

import copy
import hashlib
import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from safetensors.torch import load_file, save_file
from torch import nn
from torch.nn import functional as F

from .errors import CheckpointMismatch
from .serialization import RESERVED_TOKENS, MentionInput, SeparatorRegistry, serialize_mention
from .tokenizer import Tokenizer
from .kb import Mention


@dataclass(frozen=True)
class EncoderSpec:
    vocab: tuple[str, ...]
    layers: int = 2
    hidden_size: int = 64
    heads: int = 4
    ffn_size: int | None = None
    max_positions: int = 256
    dropout: float = 0.0
    qk_tie_scale: float = 0.0  # 0 -> independent xavier query/key projections
    pretrained_weights: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "vocab", tuple(self.vocab))
        for name in ("layers", "hidden_size", "heads"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.hidden_size % self.heads:
            raise ValueError(f"hidden_size {self.hidden_size} not divisible by heads {self.heads}")
        if self.max_positions < 256:
            raise ValueError("max_positions must be at least 256")
        if len(set(self.vocab)) != len(self.vocab):
            raise ValueError("vocab tokens must be unique")
        if self.ffn_size is None:
            object.__setattr__(self, "ffn_size", 4 * self.hidden_size)

    @property
    def vocab_size(self) -> int:
        return len(self.vocab)

    def tokenizer(self) -> Tokenizer:
        return Tokenizer(self.vocab)

    def to_json(self) -> dict:
        d = asdict(self)
        d["vocab"] = None  # stored in vocab.txt
        return d


class SelfAttention(nn.Module):
    def __init__(self, hidden: int, heads: int, dropout: float):
        super().__init__()
        self.heads = heads
        self.qkv = nn.Linear(hidden, 3 * hidden)
        self.out = nn.Linear(hidden, hidden)
        self.drop = nn.Dropout(dropout)

    def forward(self, x: torch.Tensor, key_mask: torch.Tensor) -> torch.Tensor:
        b, t, h = x.shape
        q, k, v = self.qkv(x).view(b, t, 3, self.heads, h // self.heads).permute(2, 0, 3, 1, 4)
        y = F.scaled_dot_product_attention(q, k, v, attn_mask=key_mask[:, None, None, :],
                                           dropout_p=self.drop.p if self.training else 0.0)
        return self.out(y.transpose(1, 2).reshape(b, t, h))


class Block(nn.Module):
    def __init__(self, hidden: int, heads: int, ffn: int, dropout: float):
        super().__init__()
        self.norm1 = nn.LayerNorm(hidden)
        self.attn = SelfAttention(hidden, heads, dropout)
        self.norm2 = nn.LayerNorm(hidden)
        self.ffn = nn.Sequential(nn.Linear(hidden, ffn), nn.GELU(), nn.Linear(ffn, hidden))
        self.drop = nn.Dropout(dropout)

    def forward(self, x, key_mask):
        x = x + self.drop(self.attn(self.norm1(x), key_mask))
        return x + self.drop(self.ffn(self.norm2(x)))


class TransformerEncoder(nn.Module):
    """Pre-LayerNorm encoder; the output at position 0 ([CLS]) is the sequence vector.

    Token embeddings start i.i.d. standard normal (the same law used for added
    separator rows); a learned mention-indicator vector is added to token
    embeddings inside the mention span.
    """

    def __init__(self, spec: EncoderSpec):
        super().__init__()
        self.spec = spec
        h = spec.hidden_size
        self.token_emb = nn.Embedding(spec.vocab_size, h)
        self.pos_emb = nn.Embedding(spec.max_positions, h)
        self.seg_emb = nn.Embedding(2, h)
        self.mention_emb = nn.Parameter(torch.zeros(h))
        self.blocks = nn.ModuleList(
            Block(h, spec.heads, spec.ffn_size, spec.dropout) for _ in range(spec.layers)
        )
        self.drop = nn.Dropout(spec.dropout)
        self.reset_parameters()

    def reset_parameters(self):
        nn.init.normal_(self.token_emb.weight, 0.0, 1.0)
        nn.init.normal_(self.pos_emb.weight, 0.0, 0.5)
        nn.init.normal_(self.seg_emb.weight, 0.0, 0.5)
        nn.init.normal_(self.mention_emb, 0.0, 0.5)
        for block in self.blocks:
            for lin in (block.attn.qkv, block.attn.out, block.ffn[0], block.ffn[2]):
                nn.init.xavier_uniform_(lin.weight)
                nn.init.zeros_(lin.bias)
            if self.spec.qk_tie_scale:
                # key projection starts as a copy of the query projection, so identical
                # tokens attend to each other from step 0; matching mention and candidate
                # words is otherwise slow to discover from a random start
                w, h = block.attn.qkv.weight.data, self.spec.hidden_size
                w[h:2 * h] = w[:h]
                w[:2 * h] *= self.spec.qk_tie_scale

    def forward(self, ids: torch.Tensor, attention_mask: torch.Tensor,
                segments: torch.Tensor | None = None, mention_mask: torch.Tensor | None = None) -> torch.Tensor:
        """Final [CLS] hidden state, shape (batch, hidden)."""
        return self.hidden_states(ids, attention_mask, segments, mention_mask)[:, 0]

    def hidden_states(self, ids, attention_mask, segments=None, mention_mask=None):
        b, t = ids.shape
        if t > self.spec.max_positions:
            raise ValueError(f"sequence length {t} exceeds max_positions {self.spec.max_positions}")
        positions = torch.arange(t, device=ids.device)
        x = self.token_emb(ids) + self.pos_emb(positions)[None]
        if segments is not None:
            x = x + self.seg_emb(segments)
        else:
            x = x + self.seg_emb.weight[0]
        if mention_mask is not None:
            x = x + mention_mask[..., None].to(x.dtype) * self.mention_emb
        x = self.drop(x)
        key_mask = attention_mask.bool()
        for block in self.blocks:
            x = block(x, key_mask)
        return x

    def extend_vocab(self, tokens: Sequence[str], generator: torch.Generator) -> None:
        """Append standard-normal rows for ``tokens``; existing rows are untouched."""
        if not tokens:
            return
        old = self.token_emb.weight.data
        new_rows = torch.randn(len(tokens), old.shape[1], generator=generator, dtype=torch.float64).to(old.dtype)
        emb = nn.Embedding(old.shape[0] + len(tokens), old.shape[1], dtype=old.dtype)
        emb.weight.data.copy_(torch.cat([old, new_rows]))
        self.token_emb = emb
        self.spec = replace(self.spec, vocab=self.spec.vocab + tuple(tokens))


class BiEncoder(nn.Module):
    """Mention and entity towers compared by dot product."""

    kind = "biencoder"

    def __init__(self, spec: EncoderSpec, share_towers: bool = False):
        super().__init__()
        self.share_towers = share_towers
        self.mention_tower = TransformerEncoder(spec)
        self.entity_tower = self.mention_tower if share_towers else TransformerEncoder(spec)

    @property
    def spec(self) -> EncoderSpec:
        return self.mention_tower.spec

    def towers(self):
        return [self.mention_tower] if self.share_towers else [self.mention_tower, self.entity_tower]

    def encode_mentions(self, batch: "Batch") -> torch.Tensor:
        return self.mention_tower(batch.ids, batch.mask, batch.segments, batch.mention_mask)

    def encode_entities(self, batch: "Batch") -> torch.Tensor:
        return self.entity_tower(batch.ids, batch.mask, batch.segments)


class CrossEncoder(nn.Module):
    """score(m, e) = w . h_{m,e} with h the [CLS] state of ``[CLS] c_l m c_r [SEP] e [SEP]``."""

    kind = "crossencoder"

    def __init__(self, spec: EncoderSpec):
        super().__init__()
        self.encoder = TransformerEncoder(spec)
        self.w = nn.Parameter(torch.randn(spec.hidden_size) / math.sqrt(spec.hidden_size))

    @property
    def spec(self) -> EncoderSpec:
        return self.encoder.spec

    def towers(self):
        return [self.encoder]

    def hidden(self, batch: "Batch") -> torch.Tensor:
        return self.encoder(batch.ids, batch.mask, batch.segments, batch.mention_mask)

    def forward(self, batch: "Batch") -> torch.Tensor:
        return self.hidden(batch) @ self.w


def augment_vocabulary(model, registry: SeparatorRegistry, seed: int = 0):
    """Copy of ``model`` whose vocab gains one token per registry entry (N(0,1) init under ``seed``)."""
    tokens = registry.tokens
    vocab = set(model.spec.vocab)
    clash = [t for t in tokens if t in vocab]
    if clash:
        raise ValueError(f"separator tokens already in vocabulary: {clash[:5]}")
    new = copy.deepcopy(model)
    for i, tower in enumerate(new.towers()):
        gen = torch.Generator().manual_seed(int(seed) * 1000 + i)
        tower.extend_vocab(tokens, gen)
    return new


# --------------------------------------------------------------------------- batching

@dataclass
class Batch:
    ids: torch.Tensor
    mask: torch.Tensor
    segments: torch.Tensor
    mention_mask: torch.Tensor

    @classmethod
    def from_sequences(cls, seqs: Sequence["Sequence_"], pad_id: int) -> "Batch":
        t = max(len(s.ids) for s in seqs)
        b = len(seqs)
        ids = torch.full((b, t), pad_id, dtype=torch.long)
        mask = torch.zeros((b, t), dtype=torch.bool)
        segs = torch.zeros((b, t), dtype=torch.long)
        mm = torch.zeros((b, t), dtype=torch.bool)
        for i, s in enumerate(seqs):
            n = len(s.ids)
            ids[i, :n] = torch.tensor(s.ids, dtype=torch.long)
            mask[i, :n] = True
            if s.segments is not None:
                segs[i, :n] = torch.tensor(s.segments, dtype=torch.long)
            if s.span is not None:
                mm[i, s.span[0]:s.span[1]] = True
        return cls(ids, mask, segs, mm)


@dataclass
class Sequence_:
    ids: list[int]
    segments: list[int] | None = None
    span: tuple[int, int] | None = None


def mention_pieces(tokenizer: Tokenizer, mention: Mention | MentionInput, max_tokens: int = 128):
    """Sub-word ids of ``c_l m c_r`` (no specials) and the mention's token span."""
    mi = serialize_mention(mention, max_tokens, tokenizer.word_len) if isinstance(mention, Mention) else mention
    ids, span = tokenizer.encode_with_span(mi.text, mi.span)
    if len(ids) > max_tokens:
        ids = ids[:max_tokens]
        span = (min(span[0], max_tokens), min(span[1], max_tokens))
    return ids, span


def mention_sequence(tokenizer: Tokenizer, mention: Mention | MentionInput, max_tokens: int = 128) -> Sequence_:
    ids, (s, e) = mention_pieces(tokenizer, mention, max_tokens)
    return Sequence_([tokenizer.cls_id] + ids + [tokenizer.sep_id], None, (s + 1, e + 1))


def entity_sequence(tokenizer: Tokenizer, text: str, max_tokens: int = 128) -> Sequence_:
    ids = tokenizer.encode(text)[:max_tokens]
    return Sequence_([tokenizer.cls_id] + ids + [tokenizer.sep_id])


def pair_sequence(tokenizer: Tokenizer, mention_ids: list[int], span: tuple[int, int], entity_text: str,
                  max_tokens: int = 128, max_positions: int = 256) -> Sequence_:
    """``[CLS] c_l m c_r [SEP] e [SEP]``: segment 0 through the first [SEP], segment 1 after.

    On overflow of ``max_positions`` the candidate side is cut first.
    """
    ent = tokenizer.encode(entity_text)[:max_tokens]
    men = list(mention_ids)
    overflow = len(men) + len(ent) + 3 - max_positions
    if overflow > 0:
        cut = min(overflow, len(ent))
        ent = ent[: len(ent) - cut]
        overflow -= cut
        if overflow > 0:
            men = men[: len(men) - overflow]
            span = (min(span[0], len(men)), min(span[1], len(men)))
    ids = [tokenizer.cls_id] + men + [tokenizer.sep_id] + ent + [tokenizer.sep_id]
    segments = [0] * (len(men) + 2) + [1] * (len(ent) + 1)
    return Sequence_(ids, segments, (span[0] + 1, span[1] + 1))


def _check_span(span, n_tokens):
    if not (0 <= span[0] < span[1] <= n_tokens):
        raise ValueError(f"mention span {span} outside [0, {n_tokens}]")


def encode_mention(model: BiEncoder, text: str, span: tuple[int, int], max_tokens: int = 128) -> np.ndarray:
    """Vector of a mention in context; ``span`` is a word span over ``text.split()``."""
    tok = model.spec.tokenizer()
    _check_span(span, len(text.split()))
    seq = mention_sequence(tok, MentionInput(text, span), max_tokens)
    with torch.no_grad():
        return model.encode_mentions(Batch.from_sequences([seq], tok.pad_id))[0].cpu().numpy()


def encode_entity(model: BiEncoder, text: str, max_tokens: int = 128) -> np.ndarray:
    tok = model.spec.tokenizer()
    with torch.no_grad():
        return model.encode_entities(Batch.from_sequences([entity_sequence(tok, text, max_tokens)], tok.pad_id))[0].cpu().numpy()


def score_pair(model: CrossEncoder, text: str, span: tuple[int, int], entity_text: str,
               max_tokens: int = 128) -> float:
    tok = model.spec.tokenizer()
    _check_span(span, len(text.split()))
    men, tspan = mention_pieces(tok, MentionInput(text, span), max_tokens)
    seq = pair_sequence(tok, men, tspan, entity_text, max_tokens, model.spec.max_positions)
    with torch.no_grad():
        return float(model(Batch.from_sequences([seq], tok.pad_id))[0])


def pick_best(scores: Sequence[float], candidate_ids: Sequence[str]) -> str:
    """Highest-scoring candidate; ties go to the earlier (better retrieval rank) candidate."""
    if len(candidate_ids) == 0:
        raise ValueError("cannot pick from an empty candidate list")
    if len(scores) != len(candidate_ids):
        raise ValueError("scores and candidates differ in length")
    best = 0
    for i in range(1, len(scores)):
        if scores[i] > scores[best]:
            best = i
    return candidate_ids[best]


# --------------------------------------------------------------------------- checkpoints

PARAMS_FILE = "params.safetensors"


def _file_digest(paths: Sequence[Path]) -> str:
    h = hashlib.sha256()
    for p in paths:
        h.update(p.name.encode())
        h.update(p.read_bytes())
    return h.hexdigest()


def save_checkpoint(model, path: str | Path, registry: SeparatorRegistry | None = None,
                    extra: dict | None = None) -> str:
    """Write a self-describing checkpoint directory; returns its content digest."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    descriptor = {
        "kind": model.kind,
        "encoder": model.spec.to_json(),
        "share_towers": getattr(model, "share_towers", False),
        "extra": extra or {},
    }
    (path / "spec.json").write_text(json.dumps(descriptor, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    model.spec.tokenizer().save(path / "vocab.txt")
    (registry or SeparatorRegistry()).save(path / "registry.tsv")
    state = {k: v.detach().contiguous().cpu() for k, v in model.state_dict().items()}
    if getattr(model, "share_towers", False):
        state = {k: v for k, v in state.items() if not k.startswith("entity_tower.")}
    save_file(state, str(path / PARAMS_FILE))
    digest = checkpoint_digest(path)
    return digest


def checkpoint_digest(path: str | Path) -> str:
    path = Path(path)
    return _file_digest([path / n for n in ("spec.json", "vocab.txt", "registry.tsv", PARAMS_FILE)])


@dataclass
class Checkpoint:
    model: nn.Module
    registry: SeparatorRegistry
    extra: dict = field(default_factory=dict)
    digest: str = ""

    @property
    def tokenizer(self) -> Tokenizer:
        return self.model.spec.tokenizer()


def load_checkpoint(path: str | Path) -> Checkpoint:
    path = Path(path)
    try:
        descriptor = json.loads((path / "spec.json").read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise CheckpointMismatch(f"no checkpoint at {path}") from None
    vocab = Tokenizer.load(path / "vocab.txt").vocab
    enc = dict(descriptor["encoder"], vocab=tuple(vocab))
    spec = EncoderSpec(**enc)
    if descriptor["kind"] == BiEncoder.kind:
        model = BiEncoder(spec, share_towers=descriptor.get("share_towers", False))
    elif descriptor["kind"] == CrossEncoder.kind:
        model = CrossEncoder(spec)
    else:
        raise CheckpointMismatch(f"unknown checkpoint kind {descriptor['kind']!r}")
    state = load_file(str(path / PARAMS_FILE))
    missing, unexpected = model.load_state_dict(state, strict=False)
    if getattr(model, "share_towers", False):
        missing = [k for k in missing if not k.startswith("entity_tower.")]
    if missing or unexpected:
        raise CheckpointMismatch(f"parameter mismatch in {path}: missing={missing[:3]} unexpected={unexpected[:3]}")
    registry = SeparatorRegistry.load(path / "registry.tsv")
    missing_tokens = [t for t in registry.tokens if t not in set(vocab)]
    if missing_tokens:
        raise CheckpointMismatch(f"registry tokens absent from vocab: {missing_tokens[:3]}")
    model.eval()
    return Checkpoint(model, registry, descriptor.get("extra", {}), checkpoint_digest(path))


def base_spec(tokenizer: Tokenizer, **kwargs) -> EncoderSpec:
    for t in RESERVED_TOKENS:
        assert t in tokenizer
    return EncoderSpec(tuple(tokenizer.vocab), **kwargs)
