"""Whitespace + greedy longest-match subword tokenizer over a plain vocab file."""

from __future__ import annotations

import re
from collections import Counter
from pathlib import Path
from typing import Iterable

from .serialization import CLS, MASK, PAD, RESERVED_TOKENS, SEP, UNK

_SPECIAL_RE = re.compile(r"^\[[A-Z0-9_]+\]$")
SUBWORD_PREFIX = "##"


class Tokenizer:
    """Tokens matching ``[UPPER_CASE]`` that are in the vocab are never split or lowercased."""

    def __init__(self, vocab: Iterable[str], lowercase: bool = True, max_chars_per_word: int = 100):
        self.vocab: list[str] = list(vocab)
        self.index = {t: i for i, t in enumerate(self.vocab)}
        if len(self.index) != len(self.vocab):
            raise ValueError("vocab contains duplicate tokens")
        missing = [t for t in RESERVED_TOKENS if t not in self.index]
        if missing:
            raise ValueError(f"vocab lacks reserved tokens {missing}")
        self.lowercase = lowercase
        self.max_chars_per_word = max_chars_per_word
        self._memo: dict[str, list[str]] = {}

    def __len__(self) -> int:
        return len(self.vocab)

    def __contains__(self, token: object) -> bool:
        return token in self.index

    pad_id = property(lambda self: self.index[PAD])
    unk_id = property(lambda self: self.index[UNK])
    cls_id = property(lambda self: self.index[CLS])
    sep_id = property(lambda self: self.index[SEP])
    mask_id = property(lambda self: self.index[MASK])

    def word_pieces(self, word: str) -> list[str]:
        pieces = self._memo.get(word)
        if pieces is None:
            pieces = self._memo[word] = self._word_pieces(word)
        return pieces

    def _word_pieces(self, word: str) -> list[str]:
        if word in self.index and _SPECIAL_RE.match(word):
            return [word]
        if self.lowercase:
            word = word.lower()
        if len(word) > self.max_chars_per_word:
            return [UNK]
        pieces, start = [], 0
        while start < len(word):
            end = len(word)
            piece = None
            while end > start:
                sub = word[start:end]
                if start > 0:
                    sub = SUBWORD_PREFIX + sub
                if sub in self.index:
                    piece = sub
                    break
                end -= 1
            if piece is None:
                return [UNK]
            pieces.append(piece)
            start = end
        return pieces

    def tokenize(self, text: str) -> list[str]:
        return [p for w in text.split() for p in self.word_pieces(w)]

    def count(self, text: str) -> int:
        return sum(len(self.word_pieces(w)) for w in text.split())

    def word_len(self, word: str) -> int:
        return len(self.word_pieces(word))

    def convert_tokens_to_ids(self, tokens: Iterable[str]) -> list[int]:
        unk = self.unk_id
        return [self.index.get(t, unk) for t in tokens]

    def encode(self, text: str) -> list[int]:
        return self.convert_tokens_to_ids(self.tokenize(text))

    def encode_with_span(self, text: str, word_span: tuple[int, int]) -> tuple[list[int], tuple[int, int]]:
        """Token ids for ``text`` plus the word span translated to token positions."""
        ids: list[int] = []
        start = end = None
        for i, word in enumerate(text.split()):
            if i == word_span[0]:
                start = len(ids)
            ids.extend(self.convert_tokens_to_ids(self.word_pieces(word)))
            if i == word_span[1] - 1:
                end = len(ids)
        if start is None or end is None:
            raise ValueError(f"word span {word_span} outside text with {len(text.split())} words")
        return ids, (start, end)

    def with_tokens(self, tokens: Iterable[str]) -> "Tokenizer":
        new = [t for t in tokens]
        clash = [t for t in new if t in self.index]
        if clash:
            raise ValueError(f"tokens already in vocabulary: {clash[:5]}")
        return Tokenizer(self.vocab + new, self.lowercase, self.max_chars_per_word)

    def save(self, path: str | Path) -> None:
        Path(path).write_text("\n".join(self.vocab) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path, lowercase: bool = True) -> "Tokenizer":
        vocab = [line for line in Path(path).read_text(encoding="utf-8").split("\n") if line]
        return cls(vocab, lowercase)


def build_vocab(texts: Iterable[str], min_freq: int = 1, max_words: int | None = None,
                lowercase: bool = True) -> Tokenizer:
    """Reserved tokens, every seen character (bare and ``##``), then frequent whole words."""
    words: Counter[str] = Counter()
    chars: set[str] = set()
    for text in texts:
        for w in text.split():
            if _SPECIAL_RE.match(w):
                continue
            if lowercase:
                w = w.lower()
            words[w] += 1
            chars.update(w)
    vocab = list(RESERVED_TOKENS)
    for ch in sorted(chars):
        vocab.append(ch)
    for ch in sorted(chars):
        vocab.append(SUBWORD_PREFIX + ch)
    ranked = sorted((w for w, c in words.items() if c >= min_freq and len(w) > 1), key=lambda w: (-words[w], w))
    if max_words is not None:
        ranked = ranked[:max_words]
    seen = set(vocab)
    vocab.extend(w for w in ranked if w not in seen)
    return Tokenizer(vocab, lowercase)
