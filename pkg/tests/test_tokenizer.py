import pytest

from anylink.serialization import RESERVED_TOKENS
from anylink.tokenizer import Tokenizer, build_vocab


def test_greedy_longest_match():
    tok = Tokenizer(list(RESERVED_TOKENS) + ["un", "##able", "##a", "##b", "a", "[K_NAME]"])
    assert tok.tokenize("Unable [K_NAME] [K_OTHER]") == ["un", "##able", "[K_NAME]", "[UNK]"]
    assert tok.tokenize("aab") == ["a", "##a", "##b"]


def test_reserved_required_and_unique():
    with pytest.raises(ValueError):
        Tokenizer(["a"])
    with pytest.raises(ValueError):
        Tokenizer(list(RESERVED_TOKENS) + ["a", "a"])


def test_build_vocab_covers_text():
    tok = build_vocab(["Alpha beta", "beta gamma [SEP] zeta"])
    for w in ("alpha", "beta", "gamma", "zeta"):
        assert tok.tokenize(w) == [w]
    assert "[SEP]" in tok and tok.tokenize("[SEP]") == ["[SEP]"]
    assert tok.tokenize("bag") == ["b", "##a", "##g"]


def test_encode_with_span():
    tok = build_vocab(["left mention right"])
    ids, span = tok.encode_with_span("left xmention right", (1, 2))
    assert span == (1, 1 + len(tok.word_pieces("xmention")))
    assert len(ids) == 2 + len(tok.word_pieces("xmention"))
    with pytest.raises(ValueError):
        tok.encode_with_span("one two", (2, 3))


def test_with_tokens_and_roundtrip(tmp_path):
    tok = build_vocab(["a b c"])
    aug = tok.with_tokens(["[K_A]"])
    assert len(aug) == len(tok) + 1 and aug.vocab[:-1] == tok.vocab
    with pytest.raises(ValueError):
        aug.with_tokens(["[K_A]"])
    aug.save(tmp_path / "v.txt")
    assert Tokenizer.load(tmp_path / "v.txt").vocab == aug.vocab
