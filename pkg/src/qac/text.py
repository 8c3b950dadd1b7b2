"""Query normalization, tokenization, and vocabularies.

Normalization lower-cases, strips Unicode punctuation, and collapses
whitespace; an empty result is the drop-this-record signal. Tokenization is
whitespace-based except that every CJK character stands alone as its own
token, which replaces an external word segmenter with a deterministic rule.
"""
from __future__ import annotations

import unicodedata
from dataclasses import dataclass, field

PAD_ID = 0
UNK_ID = 1

_CJK_RANGES = (
    (0x3040, 0x30FF),  # kana
    (0x3400, 0x4DBF),
    (0x4E00, 0x9FFF),
    (0xAC00, 0xD7AF),  # hangul
    (0xF900, 0xFAFF),
)


def _is_cjk(ch: str) -> bool:
    cp = ord(ch)
    return any(lo <= cp <= hi for lo, hi in _CJK_RANGES)


def normalize_query(text: str) -> str:
    """Lowercase, drop punctuation, collapse whitespace. "" means drop."""
    kept = [ch for ch in text.lower() if not unicodedata.category(ch).startswith("P")]
    return " ".join("".join(kept).split())


def normalize_prefix(text: str) -> str:
    """Like normalize_query but keeps one trailing space when the raw input
    ended mid-whitespace, so a just-completed token stays marked complete."""
    trailing = text != text.rstrip()
    norm = normalize_query(text)
    if norm and trailing:
        norm += " "
    return norm


def tokenize(text: str) -> list[str]:
    """Whitespace tokens, with each CJK character emitted as its own token."""
    tokens: list[str] = []
    buf: list[str] = []
    for ch in text:
        if _is_cjk(ch):
            if buf:
                tokens.append("".join(buf))
                buf = []
            tokens.append(ch)
        elif ch == " ":
            if buf:
                tokens.append("".join(buf))
                buf = []
        else:
            buf.append(ch)
    if buf:
        tokens.append("".join(buf))
    return tokens


@dataclass
class Vocab:
    """Token and character id maps; PAD=0 and UNK=1 are reserved."""

    token_to_id: dict[str, int] = field(default_factory=dict)
    char_to_id: dict[str, int] = field(default_factory=dict)

    @classmethod
    def build(cls, texts) -> "Vocab":
        tok_counts: dict[str, int] = {}
        char_counts: dict[str, int] = {}
        for text in texts:
            for tok in tokenize(text):
                tok_counts[tok] = tok_counts.get(tok, 0) + 1
            for ch in text:
                char_counts[ch] = char_counts.get(ch, 0) + 1
        vocab = cls()
        for tok in sorted(tok_counts, key=lambda t: (-tok_counts[t], t)):
            vocab.token_to_id[tok] = len(vocab.token_to_id) + 2
        for ch in sorted(char_counts, key=lambda c: (-char_counts[c], c)):
            vocab.char_to_id[ch] = len(vocab.char_to_id) + 2
        return vocab

    @property
    def n_tokens(self) -> int:
        return len(self.token_to_id) + 2

    @property
    def n_chars(self) -> int:
        return len(self.char_to_id) + 2

    def token_id(self, tok: str) -> int:
        return self.token_to_id.get(tok, UNK_ID)

    def char_id(self, ch: str) -> int:
        return self.char_to_id.get(ch, UNK_ID)

    def to_dict(self) -> dict:
        order = sorted(self.token_to_id, key=self.token_to_id.get)
        chars = sorted(self.char_to_id, key=self.char_to_id.get)
        return {"tokens": order, "chars": chars}

    @classmethod
    def from_dict(cls, d: dict) -> "Vocab":
        vocab = cls()
        for i, tok in enumerate(d["tokens"]):
            vocab.token_to_id[tok] = i + 2
        for i, ch in enumerate(d["chars"]):
            vocab.char_to_id[ch] = i + 2
        return vocab


def tokenize_pad(text: str, vocab: Vocab, target_len: int) -> list[int]:
    """Token ids truncated or tail-padded with PAD to exactly target_len."""
    ids = [vocab.token_id(t) for t in tokenize(text)][:target_len]
    return ids + [PAD_ID] * (target_len - len(ids))


def char_ids(text: str, vocab: Vocab, max_len: int = 20) -> list[int]:
    """Character ids of a prefix, truncated to max_len; no padding applied."""
    return [vocab.char_id(ch) for ch in text[:max_len]]
