"""Tokenizer with character offsets and question/context feature encoding."""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Iterable, Sequence

__all__ = [
    "PAD",
    "UNK",
    "CLS",
    "SEP",
    "EncodingError",
    "Vocab",
    "tokenize",
    "EncodedFeature",
    "window_starts",
    "tokenize_and_encode",
]

PAD, UNK, CLS, SEP = "[PAD]", "[UNK]", "[CLS]", "[SEP]"
SPECIALS = (PAD, UNK, CLS, SEP)

_TOKEN_RE = re.compile(r"\w+|[^\w\s]", re.UNICODE)


class EncodingError(ValueError):
    """Input text cannot be encoded (empty context or question)."""


def tokenize(text: str) -> list[tuple[str, int, int]]:
    """Lowercased word/punctuation tokens with [start, end) character offsets."""
    return [(m.group().lower(), m.start(), m.end()) for m in _TOKEN_RE.finditer(text)]


class Vocab:
    def __init__(self, tokens: Iterable[str] = ()):
        self.itos: list[str] = list(SPECIALS)
        self.stoi: dict[str, int] = {t: i for i, t in enumerate(self.itos)}
        for t in tokens:
            self.add(t)

    def add(self, token: str) -> int:
        idx = self.stoi.get(token)
        if idx is None:
            idx = len(self.itos)
            self.itos.append(token)
            self.stoi[token] = idx
        return idx

    def __len__(self) -> int:
        return len(self.itos)

    def __getitem__(self, token: str) -> int:
        return self.stoi.get(token, self.stoi[UNK])

    @classmethod
    def build(cls, texts: Iterable[str]) -> "Vocab":
        """Vocabulary over the tokens of ``texts`` in first-seen order."""
        vocab = cls()
        for text in texts:
            for tok, _, _ in tokenize(text):
                vocab.add(tok)
        return vocab

    def to_list(self) -> list[str]:
        return list(self.itos)

    @classmethod
    def from_list(cls, itos: Sequence[str]) -> "Vocab":
        if tuple(itos[: len(SPECIALS)]) != SPECIALS:
            raise EncodingError("vocabulary must start with the special tokens")
        v = cls()
        for t in itos[len(SPECIALS):]:
            v.add(t)
        return v


@dataclass
class EncodedFeature:
    """One model input window for a question/context pair.

    ``offsets[i]`` is the character span of token ``i`` in the context, or
    None for [CLS], question, [SEP] and padding positions.
    """

    example_id: str
    window_id: int
    input_ids: list[int]
    attention_mask: list[int]
    offsets: list[tuple[int, int] | None]
    context_start: int
    context_end: int  # exclusive
    start_position: int | None = None
    end_position: int | None = None
    is_null_span: bool = False
    context: str = field(default="", repr=False)

    def __len__(self) -> int:
        return len(self.input_ids)

    def context_mask(self) -> list[bool]:
        return [self.context_start <= i < self.context_end for i in range(len(self.input_ids))]

    def span_text(self, start: int, end: int) -> str:
        s, e = self.offsets[start], self.offsets[end]
        if s is None or e is None:
            raise EncodingError(f"token span ({start}, {end}) is outside the context")
        return self.context[s[0]:e[1]]


def window_starts(n_tokens: int, window: int, stride: int) -> list[int]:
    """Start offsets of windows of ``window`` tokens advancing by ``stride``.

    The last window is the first whose end reaches ``n_tokens``.
    """
    if window <= 0 or stride <= 0:
        raise EncodingError("window and stride must be positive")
    starts = [0]
    while starts[-1] + window < n_tokens:
        starts.append(starts[-1] + stride)
    return starts


def tokenize_and_encode(
    context: str,
    question: str,
    vocab: Vocab,
    max_len: int = 384,
    doc_stride: int = 128,
    example_id: str = "",
    answer_start: int | None = None,
    answer_text: str | None = None,
) -> list[EncodedFeature]:
    """Encode ``[CLS] question [SEP] context-window [SEP]`` for every window.

    With an answer given, windows that fully contain it carry its token span;
    others are null-span windows pointing at [CLS] (position 0).
    """
    q_toks = tokenize(question)
    if not q_toks:
        raise EncodingError(f"{example_id or 'example'}: empty question")
    c_toks = tokenize(context)
    if not c_toks:
        raise EncodingError(f"{example_id or 'example'}: empty context")
    q_ids = [vocab[t] for t, _, _ in q_toks]
    window = max_len - len(q_ids) - 3
    if window < 1:
        raise EncodingError(f"{example_id or 'example'}: question too long for max_len={max_len}")

    ans_tok = None
    if answer_start is not None and answer_text is not None:
        a0, a1 = answer_start, answer_start + len(answer_text)
        covered = [i for i, (_, s, e) in enumerate(c_toks) if s < a1 and e > a0]
        if not covered:
            raise EncodingError(f"{example_id or 'example'}: answer covers no context token")
        ans_tok = (covered[0], covered[-1])

    features = []
    for wid, w0 in enumerate(window_starts(len(c_toks), window, doc_stride)):
        chunk = c_toks[w0:w0 + window]
        ids = [vocab[CLS]] + q_ids + [vocab[SEP]]
        offsets: list[tuple[int, int] | None] = [None] * len(ids)
        cstart = len(ids)
        ids += [vocab[t] for t, _, _ in chunk]
        offsets += [(s, e) for _, s, e in chunk]
        cend = len(ids)
        ids.append(vocab[SEP])
        offsets.append(None)
        feat = EncodedFeature(
            example_id=example_id,
            window_id=wid,
            input_ids=ids,
            attention_mask=[1] * len(ids),
            offsets=offsets,
            context_start=cstart,
            context_end=cend,
            context=context,
        )
        if ans_tok is not None:
            lo, hi = ans_tok
            if w0 <= lo and hi < w0 + len(chunk):
                feat.start_position = cstart + lo - w0
                feat.end_position = cstart + hi - w0
            else:
                feat.start_position = feat.end_position = 0
                feat.is_null_span = True
        features.append(feat)
    return features
