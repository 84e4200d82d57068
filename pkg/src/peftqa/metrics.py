"""SQuAD-style answer scoring and span decoding."""

from __future__ import annotations

import json
import string
import unicodedata
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .squad import QaExample
from .text import EncodedFeature

__all__ = [
    "PORTUGUESE_ARTICLES",
    "ENGLISH_ARTICLES",
    "DecodeError",
    "CoverageError",
    "normalize_answer",
    "token_f1",
    "exact_match",
    "Prediction",
    "decode_span",
    "decode_windows",
    "EvalReport",
    "evaluate_dataset",
]

PORTUGUESE_ARTICLES = ("o", "a", "os", "as", "um", "uma", "uns", "umas")
ENGLISH_ARTICLES = ("a", "an", "the")
MAX_ANSWER_LEN = 30


class DecodeError(ValueError):
    """No valid (start, end) pair exists."""


class CoverageError(ValueError):
    """Some examples have no prediction."""


def _is_punct(ch: str) -> bool:
    return ch in string.punctuation or unicodedata.category(ch).startswith("P")


def normalize_answer(text: str, articles: Sequence[str] = PORTUGUESE_ARTICLES) -> str:
    """Lowercase, drop punctuation, drop articles, collapse whitespace."""
    text = "".join(" " if _is_punct(ch) else ch for ch in text.lower())
    drop = set(articles)
    return " ".join(tok for tok in text.split() if tok not in drop)


def _f1_single(pred_toks: list[str], gold_toks: list[str]) -> float:
    if not pred_toks and not gold_toks:
        return 1.0
    if not pred_toks or not gold_toks:
        return 0.0
    same = sum((Counter(pred_toks) & Counter(gold_toks)).values())
    if same == 0:
        return 0.0
    precision = same / len(pred_toks)
    recall = same / len(gold_toks)
    return 2 * precision * recall / (precision + recall)


def token_f1(pred: str, golds: str | Sequence[str], articles: Sequence[str] = PORTUGUESE_ARTICLES) -> float:
    """Max over references of the token-multiset F1 of the normalized strings."""
    golds = [golds] if isinstance(golds, str) else list(golds)
    p = normalize_answer(pred, articles).split()
    return max((_f1_single(p, normalize_answer(g, articles).split()) for g in golds), default=0.0)


def exact_match(pred: str, golds: str | Sequence[str], articles: Sequence[str] = PORTUGUESE_ARTICLES) -> int:
    golds = [golds] if isinstance(golds, str) else list(golds)
    p = normalize_answer(pred, articles)
    return int(any(p == normalize_answer(g, articles) for g in golds))


@dataclass(frozen=True)
class Prediction:
    example_id: str
    text: str
    start: int
    end: int
    score: float
    window_id: int = 0


def decode_span(start_logits, end_logits, feature: EncodedFeature | None = None,
                max_answer_len: int = MAX_ANSWER_LEN) -> Prediction:
    """Best (i, j) with i <= j and j - i < max_answer_len by start[i] + end[j].

    Non-finite logits mark invalid positions. Ties resolve to the earliest
    start, then the earliest end.
    """
    s = np.asarray(getattr(start_logits, "data", start_logits), dtype=np.float64).reshape(-1)
    e = np.asarray(getattr(end_logits, "data", end_logits), dtype=np.float64).reshape(-1)
    if s.shape != e.shape:
        raise DecodeError(f"start/end logits differ in length: {s.shape} vs {e.shape}")
    if feature is not None:
        ctx = np.asarray(feature.context_mask())
        s = np.where(ctx, s, -np.inf)
        e = np.where(ctx, e, -np.inf)
    n = s.size
    i = np.arange(n)[:, None]
    j = np.arange(n)[None, :]
    valid = (j >= i) & (j - i < max_answer_len) & np.isfinite(s)[:, None] & np.isfinite(e)[None, :]
    if not valid.any():
        raise DecodeError("no valid start/end pair")
    scores = np.where(valid, s[:, None] + e[None, :], -np.inf)
    flat = int(np.argmax(scores))
    bi, bj = divmod(flat, n)
    text = feature.span_text(bi, bj) if feature is not None else ""
    ex_id = feature.example_id if feature is not None else ""
    wid = feature.window_id if feature is not None else 0
    return Prediction(ex_id, text, bi, bj, float(scores[bi, bj]), wid)


def decode_windows(candidates: Iterable[Prediction]) -> Prediction:
    """Highest-scoring span across the windows of one question (earliest wins ties)."""
    best = None
    for p in candidates:
        if best is None or p.score > best.score:
            best = p
    if best is None:
        raise DecodeError("no candidate windows")
    return best


@dataclass
class EvalReport:
    f1: float
    exact_match: float
    count: int
    articles: tuple[str, ...] = PORTUGUESE_ARTICLES
    per_example: dict[str, tuple[float, int]] = field(default_factory=dict, repr=False)

    def to_dict(self) -> dict:
        return {
            "f1": round(self.f1, 2),
            "exact_match": round(self.exact_match, 2),
            "config": {"count": self.count, "articles": list(self.articles)},
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), ensure_ascii=False, sort_keys=True)

    def format(self) -> str:
        return f"F1={self.f1:.2f} EM={self.exact_match:.2f}"


def evaluate_dataset(predictions: Mapping[str, str] | Sequence[Prediction], examples: Sequence[QaExample],
                     articles: Sequence[str] = PORTUGUESE_ARTICLES) -> EvalReport:
    """Average F1/EM (percent) over examples; every example needs a prediction."""
    if not isinstance(predictions, Mapping):
        predictions = {p.example_id: p.text for p in predictions}
    missing = [ex.id for ex in examples if ex.id not in predictions]
    if missing:
        raise CoverageError(f"{len(missing)} example(s) without prediction: {', '.join(missing[:20])}")
    per: dict[str, tuple[float, int]] = {}
    f1_sum = em_sum = 0.0
    for ex in examples:
        pred = predictions[ex.id]
        f1 = token_f1(pred, ex.gold_texts, articles)
        em = exact_match(pred, ex.gold_texts, articles)
        per[ex.id] = (f1, em)
        f1_sum += f1
        em_sum += em
    n = len(examples)
    return EvalReport(100.0 * f1_sum / n if n else 0.0, 100.0 * em_sum / n if n else 0.0, n,
                      tuple(articles), per)
