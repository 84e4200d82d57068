"""SQuAD v1 ingestion and a seeded synthetic extractive-QA generator."""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from .text import tokenize

__all__ = [
    "SquadParseError",
    "SquadDataError",
    "Answer",
    "QaExample",
    "parse_squad_json",
    "load_squad",
    "serialize_squad",
    "SyntheticSpec",
    "generate_synthetic",
    "oracle_extract",
    "write_cache",
    "read_cache",
]


class SquadParseError(ValueError):
    """The file is not SQuAD v1 JSON; the message carries the JSON path."""


class SquadDataError(ValueError):
    """An answer offset does not point at its answer text."""


@dataclass(frozen=True)
class Answer:
    text: str
    answer_start: int


@dataclass(frozen=True)
class QaExample:
    id: str
    context: str
    question: str
    answers: tuple[Answer, ...] = field(default_factory=tuple)

    def validate(self) -> None:
        for a in self.answers:
            if self.context[a.answer_start:a.answer_start + len(a.text)] != a.text:
                raise SquadDataError(
                    f"example {self.id}: answer {a.text!r} not found at offset {a.answer_start}"
                )

    @property
    def gold_texts(self) -> list[str]:
        return [a.text for a in self.answers]


def _expect(obj, kind, path: str):
    if not isinstance(obj, kind):
        name = kind.__name__ if isinstance(kind, type) else "/".join(k.__name__ for k in kind)
        raise SquadParseError(f"{path}: expected {name}, got {type(obj).__name__}")
    return obj


def parse_squad_json(raw: bytes | str) -> list[QaExample]:
    try:
        doc = json.loads(raw)
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise SquadParseError(f"$: invalid JSON ({exc})") from None
    _expect(doc, dict, "$")
    if "data" not in doc:
        raise SquadParseError("$.data: missing")
    examples: list[QaExample] = []
    errors: list[str] = []
    for ai, article in enumerate(_expect(doc["data"], list, "$.data")):
        apath = f"$.data[{ai}]"
        _expect(article, dict, apath)
        for pi, para in enumerate(_expect(article.get("paragraphs"), list, f"{apath}.paragraphs")):
            ppath = f"{apath}.paragraphs[{pi}]"
            _expect(para, dict, ppath)
            context = _expect(para.get("context"), str, f"{ppath}.context")
            for qi, qa in enumerate(_expect(para.get("qas"), list, f"{ppath}.qas")):
                qpath = f"{ppath}.qas[{qi}]"
                _expect(qa, dict, qpath)
                qid = str(_expect(qa.get("id"), (str, int), f"{qpath}.id"))
                question = _expect(qa.get("question"), str, f"{qpath}.question")
                answers = []
                for ni, ans in enumerate(_expect(qa.get("answers", []), list, f"{qpath}.answers")):
                    npath = f"{qpath}.answers[{ni}]"
                    _expect(ans, dict, npath)
                    text = _expect(ans.get("text"), str, f"{npath}.text")
                    start = _expect(ans.get("answer_start"), int, f"{npath}.answer_start")
                    answers.append(Answer(text, start))
                ex = QaExample(qid, context, question, tuple(answers))
                try:
                    ex.validate()
                except SquadDataError as exc:
                    errors.append(str(exc))
                examples.append(ex)
    if errors:
        raise SquadDataError(f"{len(errors)} offset mismatch(es): " + "; ".join(errors[:20]))
    return examples


def load_squad(path: str | Path) -> list[QaExample]:
    return parse_squad_json(Path(path).read_bytes())


def serialize_squad(examples: Iterable[QaExample], title: str = "dataset") -> bytes:
    """SQuAD v1 JSON with consecutive examples sharing a context grouped into one paragraph."""
    paragraphs: list[dict] = []
    for ex in examples:
        qa = {
            "id": ex.id,
            "question": ex.question,
            "answers": [{"text": a.text, "answer_start": a.answer_start} for a in ex.answers],
        }
        if paragraphs and paragraphs[-1]["context"] == ex.context:
            paragraphs[-1]["qas"].append(qa)
        else:
            paragraphs.append({"context": ex.context, "qas": [qa]})
    doc = {"version": "1.1", "data": [{"title": title, "paragraphs": paragraphs}]}
    return json.dumps(doc, ensure_ascii=False, indent=1).encode("utf-8")


# -- synthetic task ---------------------------------------------------------


@dataclass(frozen=True)
class SyntheticSpec:
    """Random filler contexts with one key word; the answer is the words after it."""

    vocab_size: int = 20
    n_keys: int = 4
    min_context: int = 8
    max_context: int = 20
    answer_len: int = 2
    n_train: int = 12000
    n_dev: int = 300
    seed: int = 0

    def __post_init__(self) -> None:
        if self.min_context < self.answer_len + 1 or self.max_context < self.min_context:
            raise ValueError("context length range must fit the key plus the answer")
        if self.vocab_size < 2 or self.n_keys < 1 or self.answer_len < 1:
            raise ValueError("vocab_size, n_keys and answer_len must be positive")


QUESTION_TEMPLATE = "o que vem depois de {key} ?"


def _make_examples(spec: SyntheticSpec, n: int, rng: np.random.Generator, prefix: str) -> list[QaExample]:
    out = []
    for i in range(n):
        length = int(rng.integers(spec.min_context, spec.max_context + 1))
        words = [f"w{j}" for j in rng.integers(0, spec.vocab_size, size=length)]
        key = f"k{int(rng.integers(0, spec.n_keys))}"
        pos = int(rng.integers(0, length - spec.answer_len))
        words[pos] = key
        context = " ".join(words)
        answer_start = sum(len(w) + 1 for w in words[: pos + 1])
        answer = " ".join(words[pos + 1: pos + 1 + spec.answer_len])
        out.append(QaExample(f"{prefix}-{i:06d}", context, QUESTION_TEMPLATE.format(key=key),
                             (Answer(answer, answer_start),)))
    return out


def generate_synthetic(spec: SyntheticSpec) -> tuple[list[QaExample], list[QaExample]]:
    """Deterministic (train, dev) split drawn from independent child streams of ``seed``."""
    train_seq, dev_seq = np.random.SeedSequence(spec.seed).spawn(2)
    train = _make_examples(spec, spec.n_train, np.random.default_rng(train_seq), "train")
    dev = _make_examples(spec, spec.n_dev, np.random.default_rng(dev_seq), "dev")
    return train, dev


def oracle_extract(example: QaExample, answer_len: int) -> str:
    """Rule-based reader: locate the key named in the question, copy what follows."""
    key = tokenize(example.question)[-2][0]
    toks = tokenize(example.context)
    for i, (tok, _, _) in enumerate(toks):
        if tok == key:
            span = toks[i + 1: i + 1 + answer_len]
            return example.context[span[0][1]:span[-1][2]]
    return ""


# -- binary cache -------------------------------------------------------------


def write_cache(examples: Iterable[QaExample], path: str | Path) -> None:
    """Length-prefixed (u32 little-endian) UTF-8 JSON record per example."""
    with open(path, "wb") as fh:
        for ex in examples:
            rec = json.dumps(asdict(ex), ensure_ascii=False).encode("utf-8")
            fh.write(struct.pack("<I", len(rec)))
            fh.write(rec)


def read_cache(path: str | Path) -> list[QaExample]:
    buf = Path(path).read_bytes()
    out, pos = [], 0
    while pos < len(buf):
        (n,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        d = json.loads(buf[pos:pos + n].decode("utf-8"))
        pos += n
        out.append(QaExample(d["id"], d["context"], d["question"],
                             tuple(Answer(a["text"], a["answer_start"]) for a in d["answers"])))
    return out
