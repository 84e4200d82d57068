import json
import re

import pytest

from peftqa.squad import (
    Answer,
    QaExample,
    SquadDataError,
    SquadParseError,
    SyntheticSpec,
    generate_synthetic,
    oracle_extract,
    parse_squad_json,
    read_cache,
    serialize_squad,
    write_cache,
)
from peftqa.metrics import evaluate_dataset
from peftqa.text import CLS, SPECIALS, EncodingError, Vocab, tokenize, tokenize_and_encode, window_starts


def squad_doc(context="o gato dorme", text="gato", start=2):
    return {"data": [{"title": "t", "paragraphs": [{"context": context, "qas": [
        {"id": "q1", "question": "quem dorme ?", "answers": [{"text": text, "answer_start": start}]}]}]}]}


def test_tokenize_offsets():
    toks = tokenize("Olá, mundo!")
    assert [t for t, _, _ in toks] == ["olá", ",", "mundo", "!"]
    for tok, s, e in toks:
        assert "Olá, mundo!"[s:e].lower() == tok


def test_vocab_round_trip():
    v = Vocab.build(["a b c", "c d"])
    assert v.to_list()[:4] == list(SPECIALS)
    assert Vocab.from_list(v.to_list()).to_list() == v.to_list()
    assert v["zzz"] == v["[UNK]"]
    with pytest.raises(EncodingError):
        Vocab.from_list(["a", "b"])


def test_window_starts():
    assert window_starts(10, 10, 5) == [0]
    assert window_starts(20, 10, 5) == [0, 5, 10]
    assert window_starts(21, 10, 5) == [0, 5, 10, 15]
    with pytest.raises(EncodingError):
        window_starts(5, 0, 1)


def test_long_context_gets_overlapping_windows():
    words = [f"w{i}" for i in range(40)]
    ctx = " ".join(words)
    vocab = Vocab.build([ctx, "q ?"])
    # two tokens of question plus three specials leave a 20-token window
    feats = tokenize_and_encode(ctx, "q ?", vocab, max_len=25, doc_stride=10)
    assert len(feats) == 3
    assert all(len(f) <= 25 for f in feats)


def test_answer_positions_and_null_spans():
    words = [f"w{i}" for i in range(40)]
    ctx = " ".join(words)
    start = ctx.index("w35")
    vocab = Vocab.build([ctx, "q ?"])
    feats = tokenize_and_encode(ctx, "q ?", vocab, max_len=25, doc_stride=10,
                                answer_start=start, answer_text="w35 w36")
    assert feats[0].is_null_span and feats[0].start_position == 0
    last = feats[-1]
    assert not last.is_null_span
    assert last.span_text(last.start_position, last.end_position) == "w35 w36"


def test_encoding_layout():
    vocab = Vocab.build(["o gato dorme", "quem ?"])
    f = tokenize_and_encode("o gato dorme", "quem ?", vocab)[0]
    assert f.input_ids[0] == vocab[CLS]
    assert f.context_start == 4 and f.context_end == 7
    assert f.offsets[f.context_start] == (0, 1)
    with pytest.raises(EncodingError):
        f.span_text(0, 1)


@pytest.mark.parametrize("ctx,q", [("", "q"), ("x", ""), ("x", " ".join(["q"] * 50))])
def test_encoding_errors(ctx, q):
    vocab = Vocab.build([ctx, q])
    with pytest.raises(EncodingError):
        tokenize_and_encode(ctx, q, vocab, max_len=20)


def test_parse_valid():
    (ex,) = parse_squad_json(json.dumps(squad_doc()))
    assert ex.id == "q1" and ex.gold_texts == ["gato"]


@pytest.mark.parametrize(
    "mutate,path",
    [(lambda d: d.pop("data"), "$.data"),
     (lambda d: d["data"][0].update(paragraphs=3), "$.data[0].paragraphs"),
     (lambda d: d["data"][0]["paragraphs"][0]["qas"][0].update(question=5), "$.data[0].paragraphs[0].qas[0].question"),
     (lambda d: d["data"][0]["paragraphs"][0]["qas"][0]["answers"][0].update(answer_start="2"),
      "answer_start")],
)
def test_parse_errors_carry_json_path(mutate, path):
    doc = squad_doc()
    mutate(doc)
    with pytest.raises(SquadParseError, match=re.escape(path)):
        parse_squad_json(json.dumps(doc))


def test_parse_invalid_json():
    with pytest.raises(SquadParseError):
        parse_squad_json("{not json")


def test_offset_mismatch_names_example():
    with pytest.raises(SquadDataError, match="q1"):
        parse_squad_json(json.dumps(squad_doc(start=3)))


def test_serialize_round_trip():
    train, _ = generate_synthetic(SyntheticSpec(n_train=30, n_dev=1))
    assert parse_squad_json(serialize_squad(train)) == train


def test_synthetic_determinism_and_validity():
    spec = SyntheticSpec(n_train=50, n_dev=20, seed=3)
    a, b = generate_synthetic(spec), generate_synthetic(spec)
    assert a == b
    assert generate_synthetic(SyntheticSpec(n_train=50, n_dev=20, seed=4)) != a
    for ex in a[0] + a[1]:
        ex.validate()
        assert spec.min_context <= len(ex.context.split()) <= spec.max_context


def test_synthetic_spec_validation():
    with pytest.raises(ValueError):
        SyntheticSpec(min_context=2, answer_len=2)


def test_oracle_reader_scores_perfectly():
    spec = SyntheticSpec(n_train=1, n_dev=200, seed=1)
    _, dev = generate_synthetic(spec)
    preds = {ex.id: oracle_extract(ex, spec.answer_len) for ex in dev}
    rep = evaluate_dataset(preds, dev, articles=())
    assert rep.f1 == 100.0 and rep.exact_match == 100.0


def test_binary_cache_round_trip(tmp_path):
    exs = [QaExample("a", "ção é", "?", (Answer("é", 4),)), QaExample("b", "x", "?", ())]
    write_cache(exs, tmp_path / "c.bin")
    assert read_cache(tmp_path / "c.bin") == exs
