"""Command-line entry point: train, eval, quantize, grid, report, fixtures-check."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
import yaml

from . import bench
from .checkpoint import load_checkpoint, save_checkpoint
from .metrics import ENGLISH_ARTICLES, PORTUGUESE_ARTICLES, evaluate_dataset
from .model import METHODS, PRESETS, attach_adapters, build_model, preset_config
from .quant import bits_per_parameter, quantize_nf4
from .squad import SyntheticSpec, load_squad
from .text import Vocab
from .train import LR_HIGH, TrainConfig, evaluate_model, train_run

log = logging.getLogger("peftqa")

# Flag defaults live here so a config file can tell "unset" from "set".
DEFAULTS = {
    "method": "LoRA",
    "lr": LR_HIGH,
    "epochs": 2,
    "preset": "micro-base",
    "seed": 0,
    "data": None,
    "dev": None,
    "out": "runs",
    "batch_size": None,
    "n_train": None,
    "n_dev": None,
    "articles": "pt",
}


def load_config(path: str | None) -> dict:
    if path is None:
        return {}
    text = Path(path).read_text(encoding="utf-8")
    cfg = json.loads(text) if path.endswith(".json") else yaml.safe_load(text)
    if cfg is None:
        return {}
    if not isinstance(cfg, dict):
        raise SystemExit(f"error: {path}: config must be a mapping")
    unknown = set(cfg) - set(DEFAULTS) - {"methods", "lrs", "epochs_list", "presets"}
    if unknown:
        raise SystemExit(f"error: {path}: unknown keys {sorted(unknown)}")
    return cfg


def resolve(args: argparse.Namespace) -> dict:
    """Defaults, overridden by the config file, overridden by explicit flags."""
    merged = dict(DEFAULTS)
    merged.update(load_config(args.config))
    for k, v in vars(args).items():
        if v is not None and k not in ("config", "func", "command"):
            merged[k] = v
    return merged


def _articles(opt: str) -> tuple[str, ...]:
    return {"pt": PORTUGUESE_ARTICLES, "en": ENGLISH_ARTICLES, "none": ()}[opt]


def _data(opts: dict) -> bench.DataConfig:
    spec = SyntheticSpec(seed=opts["seed"])
    if opts.get("n_train"):
        spec = replace(spec, n_train=int(opts["n_train"]))
    if opts.get("n_dev"):
        spec = replace(spec, n_dev=int(opts["n_dev"]))
    return bench.DataConfig(opts.get("data"), opts.get("dev"), spec)


def _batch_size(opts: dict) -> int:
    if opts.get("batch_size"):
        return int(opts["batch_size"])
    return 8 if opts["preset"] == "micro-large" else 16


def _emit(obj: dict) -> None:
    sys.stdout.write(json.dumps(obj, sort_keys=True) + "\n")
    sys.stdout.flush()


def cmd_train(args: argparse.Namespace) -> int:
    o = resolve(args)
    train, dev = _data(o).load()
    vocab = Vocab.build(ex.context + " " + ex.question for ex in train)
    model = build_model(preset_config(o["preset"], vocab_size=len(vocab)), seed=o["seed"])
    attach_adapters(model, o["method"], seed=o["seed"])
    cfg = TrainConfig(lr=float(o["lr"]), epochs=int(o["epochs"]), batch_size=_batch_size(o), seed=o["seed"])
    out = Path(o["out"])
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "metrics.jsonl", "w", encoding="utf-8") as fh:
        def on_epoch(entry: dict) -> None:
            _emit(entry)
            fh.write(json.dumps(entry, sort_keys=True) + "\n")
        res = train_run(model, train, dev, vocab, cfg, on_epoch=on_epoch, articles=_articles(o["articles"]))
    (out / "run.json").write_text(res.to_json() + "\n", encoding="utf-8")
    _, preds = evaluate_model(model, dev, vocab, cfg, _articles(o["articles"]))
    (out / "predictions.json").write_text(json.dumps(preds, sort_keys=True, ensure_ascii=False), encoding="utf-8")
    save_checkpoint(model, out / "model.pftf", vocab, extra={"train_config": cfg.__dict__})
    _emit({"status": res.status, "f1": round(res.f1, 2), "exact_match": round(res.em, 2),
           "peak_bytes": res.peak_bytes, "out": str(out)})
    return 0 if res.status == "OK" else 3


def cmd_eval(args: argparse.Namespace) -> int:
    o = resolve(args)
    articles = _articles(o["articles"])
    if args.predictions:
        if not o.get("data"):
            raise SystemExit("error: --predictions needs --data (SQuAD JSON with gold answers)")
        examples = load_squad(o["data"])
        preds = json.loads(Path(args.predictions).read_text(encoding="utf-8"))
    else:
        if not args.checkpoint:
            raise SystemExit("error: give --checkpoint or --predictions")
        model, vocab, header = load_checkpoint(args.checkpoint)
        if vocab is None:
            raise SystemExit("error: checkpoint carries no vocabulary")
        examples = load_squad(o["data"]) if o.get("data") else _data(o).load()[1]
        _, preds = evaluate_model(model, examples, vocab, TrainConfig(), articles)
        out = Path(o["out"])
        out.mkdir(parents=True, exist_ok=True)
        (out / "predictions.json").write_text(json.dumps(preds, sort_keys=True, ensure_ascii=False),
                                              encoding="utf-8")
    report = evaluate_dataset(preds, examples, articles)
    _emit(report.to_dict())
    return 0


def cmd_quantize(args: argparse.Namespace) -> int:
    w = np.load(args.input)
    q = quantize_nf4(w, block_size=args.block_size, double_quant=args.double_quant, group_size=args.group_size)
    if args.output:
        Path(args.output).write_bytes(q.to_bytes())
    b = bits_per_parameter(q)
    _emit({"shape": list(q.shape), "bytes": q.nbytes, "bits_per_param": round(b.total_bits, 4),
           "metadata_bits_per_param": round(b.metadata_bits, 4)})
    return 0


def _parse_list(value, cast):
    if value is None:
        return None
    if isinstance(value, (list, tuple)):
        return tuple(cast(v) for v in value)
    return tuple(cast(v) for v in str(value).split(",") if v)


def cmd_grid(args: argparse.Namespace) -> int:
    o = resolve(args)
    grid = bench.ExperimentGrid(
        methods=_parse_list(o.get("methods"), str) or METHODS,
        lrs=_parse_list(o.get("lrs"), float) or bench.ExperimentGrid.lrs,
        epochs=_parse_list(o.get("epochs_list"), int) or bench.ExperimentGrid.epochs,
        presets=_parse_list(o.get("presets"), str) or bench.ExperimentGrid.presets,
        seed=o["seed"],
    )
    data = _data(o)
    runners: dict[int, bench.CellRunner] = {}

    def runner(method, lr, epochs, preset, seed):
        bs = 8 if preset == "micro-large" else 16
        if bs not in runners:
            runners[bs] = bench.make_cell_runner(data, TrainConfig(batch_size=o.get("batch_size") or bs))
        row = runners[bs](method, lr, epochs, preset, seed)
        _emit(dict(zip(bench.COLUMNS, row.to_csv_fields())))
        return row

    out = Path(o["out"])
    out.parent.mkdir(parents=True, exist_ok=True)
    rows = bench.run_grid(grid, out, runner)
    _emit({"cells": len(rows), "results": str(out)})
    return 0


def cmd_report(args: argparse.Namespace) -> int:
    rows = bench.load_reference_tables() if args.reference else bench.read_results(args.results)
    paths = bench.emit_report(rows, args.out, args.format)
    _emit(bench.analyze(rows).to_dict())
    _emit({"written": [str(p) for p in paths]})
    return 0


def cmd_fixtures_check(args: argparse.Namespace) -> int:
    results = bench.check_reference_figures(tol=args.tol)
    for r in results:
        got = "absent" if r["computed"] is None else f"{r['computed']:.2f}"
        print(f"{'PASS' if r['ok'] else 'FAIL'}  {r['name']}: expected {r['expected']:.2f}, got {got}")
    return 0 if all(r["ok"] for r in results) else 1


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="YAML or JSON file with option defaults")
    p.add_argument("--method", choices=METHODS)
    p.add_argument("--lr", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--preset", choices=sorted(PRESETS))
    p.add_argument("--seed", type=int)
    p.add_argument("--data", help="SQuAD v1 JSON (train file for train/grid, gold file for eval)")
    p.add_argument("--dev", help="SQuAD v1 dev JSON; synthetic data is used when --data is absent")
    p.add_argument("--out")
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.add_argument("--n-train", type=int, dest="n_train", help="synthetic training examples")
    p.add_argument("--n-dev", type=int, dest="n_dev", help="synthetic dev examples")
    p.add_argument("--articles", choices=("pt", "en", "none"), help="article list dropped before scoring")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="peftqa", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="fine-tune one configuration")
    _common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint or a predictions file")
    _common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--predictions", help="JSON object mapping question id to answer text")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("quantize", help="NF4-quantize a .npy weight matrix")
    p.add_argument("--input", required=True)
    p.add_argument("--output")
    p.add_argument("--block-size", type=int, default=64)
    p.add_argument("--group-size", type=int, default=256)
    p.add_argument("--double-quant", action="store_true")
    p.set_defaults(func=cmd_quantize)

    p = sub.add_parser("grid", help="run the method x lr x epochs x preset grid")
    _common(p)
    p.add_argument("--methods", help="comma list")
    p.add_argument("--lrs", help="comma list")
    p.add_argument("--epochs-list", dest="epochs_list", help="comma list")
    p.add_argument("--presets", help="comma list")
    p.set_defaults(func=cmd_grid)

    p = sub.add_parser("report", help="render tables and analysis from grid results")
    p.add_argument("--results", help="GridResult CSV")
    p.add_argument("--reference", action="store_true", help="use the bundled reference tables")
    p.add_argument("--format", default="markdown")
    p.add_argument("--out", default="report")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("fixtures-check", help="recompute quoted figures from the reference tables")
    p.add_argument("--tol", type=float, default=0.05)
    p.set_defaults(func=cmd_fixtures_check)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "report" and not (args.reference or args.results):
        parser.error("report needs --results or --reference")
    try:
        return args.func(args)
    except bench.UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
