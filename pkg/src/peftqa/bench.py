"""Experiment grid runner, analysis arithmetic and report rendering."""

from __future__ import annotations

import csv
import io
import itertools
import logging
import time
from dataclasses import asdict, dataclass, field, replace
from importlib import resources
from pathlib import Path
from typing import Callable, Iterable, Sequence

from .model import METHODS, PRESETS, attach_adapters, build_model, preset_config
from .squad import QaExample, SyntheticSpec, generate_synthetic, load_squad
from .text import Vocab
from .train import LR_HIGH, LR_STANDARD, TrainConfig, train_run

log = logging.getLogger(__name__)

__all__ = [
    "COLUMNS",
    "UsageError",
    "ContractError",
    "ExperimentGrid",
    "GridRow",
    "DataConfig",
    "read_results",
    "write_results",
    "canonical_order",
    "load_reference_tables",
    "run_grid",
    "percent_of_baseline",
    "best_f1",
    "lr_sensitivity",
    "quantization_degradation",
    "time_reduction",
    "memory_reduction",
    "AnalysisReport",
    "analyze",
    "format_hms",
    "emit_report",
    "REFERENCE_FIGURES",
    "check_reference_figures",
]

COLUMNS = ("method", "lr", "epochs", "preset", "f1", "em", "time_s", "peak_bytes", "status")
STATUSES = ("OK", "COLLAPSED", "FAILED")
MB = 1024 * 1024
QUANTIZED_PAIRS = (("LoRA", "QLoRA"), ("DoRA", "QDoRA"))


class UsageError(ValueError):
    """Bad report request: unknown format or nothing to report."""


class ContractError(ValueError):
    """An analysis precondition does not hold."""


@dataclass(frozen=True)
class ExperimentGrid:
    methods: tuple[str, ...] = METHODS
    lrs: tuple[float, ...] = (LR_STANDARD, LR_HIGH)
    epochs: tuple[int, ...] = (2, 3)
    presets: tuple[str, ...] = ("micro-base", "micro-large")
    seed: int = 0

    def __post_init__(self) -> None:
        bad = [m for m in self.methods if m not in METHODS]
        if bad:
            raise UsageError(f"unknown method(s) {bad}; choose from {list(METHODS)}")
        if not all(self.methods) or not self.lrs or not self.epochs or not self.presets:
            raise UsageError("every grid axis needs at least one value")
        if any(e < 1 for e in self.epochs):
            raise UsageError("epochs must be positive")

    def cells(self) -> list[tuple[str, float, int, str]]:
        """(method, lr, epochs, preset) in execution order: preset, lr, epochs, method."""
        return [(m, lr, ep, p) for p, lr, ep, m in itertools.product(self.presets, self.lrs, self.epochs, self.methods)]

    def __len__(self) -> int:
        return len(self.methods) * len(self.lrs) * len(self.epochs) * len(self.presets)


@dataclass(frozen=True)
class GridRow:
    method: str
    lr: float
    epochs: int
    preset: str
    f1: float
    em: float
    time_s: float
    peak_bytes: int
    status: str = "OK"

    @property
    def key(self) -> tuple[str, float, int, str]:
        return (self.method, self.lr, self.epochs, self.preset)

    def to_csv_fields(self) -> list[str]:
        return [self.method, format(self.lr, "g"), str(self.epochs), self.preset, f"{self.f1:.2f}",
                f"{self.em:.2f}", format(self.time_s, "g"), str(self.peak_bytes), self.status]


def _row_from_record(rec: dict, where: str) -> GridRow:
    try:
        return GridRow(rec["method"], float(rec["lr"]), int(rec["epochs"]), rec["preset"], float(rec["f1"]),
                       float(rec["em"]), float(rec["time_s"]), int(rec["peak_bytes"]), rec["status"])
    except (KeyError, ValueError) as exc:
        raise UsageError(f"{where}: malformed result row ({exc})") from None


def _parse_csv(text: str, where: str) -> list[GridRow]:
    reader = csv.DictReader(io.StringIO(text))
    if tuple(reader.fieldnames or ()) != COLUMNS:
        raise UsageError(f"{where}: expected header {','.join(COLUMNS)}")
    return [_row_from_record(rec, f"{where}:{i + 2}") for i, rec in enumerate(reader)]


def read_results(path: str | Path) -> list[GridRow]:
    return _parse_csv(Path(path).read_text(encoding="utf-8"), str(path))


def results_csv(rows: Iterable[GridRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(COLUMNS)
    for r in rows:
        w.writerow(r.to_csv_fields())
    return buf.getvalue()


def write_results(rows: Iterable[GridRow], path: str | Path) -> None:
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(results_csv(rows), encoding="utf-8")
    tmp.replace(path)


def load_reference_tables() -> list[GridRow]:
    """Published F1/EM/time/peak-memory rows for the full-size base and large encoders."""
    text = resources.files("peftqa").joinpath("data/reference_tables.csv").read_text(encoding="utf-8")
    return _parse_csv(text, "reference_tables.csv")


# -- running ------------------------------------------------------------------


@dataclass(frozen=True)
class DataConfig:
    """Either a pair of SQuAD v1 files or a synthetic generator spec."""

    train_path: str | None = None
    dev_path: str | None = None
    synthetic: SyntheticSpec = field(default_factory=SyntheticSpec)

    def load(self) -> tuple[list[QaExample], list[QaExample]]:
        if self.train_path or self.dev_path:
            if not (self.train_path and self.dev_path):
                raise UsageError("both train and dev files are required")
            return load_squad(self.train_path), load_squad(self.dev_path)
        return generate_synthetic(self.synthetic)


CellRunner = Callable[[str, float, int, str, int], GridRow]


def make_cell_runner(data: DataConfig, base: TrainConfig = TrainConfig(),
                     model_overrides: dict | None = None) -> CellRunner:
    train, dev = data.load()
    vocab = Vocab.build(ex.context + " " + ex.question for ex in train)

    def run(method: str, lr: float, epochs: int, preset: str, seed: int) -> GridRow:
        cfg = preset_config(preset, vocab_size=len(vocab), **(model_overrides or {}))
        model = build_model(cfg, seed=seed)
        attach_adapters(model, method, seed=seed)
        res = train_run(model, train, dev, vocab, replace(base, lr=lr, epochs=epochs, seed=seed))
        return GridRow(method, lr, epochs, preset, round(res.f1, 2), round(res.em, 2),
                       round(res.duration_s, 3), res.peak_bytes, res.status)

    return run


def run_grid(grid: ExperimentGrid, out_csv: str | Path, runner: CellRunner) -> list[GridRow]:
    """Run every cell not already recorded in ``out_csv``; rewrite the file after each cell.

    A cell that raises is stored with status FAILED and the grid moves on.
    """
    out_csv = Path(out_csv)
    done = {r.key: r for r in read_results(out_csv)} if out_csv.exists() else {}
    for p in grid.presets:
        if p not in PRESETS:
            raise UsageError(f"unknown preset {p!r}")
    rows = list(done.values())
    for method, lr, epochs, preset in grid.cells():
        key = (method, float(lr), epochs, preset)
        if key in done:
            log.info("skipping completed cell %s", key)
            continue
        t0 = time.perf_counter()
        try:
            row = runner(method, lr, epochs, preset, grid.seed)
        except Exception as exc:  # noqa: BLE001 - recorded, grid continues
            log.exception("cell %s failed", key)
            row = GridRow(method, float(lr), epochs, preset, 0.0, 0.0, round(time.perf_counter() - t0, 3), 0,
                          "FAILED")
            log.error("cell %s: %s", key, exc)
        rows.append(row)
        done[key] = row
        write_results(rows, out_csv)
    order = {c: i for i, c in enumerate((m, float(lr), e, p) for m, lr, e, p in grid.cells())}
    return sorted((r for r in rows if r.key in order), key=lambda r: order[r.key])


# -- analysis -----------------------------------------------------------------


def percent_of_baseline(value: float, baseline: float) -> float:
    if not baseline > 0:
        raise ContractError(f"baseline must be positive, got {baseline}")
    return round(100.0 * value / baseline, 1)


def _index(rows: Iterable[GridRow]) -> dict[tuple[str, float, int, str], GridRow]:
    return {r.key: r for r in rows}


def best_f1(rows: Iterable[GridRow], method: str, preset: str, epochs: int | None = None) -> float | None:
    """Highest F1 over learning rates, at ``epochs`` or over all epoch counts when None."""
    vals = [r.f1 for r in rows if r.method == method and r.preset == preset and r.status != "FAILED"
            and (epochs is None or r.epochs == epochs)]
    return max(vals) if vals else None


@dataclass(frozen=True)
class Delta:
    method: str
    preset: str
    epochs: int | None
    value: float | None  # None when one side is missing

    def to_dict(self) -> dict:
        return asdict(self)


def lr_sensitivity(rows: Sequence[GridRow], high: float = LR_HIGH, standard: float = LR_STANDARD) -> list[Delta]:
    """F1(high LR) minus F1(standard LR) per method, preset and matched epoch count."""
    idx = _index(rows)
    out = []
    for method, preset, epochs in sorted({(r.method, r.preset, r.epochs) for r in rows}, key=_order_key):
        hi = idx.get((method, high, epochs, preset))
        lo = idx.get((method, standard, epochs, preset))
        value = round(hi.f1 - lo.f1, 2) if hi and lo else None
        out.append(Delta(method, preset, epochs, value))
    return out


def quantization_degradation(rows: Sequence[GridRow], epochs: int | None = 2,
                             baseline: str = "FullFT") -> list[Delta]:
    """Baseline best-LR F1 minus the quantized method's best-LR F1, per preset.

    ``epochs`` fixes the epoch count on both sides (None takes the best over
    epochs). ``baseline`` is ``FullFT`` or ``unquantized``, the latter meaning
    the matching unquantized adapter (LoRA for QLoRA, DoRA for QDoRA).
    """
    if baseline not in ("FullFT", "unquantized"):
        raise UsageError(f"baseline must be 'FullFT' or 'unquantized', got {baseline!r}")
    out = []
    for preset in _presets(rows):
        for plain, quant in QUANTIZED_PAIRS:
            ref = best_f1(rows, "FullFT" if baseline == "FullFT" else plain, preset, epochs)
            q = best_f1(rows, quant, preset, epochs)
            value = round(ref - q, 2) if ref is not None and q is not None else None
            out.append(Delta(quant, preset, epochs, value))
    return out


def _reduction(value: float, baseline: float) -> float:
    if not baseline > 0:
        raise ContractError(f"baseline must be positive, got {baseline}")
    return round(100.0 * (1.0 - value / baseline), 1)


def time_reduction(rows: Sequence[GridRow], method: str, preset: str, lr: float, epochs: int) -> float | None:
    """Wall-time saving (percent) of ``method`` vs FullFT in the same lr/epoch cell."""
    idx = _index(rows)
    m, ft = idx.get((method, lr, epochs, preset)), idx.get(("FullFT", lr, epochs, preset))
    return _reduction(m.time_s, ft.time_s) if m and ft else None


def memory_reduction(rows: Sequence[GridRow], method: str, preset: str) -> float | None:
    """Peak-memory saving (percent) of ``method`` vs FullFT, using each method's largest peak."""
    peaks = _peaks(rows)
    m, ft = peaks.get((method, preset)), peaks.get(("FullFT", preset))
    return _reduction(m, ft) if m and ft else None


def _peaks(rows: Iterable[GridRow]) -> dict[tuple[str, str], int]:
    out: dict[tuple[str, str], int] = {}
    for r in rows:
        if r.status != "FAILED":
            out[(r.method, r.preset)] = max(out.get((r.method, r.preset), 0), r.peak_bytes)
    return out


def _presets(rows: Iterable[GridRow]) -> list[str]:
    return sorted({r.preset for r in rows})


def canonical_order(rows: Iterable[GridRow]) -> list[GridRow]:
    """Rows sorted by preset, descending lr, epochs, then method."""
    return sorted(rows, key=lambda r: (r.preset, -r.lr, r.epochs,
                                       METHODS.index(r.method) if r.method in METHODS else len(METHODS), r.method))


def _order_key(k: tuple) -> tuple:
    method, preset, *rest = k
    return (preset, METHODS.index(method) if method in METHODS else len(METHODS), method, *rest)


@dataclass
class AnalysisReport:
    percent_of_baseline: list[dict]
    lr_sensitivity: list[Delta]
    quantization_degradation: list[Delta]
    time_reduction: list[dict]
    memory_reduction: list[dict]

    def to_dict(self) -> dict:
        return {
            "percent_of_baseline": self.percent_of_baseline,
            "lr_sensitivity": [d.to_dict() for d in self.lr_sensitivity],
            "quantization_degradation": [d.to_dict() for d in self.quantization_degradation],
            "time_reduction": self.time_reduction,
            "memory_reduction": self.memory_reduction,
        }


def analyze(rows: Sequence[GridRow], epochs: int | None = 2) -> AnalysisReport:
    """All derived quantities; percent-of-baseline compares best-LR F1 at matched epochs."""
    if not rows:
        raise UsageError("no results to analyze")
    pob = []
    for preset in _presets(rows):
        for ep in sorted({r.epochs for r in rows}) if epochs is None else [epochs]:
            base = best_f1(rows, "FullFT", preset, ep)
            for method in METHODS:
                val = best_f1(rows, method, preset, ep)
                if base and val is not None:
                    pob.append({"method": method, "preset": preset, "epochs": ep,
                                "percent": percent_of_baseline(val, base)})
    times = []
    for r in sorted(rows, key=lambda r: _order_key((r.method, r.preset, r.lr, r.epochs))):
        if r.method != "FullFT":
            t = time_reduction(rows, r.method, r.preset, r.lr, r.epochs)
            if t is not None:
                times.append({"method": r.method, "preset": r.preset, "lr": r.lr, "epochs": r.epochs, "percent": t})
    mems = []
    for method, preset in sorted(_peaks(rows), key=_order_key):
        if method != "FullFT":
            v = memory_reduction(rows, method, preset)
            if v is not None:
                mems.append({"method": method, "preset": preset, "percent": v})
    return AnalysisReport(pob, lr_sensitivity(rows), quantization_degradation(rows, epochs), times, mems)


# -- rendering ----------------------------------------------------------------


def format_hms(seconds: float) -> str:
    s = int(round(seconds))
    return f"{s // 3600:02d}:{s % 3600 // 60:02d}:{s % 60:02d}"


def _md_table(header: Sequence[str], body: Iterable[Sequence[str]]) -> str:
    lines = ["| " + " | ".join(header) + " |", "|" + "|".join("---" for _ in header) + "|"]
    lines += ["| " + " | ".join(row) + " |" for row in body]
    return "\n".join(lines)


def _sorted_rows(rows: Iterable[GridRow]) -> list[GridRow]:
    return sorted(rows, key=lambda r: (r.epochs, METHODS.index(r.method) if r.method in METHODS else 99, r.method))


def heatmap_csv(rows: Sequence[GridRow]) -> str:
    """F1 matrix: one row per method, one column per preset/lr/epochs setting."""
    cols = sorted({(r.preset, r.lr, r.epochs) for r in rows}, key=lambda c: (_presets(rows).index(c[0]), -c[1], c[2]))
    idx = _index(rows)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["method"] + [f"{p}|lr={lr:g}|ep={e}" for p, lr, e in cols])
    methods = [m for m in METHODS if any(r.method == m for r in rows)]
    for m in methods:
        cells = [idx.get((m, lr, e, p)) for p, lr, e in cols]
        w.writerow([m] + [f"{c.f1:.2f}" if c else "" for c in cells])
    return buf.getvalue()


def render_markdown(rows: Sequence[GridRow]) -> str:
    parts = ["# Results"]
    for preset in _presets(rows):
        for lr in sorted({r.lr for r in rows if r.preset == preset}, reverse=True):
            sel = _sorted_rows(r for r in rows if r.preset == preset and r.lr == lr)
            parts.append(f"## {preset}, lr={lr:g}")
            parts.append(_md_table(
                ("Method", "Ep.", "F1", "EM", "Time"),
                [(r.method + (" (collapsed)" if r.status == "COLLAPSED" else "") + (" (failed)" if r.status == "FAILED" else ""),
                  str(r.epochs), f"{r.f1:.2f}", f"{r.em:.2f}", format_hms(r.time_s)) for r in sel],
            ))
    peaks = _peaks(rows)
    presets = _presets(rows)
    parts.append("## Peak memory (MB)")
    parts.append(_md_table(
        ["Method"] + presets,
        [[m] + [f"{peaks[(m, p)] / MB:,.0f}" if (m, p) in peaks else "" for p in presets]
         for m in METHODS if any((m, p) in peaks for p in presets)],
    ))
    rep = analyze(rows)
    lines = [f"- {d['method']} {d['preset']}: {d['percent']:.1f}% less peak memory than FullFT"
             for d in rep.memory_reduction]
    if lines:
        parts.append("## Memory reduction vs FullFT\n" + "\n".join(lines))
    return "\n\n".join(parts) + "\n"


def analysis_csv(rows: Sequence[GridRow]) -> str:
    rep = analyze(rows)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["quantity", "method", "preset", "lr", "epochs", "value"])
    for d in rep.percent_of_baseline:
        w.writerow(["percent_of_baseline", d["method"], d["preset"], "", d["epochs"], f"{d['percent']:.1f}"])
    for d in rep.lr_sensitivity:
        w.writerow(["lr_sensitivity", d.method, d.preset, "", d.epochs, "" if d.value is None else f"{d.value:+.2f}"])
    for d in rep.quantization_degradation:
        w.writerow(["quantization_degradation", d.method, d.preset, "", "" if d.epochs is None else d.epochs,
                    "" if d.value is None else f"{d.value:.2f}"])
    for d in rep.time_reduction:
        w.writerow(["time_reduction", d["method"], d["preset"], f"{d['lr']:g}", d["epochs"], f"{d['percent']:.1f}"])
    for d in rep.memory_reduction:
        w.writerow(["memory_reduction", d["method"], d["preset"], "", "", f"{d['percent']:.1f}"])
    return buf.getvalue()


def emit_report(rows: Sequence[GridRow], out_dir: str | Path, fmt: str = "markdown") -> list[Path]:
    """Write report files for ``rows`` into ``out_dir`` and return their paths.

    ``markdown`` writes report.md and heatmap.csv; ``csv`` writes results.csv,
    analysis.csv and heatmap.csv. Output is byte-deterministic.
    """
    if fmt not in ("markdown", "csv"):
        raise UsageError(f"unsupported report format {fmt!r}; use 'markdown' or 'csv'")
    if not rows:
        raise UsageError("empty grid: nothing to report")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = {"heatmap.csv": heatmap_csv(rows)}
    if fmt == "markdown":
        files["report.md"] = render_markdown(rows)
    else:
        files["results.csv"] = results_csv(canonical_order(rows))
        files["analysis.csv"] = analysis_csv(rows)
    paths = []
    for name in sorted(files):
        p = out / name
        p.write_text(files[name], encoding="utf-8")
        paths.append(p)
    return paths


# Quoted derived figures and the cell selection that reproduces each one.
REFERENCE_FIGURES: tuple[tuple[str, float, Callable[[Sequence[GridRow]], float | None]], ...] = (
    ("LoRA large % of FullFT (ep2, best LR)", 95.8,
     lambda rows: percent_of_baseline(best_f1(rows, "LoRA", "large", 2), best_f1(rows, "FullFT", "large", 2))),
    ("LoRA base % of FullFT (ep2, best LR)", 94.2,
     lambda rows: percent_of_baseline(best_f1(rows, "LoRA", "base", 2), best_f1(rows, "FullFT", "base", 2))),
    ("QLoRA base high-minus-standard LR (ep2)", 19.71, lambda rows: _lr_delta(rows, "QLoRA", "base", 2)),
    ("LoRA base high-minus-standard LR (ep2)", 6.20, lambda rows: _lr_delta(rows, "LoRA", "base", 2)),
    ("LoRA large high-minus-standard LR (ep2)", 5.67, lambda rows: _lr_delta(rows, "LoRA", "large", 2)),
    ("QLoRA large high-minus-standard LR (ep2)", 11.80, lambda rows: _lr_delta(rows, "QLoRA", "large", 2)),
    ("QLoRA large degradation vs FullFT (ep2, best LR)", 4.83, lambda rows: _degr(rows, "large")),
    ("QLoRA base degradation vs FullFT (ep2, best LR)", 9.56, lambda rows: _degr(rows, "base")),
    ("QLoRA base peak memory reduction", 86.9, lambda rows: memory_reduction(rows, "QLoRA", "base")),
    ("QLoRA large peak memory reduction", 81.9, lambda rows: memory_reduction(rows, "QLoRA", "large")),
    ("LoRA large time reduction (high LR, ep2)", 73.5,
     lambda rows: time_reduction(rows, "LoRA", "large", LR_HIGH, 2)),
    ("LoRA base time reduction (high LR, ep3)", 68.6,
     lambda rows: time_reduction(rows, "LoRA", "base", LR_HIGH, 3)),
    ("LoRA large peak memory reduction", 50.2, lambda rows: memory_reduction(rows, "LoRA", "large")),
)


def _lr_delta(rows: Sequence[GridRow], method: str, preset: str, epochs: int) -> float | None:
    for d in lr_sensitivity(rows):
        if (d.method, d.preset, d.epochs) == (method, preset, epochs):
            return d.value
    return None


def _degr(rows: Sequence[GridRow], preset: str) -> float | None:
    for d in quantization_degradation(rows, epochs=2, baseline="FullFT"):
        if (d.method, d.preset) == ("QLoRA", preset):
            return d.value
    return None


def check_reference_figures(rows: Sequence[GridRow] | None = None, tol: float = 0.05) -> list[dict]:
    """Recompute each quoted figure from the reference rows; one record per figure."""
    rows = load_reference_tables() if rows is None else rows
    out = []
    for name, expected, fn in REFERENCE_FIGURES:
        got = fn(rows)
        ok = got is not None and abs(got - expected) <= tol
        out.append({"name": name, "expected": expected, "computed": got, "ok": ok})
    return out
