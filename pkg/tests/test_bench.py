import pytest

from peftqa import bench
from peftqa.bench import ContractError, ExperimentGrid, GridRow, UsageError


def fake_runner(calls):
    def run(method, lr, epochs, preset, seed):
        calls.append((method, lr, epochs, preset))
        if method == "DoRA" and epochs == 3:
            raise RuntimeError("boom")
        status = "COLLAPSED" if method == "FullFT" and lr > 1e-4 else "OK"
        return GridRow(method, lr, epochs, preset, 50.0 + epochs, 40.0, 12.5, 1000, status)
    return run


def test_reference_figures_reproduce():
    results = bench.check_reference_figures()
    assert len(results) == 13
    bad = [r for r in results if not r["ok"]]
    assert not bad, bad


def test_reference_fixture_shape():
    rows = bench.load_reference_tables()
    assert len(rows) == 40
    assert {r.status for r in rows} <= set(bench.STATUSES)
    assert any(r.status == "COLLAPSED" for r in rows)


def test_grid_cells_and_order():
    g = ExperimentGrid(methods=("LoRA", "FullFT"), lrs=(1e-3,), epochs=(2, 3), presets=("micro-base",))
    assert len(g) == len(g.cells()) == 4
    assert g.cells()[:2] == [("LoRA", 1e-3, 2, "micro-base"), ("FullFT", 1e-3, 2, "micro-base")]


@pytest.mark.parametrize("kwargs", [{"methods": ("Adapter",)}, {"lrs": ()}, {"epochs": (0,)}])
def test_grid_usage_errors(kwargs):
    with pytest.raises(UsageError):
        ExperimentGrid(**kwargs)


def test_run_grid_resumes_and_records_failures(tmp_path):
    g = ExperimentGrid(methods=("LoRA", "DoRA", "FullFT"), lrs=(4.25e-5, 2e-4), epochs=(2, 3),
                       presets=("micro-base",))
    out = tmp_path / "results.csv"
    calls = []
    rows = bench.run_grid(g, out, fake_runner(calls))
    assert len(rows) == len(g) == len(calls)
    statuses = {r.key: r.status for r in rows}
    assert statuses[("DoRA", 2e-4, 3, "micro-base")] == "FAILED"
    assert statuses[("FullFT", 2e-4, 2, "micro-base")] == "COLLAPSED"
    assert bench.read_results(out) == rows

    # simulate an interruption: drop the last two rows, rerun, only those cells execute
    bench.write_results(rows[:-2], out)
    calls.clear()
    rows2 = bench.run_grid(g, out, fake_runner(calls))
    assert calls == [r.key for r in rows[-2:]]
    assert rows2 == rows


def test_run_grid_unknown_preset(tmp_path):
    g = ExperimentGrid(presets=("giant",))
    with pytest.raises(UsageError):
        bench.run_grid(g, tmp_path / "r.csv", fake_runner([]))


def test_results_csv_round_trip(tmp_path):
    rows = bench.load_reference_tables()
    bench.write_results(rows, tmp_path / "r.csv")
    assert bench.read_results(tmp_path / "r.csv") == rows


def test_read_results_rejects_bad_header(tmp_path):
    p = tmp_path / "r.csv"
    p.write_text("a,b\n1,2\n")
    with pytest.raises(UsageError):
        bench.read_results(p)
    p.write_text(",".join(bench.COLUMNS) + "\nLoRA,x,2,base,1,1,1,1,OK\n")
    with pytest.raises(UsageError, match=":2"):
        bench.read_results(p)


def test_percent_of_baseline():
    assert bench.percent_of_baseline(47.1, 50.0) == 94.2
    with pytest.raises(ContractError):
        bench.percent_of_baseline(1.0, 0.0)


def test_lr_sensitivity_missing_pair_is_none():
    rows = [GridRow("LoRA", 2e-4, 2, "base", 70.0, 60.0, 1.0, 1)]
    (d,) = bench.lr_sensitivity(rows)
    assert d.value is None


def test_quantization_degradation_baselines():
    rows = bench.load_reference_tables()
    with pytest.raises(UsageError):
        bench.quantization_degradation(rows, baseline="LoRA")
    alt = {(d.method, d.preset): d.value for d in bench.quantization_degradation(rows, baseline="unquantized")}
    assert alt[("QLoRA", "large")] is not None


@pytest.mark.parametrize("secs,text", [(0, "00:00:00"), (59.6, "00:01:00"), (3725, "01:02:05"),
                                       (90000, "25:00:00")])
def test_format_hms(secs, text):
    assert bench.format_hms(secs) == text


@pytest.mark.parametrize("fmt,names", [("markdown", {"report.md", "heatmap.csv"}),
                                       ("csv", {"results.csv", "analysis.csv", "heatmap.csv"})])
def test_report_is_deterministic(tmp_path, fmt, names):
    rows = bench.load_reference_tables()
    a = bench.emit_report(rows, tmp_path / "a", fmt)
    b = bench.emit_report(list(reversed(rows)), tmp_path / "b", fmt)
    assert {p.name for p in a} == names
    for pa, pb in zip(a, b):
        assert pa.read_bytes() == pb.read_bytes()


def test_report_contents():
    md = bench.render_markdown(bench.load_reference_tables())
    assert "(collapsed)" in md
    assert "Peak memory (MB)" in md


def test_report_usage_errors(tmp_path):
    with pytest.raises(UsageError):
        bench.emit_report([], tmp_path)
    with pytest.raises(UsageError):
        bench.emit_report(bench.load_reference_tables(), tmp_path, "html")


def test_analyze_dict():
    d = bench.analyze(bench.load_reference_tables()).to_dict()
    assert {"percent_of_baseline", "lr_sensitivity", "quantization_degradation",
            "time_reduction", "memory_reduction"} <= set(d)
