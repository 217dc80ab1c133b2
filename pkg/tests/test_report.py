import csv
import os

import numpy as np
import pytest

from upcyclelab.errors import PairingError
from upcyclelab.report import (THROUGHPUT_COLUMNS, RunPair, Series, bar_chart, emit_report, line_chart,
                               relative_rows, throughput_table)
from upcyclelab.servesim import SweepResult
from upcyclelab.trainer import RunMetrics


def fake_run(phase, ce_end, core=None, n=6):
    m = RunMetrics(phase=phase, lb_coeff=0.01 if phase == "upcycle_cpt" else 0.0)
    for i in range(n):
        m.log({"tokens": 100 * (i + 1), "lr": 1e-3, "ce": ce_end + (n - 1 - i) * 0.1, "aux": 0.0, "core_avg": None})
    m.final_ce = ce_end
    if core is not None:
        m.final_eval = {"core_avg": core, "tasks": {}}
    return m


def fake_sweep(name, peak, top_k=None, pct=None, devices=1):
    rps = np.array([1.0, 2.0, 3.0])
    thr = np.array([peak / 3, 2 * peak / 3, peak])
    return SweepResult(name, rps, np.array([1.0, 1.5, 4.0]), np.array([1.0, 1.4, 3.9]),
                       np.array([1.1, 2.0, 6.0]), thr, np.zeros(3), peak, 3.0, 100,
                       pct_decrease_vs_baseline=pct, devices=devices, top_k=top_k)


@pytest.fixture
def runs():
    return {"cpt_a": fake_run("cpt", 2.0, 0.30), "up_a": fake_run("upcycle_cpt", 1.8, 0.36),
            "cpt_b": fake_run("cpt", 1.9), "up_b": fake_run("upcycle_cpt", 1.95)}


def test_relative_rows(runs):
    rows = relative_rows(runs, [RunPair("cpt_a", "up_a", 100.0), RunPair("cpt_b", "up_b", 200.0)])
    assert rows[0]["ce_gain"] == pytest.approx(0.1)
    assert rows[0]["core_rel_improvement"] == pytest.approx(0.2)
    assert rows[1]["ce_gain"] < 0 and rows[1]["core_rel_improvement"] is None


def test_mismatched_pairs_raise(runs):
    with pytest.raises(PairingError):
        relative_rows(runs, [RunPair("cpt_a", "missing", 1.0)])
    with pytest.raises(PairingError):
        relative_rows(runs, [RunPair("up_a", "cpt_a", 1.0)])


def test_throughput_table_columns():
    assert THROUGHPUT_COLUMNS == ("Model", "Devices", "Top-K", "Max Throughput", "% Decrease")
    rows = throughput_table([fake_sweep("436M", 1000.0), fake_sweep("1.6B K=2", 560.0, 2, 44.0)])
    assert rows == [("436M", 1, "-", 1000.0, None), ("1.6B K=2", 1, 2, 560.0, 44.0)]


def test_charts_are_plain_deterministic_svg():
    s = [Series("a", [0, 1, 2], [3.0, 2.0, 1.5], marker=True), Series("b", [0, 2], [2.5, 2.5])]
    svg = line_chart(s, "T", "x", "y", hline=2.0)
    assert svg.startswith("<svg") and svg.rstrip().endswith("</svg>")
    assert svg == line_chart(s, "T", "x", "y", hline=2.0)
    assert svg.count("<polyline") == 2
    bars = bar_chart(["x", "y"], [1.0, 2.0], "B", "v")
    assert bars.count("<rect") >= 2


def _read_all(d):
    return {f: open(os.path.join(d, f), "rb").read() for f in sorted(os.listdir(d))}


def test_emit_report_files_and_determinism(tmp_path, runs):
    pairs = [RunPair("cpt_a", "up_a", 100.0), RunPair("cpt_b", "up_b", 200.0)]
    sweeps = [fake_sweep("436M", 1000.0), fake_sweep("1.6B K=1", 700.0, 1, 30.0)]
    emit_report(str(tmp_path / "a"), runs, pairs, sweeps)
    emit_report(str(tmp_path / "b"), runs, pairs, sweeps)
    a, b = _read_all(tmp_path / "a"), _read_all(tmp_path / "b")
    assert a == b
    for name in ("ce_curves.svg", "relative_improvement.csv", "relative_improvement.svg",
                 "latency_vs_throughput.svg", "max_throughput.csv", "max_throughput.svg", "cpt_a_metrics.csv"):
        assert name in a
    table = list(csv.reader(open(tmp_path / "a" / "max_throughput.csv")))
    assert table[0] == list(THROUGHPUT_COLUMNS)
    assert table[2] == ["1.6B K=1", "1", "1", "700.0", "30.0"]
    rel = list(csv.DictReader(open(tmp_path / "a" / "relative_improvement.csv")))
    assert [r["additional_tokens"] for r in rel] == ["100.0", "200.0"]
    sweep = list(csv.reader(open(tmp_path / "a" / "sweep_436M.csv")))
    assert sweep[0] == ["rps", "mean_latency_s", "p50", "p99", "throughput_tok_s"]


def test_emit_report_needs_input(tmp_path):
    with pytest.raises(ValueError):
        emit_report(str(tmp_path))
