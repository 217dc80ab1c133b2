"""CSV tables and hand-written SVG charts for training runs and serving sweeps.

CSV schemas (stable):

* ``<label>_metrics.csv``: ``tokens,lr,ce,aux,core_avg`` then per-layer
  extras, one row per logged step (written by ``RunMetrics.write_csv``).
* ``relative_improvement.csv``: ``series,cpt_run,upcycled_run,additional_tokens,
  cpt_ce,upcycled_ce,ce_gain,cpt_core,upcycled_core,core_rel_improvement``.
* ``sweep_<name>.csv``: ``rps,mean_latency_s,p50,p99,throughput_tok_s``.
* ``max_throughput.csv``: ``Model,Devices,Top-K,Max Throughput,% Decrease``.

Numbers in SVG files are printed with fixed precision, so identical inputs
give byte-identical files.
"""

from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import dataclass
from typing import Optional, Sequence
from xml.sax.saxutils import escape

from .errors import PairingError
from .servesim import SweepResult
from .trainer import RunMetrics, relative_improvement

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f")


# ---------------------------------------------------------------------------
# SVG primitives
# ---------------------------------------------------------------------------


def _f(v: float) -> str:
    return f"{v:.2f}"


def _nice_ticks(lo: float, hi: float, n: int = 5) -> list[float]:
    if not math.isfinite(lo) or not math.isfinite(hi):
        return []
    if hi <= lo:
        hi = lo + 1.0
    raw = (hi - lo) / n
    mag = 10 ** math.floor(math.log10(raw))
    step = next(m * mag for m in (1, 2, 2.5, 5, 10) if m * mag >= raw)
    start = math.ceil(lo / step - 1e-9) * step
    ticks = []
    t = start
    while t <= hi + 1e-9 * step:
        ticks.append(round(t, 12))
        t += step
    return ticks


def _tick_label(v: float) -> str:
    a = abs(v)
    if a == 0:
        return "0"
    if a >= 1e9:
        return f"{v / 1e9:g}G"
    if a >= 1e6:
        return f"{v / 1e6:g}M"
    if a >= 1e4:
        return f"{v / 1e3:g}k"
    return f"{v:.4g}"


@dataclass
class Series:
    name: str
    x: Sequence[float]
    y: Sequence[float]
    marker: bool = False


def line_chart(series: Sequence[Series], title: str, xlabel: str, ylabel: str,
               width: int = 640, height: int = 400, hline: Optional[float] = None) -> str:
    """Render polylines with axes, ticks and a legend as an SVG document."""
    left, right, top, bottom = 70, 20, 40, 55
    pw, ph = width - left - right, height - top - bottom
    xs = [float(v) for s in series for v in s.x if math.isfinite(float(v))]
    ys = [float(v) for s in series for v in s.y if math.isfinite(float(v))]
    if hline is not None:
        ys.append(hline)
    x0, x1 = (min(xs), max(xs)) if xs else (0.0, 1.0)
    y0, y1 = (min(ys), max(ys)) if ys else (0.0, 1.0)
    if x1 == x0:
        x0, x1 = x0 - 0.5, x1 + 0.5
    if y1 == y0:
        y0, y1 = y0 - 0.5, y1 + 0.5
    pad = 0.05 * (y1 - y0)
    y0, y1 = y0 - pad, y1 + pad

    def px(v):
        return left + (v - x0) / (x1 - x0) * pw

    def py(v):
        return top + (1 - (v - y0) / (y1 - y0)) * ph

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">',
        f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>',
        f'<text x="{width / 2:.1f}" y="22" text-anchor="middle" font-size="14">{escape(title)}</text>',
        f'<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="#333"/>',
    ]
    for t in _nice_ticks(x0, x1):
        x = px(t)
        out.append(f'<line x1="{_f(x)}" y1="{top + ph}" x2="{_f(x)}" y2="{top + ph + 4}" stroke="#333"/>')
        out.append(f'<text x="{_f(x)}" y="{top + ph + 16}" text-anchor="middle">{_tick_label(t)}</text>')
    for t in _nice_ticks(y0, y1):
        y = py(t)
        out.append(f'<line x1="{left - 4}" y1="{_f(y)}" x2="{left}" y2="{_f(y)}" stroke="#333"/>')
        out.append(f'<line x1="{left}" y1="{_f(y)}" x2="{left + pw}" y2="{_f(y)}" stroke="#eee"/>')
        out.append(f'<text x="{left - 7}" y="{_f(y + 4)}" text-anchor="end">{_tick_label(t)}</text>')
    out.append(f'<text x="{left + pw / 2:.1f}" y="{height - 12}" text-anchor="middle">{escape(xlabel)}</text>')
    out.append(f'<text x="16" y="{top + ph / 2:.1f}" text-anchor="middle" '
               f'transform="rotate(-90 16 {top + ph / 2:.1f})">{escape(ylabel)}</text>')
    if hline is not None:
        out.append(f'<line x1="{left}" y1="{_f(py(hline))}" x2="{left + pw}" y2="{_f(py(hline))}" '
                   f'stroke="#888" stroke-dasharray="4 3"/>')
    for i, s in enumerate(series):
        color = PALETTE[i % len(PALETTE)]
        pts = [(px(float(a)), py(float(b))) for a, b in zip(s.x, s.y)
               if math.isfinite(float(a)) and math.isfinite(float(b))]
        if len(pts) > 1:
            path = " ".join(f"{_f(a)},{_f(b)}" for a, b in pts)
            out.append(f'<polyline points="{path}" fill="none" stroke="{color}" stroke-width="1.5"/>')
        if s.marker or len(pts) == 1:
            out.extend(f'<circle cx="{_f(a)}" cy="{_f(b)}" r="3" fill="{color}"/>' for a, b in pts)
        ly = top + 14 + 14 * i
        out.append(f'<line x1="{left + pw - 150}" y1="{ly - 4}" x2="{left + pw - 130}" y2="{ly - 4}" '
                   f'stroke="{color}" stroke-width="2"/>')
        out.append(f'<text x="{left + pw - 125}" y="{ly}">{escape(s.name)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def bar_chart(labels: Sequence[str], values: Sequence[float], title: str, ylabel: str,
              width: int = 640, height: int = 400) -> str:
    left, right, top, bottom = 70, 20, 40, 90
    pw, ph = width - left - right, height - top - bottom
    vmax = max([float(v) for v in values] + [1e-12])
    ticks = _nice_ticks(0.0, vmax)
    top_v = max(ticks[-1] if ticks else vmax, vmax)
    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">',
        f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>',
        f'<text x="{width / 2:.1f}" y="22" text-anchor="middle" font-size="14">{escape(title)}</text>',
        f'<line x1="{left}" y1="{top + ph}" x2="{left + pw}" y2="{top + ph}" stroke="#333"/>',
        f'<line x1="{left}" y1="{top}" x2="{left}" y2="{top + ph}" stroke="#333"/>',
        f'<text x="16" y="{top + ph / 2:.1f}" text-anchor="middle" '
        f'transform="rotate(-90 16 {top + ph / 2:.1f})">{escape(ylabel)}</text>',
    ]
    for t in ticks:
        y = top + (1 - t / top_v) * ph
        out.append(f'<text x="{left - 7}" y="{_f(y + 4)}" text-anchor="end">{_tick_label(t)}</text>')
        out.append(f'<line x1="{left}" y1="{_f(y)}" x2="{left + pw}" y2="{_f(y)}" stroke="#eee"/>')
    n = max(len(values), 1)
    slot = pw / n
    for i, (lab, v) in enumerate(zip(labels, values)):
        h = float(v) / top_v * ph
        x = left + i * slot + 0.15 * slot
        out.append(f'<rect x="{_f(x)}" y="{_f(top + ph - h)}" width="{_f(0.7 * slot)}" height="{_f(h)}" '
                   f'fill="{PALETTE[i % len(PALETTE)]}"/>')
        cx = left + (i + 0.5) * slot
        out.append(f'<text x="{_f(cx)}" y="{top + ph + 14}" text-anchor="end" '
                   f'transform="rotate(-35 {_f(cx)} {top + ph + 14})">{escape(lab)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


# ---------------------------------------------------------------------------
# Run pairing and tables
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RunPair:
    """A CPT run and the upcycled run trained with the same FLOP budget."""

    cpt: str
    upcycled: str
    additional_tokens: float
    series: str = "upcycled vs cpt"


def relative_rows(runs: dict[str, RunMetrics], pairs: Sequence[RunPair]) -> list[dict]:
    rows = []
    for p in pairs:
        if p.cpt not in runs or p.upcycled not in runs:
            raise PairingError(f"pair ({p.cpt!r}, {p.upcycled!r}) references an unknown run")
        a, b = runs[p.cpt], runs[p.upcycled]
        if a.phase != "cpt" or b.phase != "upcycle_cpt":
            raise PairingError(f"pair ({p.cpt!r}, {p.upcycled!r}) must join a cpt run with an upcycle_cpt run")
        row = {"series": p.series, "cpt_run": p.cpt, "upcycled_run": p.upcycled,
               "additional_tokens": p.additional_tokens, "cpt_ce": a.final_ce, "upcycled_ce": b.final_ce,
               "ce_gain": (a.final_ce - b.final_ce) / a.final_ce,
               "cpt_core": None, "upcycled_core": None, "core_rel_improvement": None}
        if a.final_eval is not None and b.final_eval is not None:
            ca, cb = a.final_eval["core_avg"], b.final_eval["core_avg"]
            row.update(cpt_core=ca, upcycled_core=cb,
                       core_rel_improvement=relative_improvement(cb, ca) if ca != 0 else None)
        rows.append(row)
    return rows


REL_COLUMNS = ("series", "cpt_run", "upcycled_run", "additional_tokens", "cpt_ce", "upcycled_ce", "ce_gain",
               "cpt_core", "upcycled_core", "core_rel_improvement")
SWEEP_COLUMNS = ("rps", "mean_latency_s", "p50", "p99", "throughput_tok_s")
THROUGHPUT_COLUMNS = ("Model", "Devices", "Top-K", "Max Throughput", "% Decrease")


def _cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _write_csv(path: str, header: Sequence[str], rows) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(header)
        for r in rows:
            wr.writerow([_cell(v) for v in r])


def throughput_table(sweeps: Sequence[SweepResult]) -> list[tuple]:
    """Rows of the max-throughput table; dense baselines have an empty decrease."""
    out = []
    for s in sweeps:
        pct = None if s.pct_decrease_vs_baseline is None else round(s.pct_decrease_vs_baseline, 2)
        out.append((s.name, s.devices, "-" if s.top_k is None else s.top_k, round(s.max_throughput, 1), pct))
    return out


def write_sweep(sweep: SweepResult, out_dir: str, stem: Optional[str] = None) -> dict:
    """CSV, summary JSON and latency-vs-throughput SVG for one sweep."""
    stem = stem or f"sweep_{_slug(sweep.name)}"
    csv_path = os.path.join(out_dir, stem + ".csv")
    _write_csv(csv_path, SWEEP_COLUMNS, sweep.rows())
    json_path = os.path.join(out_dir, stem + "_summary.json")
    with open(json_path, "w") as fh:
        json.dump(sweep.summary(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    svg_path = os.path.join(out_dir, stem + ".svg")
    _write_text(svg_path, line_chart([Series(sweep.name, sweep.throughput, sweep.mean_latency, marker=True)],
                                     "Latency vs throughput", "throughput (tok/s)", "mean latency (s)"))
    return {"csv": csv_path, "summary": json_path, "svg": svg_path}


def _slug(name: str) -> str:
    return "".join(c if c.isalnum() or c in "-." else "_" for c in name).strip("_") or "run"


def _write_text(path: str, text: str) -> None:
    with open(path, "w", newline="\n") as fh:
        fh.write(text)


def emit_report(out_dir: str, runs: Optional[dict[str, RunMetrics]] = None,
                pairs: Sequence[RunPair] = (), sweeps: Sequence[SweepResult] = ()) -> dict[str, str]:
    """Write every table and chart for the given runs and sweeps; returns name -> path."""
    runs = dict(runs or {})
    if not runs and not sweeps:
        raise ValueError("emit_report needs at least one RunMetrics or SweepResult")
    os.makedirs(out_dir, exist_ok=True)
    files: dict[str, str] = {}
    labels = sorted(runs)
    for label in labels:
        path = os.path.join(out_dir, f"{_slug(label)}_metrics.csv")
        runs[label].write_csv(path)
        files[f"metrics:{label}"] = path
    if runs:
        curves = [Series(lab, runs[lab].tokens, runs[lab].ce) for lab in labels]
        path = os.path.join(out_dir, "ce_curves.svg")
        _write_text(path, line_chart(curves, "Training cross entropy", "tokens seen", "CE (nats)"))
        files["ce_curves"] = path
    if pairs:
        rows = relative_rows(runs, pairs)
        path = os.path.join(out_dir, "relative_improvement.csv")
        _write_csv(path, REL_COLUMNS, ([r[c] for c in REL_COLUMNS] for r in rows))
        files["relative_csv"] = path
        series = []
        for name in sorted({r["series"] for r in rows}):
            pts = sorted((r["additional_tokens"], r) for r in rows if r["series"] == name)
            xs = [x for x, _ in pts]
            series.append(Series(f"{name}: CE gain %", xs, [100 * r["ce_gain"] for _, r in pts], marker=True))
            core = [(x, r["core_rel_improvement"]) for x, r in pts if r["core_rel_improvement"] is not None]
            if core:
                series.append(Series(f"{name}: core avg %", [x for x, _ in core],
                                     [100 * v for _, v in core], marker=True))
        path = os.path.join(out_dir, "relative_improvement.svg")
        _write_text(path, line_chart(series, "Upcycled vs continued pretraining",
                                     "additional training tokens", "relative improvement (%)", hline=0.0))
        files["relative_svg"] = path
    if sweeps:
        for s in sweeps:
            for k, v in write_sweep(s, out_dir).items():
                files[f"sweep_{k}:{s.name}"] = v
        path = os.path.join(out_dir, "latency_vs_throughput.svg")
        _write_text(path, line_chart([Series(s.name, s.throughput, s.mean_latency, marker=True) for s in sweeps],
                                     "Latency vs throughput", "throughput (tok/s)", "mean latency (s)"))
        files["latency_svg"] = path
        path = os.path.join(out_dir, "max_throughput.csv")
        table = throughput_table(sweeps)
        _write_csv(path, THROUGHPUT_COLUMNS, table)
        files["throughput_csv"] = path
        path = os.path.join(out_dir, "max_throughput.svg")
        _write_text(path, bar_chart([r[0] for r in table], [r[3] for r in table], "Max throughput", "tok/s"))
        files["throughput_svg"] = path
    return files
