"""Deterministic SVG forest plots.

Written by hand rather than through a plotting library so that identical
input produces byte-identical files.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from html import escape
from typing import Sequence

Z975 = 1.959963984540054


@dataclass(frozen=True)
class ForestRow:
    label: str
    estimate: float
    se: float


@dataclass(frozen=True)
class PlotOptions:
    width: int = 720
    row_height: int = 26
    label_width: int = 260
    text_width: int = 170
    margin: int = 20
    effect_label: str = "Effect (95% CI)"
    title: str = ""
    reference: float | None = 0.0


def rows_from_report(report: dict) -> tuple[list[ForestRow], ForestRow, str]:
    """Extract per-endpoint or per-cohort rows and the pooled row from a Stage II/III report."""
    if "cohorts" in report:
        rows = [ForestRow(c["cohort_id"], c["estimate"], c["se"]) for c in report["cohorts"]]
        title = f"Global effect ({report.get('method', 'two-stage')})"
    elif "endpoints" in report and report["endpoints"] and isinstance(report["endpoints"][0], dict):
        rows = [ForestRow(e["name"], e["estimate"], e["se"]) for e in report["endpoints"]]
        title = f"Cohort {report.get('cohort_id', '')}".strip()
    else:
        raise ValueError("report has neither cohort nor endpoint rows")
    pooled = ForestRow("Pooled", report["beta"], report["se"])
    return rows, pooled, title


def _num(x: float) -> str:
    s = f"{x:.2f}"
    return "0.00" if s == "-0.00" else s


def _tick(x: float) -> str:
    s = f"{x:g}"
    return "0" if s == "-0" else s


def _nice_ticks(lo: float, hi: float, n: int = 6) -> list[float]:
    span = hi - lo
    raw = span / max(n - 1, 1)
    mag = 10 ** math.floor(math.log10(raw))
    step = min((m * mag for m in (1, 2, 2.5, 5, 10) if m * mag >= raw), default=10 * mag)
    first = math.ceil(lo / step - 1e-9) * step
    ticks = []
    t = first
    while t <= hi + 1e-9 * step:
        ticks.append(round(t, 10))
        t += step
    return ticks


def render_svg(rows: Sequence[ForestRow], pooled: ForestRow | None, opts: PlotOptions | None = None) -> str:
    opts = opts or PlotOptions()
    for r in list(rows) + ([pooled] if pooled else []):
        if r.se < 0 or not math.isfinite(r.se) or not math.isfinite(r.estimate):
            raise ValueError(f"row {r.label!r} has invalid estimate/SE")
    allrows = list(rows) + ([pooled] if pooled else [])
    lo = min(r.estimate - Z975 * r.se for r in allrows)
    hi = max(r.estimate + Z975 * r.se for r in allrows)
    if opts.reference is not None:
        lo, hi = min(lo, opts.reference), max(hi, opts.reference)
    if hi - lo < 1e-12:
        lo, hi = lo - 1, hi + 1
    pad = 0.05 * (hi - lo)
    lo, hi = lo - pad, hi + pad

    m = opts.margin
    top = m + (24 if opts.title else 0) + 18
    plot_x0 = m + opts.label_width
    plot_x1 = opts.width - m - opts.text_width
    n_rows = len(rows) + (1 if pooled else 0)
    plot_y1 = top + opts.row_height * (n_rows + (0.5 if pooled else 0))
    height = int(plot_y1 + 50 + m)

    def sx(v: float) -> float:
        return plot_x0 + (v - lo) / (hi - lo) * (plot_x1 - plot_x0)

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{opts.width}" height="{height}" '
        f'viewBox="0 0 {opts.width} {height}" font-family="Helvetica, Arial, sans-serif" font-size="12">',
        f'<rect x="0" y="0" width="{opts.width}" height="{height}" fill="white"/>',
    ]
    if opts.title:
        out.append(f'<text x="{m}" y="{m + 14}" font-size="15" font-weight="bold">{escape(opts.title)}</text>')
    out.append(f'<text x="{plot_x1 + 10}" y="{top - 6}" font-weight="bold">{escape(opts.effect_label)}</text>')

    for i, r in enumerate(rows):
        y = top + opts.row_height * (i + 0.5)
        x, xl, xr = sx(r.estimate), sx(r.estimate - Z975 * r.se), sx(r.estimate + Z975 * r.se)
        out.append(f'<text x="{m}" y="{_num(y + 4)}">{escape(r.label)}</text>')
        out.append(f'<line x1="{_num(xl)}" y1="{_num(y)}" x2="{_num(xr)}" y2="{_num(y)}" stroke="black" stroke-width="1.5"/>')
        out.append(f'<rect x="{_num(x - 4)}" y="{_num(y - 4)}" width="8" height="8" fill="black"/>')
        ci = f"{_num(r.estimate)} [{_num(r.estimate - Z975 * r.se)}, {_num(r.estimate + Z975 * r.se)}]"
        out.append(f'<text x="{plot_x1 + 10}" y="{_num(y + 4)}">{ci}</text>')

    if pooled:
        y = top + opts.row_height * (len(rows) + 1)
        x, xl, xr = sx(pooled.estimate), sx(pooled.estimate - Z975 * pooled.se), sx(pooled.estimate + Z975 * pooled.se)
        h = opts.row_height * 0.3
        pts = f"{_num(xl)},{_num(y)} {_num(x)},{_num(y - h)} {_num(xr)},{_num(y)} {_num(x)},{_num(y + h)}"
        out.append(f'<line x1="{plot_x0}" y1="{_num(y - opts.row_height / 2)}" x2="{plot_x1}" '
                   f'y2="{_num(y - opts.row_height / 2)}" stroke="#999" stroke-width="0.5"/>')
        out.append(f'<text x="{m}" y="{_num(y + 4)}" font-weight="bold">{escape(pooled.label)}</text>')
        out.append(f'<polygon points="{pts}" fill="#333"/>')
        ci = f"{_num(pooled.estimate)} [{_num(pooled.estimate - Z975 * pooled.se)}, {_num(pooled.estimate + Z975 * pooled.se)}]"
        out.append(f'<text x="{plot_x1 + 10}" y="{_num(y + 4)}" font-weight="bold">{ci}</text>')

    if opts.reference is not None:
        xr = sx(opts.reference)
        out.append(f'<line x1="{_num(xr)}" y1="{top}" x2="{_num(xr)}" y2="{_num(plot_y1)}" '
                   'stroke="#666" stroke-dasharray="4,3"/>')

    out.append(f'<line x1="{plot_x0}" y1="{_num(plot_y1)}" x2="{plot_x1}" y2="{_num(plot_y1)}" stroke="black"/>')
    for t in _nice_ticks(lo, hi):
        xt = sx(t)
        out.append(f'<line x1="{_num(xt)}" y1="{_num(plot_y1)}" x2="{_num(xt)}" y2="{_num(plot_y1 + 5)}" stroke="black"/>')
        out.append(f'<text x="{_num(xt)}" y="{_num(plot_y1 + 18)}" text-anchor="middle">{_tick(t)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"
