"""Self-contained SVG rendering of series and heatmap CSVs.

Output depends only on the input rows: fixed canvas size, fixed number
formatting, no timestamps, so two renders of the same data are byte-identical.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

WIDTH = 640
HEIGHT = 400
MARGIN = (60, 20, 20, 50)  # left, right, top, bottom

# (x column, y column) of each series CSV the line plot understands
SERIES_COLUMNS = (
    ("send_time_us", "qdelay_us"),
    ("recv_time_us", "count"),
    ("x", "y"),
)
HEATMAP_COLUMNS = ("burst_size", "rate_bps", "loss_fraction", "mean_owd_us", "n")


class PlotError(ValueError):
    pass


def _rows(text: str) -> tuple[list[str], list[dict[str, str]]]:
    lines = [ln for ln in text.splitlines() if ln.strip() and not ln.startswith("#")]
    if not lines:
        raise PlotError("input has no header row")
    reader = csv.DictReader(lines)
    return list(reader.fieldnames or []), list(reader)


def _f(x: float) -> str:
    return f"{x:.2f}"


@dataclass
class _Frame:
    x0: float
    x1: float
    y0: float
    y1: float

    def px(self, x):
        left, right = MARGIN[0], WIDTH - MARGIN[1]
        return left + (np.asarray(x, float) - self.x0) / (self.x1 - self.x0) * (right - left)

    def py(self, y):
        top, bottom = MARGIN[2], HEIGHT - MARGIN[3]
        return bottom - (np.asarray(y, float) - self.y0) / (self.y1 - self.y0) * (bottom - top)


def _span(lo: float, hi: float) -> tuple[float, float]:
    if not math.isfinite(lo) or not math.isfinite(hi):
        return 0.0, 1.0
    if hi <= lo:
        return lo - 0.5, lo + 0.5
    return lo, hi


def _axes(fr: _Frame, xlabel: str, ylabel: str, ticks: bool = True) -> list[str]:
    left, right = MARGIN[0], WIDTH - MARGIN[1]
    top, bottom = MARGIN[2], HEIGHT - MARGIN[3]
    out = [
        f'<rect x="{left}" y="{top}" width="{right - left}" height="{bottom - top}" '
        f'fill="none" stroke="#000" stroke-width="1"/>',
        f'<text x="{(left + right) / 2:g}" y="{HEIGHT - 10}" text-anchor="middle" '
        f'font-size="12">{xlabel}</text>',
        f'<text x="14" y="{(top + bottom) / 2:g}" text-anchor="middle" font-size="12" '
        f'transform="rotate(-90 14 {(top + bottom) / 2:g})">{ylabel}</text>',
    ]
    if not ticks:
        return out
    for v in np.linspace(fr.x0, fr.x1, 5):
        out.append(f'<text x="{_f(fr.px(v))}" y="{bottom + 16}" text-anchor="middle" '
                   f'font-size="10">{v:.4g}</text>')
    for v in np.linspace(fr.y0, fr.y1, 5):
        out.append(f'<text x="{left - 4}" y="{_f(fr.py(v) + 3)}" text-anchor="end" '
                   f'font-size="10">{v:.4g}</text>')
    return out


def _svg(body: list[str]) -> str:
    head = (f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
            f'viewBox="0 0 {WIDTH} {HEIGHT}">')
    return "\n".join([head, f'<rect width="{WIDTH}" height="{HEIGHT}" fill="#fff"/>', *body, "</svg>"]) + "\n"


def line_svg(text: str) -> str:
    """Render a series CSV as a polyline; lost packets become ticks on the x axis."""
    cols, rows = _rows(text)
    for xc, yc in SERIES_COLUMNS:
        if xc in cols and yc in cols:
            break
    else:
        raise PlotError(f"not a series CSV (columns {cols})")
    xs, ys, lost_x = [], [], []
    try:
        for r in rows:
            if r.get("lost") == "1" or r[yc] == "":
                lost_x.append(float(r[xc]))
            else:
                xs.append(float(r[xc]))
                ys.append(float(r[yc]))
    except ValueError as exc:
        raise PlotError(f"bad number in series CSV: {exc}") from exc
    allx = xs + lost_x
    fr = _Frame(*_span(min(allx, default=0.0), max(allx, default=1.0)),
                *_span(min(ys + [0.0]), max(ys, default=1.0)))
    body = _axes(fr, xc, yc)
    if xs:
        pts = " ".join(f"{_f(a)},{_f(b)}" for a, b in zip(fr.px(xs), fr.py(ys)))
        body.append(f'<polyline points="{pts}" fill="none" stroke="#1f77b4" stroke-width="1"/>')
    if lost_x:
        y = HEIGHT - MARGIN[3]
        ticks = " ".join(f"M{_f(a)} {y}v-6" for a in fr.px(lost_x))
        body.append(f'<path d="{ticks}" stroke="#d62728" stroke-width="0.5"/>')
    return _svg(body)


def heatmap_svg(text: str, value: str = "loss_fraction") -> str:
    """One rectangle per cell, burst sizes on x and rates on y, shaded by ``value``."""
    cols, rows = _rows(text)
    if tuple(cols) != HEATMAP_COLUMNS:
        raise PlotError(f"not a heatmap CSV (columns {cols})")
    if value not in ("loss_fraction", "mean_owd_us"):
        raise PlotError(f"cannot shade by {value!r}")
    try:
        cells = [(int(r["burst_size"]), int(r["rate_bps"]), float(r[value])) for r in rows]
    except ValueError as exc:
        raise PlotError(f"bad number in heatmap CSV: {exc}") from exc
    sizes = sorted({c[0] for c in cells})
    rates = sorted({c[1] for c in cells})
    fr = _Frame(0, max(1, len(sizes)), 0, max(1, len(rates)))
    body = _axes(fr, "burst_size", "rate_bps", ticks=False)
    bottom = HEIGHT - MARGIN[3]
    for i, size in enumerate(sizes):
        body.append(f'<text x="{_f(fr.px(i + 0.5))}" y="{bottom + 16}" text-anchor="middle" '
                    f'font-size="10">{size}</text>')
    for j, rate in enumerate(rates):
        body.append(f'<text x="{MARGIN[0] - 4}" y="{_f(fr.py(j + 0.5) + 3)}" text-anchor="end" '
                    f'font-size="10">{rate / 1e6:g}M</text>')
    vals = [v for *_, v in cells if math.isfinite(v)]
    lo, hi = (min(vals), max(vals)) if vals else (0.0, 1.0)
    top = 1.0 if value == "loss_fraction" and hi <= 1.0 else hi
    lo = 0.0 if value == "loss_fraction" else lo
    w = fr.px(1) - fr.px(0)
    h = fr.py(0) - fr.py(1)
    for size, rate, v in cells:
        i, j = sizes.index(size), rates.index(rate)
        frac = 0.0 if not math.isfinite(v) or top <= lo else (v - lo) / (top - lo)
        shade = int(round(255 * (1 - frac)))
        body.append(f'<rect x="{_f(fr.px(i))}" y="{_f(fr.py(j + 1))}" width="{_f(w)}" height="{_f(h)}" '
                    f'fill="rgb(255,{shade},{shade})"><title>{size} pkts @ {rate} b/s: '
                    f'{value}={v:.6g}</title></rect>')
    return _svg(body)


def emit_plot(src: str | Path, kind: str, out: str | Path) -> None:
    text = Path(src).read_text()
    if kind == "line":
        svg = line_svg(text)
    elif kind == "heatmap":
        svg = heatmap_svg(text)
    else:
        raise PlotError(f"unknown plot kind {kind!r}")
    Path(out).write_text(svg)
