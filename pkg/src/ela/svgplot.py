"""Dependency-free SVG line charts.

Emits a single self-contained <svg> document per chart: axes, tick grid,
one polyline plus point markers per series, and a legend. Point markers
keep single-sample series visible where a polyline would collapse.
"""

from __future__ import annotations

import math
from xml.sax.saxutils import escape

from .errors import UsageError

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b",
           "#17becf", "#e377c2", "#7f7f7f", "#bcbd22")

WIDTH, HEIGHT = 760, 460
MARGIN = dict(left=76, right=180, top=48, bottom=58)


def _nice_step(span: float, target: int) -> float:
    raw = span / max(target, 1)
    mag = 10.0 ** math.floor(math.log10(raw)) if raw > 0 else 1.0
    for mult in (1.0, 2.0, 5.0, 10.0):
        if raw <= mult * mag:
            return mult * mag
    return 10.0 * mag


def _linear_ticks(lo: float, hi: float, target: int = 5):
    if hi <= lo:
        pad = max(abs(lo) * 0.1, 1.0)
        lo, hi = lo - pad, hi + pad
    step = _nice_step(hi - lo, target)
    first = math.ceil(lo / step) * step
    ticks = []
    t = first
    while t <= hi + step * 1e-9:
        ticks.append(0.0 if abs(t) < step * 1e-9 else t)
        t += step
    return lo, hi, ticks


def _log_ticks(lo: float, hi: float):
    if lo <= 0:
        raise UsageError("log-scale axis requires positive values")
    llo, lhi = math.log10(lo), math.log10(hi)
    if lhi - llo < 1e-12:
        llo, lhi = llo - 0.5, lhi + 0.5
    decades = range(math.floor(llo), math.ceil(lhi) + 1)
    ticks = [10.0 ** d for d in decades if llo - 1e-9 <= d <= lhi + 1e-9]
    if not ticks:
        ticks = [10.0 ** ((llo + lhi) / 2)]
    return llo, lhi, ticks


def _fmt(v: float) -> str:
    if v != 0 and (abs(v) >= 1e5 or abs(v) < 1e-3):
        return f"{v:.0e}"
    s = f"{v:.6g}"
    return s


class _Axis:
    def __init__(self, values, log: bool):
        self.log = log
        lo, hi = min(values), max(values)
        if log:
            self.lo, self.hi, self.ticks = _log_ticks(lo, hi)
        else:
            span = hi - lo
            pad = span * 0.05 if span > 0 else 0
            self.lo, self.hi, self.ticks = _linear_ticks(lo - pad, hi + pad)

    def frac(self, v: float) -> float:
        x = math.log10(v) if self.log else v
        return (x - self.lo) / (self.hi - self.lo)


def line_chart(path: str, title: str, x_label: str, y_label: str, series,
               log_x: bool = False, log_y: bool = False) -> str:
    """series: iterable of (name, xs, ys). Writes an SVG file, returns path."""
    series = [(name, list(xs), list(ys)) for name, xs, ys in series
              if len(list(xs)) > 0]
    series = [(n, x, y) for n, x, y in series if len(x) == len(y) and x]
    if not series:
        raise UsageError("line_chart needs at least one non-empty series")

    xs_all = [v for _, xs, _ in series for v in xs]
    ys_all = [v for _, _, ys in series for v in ys]
    ax, ay = _Axis(xs_all, log_x), _Axis(ys_all, log_y)

    plot_w = WIDTH - MARGIN["left"] - MARGIN["right"]
    plot_h = HEIGHT - MARGIN["top"] - MARGIN["bottom"]
    px = lambda v: MARGIN["left"] + ax.frac(v) * plot_w
    py = lambda v: MARGIN["top"] + (1.0 - ay.frac(v)) * plot_h

    parts = [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" '
        f'height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">',
        f'<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
        f'<text x="{WIDTH / 2:.1f}" y="26" text-anchor="middle" '
        f'font-family="sans-serif" font-size="16">{escape(title)}</text>',
    ]

    x0, y0 = MARGIN["left"], MARGIN["top"] + plot_h
    for t in ax.ticks:
        x = px(t)
        parts.append(f'<line x1="{x:.1f}" y1="{MARGIN["top"]}" x2="{x:.1f}" '
                     f'y2="{y0}" stroke="#dddddd" stroke-width="1"/>')
        parts.append(f'<text x="{x:.1f}" y="{y0 + 18}" text-anchor="middle" '
                     f'font-family="sans-serif" font-size="11">{escape(_fmt(t))}</text>')
    for t in ay.ticks:
        y = py(t)
        parts.append(f'<line x1="{x0}" y1="{y:.1f}" x2="{x0 + plot_w}" '
                     f'y2="{y:.1f}" stroke="#dddddd" stroke-width="1"/>')
        parts.append(f'<text x="{x0 - 8}" y="{y + 4:.1f}" text-anchor="end" '
                     f'font-family="sans-serif" font-size="11">{escape(_fmt(t))}</text>')

    parts.append(f'<rect x="{x0}" y="{MARGIN["top"]}" width="{plot_w}" '
                 f'height="{plot_h}" fill="none" stroke="#333333"/>')
    parts.append(f'<text x="{x0 + plot_w / 2:.1f}" y="{HEIGHT - 14}" '
                 f'text-anchor="middle" font-family="sans-serif" font-size="13">'
                 f'{escape(x_label)}</text>')
    parts.append(f'<text x="20" y="{MARGIN["top"] + plot_h / 2:.1f}" '
                 f'text-anchor="middle" font-family="sans-serif" font-size="13" '
                 f'transform="rotate(-90 20 {MARGIN["top"] + plot_h / 2:.1f})">'
                 f'{escape(y_label)}</text>')

    legend_x = x0 + plot_w + 14
    for i, (name, xs, ys) in enumerate(series):
        color = PALETTE[i % len(PALETTE)]
        pts = " ".join(f"{px(x):.2f},{py(y):.2f}" for x, y in zip(xs, ys))
        parts.append(f'<polyline points="{pts}" fill="none" stroke="{color}" '
                     f'stroke-width="1.8"/>')
        for x, y in zip(xs, ys):
            parts.append(f'<circle cx="{px(x):.2f}" cy="{py(y):.2f}" r="2.4" '
                         f'fill="{color}"/>')
        ly = MARGIN["top"] + 10 + i * 17
        parts.append(f'<line x1="{legend_x}" y1="{ly}" x2="{legend_x + 18}" '
                     f'y2="{ly}" stroke="{color}" stroke-width="2.5"/>')
        parts.append(f'<text x="{legend_x + 24}" y="{ly + 4}" '
                     f'font-family="sans-serif" font-size="11">{escape(str(name))}</text>')

    parts.append("</svg>")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(parts) + "\n")
    return path
