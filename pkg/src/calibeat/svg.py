"""Minimal deterministic SVG line charts (polylines plus axes)."""

from __future__ import annotations

import math
from xml.sax.saxutils import escape

WIDTH, HEIGHT = 640, 400
MARGIN = {"left": 70, "right": 20, "top": 40, "bottom": 50}
COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#e377c2", "#7f7f7f")


def _fmt(v: float) -> str:
    return f"{v:.2f}"


def _ticks(lo: float, hi: float, n: int = 5) -> list[float]:
    if hi <= lo:
        return [lo]
    return [lo + (hi - lo) * i / (n - 1) for i in range(n)]


def _label(v: float) -> str:
    if v != 0 and (abs(v) >= 1e5 or abs(v) < 1e-2):
        return f"{v:.2e}"
    return f"{v:.4g}"


def line_chart(series: dict, title: str, xlabel: str, ylabel: str, logx: bool = True) -> str:
    """``series`` maps a name to ``(xs, ys)``; ``logx`` plots against log2 of x."""
    pts = {}
    for name, (xs, ys) in series.items():
        keep = [(float(x), float(y)) for x, y in zip(xs, ys)
                if y is not None and math.isfinite(float(y)) and (not logx or float(x) > 0)]
        if keep:
            pts[name] = [(math.log2(x) if logx else x, y) for x, y in keep]
    all_x = [x for p in pts.values() for x, _ in p] or [0.0, 1.0]
    all_y = [y for p in pts.values() for _, y in p] or [0.0, 1.0]
    x0, x1 = min(all_x), max(all_x)
    y0, y1 = min(all_y + [0.0]), max(all_y + [0.0])
    if x1 == x0:
        x1 = x0 + 1
    if y1 == y0:
        y1 = y0 + 1
    pw = WIDTH - MARGIN["left"] - MARGIN["right"]
    ph = HEIGHT - MARGIN["top"] - MARGIN["bottom"]

    def sx(x):
        return MARGIN["left"] + (x - x0) / (x1 - x0) * pw

    def sy(y):
        return MARGIN["top"] + (1 - (y - y0) / (y1 - y0)) * ph

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">',
        f'<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
        f'<text x="{WIDTH / 2:.0f}" y="22" text-anchor="middle" font-family="sans-serif" font-size="15">{escape(title)}</text>',
        f'<line x1="{MARGIN["left"]}" y1="{_fmt(sy(y0))}" x2="{MARGIN["left"]}" y2="{_fmt(sy(y1))}" stroke="black"/>',
        f'<line x1="{MARGIN["left"]}" y1="{_fmt(sy(y0))}" x2="{_fmt(sx(x1))}" y2="{_fmt(sy(y0))}" stroke="black"/>',
    ]
    for tx in _ticks(x0, x1):
        lab = _label(2**tx) if logx else _label(tx)
        out.append(f'<text x="{_fmt(sx(tx))}" y="{_fmt(sy(y0) + 16)}" text-anchor="middle" '
                   f'font-family="sans-serif" font-size="10">{lab}</text>')
    for ty in _ticks(y0, y1):
        out.append(f'<text x="{MARGIN["left"] - 6}" y="{_fmt(sy(ty) + 3)}" text-anchor="end" '
                   f'font-family="sans-serif" font-size="10">{_label(ty)}</text>')
        out.append(f'<line x1="{MARGIN["left"]}" y1="{_fmt(sy(ty))}" x2="{_fmt(sx(x1))}" y2="{_fmt(sy(ty))}" '
                   f'stroke="#dddddd"/>')
    out.append(f'<text x="{MARGIN["left"] + pw / 2:.0f}" y="{HEIGHT - 10}" text-anchor="middle" '
               f'font-family="sans-serif" font-size="12">{escape(xlabel)}</text>')
    out.append(f'<text x="16" y="{MARGIN["top"] + ph / 2:.0f}" text-anchor="middle" font-family="sans-serif" '
               f'font-size="12" transform="rotate(-90 16 {MARGIN["top"] + ph / 2:.0f})">{escape(ylabel)}</text>')
    for i, (name, p) in enumerate(pts.items()):
        color = COLORS[i % len(COLORS)]
        coords = " ".join(f"{_fmt(sx(x))},{_fmt(sy(y))}" for x, y in p)
        out.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{coords}"/>')
        out.append(f'<text x="{WIDTH - MARGIN["right"] - 4}" y="{MARGIN["top"] + 14 * (i + 1)}" text-anchor="end" '
                   f'font-family="sans-serif" font-size="11" fill="{color}">{escape(str(name))}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"
