"""Minimal SVG line charts. Output depends only on the input data."""

from __future__ import annotations

from xml.sax.saxutils import escape

import numpy as np

WIDTH, HEIGHT = 640, 420
MARGIN = dict(left=70, right=150, top=40, bottom=50)
COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf")


def _ticks(lo: float, hi: float, n: int = 5) -> list[float]:
    if hi <= lo:
        return [lo]
    return [lo + (hi - lo) * i / (n - 1) for i in range(n)]


def _fmt(v: float) -> str:
    return f"{v:.2f}"


def _label(v: float) -> str:
    return f"{v:.4g}"


def line_chart(
    series: dict[str, tuple],
    title: str = "",
    xlabel: str = "",
    ylabel: str = "",
    log_y: bool = False,
    step: bool = False,
) -> str:
    """Render ``{label: (x, y)}`` as polylines; non-finite points are dropped.

    ``log_y`` plots log10(y) for positive y. ``step`` draws right-continuous
    steps, which suits empirical CDFs.
    """
    clean = {}
    for name, (x, y) in series.items():
        x = np.asarray(x, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        if log_y:
            with np.errstate(divide="ignore", invalid="ignore"):
                y = np.where(y > 0, np.log10(y), np.nan)
        keep = np.isfinite(x) & np.isfinite(y)
        clean[name] = (x[keep], y[keep])
    xs = np.concatenate([v[0] for v in clean.values()] or [np.zeros(0)])
    ys = np.concatenate([v[1] for v in clean.values()] or [np.zeros(0)])
    x0, x1 = (float(xs.min()), float(xs.max())) if xs.size else (0.0, 1.0)
    y0, y1 = (float(ys.min()), float(ys.max())) if ys.size else (0.0, 1.0)
    if x1 == x0:
        x0, x1 = x0 - 0.5, x1 + 0.5
    if y1 == y0:
        y0, y1 = y0 - 0.5, y1 + 0.5
    pw = WIDTH - MARGIN["left"] - MARGIN["right"]
    ph = HEIGHT - MARGIN["top"] - MARGIN["bottom"]

    def px(v):
        return MARGIN["left"] + (v - x0) / (x1 - x0) * pw

    def py(v):
        return MARGIN["top"] + (1.0 - (v - y0) / (y1 - y0)) * ph

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
        f'viewBox="0 0 {WIDTH} {HEIGHT}">',
        f'<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
        f'<text x="{WIDTH / 2:.0f}" y="22" text-anchor="middle" font-size="15">{escape(title)}</text>',
        f'<rect x="{MARGIN["left"]}" y="{MARGIN["top"]}" width="{pw}" height="{ph}" '
        'fill="none" stroke="black"/>',
    ]
    for t in _ticks(x0, x1):
        out.append(f'<text x="{_fmt(px(t))}" y="{HEIGHT - MARGIN["bottom"] + 18}" '
                   f'text-anchor="middle" font-size="11">{_label(t)}</text>')
    for t in _ticks(y0, y1):
        lab = _label(10**t) if log_y else _label(t)
        out.append(f'<text x="{MARGIN["left"] - 6}" y="{_fmt(py(t) + 4)}" '
                   f'text-anchor="end" font-size="11">{lab}</text>')
    out.append(f'<text x="{MARGIN["left"] + pw / 2:.0f}" y="{HEIGHT - 10}" '
               f'text-anchor="middle" font-size="12">{escape(xlabel)}</text>')
    out.append(f'<text x="16" y="{MARGIN["top"] + ph / 2:.0f}" text-anchor="middle" font-size="12" '
               f'transform="rotate(-90 16 {MARGIN["top"] + ph / 2:.0f})">'
               f'{escape(ylabel + (" (log scale)" if log_y else ""))}</text>')
    for i, (name, (x, y)) in enumerate(clean.items()):
        color = COLORS[i % len(COLORS)]
        pts = []
        for j in range(len(x)):
            if step and j > 0:
                pts.append(f"{_fmt(px(x[j]))},{_fmt(py(y[j - 1]))}")
            pts.append(f"{_fmt(px(x[j]))},{_fmt(py(y[j]))}")
        if pts:
            out.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{" ".join(pts)}"/>')
        ly = MARGIN["top"] + 14 + 18 * i
        lx = WIDTH - MARGIN["right"] + 10
        out.append(f'<line x1="{lx}" y1="{ly - 4}" x2="{lx + 20}" y2="{ly - 4}" stroke="{color}" stroke-width="2"/>')
        out.append(f'<text x="{lx + 26}" y="{ly}" font-size="11">{escape(name)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"

