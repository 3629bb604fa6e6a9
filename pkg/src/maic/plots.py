"""Minimal SVG line plots (no plotting library needed, byte-stable output)."""

from __future__ import annotations

import math
from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf")
WIDTH, HEIGHT = 720, 360
MARGIN = dict(left=70, right=150, top=30, bottom=45)


def _fmt(x: float) -> str:
    return f"{x:.2f}"


def line_plot(series: dict, shaded=(), title: str = "", xlabel: str = "time [s]",
              ylabel: str = "mean |joint goal error| [rad]", log_y: bool = True, floor: float = 1e-8,
              max_points: int = 2000) -> str:
    """SVG text for one or more ``name -> (x, y)`` series.

    ``shaded`` is a list of ``(x0, x1)`` intervals drawn as grey bands. With no
    data the axes are drawn empty.
    """
    pw = WIDTH - MARGIN["left"] - MARGIN["right"]
    ph = HEIGHT - MARGIN["top"] - MARGIN["bottom"]
    xs = [np.asarray(x, dtype=float) for x, _ in series.values()]
    ys = [np.asarray(y, dtype=float) for _, y in series.values()]
    if log_y:
        ys = [np.log10(np.maximum(y, floor)) for y in ys]
    finite = [y[np.isfinite(y)] for y in ys]
    if xs and any(len(x) for x in xs):
        x0 = min(float(x.min()) for x in xs if len(x))
        x1 = max(float(x.max()) for x in xs if len(x))
    else:
        x0, x1 = 0.0, 1.0
    if any(len(f) for f in finite):
        y0 = min(float(f.min()) for f in finite if len(f))
        y1 = max(float(f.max()) for f in finite if len(f))
    else:
        y0, y1 = (math.log10(floor), 0.0) if log_y else (0.0, 1.0)
    if log_y:
        y0, y1 = math.floor(y0), math.ceil(y1)
    if x1 <= x0:
        x1 = x0 + 1.0
    if y1 <= y0:
        y1 = y0 + 1.0

    def px(x):
        return MARGIN["left"] + (x - x0) / (x1 - x0) * pw

    def py(y):
        return MARGIN["top"] + (1.0 - (y - y0) / (y1 - y0)) * ph

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
           f'viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="11">',
           f'<rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="white"/>']
    for a, b in shaded:
        a, b = max(a, x0), min(b, x1)
        if b > a:
            out.append(f'<rect x="{_fmt(px(a))}" y="{MARGIN["top"]}" width="{_fmt(px(b) - px(a))}" '
                       f'height="{ph}" fill="#cccccc" fill-opacity="0.6"/>')
    out.append(f'<rect x="{MARGIN["left"]}" y="{MARGIN["top"]}" width="{pw}" height="{ph}" '
               f'fill="none" stroke="black"/>')
    # ticks
    for i in range(6):
        xv = x0 + i * (x1 - x0) / 5
        out.append(f'<text x="{_fmt(px(xv))}" y="{HEIGHT - MARGIN["bottom"] + 15}" '
                   f'text-anchor="middle">{xv:g}</text>')
    if log_y:
        yticks = list(range(int(y0), int(y1) + 1))
        labels = [f"1e{k}" for k in yticks]
    else:
        yticks = [y0 + i * (y1 - y0) / 4 for i in range(5)]
        labels = [f"{v:.3g}" for v in yticks]
    for yv, lab in zip(yticks, labels):
        out.append(f'<line x1="{MARGIN["left"] - 4}" x2="{MARGIN["left"]}" y1="{_fmt(py(yv))}" '
                   f'y2="{_fmt(py(yv))}" stroke="black"/>')
        out.append(f'<text x="{MARGIN["left"] - 6}" y="{_fmt(py(yv) + 4)}" text-anchor="end">{lab}</text>')
    out.append(f'<text x="{MARGIN["left"] + pw / 2:.1f}" y="{HEIGHT - 8}" text-anchor="middle">'
               f'{escape(xlabel)}</text>')
    out.append(f'<text x="14" y="{MARGIN["top"] + ph / 2:.1f}" text-anchor="middle" '
               f'transform="rotate(-90 14 {MARGIN["top"] + ph / 2:.1f})">{escape(ylabel)}</text>')
    if title:
        out.append(f'<text x="{MARGIN["left"] + pw / 2:.1f}" y="18" text-anchor="middle" '
                   f'font-size="13">{escape(title)}</text>')
    for i, (name, x, y) in enumerate(zip(series.keys(), xs, ys)):
        color = PALETTE[i % len(PALETTE)]
        keep = np.isfinite(y)
        x, y = x[keep], y[keep]
        if len(x) > max_points:
            idx = np.linspace(0, len(x) - 1, max_points).round().astype(int)
            x, y = x[idx], y[idx]
        if len(x):
            pts = " ".join(f"{_fmt(px(a))},{_fmt(py(b))}" for a, b in zip(x, y))
            out.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.2" points="{pts}"/>')
        ly = MARGIN["top"] + 14 + 16 * i
        lx = WIDTH - MARGIN["right"] + 10
        out.append(f'<line x1="{lx}" x2="{lx + 18}" y1="{ly - 4}" y2="{ly - 4}" stroke="{color}" stroke-width="2"/>')
        out.append(f'<text x="{lx + 24}" y="{ly}">{escape(str(name))}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def write_plot(path, series: dict, **kw) -> None:
    Path(path).write_text(line_plot(series, **kw))
