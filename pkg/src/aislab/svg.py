"""Minimal SVG line charts: polylines, an optional shaded band, axis ticks and a legend."""
from __future__ import annotations

import math
from typing import Optional, Sequence
from xml.sax.saxutils import escape

import numpy as np

COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#e377c2", "#17becf")
WIDTH, HEIGHT = 640, 400
LEFT, RIGHT, TOP, BOTTOM = 70, 20, 30, 50


def _ticks(lo: float, hi: float, n: int = 5) -> np.ndarray:
    if hi <= lo:
        return np.array([lo])
    raw = (hi - lo) / n
    mag = 10.0 ** math.floor(math.log10(raw))
    step = min((m * mag for m in (1, 2, 5, 10) if m * mag >= raw), default=10 * mag)
    start = math.ceil(lo / step) * step
    return np.arange(start, hi + 0.5 * step, step)


def _num(x: float) -> str:
    return format(float(x), ".6g")


def line_chart(x: Sequence[float], series: Sequence[dict], title: str = "", xlabel: str = "iteration", ylabel: str = "") -> str:
    """``series`` items hold ``label``, ``y`` and optionally ``lo``/``hi`` for a band."""
    x = np.asarray(x, dtype=float)
    ys = [np.asarray(s[k], dtype=float) for s in series for k in ("y", "lo", "hi") if s.get(k) is not None]
    finite = np.concatenate([v[np.isfinite(v)] for v in ys]) if ys else np.array([])
    if x.size == 0 or finite.size == 0:
        x0, x1, y0, y1 = 0.0, 1.0, 0.0, 1.0
    else:
        x0, x1 = float(x.min()), float(x.max())
        y0, y1 = float(finite.min()), float(finite.max())
    if x1 == x0:
        x1 = x0 + 1.0
    if y1 == y0:
        y0, y1 = y0 - 1.0, y1 + 1.0
    pw, ph = WIDTH - LEFT - RIGHT, HEIGHT - TOP - BOTTOM

    def px(v):
        return LEFT + (v - x0) / (x1 - x0) * pw

    def py(v):
        return TOP + (1.0 - (v - y0) / (y1 - y0)) * ph

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">',
        f'<rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
        f'<text x="{WIDTH / 2}" y="18" text-anchor="middle" font-size="14">{escape(title)}</text>',
        f'<line x1="{LEFT}" y1="{TOP + ph}" x2="{LEFT + pw}" y2="{TOP + ph}" stroke="black"/>',
        f'<line x1="{LEFT}" y1="{TOP}" x2="{LEFT}" y2="{TOP + ph}" stroke="black"/>',
    ]
    for t in _ticks(x0, x1):
        out.append(f'<line x1="{_num(px(t))}" y1="{TOP + ph}" x2="{_num(px(t))}" y2="{TOP + ph + 5}" stroke="black"/>')
        out.append(f'<text x="{_num(px(t))}" y="{TOP + ph + 18}" text-anchor="middle" font-size="11">{_num(t)}</text>')
    for t in _ticks(y0, y1):
        out.append(f'<line x1="{LEFT - 5}" y1="{_num(py(t))}" x2="{LEFT}" y2="{_num(py(t))}" stroke="black"/>')
        out.append(f'<text x="{LEFT - 8}" y="{_num(py(t) + 4)}" text-anchor="end" font-size="11">{_num(t)}</text>')
    out.append(f'<text x="{LEFT + pw / 2}" y="{HEIGHT - 10}" text-anchor="middle" font-size="12">{escape(xlabel)}</text>')
    out.append(f'<text x="16" y="{TOP + ph / 2}" text-anchor="middle" font-size="12" transform="rotate(-90 16 {TOP + ph / 2})">{escape(ylabel)}</text>')
    for i, s in enumerate(series):
        color = COLORS[i % len(COLORS)]
        y = np.asarray(s["y"], dtype=float)
        if s.get("lo") is not None and s.get("hi") is not None and x.size:
            lo, hi = np.asarray(s["lo"], dtype=float), np.asarray(s["hi"], dtype=float)
            pts = [f"{_num(px(a))},{_num(py(b))}" for a, b in zip(x, hi)] + [f"{_num(px(a))},{_num(py(b))}" for a, b in zip(x[::-1], lo[::-1])]
            out.append(f'<polygon points="{" ".join(pts)}" fill="{color}" fill-opacity="0.2" stroke="none"/>')
        if x.size:
            pts = " ".join(f"{_num(px(a))},{_num(py(b))}" for a, b in zip(x, y) if math.isfinite(b))
            out.append(f'<polyline points="{pts}" fill="none" stroke="{color}" stroke-width="1.5"/>')
        ly = TOP + 14 + 16 * i
        out.append(f'<line x1="{LEFT + pw - 150}" y1="{ly}" x2="{LEFT + pw - 130}" y2="{ly}" stroke="{color}" stroke-width="2"/>')
        out.append(f'<text x="{LEFT + pw - 125}" y="{ly + 4}" font-size="11">{escape(str(s["label"]))}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def band_chart(x, median, q25, q75, label: str, title: str = "", ylabel: str = "return") -> str:
    return line_chart(x, [{"label": label, "y": median, "lo": q25, "hi": q75}], title, ylabel=ylabel)


def overlay(x, curves: Sequence[dict], title: Optional[str] = "", ylabel: str = "return") -> str:
    return line_chart(x, curves, title or "", ylabel=ylabel)
