"""Minimal static SVG 1.1 line charts (no plotting dependency).

Output is a pure function of the inputs: coordinates are printed with a
fixed number of decimals so reruns produce identical bytes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence
from xml.sax.saxutils import escape

import numpy as np

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f")


@dataclass
class Series:
    label: str
    x: Sequence[float]
    y: Sequence[float]
    color: Optional[str] = None
    width: float = 1.5
    markers: bool = False


def _nice_ticks(lo: float, hi: float, count: int = 5) -> list[float]:
    if hi <= lo:
        hi = lo + 1.0
    raw = (hi - lo) / count
    mag = 10 ** math.floor(math.log10(raw))
    step = min((m * mag for m in (1, 2, 5, 10) if m * mag >= raw), default=10 * mag)
    start = math.ceil(lo / step) * step
    ticks = []
    v = start
    while v <= hi + 1e-9 * step:
        ticks.append(0.0 if abs(v) < 1e-12 * step else v)
        v += step
    return ticks


def _fmt(v: float) -> str:
    return f"{v:.2f}"


def _label(v: float) -> str:
    return f"{v:.4g}"


def line_chart(
    series: Sequence[Series],
    title: str = "",
    xlabel: str = "",
    ylabel: str = "",
    width: int = 640,
    height: int = 420,
) -> str:
    """Render series as polylines on shared linear axes.

    Non-finite points break a line into segments. Transform data (for
    example take logs) before calling.
    """
    ml, mr, mt, mb = 70, 20, 40, 55
    pw, ph = width - ml - mr, height - mt - mb
    xs = [np.asarray(s.x, dtype=float) for s in series]
    ys = [np.asarray(s.y, dtype=float) for s in series]
    fx = np.concatenate([x[np.isfinite(x) & np.isfinite(y)] for x, y in zip(xs, ys)] or [np.zeros(0)])
    fy = np.concatenate([y[np.isfinite(x) & np.isfinite(y)] for x, y in zip(xs, ys)] or [np.zeros(0)])
    if fx.size == 0:
        fx, fy = np.array([0.0, 1.0]), np.array([0.0, 1.0])
    x0, x1 = float(fx.min()), float(fx.max())
    y0, y1 = float(fy.min()), float(fy.max())
    if x1 == x0:
        x0, x1 = x0 - 0.5, x1 + 0.5
    if y1 == y0:
        y0, y1 = y0 - 0.5, y1 + 0.5
    pad = 0.05 * (y1 - y0)
    y0, y1 = y0 - pad, y1 + pad

    def px(v):
        return ml + (v - x0) / (x1 - x0) * pw

    def py(v):
        return mt + (y1 - v) / (y1 - y0) * ph

    out = [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">',
        f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>',
        f'<rect x="{ml}" y="{mt}" width="{pw}" height="{ph}" fill="none" stroke="black"/>',
    ]
    for t in _nice_ticks(x0, x1):
        X = _fmt(px(t))
        out.append(f'<line x1="{X}" y1="{mt + ph}" x2="{X}" y2="{mt + ph + 4}" stroke="black"/>')
        out.append(f'<text x="{X}" y="{mt + ph + 16}" text-anchor="middle">{_label(t)}</text>')
    for t in _nice_ticks(y0, y1):
        Y = _fmt(py(t))
        out.append(f'<line x1="{ml - 4}" y1="{Y}" x2="{ml}" y2="{Y}" stroke="black"/>')
        out.append(f'<line x1="{ml}" y1="{Y}" x2="{ml + pw}" y2="{Y}" stroke="#dddddd"/>')
        out.append(f'<text x="{ml - 6}" y="{Y}" text-anchor="end" dominant-baseline="middle">{_label(t)}</text>')
    if title:
        out.append(f'<text x="{width / 2:.1f}" y="22" text-anchor="middle" font-size="14">{escape(title)}</text>')
    if xlabel:
        out.append(f'<text x="{ml + pw / 2:.1f}" y="{height - 12}" text-anchor="middle">{escape(xlabel)}</text>')
    if ylabel:
        cy = mt + ph / 2
        out.append(
            f'<text x="16" y="{cy:.1f}" text-anchor="middle" transform="rotate(-90 16 {cy:.1f})">{escape(ylabel)}</text>'
        )
    legend = 0
    for i, (s, x, y) in enumerate(zip(series, xs, ys)):
        color = s.color or PALETTE[i % len(PALETTE)]
        ok = np.isfinite(x) & np.isfinite(y)
        seg: list[str] = []
        segments = []
        for xi, yi, good in zip(x, y, ok):
            if good:
                seg.append(f"{_fmt(px(xi))},{_fmt(py(yi))}")
            elif seg:
                segments.append(seg)
                seg = []
        if seg:
            segments.append(seg)
        for pts in segments:
            out.append(
                f'<polyline fill="none" stroke="{color}" stroke-width="{s.width}" points="{" ".join(pts)}"/>'
            )
            if s.markers:
                for p in pts:
                    cx, cy = p.split(",")
                    out.append(f'<circle cx="{cx}" cy="{cy}" r="3" fill="{color}"/>')
        if s.label:
            ly = mt + 14 + 15 * legend
            legend += 1
            out.append(f'<line x1="{ml + pw - 150}" y1="{ly}" x2="{ml + pw - 130}" y2="{ly}" stroke="{color}" stroke-width="2"/>')
            out.append(f'<text x="{ml + pw - 125}" y="{ly + 4}">{escape(s.label)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"
