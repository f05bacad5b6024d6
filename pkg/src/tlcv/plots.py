"""Tiny dependency-free SVG renderings. Presentational only; the numbers live in CSV files."""

from __future__ import annotations

import math
from xml.sax.saxutils import escape

import numpy as np

_W, _H, _M = 480, 320, 48
_COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")


def _fmt(v):
    return f"{v:.4g}"


def _scale(lo, hi, a, b):
    span = hi - lo if hi > lo else 1.0
    return lambda v: a + (v - lo) / span * (b - a)


def line_plot(series, title="", xlabel="", ylabel="") -> str:
    """``series``: list of (label, xs, ys). Non-finite points are skipped."""
    xs_all = np.concatenate([np.asarray(x, float) for _, x, _ in series]) if series else np.zeros(1)
    ys_all = np.concatenate([np.asarray(y, float) for _, _, y in series]) if series else np.zeros(1)
    fin = np.isfinite(xs_all) & np.isfinite(ys_all)
    xlo, xhi = (float(xs_all[fin].min()), float(xs_all[fin].max())) if fin.any() else (0.0, 1.0)
    ylo, yhi = (float(ys_all[fin].min()), float(ys_all[fin].max())) if fin.any() else (0.0, 1.0)
    sx = _scale(xlo, xhi, _M, _W - 16)
    sy = _scale(ylo, yhi, _H - _M, 24)
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{_W}" height="{_H}" font-family="sans-serif" '
           f'font-size="11">',
           f'<rect x="0" y="0" width="{_W}" height="{_H}" fill="white"/>',
           f'<text x="{_W / 2}" y="16" text-anchor="middle">{escape(title)}</text>',
           f'<line x1="{_M}" y1="{_H - _M}" x2="{_W - 16}" y2="{_H - _M}" stroke="black"/>',
           f'<line x1="{_M}" y1="{_H - _M}" x2="{_M}" y2="24" stroke="black"/>',
           f'<text x="{_M}" y="{_H - _M + 14}">{_fmt(xlo)}</text>',
           f'<text x="{_W - 16}" y="{_H - _M + 14}" text-anchor="end">{_fmt(xhi)}</text>',
           f'<text x="{_M - 4}" y="{_H - _M}" text-anchor="end">{_fmt(ylo)}</text>',
           f'<text x="{_M - 4}" y="30" text-anchor="end">{_fmt(yhi)}</text>',
           f'<text x="{_W / 2}" y="{_H - 12}" text-anchor="middle">{escape(xlabel)}</text>',
           f'<text x="14" y="{_H / 2}" transform="rotate(-90 14 {_H / 2})" text-anchor="middle">{escape(ylabel)}</text>']
    for i, (label, x, y) in enumerate(series):
        c = _COLORS[i % len(_COLORS)]
        pts = " ".join(f"{sx(a):.1f},{sy(b):.1f}" for a, b in zip(np.asarray(x, float), np.asarray(y, float))
                       if math.isfinite(a) and math.isfinite(b))
        out.append(f'<polyline fill="none" stroke="{c}" stroke-width="1.5" points="{pts}"/>')
        out.append(f'<text x="{_W - 20}" y="{40 + 14 * i}" text-anchor="end" fill="{c}">{escape(label)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def heatmap(xs, ys, values, title="") -> str:
    """Cell colours interpolate blue -> white -> red over the finite value range; values indexed [ix, iy]."""
    xs, ys, v = np.asarray(xs, float), np.asarray(ys, float), np.asarray(values, float)
    fin = np.isfinite(v)
    lo, hi = (float(v[fin].min()), float(v[fin].max())) if fin.any() else (0.0, 1.0)
    cw = (_W - _M - 16) / len(xs)
    ch = (_H - _M - 24) / len(ys)
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{_W}" height="{_H}" font-family="sans-serif" '
           f'font-size="11">',
           f'<text x="{_W / 2}" y="16" text-anchor="middle">{escape(title)} [{_fmt(lo)}, {_fmt(hi)}]</text>']
    for i in range(len(xs)):
        for j in range(len(ys)):
            if not fin[i, j]:
                continue
            t = (v[i, j] - lo) / (hi - lo) if hi > lo else 0.5
            if t < 0.5:
                r = g = int(255 * 2 * t)
                b = 255
            else:
                r = 255
                g = b = int(255 * 2 * (1 - t))
            out.append(f'<rect x="{_M + i * cw:.1f}" y="{_H - _M - (j + 1) * ch:.1f}" width="{cw + 0.5:.1f}" '
                       f'height="{ch + 0.5:.1f}" fill="rgb({r},{g},{b})"/>')
    out.append("</svg>")
    return "\n".join(out) + "\n"
