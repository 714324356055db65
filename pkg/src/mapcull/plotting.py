"""Tiny SVG writer for line charts and bar histograms."""

from __future__ import annotations

from xml.sax.saxutils import escape

import numpy as np

COLORS = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf", "#7f7f7f"]
W, H = 640, 420
LEFT, RIGHT, TOP, BOTTOM = 70, 150, 40, 60


def _fmt(x: float) -> str:
    return f"{x:.2f}"


def _ticks(lo: float, hi: float, n: int = 5):
    if hi <= lo:
        hi = lo + 1.0
    return np.linspace(lo, hi, n)


class _Frame:
    def __init__(self, xlim, ylim):
        self.x0, self.x1 = xlim
        self.y0, self.y1 = ylim
        if self.x1 <= self.x0:
            self.x1 = self.x0 + 1.0
        if self.y1 <= self.y0:
            self.y1 = self.y0 + 1.0

    def px(self, x):
        return LEFT + (np.asarray(x, float) - self.x0) / (self.x1 - self.x0) * (W - LEFT - RIGHT)

    def py(self, y):
        return H - BOTTOM - (np.asarray(y, float) - self.y0) / (self.y1 - self.y0) * (H - TOP - BOTTOM)


def _axes(fr: _Frame, title, xlabel, ylabel, caption=""):
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" font-family="sans-serif" font-size="11">',
           f'<rect width="{W}" height="{H}" fill="white"/>',
           f'<text x="{W / 2}" y="20" text-anchor="middle" font-size="14">{escape(title)}</text>']
    x_axis, y_axis = H - BOTTOM, LEFT
    out.append(f'<line x1="{LEFT}" y1="{x_axis}" x2="{W - RIGHT}" y2="{x_axis}" stroke="black"/>')
    out.append(f'<line x1="{y_axis}" y1="{TOP}" x2="{y_axis}" y2="{x_axis}" stroke="black"/>')
    for t in _ticks(fr.x0, fr.x1):
        x = fr.px(t)
        out.append(f'<line x1="{_fmt(x)}" y1="{x_axis}" x2="{_fmt(x)}" y2="{x_axis + 4}" stroke="black"/>')
        out.append(f'<text x="{_fmt(x)}" y="{x_axis + 16}" text-anchor="middle">{t:.4g}</text>')
    for t in _ticks(fr.y0, fr.y1):
        y = fr.py(t)
        out.append(f'<line x1="{y_axis - 4}" y1="{_fmt(y)}" x2="{y_axis}" y2="{_fmt(y)}" stroke="black"/>')
        out.append(f'<text x="{y_axis - 6}" y="{_fmt(y + 4)}" text-anchor="end">{t:.3g}</text>')
    out.append(f'<text x="{(LEFT + W - RIGHT) / 2}" y="{H - 25}" text-anchor="middle">{escape(xlabel)}</text>')
    out.append(f'<text x="15" y="{(TOP + H - BOTTOM) / 2}" text-anchor="middle" '
               f'transform="rotate(-90 15 {(TOP + H - BOTTOM) / 2})">{escape(ylabel)}</text>')
    if caption:
        out.append(f'<text x="{LEFT}" y="{H - 6}" font-size="9" fill="#555">{escape(caption)}</text>')
    return out


def line_chart(series: dict, title: str, xlabel: str, ylabel: str, ylim=None, caption: str = "") -> str:
    """``series`` maps label -> (x, y)."""
    xs = np.concatenate([np.asarray(x, float) for x, _ in series.values()]) if series else np.zeros(1)
    ys = np.concatenate([np.asarray(y, float) for _, y in series.values()]) if series else np.zeros(1)
    fr = _Frame((xs.min(), xs.max()), ylim or (min(0.0, ys.min()), max(1.0, ys.max())))
    out = _axes(fr, title, xlabel, ylabel, caption)
    for i, (label, (x, y)) in enumerate(series.items()):
        c = COLORS[i % len(COLORS)]
        pts = " ".join(f"{_fmt(a)},{_fmt(b)}" for a, b in zip(fr.px(x), fr.py(y)))
        out.append(f'<polyline points="{pts}" fill="none" stroke="{c}" stroke-width="2"/>')
        for a, b in zip(fr.px(x), fr.py(y)):
            out.append(f'<circle cx="{_fmt(a)}" cy="{_fmt(b)}" r="2.5" fill="{c}"/>')
        ly = TOP + 10 + 16 * i
        out.append(f'<line x1="{W - RIGHT + 10}" y1="{ly}" x2="{W - RIGHT + 30}" y2="{ly}" stroke="{c}" stroke-width="2"/>')
        out.append(f'<text x="{W - RIGHT + 35}" y="{ly + 4}">{escape(label)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def histogram_chart(hists: dict, title: str, xlabel: str, caption: str = "") -> str:
    """``hists`` maps label -> (edges, fractions); bars of each series are drawn side by side."""
    edges_all = np.concatenate([np.asarray(e, float) for e, _ in hists.values()]) if hists else np.zeros(2)
    top = max([float(np.max(f)) for _, f in hists.values() if len(f)] + [1e-9])
    fr = _Frame((edges_all.min(), edges_all.max()), (0.0, top * 1.1))
    out = _axes(fr, title, xlabel, "fraction of query images", caption)
    n = max(len(hists), 1)
    for i, (label, (edges, frac)) in enumerate(hists.items()):
        c = COLORS[i % len(COLORS)]
        for lo, hi, f in zip(edges[:-1], edges[1:], frac):
            w = (hi - lo) / n
            x0 = fr.px(lo + i * w)
            x1 = fr.px(lo + (i + 1) * w)
            y = fr.py(f)
            out.append(f'<rect x="{_fmt(x0)}" y="{_fmt(y)}" width="{_fmt(max(x1 - x0, 0.5))}" '
                       f'height="{_fmt(fr.py(0) - y)}" fill="{c}" fill-opacity="0.7"/>')
        ly = TOP + 10 + 16 * i
        out.append(f'<rect x="{W - RIGHT + 10}" y="{ly - 5}" width="20" height="10" fill="{c}"/>')
        out.append(f'<text x="{W - RIGHT + 35}" y="{ly + 4}">{escape(label)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"
