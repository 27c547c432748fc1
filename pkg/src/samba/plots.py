"""Dependency-free SVG line plots and heatmaps."""

from __future__ import annotations

from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np

_PALETTE = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf", "#8c564b", "#e377c2"]


def _frame(width: int, height: int, title: str) -> list[str]:
    return [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<text x="{width / 2:.1f}" y="18" text-anchor="middle" font-family="sans-serif" '
        f'font-size="14">{escape(title)}</text>',
    ]


def line_plot(series: dict[str, tuple], path: str | Path, title: str = "", xlabel: str = "",
              ylabel: str = "", width: int = 640, height: int = 400) -> Path:
    """``series`` maps a label to ``(x, y)`` arrays."""
    m = dict(l=60, r=120, t=30, b=45)
    xs = np.concatenate([np.asarray(x, float) for x, _ in series.values()]) if series else np.zeros(1)
    ys = np.concatenate([np.asarray(y, float) for _, y in series.values()]) if series else np.zeros(1)
    finite = np.isfinite(ys)
    x0, x1 = float(xs.min()), float(xs.max())
    y0, y1 = (float(ys[finite].min()), float(ys[finite].max())) if finite.any() else (0.0, 1.0)
    if x1 == x0:
        x1 = x0 + 1
    if y1 == y0:
        y1 = y0 + 1
    pw, ph = width - m["l"] - m["r"], height - m["t"] - m["b"]

    def px(x):
        return m["l"] + (x - x0) / (x1 - x0) * pw

    def py(y):
        return m["t"] + ph - (y - y0) / (y1 - y0) * ph

    out = _frame(width, height, title)
    out.append(f'<rect x="{m["l"]}" y="{m["t"]}" width="{pw}" height="{ph}" fill="none" stroke="black"/>')
    for v in np.linspace(y0, y1, 5):
        out.append(f'<text x="{m["l"] - 5}" y="{py(v) + 4:.1f}" text-anchor="end" font-family="sans-serif" '
                   f'font-size="10">{v:.3g}</text>')
    for v in np.linspace(x0, x1, 5):
        out.append(f'<text x="{px(v):.1f}" y="{m["t"] + ph + 15}" text-anchor="middle" '
                   f'font-family="sans-serif" font-size="10">{v:.3g}</text>')
    out.append(f'<text x="{m["l"] + pw / 2:.1f}" y="{height - 8}" text-anchor="middle" font-family="sans-serif" '
               f'font-size="12">{escape(xlabel)}</text>')
    out.append(f'<text x="14" y="{m["t"] + ph / 2:.1f}" text-anchor="middle" font-family="sans-serif" '
               f'font-size="12" transform="rotate(-90 14 {m["t"] + ph / 2:.1f})">{escape(ylabel)}</text>')
    for i, (label, (x, y)) in enumerate(series.items()):
        colour = _PALETTE[i % len(_PALETTE)]
        pts = " ".join(f"{px(a):.2f},{py(b):.2f}" for a, b in zip(np.asarray(x, float), np.asarray(y, float))
                       if np.isfinite(b))
        out.append(f'<polyline points="{pts}" fill="none" stroke="{colour}" stroke-width="1.5"/>')
        ly = m["t"] + 14 * (i + 1)
        out.append(f'<line x1="{width - m["r"] + 10}" y1="{ly - 4}" x2="{width - m["r"] + 30}" y2="{ly - 4}" '
                   f'stroke="{colour}" stroke-width="2"/>')
        out.append(f'<text x="{width - m["r"] + 34}" y="{ly}" font-family="sans-serif" font-size="10">'
                   f'{escape(str(label))}</text>')
    out.append("</svg>")
    path = Path(path)
    path.write_text("\n".join(out))
    return path


def heatmap(matrix: np.ndarray, path: str | Path, title: str = "", row_labels=None, col_labels=None,
            cell: int = 28) -> Path:
    """Grey-to-blue heatmap scaled to the matrix range."""
    a = np.atleast_2d(np.asarray(matrix, float))
    rows, cols = a.shape
    left, top = 70, 30
    width, height = left + cols * cell + 20, top + rows * cell + 50
    lo, hi = float(np.nanmin(a)), float(np.nanmax(a))
    span = hi - lo if hi > lo else 1.0
    out = _frame(width, height, title)
    for i in range(rows):
        for j in range(cols):
            v = (a[i, j] - lo) / span
            r = int(255 - 224 * v)
            g = int(255 - 136 * v)
            b = int(255 - 75 * v)
            out.append(f'<rect x="{left + j * cell}" y="{top + i * cell}" width="{cell}" height="{cell}" '
                       f'fill="rgb({r},{g},{b})"><title>{a[i, j]:.4g}</title></rect>')
    for i, lab in enumerate(row_labels or range(rows)):
        out.append(f'<text x="{left - 4}" y="{top + i * cell + cell / 2 + 4:.1f}" text-anchor="end" '
                   f'font-family="sans-serif" font-size="10">{escape(str(lab))}</text>')
    for j, lab in enumerate(col_labels or range(cols)):
        x = left + j * cell + cell / 2
        y = top + rows * cell + 12
        out.append(f'<text x="{x:.1f}" y="{y}" text-anchor="end" font-family="sans-serif" font-size="9" '
                   f'transform="rotate(-45 {x:.1f} {y})">{escape(str(lab))}</text>')
    out.append("</svg>")
    path = Path(path)
    path.write_text("\n".join(out))
    return path
