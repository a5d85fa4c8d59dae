"""Minimal deterministic SVG rendering for run artifacts.

Hand-rolled on purpose: output bytes must be identical across runs and
platforms, so no plotting library (font metrics, ids, timestamps) is
involved. Numbers are formatted with a fixed precision.
"""

from __future__ import annotations

from pathlib import Path
from typing import Dict, List, Sequence, Tuple

import numpy as np

WIDTH, HEIGHT = 640, 360
MARGIN = 48
SERIES_COLORS = ("#1f4e79", "#b0532a", "#3a7d44", "#6b4fa0")
CELL = 12


def _fmt(x: float) -> str:
    return f"{x:.2f}"


def _axis_ticks(lo: float, hi: float, n: int = 5) -> List[float]:
    if hi <= lo:
        hi = lo + 1.0
    return [lo + (hi - lo) * i / (n - 1) for i in range(n)]


def line_chart(series: Dict[str, List[Tuple[float, float]]],
               title: str, x_label: str, y_label: str) -> str:
    """Render named (x, y) polylines with axes and a small legend."""
    points = [p for pts in series.values() for p in pts]
    if not points:
        raise ValueError("line_chart: no points to plot")
    xs = [p[0] for p in points]
    ys = [p[1] for p in points]
    x_lo, x_hi = min(xs), max(xs)
    y_lo, y_hi = min(ys), max(ys)
    if x_hi <= x_lo:
        x_hi = x_lo + 1.0
    if y_hi <= y_lo:
        y_hi = y_lo + 1.0
    inner_w = WIDTH - 2 * MARGIN
    inner_h = HEIGHT - 2 * MARGIN

    def sx(x: float) -> float:
        return MARGIN + (x - x_lo) / (x_hi - x_lo) * inner_w

    def sy(y: float) -> float:
        return HEIGHT - MARGIN - (y - y_lo) / (y_hi - y_lo) * inner_h

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" '
           f'height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">',
           f'<rect width="{WIDTH}" height="{HEIGHT}" fill="#ffffff"/>',
           f'<text x="{WIDTH // 2}" y="24" text-anchor="middle" '
           f'font-family="monospace" font-size="14">{title}</text>']
    axis = (f'M {MARGIN} {MARGIN} L {MARGIN} {HEIGHT - MARGIN} '
            f'L {WIDTH - MARGIN} {HEIGHT - MARGIN}')
    out.append(f'<path d="{axis}" fill="none" stroke="#333333"/>')
    for t in _axis_ticks(x_lo, x_hi):
        px = _fmt(sx(t))
        out.append(f'<line x1="{px}" y1="{HEIGHT - MARGIN}" x2="{px}" '
                   f'y2="{HEIGHT - MARGIN + 4}" stroke="#333333"/>')
        out.append(f'<text x="{px}" y="{HEIGHT - MARGIN + 16}" '
                   f'text-anchor="middle" font-family="monospace" '
                   f'font-size="10">{_fmt(t)}</text>')
    for t in _axis_ticks(y_lo, y_hi):
        py = _fmt(sy(t))
        out.append(f'<line x1="{MARGIN - 4}" y1="{py}" x2="{MARGIN}" '
                   f'y2="{py}" stroke="#333333"/>')
        out.append(f'<text x="{MARGIN - 6}" y="{py}" text-anchor="end" '
                   f'font-family="monospace" font-size="10">{_fmt(t)}</text>')
    out.append(f'<text x="{WIDTH // 2}" y="{HEIGHT - 8}" text-anchor="middle" '
               f'font-family="monospace" font-size="11">{x_label}</text>')
    out.append(f'<text x="14" y="{HEIGHT // 2}" text-anchor="middle" '
               f'font-family="monospace" font-size="11" '
               f'transform="rotate(-90 14 {HEIGHT // 2})">{y_label}</text>')
    for i, (name, pts) in enumerate(series.items()):
        color = SERIES_COLORS[i % len(SERIES_COLORS)]
        coords = " ".join(f"{_fmt(sx(x))},{_fmt(sy(y))}" for x, y in pts)
        out.append(f'<polyline points="{coords}" fill="none" '
                   f'stroke="{color}" stroke-width="1.5"/>')
        ly = MARGIN + 14 * i
        out.append(f'<line x1="{WIDTH - MARGIN - 90}" y1="{ly}" '
                   f'x2="{WIDTH - MARGIN - 70}" y2="{ly}" stroke="{color}" '
                   f'stroke-width="1.5"/>')
        out.append(f'<text x="{WIDTH - MARGIN - 64}" y="{ly + 3}" '
                   f'font-family="monospace" font-size="10">{name}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def mask_panel(panels: Sequence[Tuple[str, np.ndarray]]) -> str:
    """Side-by-side binary masks as filled cell grids, one panel per mask."""
    if not panels:
        raise ValueError("mask_panel: nothing to draw")
    pad = 16
    height = max(m.shape[0] for _, m in panels) * CELL + pad + 24
    width = pad
    origins = []
    for _, mask in panels:
        origins.append(width)
        width += mask.shape[1] * CELL + pad
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" '
           f'height="{height}" viewBox="0 0 {width} {height}">',
           f'<rect width="{width}" height="{height}" fill="#ffffff"/>']
    for (label, mask), x0 in zip(panels, origins):
        h, w = mask.shape
        out.append(f'<text x="{x0}" y="14" font-family="monospace" '
                   f'font-size="11">{label}</text>')
        out.append(f'<rect x="{x0}" y="{pad + 4}" width="{w * CELL}" '
                   f'height="{h * CELL}" fill="#f2f2f2" stroke="#333333"/>')
        for r in range(h):
            for c in range(w):
                if mask[r, c] > 0.5:
                    out.append(f'<rect x="{x0 + c * CELL}" '
                               f'y="{pad + 4 + r * CELL}" width="{CELL}" '
                               f'height="{CELL}" fill="#1f4e79"/>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def history_chart(history: Sequence[dict]) -> str:
    losses = [(r["step"], r["loss_total"]) for r in history if "loss_total" in r]
    vals = [(r["step"], r["val_miou"]) for r in history if "val_miou" in r]
    series = {"loss_total": losses}
    if vals:
        series["val_miou"] = vals
    return line_chart(series, "training history", "step", "value")


def write_svg(text: str, path) -> None:
    Path(path).write_text(text)
