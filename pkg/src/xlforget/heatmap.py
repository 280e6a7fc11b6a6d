"""Deterministic SVG heatmaps for labelled matrices.

Cells are coloured on a diverging scale: warm below the midpoint, white at it,
cool above. ``raw`` style centres every column on its own mean (for F1
matrices); ``delta`` style centres the whole grid on a fixed midpoint (for
transfer deltas, default 0). The largest deviation in the grid maps to a scale
endpoint.
"""

from __future__ import annotations

from html import escape

import numpy as np

from .metrics import read_matrix_csv

WARM = (178, 24, 43)
MID = (247, 247, 247)
COOL = (33, 102, 172)
STYLES = ("raw", "delta")

CELL = 36
LABEL_W = 64
TOP = 56
LEGEND_W = 18


def _mix(a, b, t: float) -> tuple[int, int, int]:
    return tuple(int(round(x + (y - x) * t)) for x, y in zip(a, b))


def diverging_color(t: float) -> str:
    """``t`` in [-1, 1]: -1 warm, 0 neutral, +1 cool."""
    t = float(np.clip(t, -1.0, 1.0))
    rgb = _mix(MID, WARM, -t) if t < 0 else _mix(MID, COOL, t)
    return "#{:02x}{:02x}{:02x}".format(*rgb)


def midpoints(values: np.ndarray, style: str, midpoint: float | None = None) -> np.ndarray:
    """Per-cell centre of the scale."""
    if style not in STYLES:
        raise ValueError(f"unknown heatmap style {style!r}; choose from {STYLES}")
    if midpoint is not None:
        return np.full(values.shape, float(midpoint))
    if style == "raw":
        return np.broadcast_to(values.mean(axis=0, keepdims=True), values.shape).copy()
    return np.zeros(values.shape)


def cell_positions(values: np.ndarray, style: str = "raw", midpoint: float | None = None) -> np.ndarray:
    """Scale position in [-1, 1] for every cell."""
    values = np.asarray(values, dtype=np.float64)
    dev = values - midpoints(values, style, midpoint)
    span = float(np.abs(dev).max()) if dev.size else 0.0
    scale = float(np.abs(values).max()) if values.size else 0.0
    # Rounding in the column mean must not be stretched into a full-colour grid.
    if span <= 1e-12 * max(scale, 1.0):
        return np.zeros(values.shape)
    return dev / span


def render_heatmap(csv_text: str, style: str = "raw", midpoint: float | None = None, title: str = "") -> str:
    rows, values, cols = read_matrix_csv(csv_text)
    return render_matrix(rows, values, cols, style, midpoint, title)


def _fmt(v: float) -> str:
    return f"{v:.3f}"


def render_matrix(rows, values, cols, style: str = "raw", midpoint: float | None = None, title: str = "") -> str:
    values = np.asarray(values, dtype=np.float64)
    if values.shape != (len(rows), len(cols)):
        raise ValueError(f"matrix {values.shape} does not match {len(rows)} row and {len(cols)} column labels")
    pos = cell_positions(values, style, midpoint)
    mids = midpoints(values, style, midpoint)
    span = float(np.abs(values - mids).max()) if values.size else 0.0
    n_r, n_c = values.shape
    grid_w, grid_h = n_c * CELL, n_r * CELL
    width = LABEL_W + grid_w + 24 + LEGEND_W + 72
    height = TOP + grid_h + 24
    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}" font-family="monospace" font-size="10">',
        f'<title>{escape(title or "heatmap")}</title>',
        f'<rect width="{width}" height="{height}" fill="#ffffff"/>',
    ]
    if title:
        out.append(f'<text x="{LABEL_W}" y="14" font-size="12">{escape(title)}</text>')
    for j, c in enumerate(cols):
        x = LABEL_W + j * CELL + CELL // 2
        out.append(f'<text x="{x}" y="{TOP - 6}" text-anchor="middle">{escape(str(c))}</text>')
    out.append('<g class="cells">')
    for i, r in enumerate(rows):
        y = TOP + i * CELL
        out.append(f'<text x="{LABEL_W - 6}" y="{y + CELL // 2 + 4}" text-anchor="end">{escape(str(r))}</text>')
        for j in range(n_c):
            x = LABEL_W + j * CELL
            out.append(
                f'<rect class="cell" x="{x}" y="{y}" width="{CELL}" height="{CELL}" '
                f'fill="{diverging_color(pos[i, j])}" data-value="{_fmt(values[i, j])}" '
                f'data-pos="{_fmt(pos[i, j])}"/>'
            )
    out.append("</g>")
    out.extend(_legend(LABEL_W + grid_w + 24, TOP, grid_h, span, style, midpoint))
    out.append("</svg>")
    return "\n".join(out) + "\n"


def _legend(x: int, y: int, h: int, span: float, style: str, midpoint: float | None) -> list[str]:
    steps = 20
    h = max(h, steps * 3)
    step_h = h / steps
    out = ['<g class="legend">']
    for k in range(steps):
        t = 1.0 - 2.0 * (k + 0.5) / steps
        out.append(
            f'<rect x="{x}" y="{y + k * step_h:.2f}" width="{LEGEND_W}" height="{step_h:.2f}" '
            f'fill="{diverging_color(t)}"/>'
        )
    centre = "column mean" if style == "raw" and midpoint is None else _fmt(midpoint or 0.0)
    labels = [(y + 4, f"+{_fmt(span)}"), (y + h / 2 + 4, centre), (y + h + 4, f"-{_fmt(span)}")]
    for ly, text in labels:
        out.append(f'<text x="{x + LEGEND_W + 4}" y="{ly:.2f}">{escape(text)}</text>')
    out.append("</g>")
    return out
