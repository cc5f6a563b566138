"""Minimal static SVG output: cell heatmaps with a sign contour.

Numbers are written with fixed precision so identical inputs give identical
bytes.
"""

from __future__ import annotations

from xml.sax.saxutils import escape

import numpy as np

CELL = 28
MARGIN = 60


def _fmt(x: float) -> str:
    return f"{x:.6g}"


def _diverging(v: float, vmax: float) -> str:
    t = 0.0 if vmax == 0 else max(-1.0, min(1.0, v / vmax))
    if t >= 0:  # white -> red
        r, g, b = 255, int(round(255 * (1 - t))), int(round(255 * (1 - t)))
    else:  # white -> blue
        r, g, b = int(round(255 * (1 + t))), int(round(255 * (1 + t))), 255
    return f"#{r:02x}{g:02x}{b:02x}"


def _sequential(v: float, vmax: float) -> str:
    t = 0.0 if vmax <= 0 else max(0.0, min(1.0, v / vmax))
    level = int(round(255 * (1 - t)))
    return f"#{level:02x}{level:02x}ff" if t > 0 else "#ffffff"


def _panel(values: np.ndarray, x_labels, y_labels, title: str, x0: int, diverging: bool, contour: bool) -> tuple[list[str], int, int]:
    ny, nx = values.shape
    finite = values[np.isfinite(values)]
    vmax = float(np.max(np.abs(finite))) if finite.size else 0.0
    out = [f'<text x="{x0 + MARGIN}" y="{MARGIN // 2}" font-size="14">{escape(title)}</text>']
    for r in range(ny):
        for c in range(nx):
            v = values[r, c]
            color = "#cccccc" if not np.isfinite(v) else (_diverging(v, vmax) if diverging else _sequential(v, vmax))
            x = x0 + MARGIN + c * CELL
            y = MARGIN + (ny - 1 - r) * CELL
            out.append(f'<rect x="{x}" y="{y}" width="{CELL}" height="{CELL}" fill="{color}"><title>{_fmt(float(v))}</title></rect>')
    if contour:
        # boundary segments between cells of opposite sign
        pos = np.nan_to_num(values) > 0
        for r in range(ny):
            for c in range(nx):
                x = x0 + MARGIN + c * CELL
                y = MARGIN + (ny - 1 - r) * CELL
                if c + 1 < nx and pos[r, c] != pos[r, c + 1]:
                    out.append(f'<line x1="{x + CELL}" y1="{y}" x2="{x + CELL}" y2="{y + CELL}" stroke="black" stroke-width="2"/>')
                if r + 1 < ny and pos[r, c] != pos[r + 1, c]:
                    out.append(f'<line x1="{x}" y1="{y}" x2="{x + CELL}" y2="{y}" stroke="black" stroke-width="2"/>')
    for c, lab in enumerate(x_labels):
        out.append(f'<text x="{x0 + MARGIN + c * CELL + 2}" y="{MARGIN + ny * CELL + 14}" font-size="9">{escape(lab)}</text>')
    for r, lab in enumerate(y_labels):
        out.append(f'<text x="{x0 + 4}" y="{MARGIN + (ny - 1 - r) * CELL + CELL // 2 + 4}" font-size="9">{escape(lab)}</text>')
    return out, 2 * MARGIN + nx * CELL, 2 * MARGIN + ny * CELL


def heatmap_svg(panels, diverging: bool = False, contour: bool = False) -> str:
    """SVG with one heatmap per ``(values[y, x], x_labels, y_labels, title)`` panel, side by side."""
    body, width, height = [], 0, 0
    for values, xl, yl, title in panels:
        parts, w, h = _panel(np.asarray(values, dtype=float), xl, yl, title, width, diverging, contour)
        body.extend(parts)
        width += w
        height = max(height, h)
    head = f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">'
    return "\n".join([head, f'<rect width="{width}" height="{height}" fill="white"/>', *body, "</svg>"]) + "\n"


def labels(values) -> list[str]:
    return [_fmt(float(v)) for v in values]
