"""File-based result display: ASCII PLY clouds and SVG scatter plots."""

from __future__ import annotations

import numpy as np

CLASS_COLOURS = {0: (40, 80, 220), 1: (220, 60, 40), 2: (60, 200, 70), 3: (160, 160, 160)}


def ply_text(points: np.ndarray, class_id: int | None = None) -> str:
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    r, g, b = CLASS_COLOURS.get(class_id, (255, 255, 255))
    lines = [
        "ply",
        "format ascii 1.0",
        f"element vertex {len(pts)}",
        "property float x",
        "property float y",
        "property float z",
        "property uchar red",
        "property uchar green",
        "property uchar blue",
        "end_header",
    ]
    lines += [f"{x:.6f} {y:.6f} {z:.6f} {r} {g} {b}" for x, y, z in pts]
    return "\n".join(lines) + "\n"


def svg_scatter(points: np.ndarray, class_id: int | None = None, size: int = 400,
                axes: tuple[int, int] = (0, 1), margin: int = 10) -> str:
    """Orthographic projection onto two coordinate axes, one 1-px dot per point."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)[:, list(axes)]
    colour = "#%02x%02x%02x" % CLASS_COLOURS.get(class_id, (0, 0, 0))
    inner = size - 2 * margin
    head = [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{size}" height="{size}" '
        f'viewBox="0 0 {size} {size}">',
        f'<rect x="{margin}" y="{margin}" width="{inner}" height="{inner}" fill="none" stroke="black"/>',
    ]
    body = []
    if len(pts):
        lo, hi = pts.min(axis=0), pts.max(axis=0)
        span = float(max((hi - lo).max(), 1e-9))
        px = margin + (pts[:, 0] - lo[0]) / span * inner
        py = margin + inner - (pts[:, 1] - lo[1]) / span * inner  # SVG y grows downward
        body = [f'<circle cx="{x:.2f}" cy="{y:.2f}" r="0.5" fill="{colour}"/>' for x, y in zip(px, py)]
    return "\n".join(head + body + ["</svg>"]) + "\n"
