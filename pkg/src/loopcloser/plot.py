"""Static SVG of trajectories seen from above (x, y of the camera centres)."""

from __future__ import annotations

import numpy as np

from .trajectory import positions

COLORS = {"ground truth": "#222222", "drifted": "#d62728", "corrected": "#1f77b4"}


def trajectory_svg(trajectories: dict, width: int = 640, height: int = 640, margin: int = 40) -> str:
    pts = {name: positions(t)[:, :2] for name, t in trajectories.items()}
    allp = np.vstack(list(pts.values()))
    lo, hi = allp.min(axis=0), allp.max(axis=0)
    span = max(float(np.max(hi - lo)), 1e-9)
    scale = min(width, height) - 2 * margin
    scale /= span

    def xy(p):
        x = margin + (p[0] - lo[0]) * scale
        y = height - margin - (p[1] - lo[1]) * scale
        return f"{x:.2f},{y:.2f}"

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
    ]
    for k, (name, p) in enumerate(pts.items()):
        color = COLORS.get(name, "#2ca02c")
        path = " ".join(xy(q) for q in p)
        out.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{path}"/>')
        out.append(f'<text x="{margin}" y="{20 + 16 * k}" font-family="sans-serif" font-size="12" fill="{color}">{name}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def write_svg(path, trajectories: dict, **kw):
    with open(path, "w") as fh:
        fh.write(trajectory_svg(trajectories, **kw))
