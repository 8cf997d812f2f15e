"""Hand-written SVG figures: bird's-eye scene overlays and metric bar charts.

All coordinates are printed with fixed precision so identical inputs give
identical bytes.
"""
from __future__ import annotations

from html import escape
from typing import Sequence

import numpy as np

from .scene import MapKind, VectorScene

PX_PER_M = 6.0
MAP_STYLE = {
    MapKind.ROAD_BOUNDARY: 'stroke="#222222" stroke-width="1.5" fill="none"',
    MapKind.LANE_DIVIDER: 'stroke="#999999" stroke-width="1" stroke-dasharray="4 3" fill="none"',
    MapKind.CROSSING: 'stroke="#3366cc" stroke-width="1.5" fill="none"',
}
TRAJ_STYLE = {"gt": "#2a9d3a", "pred": "#d62828"}


def _f(v: float) -> str:
    s = f"{v:.2f}"
    return "0.00" if s == "-0.00" else s


def _svg(width: float, height: float, body: list[str]) -> str:
    head = (f'<svg xmlns="http://www.w3.org/2000/svg" width="{_f(width)}" height="{_f(height)}" '
            f'viewBox="0 0 {_f(width)} {_f(height)}">')
    return "\n".join([head, f'<rect width="{_f(width)}" height="{_f(height)}" fill="#ffffff"/>', *body, "</svg>"]) + "\n"


def _legend(items: Sequence[tuple[str, str]], x: float, y: float) -> list[str]:
    out = []
    for i, (label, colour) in enumerate(items):
        yy = y + 16 * i
        out.append(f'<rect x="{_f(x)}" y="{_f(yy - 9)}" width="10" height="10" fill="{colour}"/>')
        out.append(f'<text x="{_f(x + 14)}" y="{_f(yy)}" font-family="sans-serif" font-size="11">'
                   f'{escape(label)}</text>')
    return out


def bev_svg(scene: VectorScene, pred=None, collisions: Sequence[bool] | None = None, half_extent: float = 40.0) -> str:
    """Top-down view (x forward drawn upward, y left drawn leftward) with gt and predicted paths.

    Predicted waypoints whose timestamp is flagged in ``collisions`` get a
    black ring.
    """
    size = 2 * half_extent * PX_PER_M

    def px(x, y):
        return size / 2 - y * PX_PER_M, size / 2 - x * PX_PER_M

    body = []
    for poly in scene.map:
        pts = " ".join(f"{_f(a)},{_f(b)}" for a, b in (px(x, y) for x, y in poly.points))
        body.append(f'<polyline points="{pts}" {MAP_STYLE[poly.kind]}/>')
    for agent in scene.agents:
        pts = " ".join(f"{_f(a)},{_f(b)}" for a, b in (px(x, y) for x, y in agent.corners()))
        body.append(f'<polygon points="{pts}" fill="#f4a261" fill-opacity="0.6" stroke="#8a4b14"/>')
    ego = " ".join(f"{_f(a)},{_f(b)}" for a, b in (px(x, y) for x, y in scene.ego.box.corners()))
    body.append(f'<polygon points="{ego}" fill="#457b9d" stroke="#1d3557"/>')
    for key, traj in (("gt", scene.ego.gt_trajectory), ("pred", pred)):
        if traj is None or len(traj) == 0:
            continue
        pts = [px(0.0, 0.0)] + [px(x, y) for x, y in np.asarray(traj, dtype=float)]
        body.append(f'<polyline points="{" ".join(f"{_f(a)},{_f(b)}" for a, b in pts)}" '
                    f'stroke="{TRAJ_STYLE[key]}" stroke-width="2" fill="none"/>')
        for a, b in pts[1:]:
            body.append(f'<circle cx="{_f(a)}" cy="{_f(b)}" r="2.5" fill="{TRAJ_STYLE[key]}"/>')
    if pred is not None and collisions is not None:
        for (x, y), hit in zip(np.asarray(pred, dtype=float), collisions):
            if hit:
                a, b = px(x, y)
                body.append(f'<circle class="collision" cx="{_f(a)}" cy="{_f(b)}" r="6" stroke="#000000" '
                            f'stroke-width="2" fill="none"/>')
    body.append(f'<text x="8" y="{_f(size - 8)}" font-family="sans-serif" font-size="11">'
                f'{escape(scene.scene_id)} ({escape(scene.ego.command.value)})</text>')
    body += _legend([("ground truth", TRAJ_STYLE["gt"]), ("prediction", TRAJ_STYLE["pred"]),
                     ("collision", "#000000")], 8, 16)
    return _svg(size, size, body)


def metrics_bar_svg(rows: Sequence[tuple[str, dict]], metrics: Sequence[str] = ("l2_avg", "col_avg")) -> str:
    """Grouped bars, one group per labelled row; each metric gets its own colour and scale."""
    colours = ["#264653", "#e76f51", "#2a9d8f", "#e9c46a"]
    bar_w, gap, chart_h, top = 18.0, 24.0, 200.0, 30.0
    group_w = bar_w * len(metrics) + gap
    width = max(320.0, 60 + group_w * len(rows))
    height = top + chart_h + 70
    body = _legend([(m, colours[i % len(colours)]) for i, m in enumerate(metrics)], width - 110, 16)
    body.append(f'<line x1="40" y1="{_f(top + chart_h)}" x2="{_f(width - 10)}" y2="{_f(top + chart_h)}" '
                f'stroke="#000000"/>')
    scales = {}
    for m in metrics:
        vals = [r[1].get(m) for r in rows if isinstance(r[1].get(m), (int, float))]
        scales[m] = max(vals) if vals and max(vals) > 0 else 1.0
    for gi, (label, values) in enumerate(rows):
        x0 = 50 + gi * group_w
        for mi, m in enumerate(metrics):
            v = values.get(m)
            if not isinstance(v, (int, float)):
                continue
            h = chart_h * v / scales[m]
            x = x0 + mi * bar_w
            body.append(f'<rect x="{_f(x)}" y="{_f(top + chart_h - h)}" width="{_f(bar_w - 2)}" height="{_f(h)}" '
                        f'fill="{colours[mi % len(colours)]}"><title>{escape(m)}={v:.4f}</title></rect>')
        body.append(f'<text x="{_f(x0)}" y="{_f(top + chart_h + 14)}" font-family="sans-serif" font-size="10">'
                    f'{escape(label)}</text>')
    return _svg(width, height, body)
