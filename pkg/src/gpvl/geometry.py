"""Planar convex-shape helpers: oriented boxes, segments, separating-axis tests."""
from __future__ import annotations

import math

import numpy as np


def wrap_angle(a: float) -> float:
    return (a + math.pi) % (2 * math.pi) - math.pi


def box_corners(cx: float, cy: float, width: float, length: float, yaw: float) -> np.ndarray:
    """Corners (4, 2) counter-clockwise; ``length`` runs along the heading."""
    c, s = math.cos(yaw), math.sin(yaw)
    hl, hw = length / 2.0, width / 2.0
    local = np.array([[hl, hw], [-hl, hw], [-hl, -hw], [hl, -hw]])
    rot = np.array([[c, -s], [s, c]])
    return local @ rot.T + np.array([cx, cy])


def _axes(poly: np.ndarray) -> np.ndarray:
    if len(poly) == 2:
        edges = poly[1:] - poly[:1]
    else:
        edges = np.roll(poly, -1, axis=0) - poly
    normals = np.stack([-edges[:, 1], edges[:, 0]], axis=1)
    norms = np.linalg.norm(normals, axis=1)
    keep = norms > 0
    return normals[keep] / norms[keep, None]


def sat_overlap(a: np.ndarray, b: np.ndarray) -> float:
    """Smallest projection overlap over all candidate axes.

    Negative means a separating axis exists; zero means touching, which the
    closed-set convention counts as intersecting.
    """
    axes = np.concatenate([_axes(a), _axes(b)])
    pa, pb = a @ axes.T, b @ axes.T
    overlap = np.minimum(pa.max(axis=0), pb.max(axis=0)) - np.maximum(pa.min(axis=0), pb.min(axis=0))
    return float(overlap.min())


def intersects(a: np.ndarray, b: np.ndarray, tol: float = 1e-12) -> bool:
    return sat_overlap(a, b) >= -tol


def point_segment_distance(p: np.ndarray, a: np.ndarray, b: np.ndarray) -> float:
    ab = b - a
    denom = float(ab @ ab)
    t = 0.0 if denom == 0 else min(1.0, max(0.0, float((p - a) @ ab) / denom))
    return float(np.linalg.norm(p - (a + t * ab)))


def _edges(poly: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    if len(poly) == 2:
        return poly[:1], poly[1:]
    return poly, np.roll(poly, -1, axis=0)


def _vertex_edge_gap(pts: np.ndarray, poly: np.ndarray) -> float:
    e0, e1 = _edges(poly)
    ab = e1 - e0
    denom = np.maximum((ab * ab).sum(axis=1), 1e-300)
    rel = pts[:, None, :] - e0[None, :, :]
    t = np.clip((rel * ab[None]).sum(axis=2) / denom[None], 0.0, 1.0)
    closest = e0[None] + t[..., None] * ab[None]
    return float(np.sqrt(((pts[:, None, :] - closest) ** 2).sum(axis=2)).min())


def polygon_distance(a: np.ndarray, b: np.ndarray) -> float:
    """Euclidean gap between two convex shapes; 0 when they intersect."""
    if intersects(a, b, tol=0.0):
        return 0.0
    return min(_vertex_edge_gap(a, b), _vertex_edge_gap(b, a))


def signed_separation(a: np.ndarray, b: np.ndarray) -> float:
    """Gap distance when disjoint, minus the SAT penetration depth when overlapping."""
    overlap = sat_overlap(a, b)
    if overlap >= 0:
        return -overlap
    return min(_vertex_edge_gap(a, b), _vertex_edge_gap(b, a))


def bounding_radius(poly: np.ndarray) -> tuple[np.ndarray, float]:
    c = poly.mean(axis=0)
    return c, float(np.sqrt(((poly - c) ** 2).sum(axis=1)).max())


def points_in_box(points: np.ndarray, cx: float, cy: float, width: float, length: float, yaw: float) -> np.ndarray:
    """Closed-set membership of (N, 2) points in an oriented box."""
    c, s = math.cos(yaw), math.sin(yaw)
    d = points - np.array([cx, cy])
    lon = d[:, 0] * c + d[:, 1] * s
    lat = -d[:, 0] * s + d[:, 1] * c
    return (np.abs(lon) <= length / 2.0) & (np.abs(lat) <= width / 2.0)


def points_near_segment(points: np.ndarray, a: np.ndarray, b: np.ndarray, radius: float) -> np.ndarray:
    ab = b - a
    denom = float(ab @ ab)
    if denom == 0:
        t = np.zeros(len(points))
    else:
        t = np.clip((points - a) @ ab / denom, 0.0, 1.0)
    closest = a + t[:, None] * ab
    return np.linalg.norm(points - closest, axis=1) <= radius


def headings_from_waypoints(points: np.ndarray, start=(0.0, 0.0), initial: float = 0.0) -> np.ndarray:
    """Heading at each waypoint from the displacement since the previous one.

    A zero displacement keeps the previous heading.
    """
    out = np.empty(len(points))
    prev_pt = np.asarray(start, dtype=float)
    prev_h = initial
    for i, p in enumerate(points):
        d = p - prev_pt
        if math.hypot(d[0], d[1]) > 1e-6:
            prev_h = math.atan2(d[1], d[0])
        out[i] = prev_h
        prev_pt = p
    return out
