"""Open-loop planning metrics: L2 displacement, collision rates, corruption and timing harnesses."""
from __future__ import annotations

import csv
import io
import math
import statistics
import time
import zlib
from dataclasses import asdict, dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from . import geometry as geo
from .scene import (COMMANDS, HORIZON, FeatureBundleRaw, MapKind, VectorScene, agent_pose_track,
                    ego_pose_track)
from . import nnkit as nn

HORIZON_INDEX = {"1s": 1, "2s": 3, "3s": 5}


class EvalError(ValueError):
    pass


# ---------------------------------------------------------------------------
# L2
# ---------------------------------------------------------------------------
@dataclass(frozen=True)
class L2Result:
    l2_1s: float
    l2_2s: float
    l2_3s: float
    l2_avg: float


def l2_displacement(pred, gt) -> L2Result:
    """Euclidean error at the 1 s / 2 s / 3 s waypoints (indices 1, 3, 5)."""
    p, g = np.asarray(pred, dtype=float), np.asarray(gt, dtype=float)
    if p.shape != (HORIZON, 2) or g.shape != (HORIZON, 2):
        raise EvalError(f"trajectories must be ({HORIZON}, 2), got {p.shape} and {g.shape}")
    d = np.sqrt(((p - g) ** 2).sum(axis=1))
    vals = [float(d[i]) for i in HORIZON_INDEX.values()]
    return L2Result(*vals, float(np.mean(vals)))


# ---------------------------------------------------------------------------
# collision checking
# ---------------------------------------------------------------------------
@dataclass(frozen=True)
class GridConfig:
    resolution: float = 0.1
    extent: float = 80.0            # grid covers [-extent, extent] on both axes
    boundary_width: float = 0.2


@dataclass
class OccupancyGrid:
    """Occupied cells (cell centre inside an obstacle) for one timestamp, packed row-major."""
    resolution: float
    extent: float
    shape: tuple[int, int]
    bits: np.ndarray

    def occupied(self) -> np.ndarray:
        return np.unpackbits(self.bits, count=self.shape[0] * self.shape[1]).reshape(self.shape).astype(bool)


@dataclass(frozen=True)
class CollisionResult:
    collisions: tuple[bool, ...]
    exited: tuple[bool, ...]

    def __iter__(self):
        return iter(self.collisions)

    def __len__(self):
        return len(self.collisions)

    def __getitem__(self, i):
        return self.collisions[i]


def _ego_dims(scene: VectorScene) -> tuple[float, float]:
    b = scene.ego.box
    if not (b.w > 0 and b.l > 0):
        raise EvalError("degenerate zero-area ego box")
    return b.w, b.l


def _boundary_segments(scene: VectorScene) -> list[tuple[np.ndarray, np.ndarray]]:
    segs = []
    for poly in scene.map:
        if poly.kind is MapKind.ROAD_BOUNDARY:
            pts = np.asarray(poly.points)
            segs.extend((pts[i], pts[i + 1]) for i in range(len(pts) - 1))
    return segs


class _Obstacles:
    """Agent boxes along their ground-truth motions plus road-boundary segments of one scene."""

    def __init__(self, scene: VectorScene):
        self.tracks = [(a, agent_pose_track(scene, a)) for a in scene.agents]
        self.segments = _boundary_segments(scene)

    def at(self, t: int):
        boxes = [(tr[t][0], tr[t][1], a.w, a.l, tr[t][2]) for a, tr in self.tracks]
        return boxes, self.segments


def _obstacles_at(scene: VectorScene, t: int):
    return _Obstacles(scene).at(t)


def _mark(centres: np.ndarray, boxes, segs, radius: float) -> np.ndarray:
    occ = np.zeros(len(centres), dtype=bool)
    if not len(centres):
        return occ
    lo, hi = centres.min(axis=0), centres.max(axis=0)
    for x, y, w, l, yaw in boxes:
        r = math.hypot(w, l) / 2
        if x + r < lo[0] or x - r > hi[0] or y + r < lo[1] or y - r > hi[1]:
            continue
        occ |= geo.points_in_box(centres, x, y, w, l, yaw)
    for a, b in segs:
        if (max(a[0], b[0]) + radius < lo[0] or min(a[0], b[0]) - radius > hi[0]
                or max(a[1], b[1]) + radius < lo[1] or min(a[1], b[1]) - radius > hi[1]):
            continue
        occ |= geo.points_near_segment(centres, a, b, radius)
    return occ


def _cell_window(grid: GridConfig, xmin, xmax, ymin, ymax):
    res, ext = grid.resolution, grid.extent
    n = int(round(2 * ext / res))
    i0 = max(0, int(math.floor((xmin + ext) / res)) - 1)
    i1 = min(n, int(math.ceil((xmax + ext) / res)) + 1)
    j0 = max(0, int(math.floor((ymin + ext) / res)) - 1)
    j1 = min(n, int(math.ceil((ymax + ext) / res)) + 1)
    xs = -ext + (np.arange(i0, i1) + 0.5) * res
    ys = -ext + (np.arange(j0, j1) + 0.5) * res
    gx, gy = np.meshgrid(xs, ys, indexing="ij")
    return np.stack([gx.ravel(), gy.ravel()], axis=1)


def rasterize(scene: VectorScene, t: int, grid: GridConfig | None = None) -> OccupancyGrid:
    """Full occupancy raster of agent boxes and inflated road boundaries at timestamp ``t``."""
    grid = grid or GridConfig()
    n = int(round(2 * grid.extent / grid.resolution))
    occ = np.zeros((n, n), dtype=bool)
    boxes, segs = _obstacles_at(scene, t)
    radius = grid.boundary_width / 2
    for x, y, w, l, yaw in boxes:
        r = math.hypot(w, l) / 2
        _fill(occ, grid, x - r, x + r, y - r, y + r, lambda c: geo.points_in_box(c, x, y, w, l, yaw))
    for a, b in segs:
        _fill(occ, grid, min(a[0], b[0]) - radius, max(a[0], b[0]) + radius,
              min(a[1], b[1]) - radius, max(a[1], b[1]) + radius,
              lambda c: geo.points_near_segment(c, a, b, radius))
    return OccupancyGrid(grid.resolution, grid.extent, (n, n), np.packbits(occ.ravel()))


def _fill(occ, grid, xmin, xmax, ymin, ymax, test):
    res, ext = grid.resolution, grid.extent
    n = occ.shape[0]
    i0, i1 = max(0, int(math.floor((xmin + ext) / res))), min(n, int(math.ceil((xmax + ext) / res)) + 1)
    j0, j1 = max(0, int(math.floor((ymin + ext) / res))), min(n, int(math.ceil((ymax + ext) / res)) + 1)
    if i0 >= i1 or j0 >= j1:
        return
    xs = -ext + (np.arange(i0, i1) + 0.5) * res
    ys = -ext + (np.arange(j0, j1) + 0.5) * res
    gx, gy = np.meshgrid(xs, ys, indexing="ij")
    hit = test(np.stack([gx.ravel(), gy.ravel()], axis=1)).reshape(gx.shape)
    occ[i0:i1, j0:j1] |= hit


def collision_check(pred, scene: VectorScene, grid: GridConfig | None = None) -> CollisionResult:
    """Grid collision test per timestamp.

    A cell belongs to a shape when its centre lies inside it (closed set);
    the ego collides when one of its cells is also occupied by an agent box
    or a road boundary inflated to ``boundary_width``. Leaving the grid
    counts as a boundary collision and is flagged in ``exited``.
    """
    grid = grid or GridConfig()
    w, l = _ego_dims(scene)
    radius = grid.boundary_width / 2
    obstacles = _Obstacles(scene)
    hits, exits = [], []
    for t, (x, y, yaw) in enumerate(ego_pose_track(pred)):
        corners = geo.box_corners(x, y, w, l, yaw)
        if np.abs(corners).max() > grid.extent:
            hits.append(True)
            exits.append(True)
            continue
        (xmin, ymin), (xmax, ymax) = corners.min(axis=0), corners.max(axis=0)
        centres = _cell_window(grid, xmin, xmax, ymin, ymax)
        ego_cells = centres[geo.points_in_box(centres, x, y, w, l, yaw)]
        boxes, segs = obstacles.at(t)
        hits.append(bool(_mark(ego_cells, boxes, segs, radius).any()))
        exits.append(False)
    return CollisionResult(tuple(hits), tuple(exits))


def polygon_collision_oracle(pred, scene: VectorScene) -> list[bool]:
    """Exact separating-axis test of the ego box against agent boxes and boundary segments."""
    w, l = _ego_dims(scene)
    obstacles = _Obstacles(scene)
    out = []
    for t, (x, y, yaw) in enumerate(ego_pose_track(pred)):
        ego = geo.box_corners(x, y, w, l, yaw)
        boxes, segs = obstacles.at(t)
        reach = math.hypot(w, l) / 2
        centre = np.array([x, y])
        # bounding circles only skip pairs that cannot touch, so the test stays exact
        hit = any(geo.intersects(ego, geo.box_corners(bx, by, bw, bl, byaw), tol=0.0)
                  for bx, by, bw, bl, byaw in boxes
                  if math.hypot(bx - x, by - y) <= reach + math.hypot(bw, bl) / 2 + 1e-9)
        hit = hit or any(geo.intersects(ego, np.stack([a, b]), tol=0.0) for a, b in segs
                         if geo.point_segment_distance(centre, a, b) <= reach + 1e-9)
        out.append(bool(hit))
    return out


def min_separation(pred, scene: VectorScene) -> list[float]:
    """Signed distance per timestamp from the ego box to the nearest obstacle (negative = penetration)."""
    w, l = _ego_dims(scene)
    obstacles = _Obstacles(scene)
    out = []
    for t, (x, y, yaw) in enumerate(ego_pose_track(pred)):
        ego = geo.box_corners(x, y, w, l, yaw)
        boxes, segs = obstacles.at(t)
        best = math.inf
        reach = math.hypot(w, l) / 2
        for bx, by, bw, bl, byaw in boxes:
            if math.hypot(bx - x, by - y) - reach - math.hypot(bw, bl) / 2 > best:
                continue
            best = min(best, geo.signed_separation(ego, geo.box_corners(bx, by, bw, bl, byaw)))
        for a, b in segs:
            if geo.point_segment_distance(np.array([x, y]), a, b) - reach > best:
                continue
            best = min(best, geo.signed_separation(ego, np.stack([a, b])))
        out.append(best)
    return out


# ---------------------------------------------------------------------------
# aggregate metrics
# ---------------------------------------------------------------------------
METRIC_FIELDS = ("l2_1s", "l2_2s", "l2_3s", "l2_avg", "col_1s", "col_2s", "col_3s", "col_avg",
                 "invalid_rate", "latency_ms", "fps", "n_scenes")


@dataclass
class PlanMetrics:
    l2_1s: float = math.nan
    l2_2s: float = math.nan
    l2_3s: float = math.nan
    l2_avg: float = math.nan
    col_1s: float = math.nan
    col_2s: float = math.nan
    col_3s: float = math.nan
    col_avg: float = math.nan
    invalid_rate: float = 0.0
    latency_ms: float | None = None
    fps: float | None = None
    n_scenes: int = 0

    def to_dict(self) -> dict:
        out = {}
        for k in METRIC_FIELDS:
            v = getattr(self, k)
            out[k] = None if isinstance(v, float) and math.isnan(v) else v
        return out


@dataclass(frozen=True)
class EvalConfig:
    grid: GridConfig = GridConfig()
    cumulative: bool = True
    collision_free_only: bool = False


@dataclass
class EvalReport:
    metrics: PlanMetrics
    by_command: dict[str, PlanMetrics]
    per_scene: list[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        d = self.metrics.to_dict()
        d["by_command"] = {k: v.to_dict() for k, v in self.by_command.items()}
        return d


def _aggregate(rows: list[dict]) -> PlanMetrics:
    n = len(rows)
    m = PlanMetrics(n_scenes=n)
    if not n:
        return m
    valid = [r for r in rows if r["valid"]]
    m.invalid_rate = 100.0 * (n - len(valid)) / n
    if valid:
        l2 = np.array([r["l2"] for r in valid])
        m.l2_1s, m.l2_2s, m.l2_3s = (float(v) for v in l2.mean(axis=0))
        m.l2_avg = (m.l2_1s + m.l2_2s + m.l2_3s) / 3
    coll = [r for r in valid if r["col"] is not None]
    if coll:
        c = np.array([r["col"] for r in coll], dtype=float)
        m.col_1s, m.col_2s, m.col_3s = (float(v) for v in 100.0 * c.mean(axis=0))
        m.col_avg = (m.col_1s + m.col_2s + m.col_3s) / 3
    return m


def evaluate(plans: Sequence[dict], scenes: Sequence[VectorScene], cfg: EvalConfig | None = None) -> EvalReport:
    """Join plan records to scenes by id and aggregate L2 / collision metrics.

    Invalid plans count toward ``invalid_rate`` only. Collision at a horizon
    means a collision at or before it (``cumulative``), or exactly at the
    horizon waypoint otherwise.
    """
    cfg = cfg or EvalConfig()
    by_id = {s.scene_id: s for s in scenes}
    rows = []
    for plan in sorted(plans, key=lambda p: p["scene_id"]):
        scene = by_id.get(plan["scene_id"])
        if scene is None:
            raise EvalError(f"no scene for plan {plan['scene_id']!r}")
        row = {"scene_id": scene.scene_id, "command": scene.ego.command.value, "valid": bool(plan["valid"]),
               "l2": None, "col": None, "flags": None}
        if row["valid"]:
            pred = np.asarray(plan["waypoints"], dtype=float)
            r = l2_displacement(pred, scene.ego.gt_trajectory)
            row["l2"] = [r.l2_1s, r.l2_2s, r.l2_3s]
            include = True
            if cfg.collision_free_only:
                include = not any(collision_check(scene.ego.gt_trajectory, scene, cfg.grid).collisions)
            if include:
                flags = collision_check(pred, scene, cfg.grid).collisions
                row["flags"] = list(flags)
                if cfg.cumulative:
                    row["col"] = [any(flags[:i + 1]) for i in HORIZON_INDEX.values()]
                else:
                    row["col"] = [flags[i] for i in HORIZON_INDEX.values()]
        rows.append(row)
    overall = _aggregate(rows)
    strat = {c.value: _aggregate([r for r in rows if r["command"] == c.value]) for c in COMMANDS}
    return EvalReport(overall, strat, rows)


def metrics_csv(report: EvalReport) -> str:
    """One row per (command, metric) for the three command groups, fixed column/row order."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["command", "metric", "value"])
    for c in COMMANDS:
        d = report.by_command[c.value].to_dict()
        for k in METRIC_FIELDS:
            v = d[k]
            writer.writerow([c.value, k, "" if v is None else repr(v)])
    return buf.getvalue()


# ---------------------------------------------------------------------------
# robustness and timing harnesses
# ---------------------------------------------------------------------------
CORRUPTIONS = ("attenuate", "blur", "dropout", "bias")


def _corrupt_array(x: np.ndarray, mask: np.ndarray | None, kind: str, severity: float,
                   rng: np.random.Generator) -> np.ndarray:
    present = np.ones(x.shape[:-1], dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    keep = present[..., None].astype(float)
    if kind == "attenuate":
        return x * (1.0 - severity)
    if kind == "blur":
        up = np.concatenate([x[..., :1, :], x[..., :-1, :]], axis=-2)
        down = np.concatenate([x[..., 1:, :], x[..., -1:, :]], axis=-2)
        return ((1.0 - severity) * x + severity * 0.5 * (up + down)) * keep
    if kind == "dropout":
        drop = rng.uniform(size=x.shape[:-1]) < severity
        return np.where(drop[..., None], 0.0, x)
    if kind == "bias":
        return x + severity * keep
    raise EvalError(f"unknown corruption kind {kind!r}; expected one of {CORRUPTIONS}")


def corrupt_features(bundle: FeatureBundleRaw, kind: str, severity: float, seed: int = 0) -> FeatureBundleRaw:
    """Feature-level noise; severity 0 returns an exact copy."""
    if kind not in CORRUPTIONS:
        raise EvalError(f"unknown corruption kind {kind!r}; expected one of {CORRUPTIONS}")
    if not 0.0 <= severity <= 1.0:
        raise EvalError(f"severity must lie in [0, 1], got {severity}")
    rng = np.random.default_rng([int(seed), zlib.crc32(kind.encode())])
    out = []
    for t, m in ((bundle.f_det, bundle.det_mask), (bundle.f_motion, bundle.motion_mask),
                 (bundle.f_map, bundle.map_mask)):
        data = t.data.copy() if severity == 0 else _corrupt_array(t.data, m, kind, severity, rng)
        out.append(nn.Tensor(data))
    return FeatureBundleRaw(out[0], out[1], out[2], bundle.det_mask, bundle.motion_mask, bundle.map_mask)


@dataclass(frozen=True)
class TimingReport:
    latency_ms: float
    fps: float
    n: int
    iqr_ms: float
    repetitions: int

    def to_dict(self) -> dict:
        return asdict(self)


def timing_harness(run: Callable[[object], object], scenes: Sequence, repetitions: int = 10,
                   warmup: int = 2) -> TimingReport:
    """Median per-scene wall-clock of ``run(scene)``; warm-up passes are discarded."""
    if repetitions < 10:
        raise ValueError("timing needs at least 10 repetitions")
    if not scenes:
        raise ValueError("timing needs at least one scene")
    for _ in range(warmup):
        run(scenes[0])
    samples = []
    for _ in range(repetitions):
        for s in scenes:
            t0 = time.perf_counter()
            run(s)
            samples.append((time.perf_counter() - t0) * 1000.0)
    med = statistics.median(samples)
    q = np.percentile(samples, [25, 75])
    return TimingReport(latency_ms=med, fps=1000.0 / med, n=len(samples), iqr_ms=float(q[1] - q[0]),
                        repetitions=repetitions)


def collision_agreement(cases: Iterable[tuple[np.ndarray, VectorScene]], grid: GridConfig | None = None,
                        margin: float = 0.15) -> dict:
    """Compare the grid checker with the exact oracle per (scene, timestamp) case."""
    grid = grid or GridConfig()
    total = marginal = marginal_disagree = clear_disagree = 0
    for pred, scene in cases:
        g = collision_check(pred, scene, grid)
        o = polygon_collision_oracle(pred, scene)
        sep = min_separation(pred, scene)
        for t in range(len(o)):
            if g.exited[t]:
                continue
            total += 1
            if abs(sep[t]) > margin:
                clear_disagree += g.collisions[t] != o[t]
            else:
                marginal += 1
                marginal_disagree += g.collisions[t] != o[t]
    return {"cases": total, "marginal_cases": marginal, "marginal_disagreements": marginal_disagree,
            "clear_disagreements": clear_disagree,
            "marginal_disagreement_rate": marginal_disagree / total if total else 0.0}
