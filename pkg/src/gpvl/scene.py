"""Vector driving scenes: data model, synthetic generator, dataset files and the scene encoder.

All geometry lives in the ego frame at t=0 (x forward, y left). The scene
encoder is a deterministic per-element embedding that stands in for a
pretrained BEV backbone: row i of the detection features depends only on
agent i, padded rows are exactly zero.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Sequence

import numpy as np

from . import geometry as geo
from . import nnkit as nn
from .io import atomic_write_text

HORIZON = 6
DT = 0.5
POINTS_PER_POLYLINE = 20
AGENT_CLASSES = ("car", "truck", "pedestrian", "cyclist")
EGO_WIDTH, EGO_HEIGHT, EGO_LENGTH, EGO_Z = 1.85, 1.6, 4.6, 0.8

# Normalisation constants for raw feature / probe targets.
POS_SCALE = 20.0
SIZE_SCALE = 5.0


class Command(str, Enum):
    TURN_LEFT = "TurnLeft"
    TURN_RIGHT = "TurnRight"
    GO_STRAIGHT = "GoStraight"


COMMANDS = (Command.TURN_LEFT, Command.TURN_RIGHT, Command.GO_STRAIGHT)


class MapKind(str, Enum):
    LANE_DIVIDER = "lane_divider"
    ROAD_BOUNDARY = "road_boundary"
    CROSSING = "crossing"


MAP_KINDS = (MapKind.LANE_DIVIDER, MapKind.ROAD_BOUNDARY, MapKind.CROSSING)


class SceneError(ValueError):
    pass


@dataclass(frozen=True)
class AgentBox:
    cx: float
    cy: float
    cz: float
    w: float
    h: float
    l: float
    yaw: float
    class_id: int = 0
    id: int = 0

    def __post_init__(self):
        if not (self.w > 0 and self.h > 0 and self.l > 0):
            raise SceneError(f"box extents must be positive, got w={self.w} h={self.h} l={self.l}")
        if not -math.pi <= self.yaw <= math.pi:
            raise SceneError(f"yaw {self.yaw} outside [-pi, pi]")
        if not all(math.isfinite(v) for v in (self.cx, self.cy, self.cz)):
            raise SceneError("box centre must be finite")

    def corners(self, cx: float | None = None, cy: float | None = None, yaw: float | None = None) -> np.ndarray:
        return geo.box_corners(self.cx if cx is None else cx, self.cy if cy is None else cy,
                               self.w, self.l, self.yaw if yaw is None else yaw)


@dataclass(frozen=True)
class AgentMotion:
    agent_id: int
    waypoints: tuple[tuple[float, float], ...]

    def __post_init__(self):
        if not all(math.isfinite(v) for p in self.waypoints for v in p):
            raise SceneError(f"motion of agent {self.agent_id} has non-finite waypoints")


@dataclass(frozen=True)
class MapPolyline:
    kind: MapKind
    points: tuple[tuple[float, float], ...]

    def __post_init__(self):
        if len(self.points) != POINTS_PER_POLYLINE:
            raise SceneError(f"polyline needs {POINTS_PER_POLYLINE} points, got {len(self.points)}")
        for a, b in zip(self.points, self.points[1:]):
            if a == b:
                raise SceneError("polyline has repeated consecutive points")


@dataclass(frozen=True)
class EgoState:
    box: AgentBox
    command: Command
    gt_trajectory: tuple[tuple[float, float], ...]

    def __post_init__(self):
        if len(self.gt_trajectory) != HORIZON:
            raise SceneError(f"ego trajectory needs {HORIZON} waypoints, got {len(self.gt_trajectory)}")


@dataclass(frozen=True)
class VectorScene:
    ego: EgoState
    agents: tuple[AgentBox, ...] = ()
    motions: tuple[AgentMotion, ...] = ()
    map: tuple[MapPolyline, ...] = ()
    scene_id: str = ""
    split_tag: str = ""

    def __post_init__(self):
        ids = [a.id for a in self.agents]
        if len(set(ids)) != len(ids):
            raise SceneError(f"scene {self.scene_id}: agent ids not unique")
        known = set(ids)
        for m in self.motions:
            if m.agent_id not in known:
                raise SceneError(f"scene {self.scene_id}: motion refers to unknown agent {m.agent_id}")
            if len(m.waypoints) != HORIZON:
                raise SceneError(f"scene {self.scene_id}: motion of agent {m.agent_id} needs {HORIZON} waypoints")

    def motion_of(self, agent_id: int) -> AgentMotion | None:
        for m in self.motions:
            if m.agent_id == agent_id:
                return m
        return None


# ---------------------------------------------------------------------------
# synthetic generation
# ---------------------------------------------------------------------------
@dataclass(frozen=True)
class SceneGenConfig:
    min_agents: int = 0
    max_agents: int = 12
    map_extent: float = 60.0
    command_probs: tuple[float, float, float] = (0.25, 0.25, 0.5)  # left, right, straight
    min_speed: float = 4.0
    max_speed: float = 10.0
    max_accel: float = 1.0
    max_curvature: float = 0.08
    turn_angle_deg: tuple[float, float] = (25.0, 50.0)
    straight_angle_deg: float = 5.0
    lane_width: float = 3.5
    lanes: tuple[int, int] = (2, 3)
    crossing_prob: float = 0.4
    left_hand_traffic: bool = False
    avoid_collisions: bool = True
    clearance: float = 0.5
    split_tag: str = "city_a"

    def __post_init__(self):
        if self.min_agents < 0 or self.max_agents < self.min_agents:
            raise SceneError(f"empty agent-count range [{self.min_agents}, {self.max_agents}]")
        if self.map_extent <= 0:
            raise SceneError("map_extent must be positive")
        probs = self.command_probs
        if len(probs) != 3 or min(probs) < 0 or abs(sum(probs) - 1.0) > 1e-9:
            raise SceneError(f"command_probs must be 3 non-negative values summing to 1, got {probs}")
        if not 0 < self.min_speed <= self.max_speed:
            raise SceneError(f"empty speed range [{self.min_speed}, {self.max_speed}]")
        if self.max_curvature <= 0 or self.lane_width <= 0 or self.max_accel < 0:
            raise SceneError("kinematic limits and lane width must be positive")
        lo, hi = self.turn_angle_deg
        if not 15.0 <= lo <= hi:
            raise SceneError(f"turn angle range {self.turn_angle_deg} must start at >= 15 deg")
        if not 0 <= self.straight_angle_deg <= 10.0:
            raise SceneError("straight_angle_deg must lie in [0, 10]")
        if not 1 <= self.lanes[0] <= self.lanes[1]:
            raise SceneError(f"empty lane-count range {self.lanes}")

    @classmethod
    def preset(cls, tag: str, **overrides) -> "SceneGenConfig":
        """Named scene distributions used for the distribution-shift experiments."""
        presets = {
            "city_a": {},
            "city_b": dict(left_hand_traffic=True, min_speed=6.0, max_speed=12.0, max_agents=14,
                           lane_width=3.2, command_probs=(0.3, 0.3, 0.4)),
        }
        if tag not in presets:
            raise SceneError(f"unknown scene preset {tag!r}; known: {sorted(presets)}")
        return cls(**{**presets[tag], "split_tag": tag, **overrides})

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in self.__dataclass_fields__}
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}

    @classmethod
    def from_dict(cls, d: dict) -> "SceneGenConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise SceneError(f"unknown scene config key {sorted(unknown)[0]!r}")
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})


class _Route:
    """Arc-length parameterised centreline of the ego lane."""

    def __init__(self, pts: np.ndarray):
        self.pts = pts
        seg = np.linalg.norm(np.diff(pts, axis=0), axis=1)
        self.s = np.concatenate([[0.0], np.cumsum(seg)])
        d = np.diff(pts, axis=0)
        self.heading = np.arctan2(d[:, 1], d[:, 0])

    def at(self, s: float, offset: float = 0.0) -> tuple[float, float, float]:
        s = float(np.clip(s, self.s[0], self.s[-1]))
        i = int(np.clip(np.searchsorted(self.s, s, side="right") - 1, 0, len(self.heading) - 1))
        t = (s - self.s[i]) / max(self.s[i + 1] - self.s[i], 1e-12)
        p = self.pts[i] + t * (self.pts[i + 1] - self.pts[i])
        h = float(self.heading[i])
        return float(p[0] - offset * math.sin(h)), float(p[1] + offset * math.cos(h)), h

    def polyline(self, s0: float, s1: float, offset: float) -> tuple[tuple[float, float], ...]:
        return tuple(self.at(s, offset)[:2] for s in np.linspace(s0, s1, POINTS_PER_POLYLINE))


def _ego_path(rng: np.random.Generator, cfg: SceneGenConfig, command: Command):
    """Sample speed/accel/heading change; integrate a constant-yaw-rate path."""
    horizon_t = HORIZON * DT
    lo, hi = cfg.turn_angle_deg
    for _ in range(100):
        v0 = rng.uniform(cfg.min_speed, cfg.max_speed)
        a_lo = max(-cfg.max_accel, (cfg.min_speed - v0) / horizon_t)
        a_hi = min(cfg.max_accel, (cfg.max_speed - v0) / horizon_t)
        accel = rng.uniform(a_lo, a_hi)
        if command is Command.TURN_LEFT:
            delta = math.radians(rng.uniform(lo, hi))
        elif command is Command.TURN_RIGHT:
            delta = -math.radians(rng.uniform(lo, hi))
        else:
            delta = math.radians(rng.uniform(-cfg.straight_angle_deg, cfg.straight_angle_deg))
        omega = delta / horizon_t
        v_min = min(v0, v0 + accel * horizon_t)
        # chord-based curvature estimates run slightly above the arc value; keep a margin
        if abs(omega) / v_min <= 0.95 * cfg.max_curvature:
            break
    else:  # pragma: no cover - unreachable with validated configs
        raise SceneError("could not sample a trajectory within the curvature limit")
    sub = 50
    n = HORIZON * sub
    ts = np.arange(1, n + 1) * (horizon_t / n)
    tm = ts - horizon_t / n / 2
    v = v0 + accel * tm
    th = omega * tm
    step = horizon_t / n
    xs = np.concatenate([[0.0], np.cumsum(v * np.cos(th) * step)])
    ys = np.concatenate([[0.0], np.cumsum(v * np.sin(th) * step)])
    dense = np.stack([xs, ys], axis=1)
    traj = dense[sub::sub]
    return traj, dense, v0, accel


def _agent_pose_track(box: AgentBox, motion: AgentMotion | None) -> list[tuple[float, float, float]]:
    """(x, y, yaw) for every horizon timestamp."""
    if motion is None:
        return [(box.cx, box.cy, box.yaw)] * HORIZON
    pts = np.asarray(motion.waypoints)
    heads = geo.headings_from_waypoints(pts, start=(box.cx, box.cy), initial=box.yaw)
    return [(float(p[0]), float(p[1]), float(h)) for p, h in zip(pts, heads)]


def agent_pose_track(scene: VectorScene, box: AgentBox) -> list[tuple[float, float, float]]:
    return _agent_pose_track(box, scene.motion_of(box.id))


def ego_pose_track(traj) -> list[tuple[float, float, float]]:
    pts = np.asarray(traj, dtype=float)
    heads = geo.headings_from_waypoints(pts)
    return [(float(p[0]), float(p[1]), float(h)) for p, h in zip(pts, heads)]


def _clear_of_ego(box: AgentBox, motion: AgentMotion | None, ego_track, clearance: float) -> bool:
    reach = math.hypot(box.w, box.l) / 2 + math.hypot(EGO_WIDTH, EGO_LENGTH) / 2 + clearance
    poses = [(box.cx, box.cy, box.yaw)] + _agent_pose_track(box, motion)
    egos = [(0.0, 0.0, 0.0)] + list(ego_track)
    for (ax, ay, ayaw), (ex, ey, eyaw) in zip(poses, egos):
        if math.hypot(ax - ex, ay - ey) > reach:
            continue
        ego = geo.box_corners(ex, ey, EGO_WIDTH, EGO_LENGTH, eyaw)
        if geo.signed_separation(box.corners(ax, ay, ayaw), ego) <= clearance:
            return False
    return True


_CLASS_SIZES = {0: (1.9, 1.6, 4.5), 1: (2.5, 3.0, 8.0), 2: (0.7, 1.8, 0.7), 3: (0.8, 1.6, 1.8)}


def _sample_agent(rng, cfg: SceneGenConfig, route: _Route, lane_offsets, edges, v_flow, s_max, agent_id):
    kind = rng.choice(["lane", "parked", "pedestrian", "cyclist"], p=[0.55, 0.15, 0.2, 0.1])
    side = -1.0 if cfg.left_hand_traffic else 1.0
    if kind == "lane":
        cls = int(rng.choice([0, 1], p=[0.8, 0.2]))
        offset = float(rng.choice(lane_offsets))
        s = rng.uniform(route.s[0] + 5, s_max)
        speed = max(0.0, v_flow + rng.normal(0.0, 1.0))
        heading_noise = rng.normal(0.0, 0.03)
    elif kind == "parked":
        cls = 0
        edge = edges[int(rng.integers(2))]
        offset = edge + math.copysign(1.6, edge if edge != 0 else -side)
        s = rng.uniform(route.s[0] + 5, s_max)
        speed, heading_noise = 0.0, rng.normal(0.0, 0.05)
    elif kind == "pedestrian":
        cls = 2
        edge = edges[int(rng.integers(2))]
        offset = edge + math.copysign(rng.uniform(1.0, 3.0), edge if edge != 0 else -side)
        s = rng.uniform(route.s[0] + 5, s_max)
        speed, heading_noise = rng.uniform(0.5, 1.5), rng.uniform(-math.pi, math.pi)
    else:
        cls = 3
        offset = lane_offsets[0] - side * 1.0
        s = rng.uniform(route.s[0] + 5, s_max)
        speed, heading_noise = rng.uniform(3.0, 5.0), rng.normal(0.0, 0.03)
    w, h, l = _CLASS_SIZES[cls]
    w, l = w * rng.uniform(0.9, 1.1), l * rng.uniform(0.9, 1.1)
    x, y, heading = route.at(s, offset)
    yaw = geo.wrap_angle(heading + heading_noise)
    box = AgentBox(cx=x, cy=y, cz=h / 2, w=w, h=h, l=l, yaw=yaw, class_id=cls, id=agent_id)
    if kind in ("lane", "cyclist"):
        wps = tuple(route.at(s + speed * DT * (k + 1), offset)[:2] for k in range(HORIZON))
    else:
        wps = tuple((x + speed * DT * (k + 1) * math.cos(yaw), y + speed * DT * (k + 1) * math.sin(yaw))
                    for k in range(HORIZON))
    return box, AgentMotion(agent_id=agent_id, waypoints=wps)


def generate_scene(seed: int, config: SceneGenConfig | None = None) -> VectorScene:
    """Sample one scene; a pure function of (seed, config)."""
    cfg = config or SceneGenConfig()
    rng = np.random.default_rng([int(seed), 0x6A7])
    command = COMMANDS[int(rng.choice(3, p=np.asarray(cfg.command_probs)))]
    traj, dense, v0, accel = _ego_path(rng, cfg, command)

    # ego lane centreline: straight lead-in, sampled path, straight run-out
    tail_dir = dense[-1] - dense[-2]
    tail_dir = tail_dir / np.linalg.norm(tail_dir)
    lead = np.stack([np.linspace(-20.0, 0.0, 21)[:-1], np.zeros(20)], axis=1)
    run_out = dense[-1] + np.linspace(1.0, 30.0, 30)[:, None] * tail_dir
    route = _Route(np.concatenate([lead, dense, run_out]))

    n_lanes = int(rng.integers(cfg.lanes[0], cfg.lanes[1] + 1))
    side = -1.0 if cfg.left_hand_traffic else 1.0
    w = cfg.lane_width
    lane_offsets = [side * k * w for k in range(n_lanes)]
    edges = (-side * w / 2, side * (n_lanes - 0.5) * w)
    s0, s1 = route.s[0] + 5.0, route.s[-1]
    polylines = [MapPolyline(MapKind.ROAD_BOUNDARY, route.polyline(s0, s1, e)) for e in edges]
    for k in range(1, n_lanes):
        polylines.append(MapPolyline(MapKind.LANE_DIVIDER, route.polyline(s0, s1, side * (k - 0.5) * w)))
    if rng.uniform() < cfg.crossing_prob:
        s_cross = 20.0 + rng.uniform(8.0, 25.0)
        cx, cy, h = route.at(s_cross)
        nx, ny = -math.sin(h), math.cos(h)
        lo_off, hi_off = sorted(edges)
        pts = tuple((cx + o * nx, cy + o * ny) for o in np.linspace(lo_off - 0.5, hi_off + 0.5, POINTS_PER_POLYLINE))
        polylines.append(MapPolyline(MapKind.CROSSING, pts))

    ego_track = ego_pose_track(traj)
    n_agents = int(rng.integers(cfg.min_agents, cfg.max_agents + 1))
    v_flow = v0 + accel * HORIZON * DT / 2
    agents: list[AgentBox] = []
    motions: list[AgentMotion] = []
    s_max = min(route.s[-1] - 5.0, 20.0 + 2 * cfg.map_extent / 3)
    for aid in range(n_agents):
        for _ in range(25):
            box, motion = _sample_agent(rng, cfg, route, lane_offsets, edges, v_flow, s_max, aid)
            inside = all(abs(v) <= cfg.map_extent for p in ((box.cx, box.cy),) + motion.waypoints for v in p)
            if not inside:
                continue
            if cfg.avoid_collisions and not _clear_of_ego(box, motion, ego_track, cfg.clearance):
                continue
            agents.append(box)
            motions.append(motion)
            break

    ego = EgoState(
        box=AgentBox(0.0, 0.0, EGO_Z, EGO_WIDTH, EGO_HEIGHT, EGO_LENGTH, 0.0, class_id=0, id=-1),
        command=command,
        gt_trajectory=tuple((float(x), float(y)) for x, y in traj),
    )
    # renumber agents densely
    agents = [replace(a, id=i) for i, a in enumerate(agents)]
    motions = [replace(m, agent_id=i) for i, m in enumerate(motions)]
    return VectorScene(ego=ego, agents=tuple(agents), motions=tuple(motions), map=tuple(polylines),
                       scene_id=f"{cfg.split_tag}-{int(seed):06d}", split_tag=cfg.split_tag)


def generate_dataset(n: int, seed: int = 0, config: SceneGenConfig | None = None) -> list[VectorScene]:
    return [generate_scene(seed * 1_000_003 + i, config) for i in range(n)]


def net_heading_change(traj) -> float:
    """Heading of the last segment minus that of the first (from the origin), radians."""
    pts = np.concatenate([[[0.0, 0.0]], np.asarray(traj, dtype=float)])
    d = np.diff(pts, axis=0)
    return geo.wrap_angle(math.atan2(d[-1, 1], d[-1, 0]) - math.atan2(d[0, 1], d[0, 0]))


def kinematic_profile(traj) -> tuple[np.ndarray, np.ndarray]:
    """Per-segment speed and chord-based curvature estimates along a trajectory."""
    pts = np.concatenate([[[0.0, 0.0]], np.asarray(traj, dtype=float)])
    d = np.diff(pts, axis=0)
    lengths = np.linalg.norm(d, axis=1)
    speeds = lengths / DT
    heads = np.arctan2(d[:, 1], d[:, 0])
    turn = np.abs([geo.wrap_angle(b - a) for a, b in zip(heads, heads[1:])])
    curv = turn / np.maximum((lengths[1:] + lengths[:-1]) / 2, 1e-9)
    return speeds, curv


# ---------------------------------------------------------------------------
# dataset files (one JSON object per line)
# ---------------------------------------------------------------------------
class DatasetFormatError(ValueError):
    def __init__(self, line: int, field: str, detail: str = ""):
        self.line, self.field = line, field
        msg = f"line {line}: bad or missing field {field!r}"
        super().__init__(f"{msg} ({detail})" if detail else msg)


def _box_dict(b: AgentBox) -> dict:
    return {"cx": b.cx, "cy": b.cy, "cz": b.cz, "w": b.w, "h": b.h, "l": b.l, "yaw": b.yaw,
            "class_id": b.class_id, "id": b.id}


def scene_to_dict(scene: VectorScene) -> dict:
    return {
        "scene_id": scene.scene_id,
        "split_tag": scene.split_tag,
        "ego": {"box": _box_dict(scene.ego.box), "command": scene.ego.command.value,
                "gt_trajectory": [list(p) for p in scene.ego.gt_trajectory]},
        "agents": [_box_dict(a) for a in scene.agents],
        "motions": [{"agent_id": m.agent_id, "waypoints": [list(p) for p in m.waypoints]} for m in scene.motions],
        "map": [{"kind": p.kind.value, "points": [list(q) for q in p.points]} for p in scene.map],
    }


def _get(d, key, line, path):
    if not isinstance(d, dict) or key not in d:
        raise DatasetFormatError(line, f"{path}{key}")
    return d[key]


def _parse_box(d, line, path) -> AgentBox:
    vals = {k: _get(d, k, line, path) for k in ("cx", "cy", "cz", "w", "h", "l", "yaw", "class_id", "id")}
    try:
        return AgentBox(**{k: float(v) for k, v in vals.items() if k not in ("class_id", "id")},
                        class_id=int(vals["class_id"]), id=int(vals["id"]))
    except (TypeError, ValueError) as exc:
        raise DatasetFormatError(line, path.rstrip("."), str(exc)) from None


def _points(raw, line, path) -> tuple[tuple[float, float], ...]:
    try:
        return tuple((float(p[0]), float(p[1])) for p in raw)
    except (TypeError, ValueError, IndexError) as exc:
        raise DatasetFormatError(line, path, str(exc)) from None


def scene_from_dict(d: dict, line: int = 0) -> VectorScene:
    ego_d = _get(d, "ego", line, "")
    try:
        command = Command(_get(ego_d, "command", line, "ego."))
    except ValueError as exc:
        raise DatasetFormatError(line, "ego.command", str(exc)) from None
    try:
        ego = EgoState(box=_parse_box(_get(ego_d, "box", line, "ego."), line, "ego.box."),
                       command=command,
                       gt_trajectory=_points(_get(ego_d, "gt_trajectory", line, "ego."), line, "ego.gt_trajectory"))
        agents = tuple(_parse_box(a, line, f"agents[{i}].") for i, a in enumerate(_get(d, "agents", line, "")))
        motions = tuple(AgentMotion(int(_get(m, "agent_id", line, f"motions[{i}].")),
                                    _points(_get(m, "waypoints", line, f"motions[{i}]."), line, f"motions[{i}].waypoints"))
                        for i, m in enumerate(_get(d, "motions", line, "")))
        polys = []
        for i, p in enumerate(_get(d, "map", line, "")):
            try:
                kind = MapKind(_get(p, "kind", line, f"map[{i}]."))
            except ValueError as exc:
                raise DatasetFormatError(line, f"map[{i}].kind", str(exc)) from None
            polys.append(MapPolyline(kind, _points(_get(p, "points", line, f"map[{i}]."), line, f"map[{i}].points")))
        return VectorScene(ego=ego, agents=agents, motions=motions, map=tuple(polys),
                           scene_id=str(_get(d, "scene_id", line, "")), split_tag=str(_get(d, "split_tag", line, "")))
    except SceneError as exc:
        raise DatasetFormatError(line, "scene", str(exc)) from None


def dumps_dataset(scenes: Sequence[VectorScene]) -> str:
    return "".join(json.dumps(scene_to_dict(s), ensure_ascii=True) + "\n" for s in scenes)


def save_dataset(scenes: Sequence[VectorScene], path) -> None:
    atomic_write_text(path, dumps_dataset(scenes))


def load_dataset(path) -> list[VectorScene]:
    scenes = []
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            if not raw.strip():
                continue
            try:
                obj = json.loads(raw)
            except json.JSONDecodeError as exc:
                raise DatasetFormatError(lineno, "<json>", str(exc)) from None
            scenes.append(scene_from_dict(obj, lineno))
    return scenes


# ---------------------------------------------------------------------------
# scene encoder (backbone stand-in) and perception probes
# ---------------------------------------------------------------------------
DET_PARAMS = 8          # cx, cy, cz, w, h, l, sin yaw, cos yaw
MOTION_PARAMS = 2 * HORIZON
MAP_PARAMS = 2 * POINTS_PER_POLYLINE


@dataclass(frozen=True)
class EncoderConfig:
    n_det: int = 16
    n_motion: int = 16
    n_map: int = 8
    d_det: int = 32
    d_motion: int = 32
    d_map: int = 32
    class_dim: int = 8
    kind_dim: int = 8

    def __post_init__(self):
        if self.d_det <= self.class_dim or self.d_map <= self.kind_dim:
            raise SceneError("feature dims must exceed the embedding widths they contain")


@dataclass
class SceneArrays:
    """Numeric per-element parameters for a batch of scenes (also the probe targets)."""
    det: np.ndarray
    det_class: np.ndarray
    det_mask: np.ndarray
    motion: np.ndarray
    motion_mask: np.ndarray
    map: np.ndarray
    map_kind: np.ndarray
    map_mask: np.ndarray

    def __len__(self) -> int:
        return self.det.shape[0]

    def take(self, idx) -> "SceneArrays":
        return SceneArrays(**{k: v[idx] for k, v in self.__dict__.items()})


def scene_arrays(scenes: Sequence[VectorScene], cfg: EncoderConfig) -> SceneArrays:
    k = len(scenes)
    det = np.zeros((k, cfg.n_det, DET_PARAMS))
    det_class = np.zeros((k, cfg.n_det), dtype=np.int64)
    det_mask = np.zeros((k, cfg.n_det), dtype=bool)
    motion = np.zeros((k, cfg.n_motion, MOTION_PARAMS))
    motion_mask = np.zeros((k, cfg.n_motion), dtype=bool)
    mp = np.zeros((k, cfg.n_map, MAP_PARAMS))
    map_kind = np.zeros((k, cfg.n_map), dtype=np.int64)
    map_mask = np.zeros((k, cfg.n_map), dtype=bool)
    for b, scene in enumerate(scenes):
        if len(scene.agents) > cfg.n_det:
            raise SceneError(f"scene {scene.scene_id} has {len(scene.agents)} agents; limit N_d={cfg.n_det}")
        if len(scene.motions) > cfg.n_motion:
            raise SceneError(f"scene {scene.scene_id} has {len(scene.motions)} motions; limit N_o={cfg.n_motion}")
        if len(scene.map) > cfg.n_map:
            raise SceneError(f"scene {scene.scene_id} has {len(scene.map)} map elements; limit N_m={cfg.n_map}")
        for i, a in enumerate(scene.agents):
            det[b, i] = [a.cx / POS_SCALE, a.cy / POS_SCALE, a.cz / SIZE_SCALE, a.w / SIZE_SCALE,
                         a.h / SIZE_SCALE, a.l / SIZE_SCALE, math.sin(a.yaw), math.cos(a.yaw)]
            det_class[b, i] = a.class_id
            det_mask[b, i] = True
        by_id = {a.id: a for a in scene.agents}
        for i, m in enumerate(scene.motions):
            origin = by_id[m.agent_id]
            motion[b, i] = (np.asarray(m.waypoints) - [origin.cx, origin.cy]).reshape(-1) / POS_SCALE
            motion_mask[b, i] = True
        for i, p in enumerate(scene.map):
            mp[b, i] = np.asarray(p.points).reshape(-1) / POS_SCALE
            map_kind[b, i] = MAP_KINDS.index(p.kind)
            map_mask[b, i] = True
    return SceneArrays(det, det_class, det_mask, motion, motion_mask, mp, map_kind, map_mask)


@dataclass
class FeatureBundleRaw:
    """Grouped perception features; tensors are (N, d) for one scene or (K, N, d) for a batch."""
    f_det: nn.Tensor
    f_motion: nn.Tensor
    f_map: nn.Tensor
    det_mask: np.ndarray = field(repr=False, default=None)
    motion_mask: np.ndarray = field(repr=False, default=None)
    map_mask: np.ndarray = field(repr=False, default=None)


class SceneEncoderParams(nn.Module):
    """Per-group linear projections plus class/kind embedding tables."""

    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.det_proj = nn.Linear(DET_PARAMS, cfg.d_det - cfg.class_dim, rng)
        self.class_emb = nn.Embedding(len(AGENT_CLASSES), cfg.class_dim, rng)
        self.motion_proj = nn.Linear(MOTION_PARAMS, cfg.d_motion, rng)
        self.map_proj = nn.Linear(MAP_PARAMS, cfg.d_map - cfg.kind_dim, rng)
        self.kind_emb = nn.Embedding(len(MAP_KINDS), cfg.kind_dim, rng)


def encode_arrays(arr: SceneArrays, enc: SceneEncoderParams) -> FeatureBundleRaw:
    det = nn.concat([enc.det_proj(nn.Tensor(arr.det)), enc.class_emb(arr.det_class)], axis=-1)
    det = det * arr.det_mask[..., None].astype(float)
    motion = enc.motion_proj(nn.Tensor(arr.motion)) * arr.motion_mask[..., None].astype(float)
    mp = nn.concat([enc.map_proj(nn.Tensor(arr.map)), enc.kind_emb(arr.map_kind)], axis=-1)
    mp = mp * arr.map_mask[..., None].astype(float)
    return FeatureBundleRaw(det, motion, mp, arr.det_mask, arr.motion_mask, arr.map_mask)


def encode_scene(scene: VectorScene, enc: SceneEncoderParams) -> FeatureBundleRaw:
    """Encode one scene into (N_d, d_d), (N_o, d_o), (N_m, d_m) feature matrices."""
    batch = encode_arrays(scene_arrays([scene], enc.cfg), enc)
    return FeatureBundleRaw(batch.f_det[0], batch.f_motion[0], batch.f_map[0],
                            batch.det_mask[0], batch.motion_mask[0], batch.map_mask[0])


class ProbeParams(nn.Module):
    """Linear read-outs that reconstruct element parameters from raw features."""

    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator):
        self.det = nn.Linear(cfg.d_det, DET_PARAMS, rng)
        self.motion = nn.Linear(cfg.d_motion, MOTION_PARAMS, rng)
        self.map = nn.Linear(cfg.d_map, MAP_PARAMS, rng)


def perception_loss_arrays(bundle: FeatureBundleRaw, arr: SceneArrays, probe: ProbeParams) -> nn.Tensor:
    groups = ((bundle.f_det, probe.det, arr.det, arr.det_mask),
              (bundle.f_motion, probe.motion, arr.motion, arr.motion_mask),
              (bundle.f_map, probe.map, arr.map, arr.map_mask))
    total, count = None, 0
    for feats, head, target, mask in groups:
        if feats.shape[-1] != head.weight.shape[0]:
            raise ValueError(f"probe input width {head.weight.shape[0]} != feature width {feats.shape[-1]}")
        if target.shape[:-1] != feats.shape[:-1] or head.weight.shape[1] != target.shape[-1]:
            raise ValueError(f"probe/target shape mismatch: features {feats.shape}, targets {target.shape}")
        m = mask[..., None].astype(float)
        diff = (head(feats) - target) * m
        sq = (diff * diff).sum()
        total = sq if total is None else total + sq
        count += int(mask.sum()) * target.shape[-1]
    if count == 0:
        return total * 0.0
    return total * (1.0 / count)


def perception_loss(bundle: FeatureBundleRaw, scene: VectorScene | Sequence[VectorScene], probe: ProbeParams,
                    cfg: EncoderConfig | None = None) -> nn.Tensor:
    """Mean squared reconstruction error of element parameters over present rows."""
    scenes = [scene] if isinstance(scene, VectorScene) else list(scene)
    if cfg is None:
        cfg = EncoderConfig(n_det=bundle.f_det.shape[-2], n_motion=bundle.f_motion.shape[-2],
                            n_map=bundle.f_map.shape[-2], d_det=bundle.f_det.shape[-1],
                            d_motion=bundle.f_motion.shape[-1], d_map=bundle.f_map.shape[-1],
                            class_dim=0, kind_dim=0)
    arr = scene_arrays(scenes, cfg)
    if bundle.f_det.ndim == 2:
        arr = arr.take(0)
    return perception_loss_arrays(bundle, arr, probe)
