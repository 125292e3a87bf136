"""Synthetic driving-scene generation.

Maps are built from straight, arc, and intersection lane groups; agents
follow lane-aligned kinematic templates (constant speed, lane change, or
turn) with small process noise, and ground-truth futures are the
continuation of the same template.  Everything is derived from a single
integer seed, so repeated calls are byte-identical.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, asdict

import numpy as np

from .errors import ConfigurationError
from .scene import (
    AgentTrack,
    MapPolyline,
    Scene,
    kinematics_from_positions,
    wrap_angle,
)

MAP_STYLES = ("straight", "arc", "intersection", "mixed")

LANE_SPACING = 3.5


@dataclass
class SceneConfig:
    n_agents: int = 8
    n_polylines: int = 16
    t_past: int = 10
    t_future: int = 30
    n_points: int = 20
    map_style: str = "mixed"
    dt: float = 0.1
    process_noise: float = 0.05

    def validate(self):
        if self.t_past < 2:
            raise ConfigurationError(f"t_past must be >= 2, got {self.t_past}")
        if self.t_future < 1:
            raise ConfigurationError(f"t_future must be >= 1, got {self.t_future}")
        if self.n_agents < 1 or self.n_polylines < 1 or self.n_points < 2:
            raise ConfigurationError("scene extents must be positive")
        if self.map_style not in MAP_STYLES:
            raise ConfigurationError(
                f"map_style must be one of {MAP_STYLES}, got {self.map_style!r}"
            )
        if self.dt <= 0:
            raise ConfigurationError(f"dt must be positive, got {self.dt}")
        if self.process_noise < 0:
            raise ConfigurationError("process_noise must be >= 0")
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SceneConfig":
        return cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})


class _Path:
    """A densely sampled centerline with arc-length lookup."""

    def __init__(self, points: np.ndarray, kind: str):
        self.points = np.asarray(points, dtype=np.float64)
        seg = np.linalg.norm(np.diff(self.points, axis=0), axis=1)
        self.cum = np.concatenate([[0.0], np.cumsum(seg)])
        self.length = float(self.cum[-1])
        self.kind = kind  # "lane", "boundary", "crosswalk", "connector"
        self.neighbors: list[tuple[int, float]] = []  # (path index, signed lateral offset)

    def pose_at(self, s: float) -> tuple[np.ndarray, np.ndarray]:
        s = min(max(s, 0.0), self.length)
        i = int(np.searchsorted(self.cum, s, side="right")) - 1
        i = min(max(i, 0), len(self.points) - 2)
        seg_len = self.cum[i + 1] - self.cum[i]
        frac = 0.0 if seg_len <= 0 else (s - self.cum[i]) / seg_len
        pos = self.points[i] * (1.0 - frac) + self.points[i + 1] * frac
        tangent = self.points[i + 1] - self.points[i]
        norm = np.linalg.norm(tangent)
        tangent = tangent / norm if norm > 0 else np.array([1.0, 0.0])
        return pos, tangent


def _line(start, heading, length, step=0.5) -> np.ndarray:
    n = max(2, int(round(length / step)) + 1)
    s = np.linspace(0.0, length, n)
    d = np.array([math.cos(heading), math.sin(heading)])
    return np.asarray(start, dtype=np.float64) + s[:, None] * d[None, :]


def _arc(center, radius, theta0, theta1, step=0.5) -> np.ndarray:
    span = abs(theta1 - theta0) * radius
    n = max(2, int(round(span / step)) + 1)
    th = np.linspace(theta0, theta1, n)
    return np.asarray(center, dtype=np.float64) + radius * np.stack(
        [np.cos(th), np.sin(th)], axis=1
    )


def _build_straight(rng) -> list[_Path]:
    heading = rng.uniform(-math.pi, math.pi)
    n_lanes = int(rng.integers(2, 4))
    length = 160.0
    d = np.array([math.cos(heading), math.sin(heading)])
    normal = np.array([-d[1], d[0]])
    origin = -0.5 * length * d
    paths = []
    for i in range(n_lanes):
        start = origin + (i - (n_lanes - 1) / 2.0) * LANE_SPACING * normal
        paths.append(_Path(_line(start, heading, length), "lane"))
    for i, p in enumerate(paths):
        if i > 0:
            p.neighbors.append((i - 1, -LANE_SPACING))
        if i + 1 < n_lanes:
            p.neighbors.append((i + 1, LANE_SPACING))
    # boundaries at the outer edges of the lane group
    lo = -((n_lanes - 1) / 2.0 + 0.5) * LANE_SPACING
    hi = ((n_lanes - 1) / 2.0 + 0.5) * LANE_SPACING
    for lat in (lo, hi):
        paths.append(_Path(_line(origin + lat * normal, heading, length), "boundary"))
    # one crosswalk across the lanes near a random station
    station = rng.uniform(0.3, 0.7) * length
    cw_center = origin + station * d
    cw_len = (n_lanes + 1) * LANE_SPACING
    cw_start = cw_center - 0.5 * cw_len * normal
    cw_heading = math.atan2(normal[1], normal[0])
    paths.append(_Path(_line(cw_start, cw_heading, cw_len), "crosswalk"))
    return paths


def _build_arc(rng) -> list[_Path]:
    base_r = rng.uniform(28.0, 55.0)
    n_lanes = int(rng.integers(2, 4))
    center = np.array([0.0, -base_r])
    paths = []
    lane_radii = [base_r + i * LANE_SPACING for i in range(n_lanes)]
    for r in lane_radii:
        span = min(150.0 / r, 2.6)
        th0, th1 = math.pi / 2 - span / 2, math.pi / 2 + span / 2
        paths.append(_Path(_arc(center, r, th0, th1), "lane"))
    for i, p in enumerate(paths):
        # +90-degree normals point toward the arc center, so the neighbor at
        # a larger radius sits at negative lateral offset
        if i > 0:
            p.neighbors.append((i - 1, LANE_SPACING))
        if i + 1 < n_lanes:
            p.neighbors.append((i + 1, -LANE_SPACING))
    for r in (base_r - 0.5 * LANE_SPACING, base_r + (n_lanes - 0.5) * LANE_SPACING):
        span = min(150.0 / r, 2.6)
        th0, th1 = math.pi / 2 - span / 2, math.pi / 2 + span / 2
        paths.append(_Path(_arc(center, r, th0, th1), "boundary"))
    return paths


def _build_intersection(rng) -> list[_Path]:
    half = 80.0
    off = 0.5 * LANE_SPACING
    paths = []
    # four one-way lanes crossing at the origin
    paths.append(_Path(_line((-half, -off), 0.0, 2 * half), "lane"))  # eastbound
    paths.append(_Path(_line((half, off), math.pi, 2 * half), "lane"))  # westbound
    paths.append(_Path(_line((off, -half), math.pi / 2, 2 * half), "lane"))  # northbound
    paths.append(_Path(_line((-off, half), -math.pi / 2, 2 * half), "lane"))  # southbound
    # turn connector: eastbound onto northbound via a quarter arc
    approach = _line((-half, -off), 0.0, half - 6.0)
    r = 6.0 + off
    arc = _arc((-6.0, 6.0), r, -math.pi / 2, 0.0)
    exit_leg = _line((off, 6.0), math.pi / 2, half - 6.0)
    paths.append(_Path(np.concatenate([approach, arc[1:], exit_leg[1:]]), "connector"))
    # turn connector: northbound onto westbound
    approach = _line((off, -half), math.pi / 2, half - 6.0)
    arc = _arc((6.0, 6.0), r, math.pi, math.pi / 2)
    exit_leg = _line((6.0, off), math.pi, half - 6.0)
    paths.append(_Path(np.concatenate([approach, arc[1:], exit_leg[1:]]), "connector"))
    # road-edge boundaries
    for lat in (-LANE_SPACING, LANE_SPACING):
        paths.append(_Path(_line((-half, lat), 0.0, 2 * half), "boundary"))
        paths.append(_Path(_line((lat, -half), math.pi / 2, 2 * half), "boundary"))
    # crosswalks around the junction box
    for x in (-10.0, 10.0):
        paths.append(_Path(_line((x, -7.0), math.pi / 2, 14.0), "crosswalk"))
    for y in (-10.0, 10.0):
        paths.append(_Path(_line((-7.0, y), 0.0, 14.0), "crosswalk"))
    return paths


_BUILDERS = {
    "straight": _build_straight,
    "arc": _build_arc,
    "intersection": _build_intersection,
}

_SPEED_RANGES = {0: (5.0, 12.0), 1: (0.7, 1.5), 2: (2.5, 6.0)}
_SIZES = {0: (4.6, 1.9), 1: (0.8, 0.8), 2: (1.8, 0.6)}
_WAYPOINT_BY_KIND = {"lane": 0, "connector": 0, "boundary": 1, "crosswalk": 2}


def _smoothstep(u: np.ndarray) -> np.ndarray:
    u = np.clip(u, 0.0, 1.0)
    return u * u * (3.0 - 2.0 * u)


def generate_scene(seed: int, config: SceneConfig) -> Scene:
    """One fully-valid synthetic scene, deterministic in (seed, config)."""
    config.validate()
    rng = np.random.default_rng(seed)
    style = config.map_style
    if style == "mixed":
        style = str(rng.choice(["straight", "arc", "intersection"]))
    paths = _BUILDERS[style](rng)

    # chunk the map first so agents can be confined to covered extents
    polylines, path_chunks, covered = _chunk_paths(paths, config)

    t_total = config.t_past + config.t_future
    min_len = 6.0
    lanes = [
        i for i, p in enumerate(paths)
        if p.kind in ("lane", "connector") and covered.get(i, 0.0) >= min_len
    ]
    walkable = [
        i for i, p in enumerate(paths)
        if p.kind in ("crosswalk", "boundary") and covered.get(i, 0.0) >= min_len
    ]
    if not lanes:  # degenerate polyline budget: take the best-covered path
        lanes = [max(covered, key=covered.get)]

    agents = []
    agent_path_ids: list[list[int]] = []
    templates = []
    speeds = []
    for _ in range(config.n_agents):
        agent_type = int(rng.choice([0, 1, 2], p=[0.7, 0.15, 0.15]))
        if agent_type == 1 and walkable:
            pid = int(rng.choice(walkable))
        else:
            pid = int(rng.choice(lanes))
        path = paths[pid]
        usable = covered[pid]
        lo, hi = _SPEED_RANGES[agent_type]
        speed = float(rng.uniform(lo, hi))
        travel = speed * config.dt * (t_total - 1)
        if travel > usable - 4.0:
            speed = max(0.3, (usable - 4.0) / (config.dt * (t_total - 1)))
            travel = speed * config.dt * (t_total - 1)
        s0 = float(rng.uniform(2.0, max(2.0 + 1e-6, usable - travel - 2.0)))

        template = "constant"
        lateral_target = 0.0
        used_paths = [pid]
        fully_covered = [
            (nb, lat) for nb, lat in path.neighbors
            if covered.get(nb, 0.0) >= usable - 1e-9
        ]
        if path.kind == "lane" and fully_covered and agent_type != 1 and rng.uniform() < 0.35:
            template = "lane_change"
            nb, lateral_target = fully_covered[int(rng.integers(len(fully_covered)))]
            used_paths.append(nb)
        elif path.kind == "connector":
            template = "turn"

        base_offset = float(rng.uniform(-0.4, 0.4))
        positions = np.zeros((t_total, 2))
        headings = np.zeros(t_total)
        for t in range(t_total):
            s = s0 + speed * config.dt * t
            pos, tangent = path.pose_at(s)
            normal = np.array([-tangent[1], tangent[0]])
            offset = base_offset
            if template == "lane_change":
                u = (t - t_total * 0.25) / (t_total * 0.5)
                offset = base_offset + lateral_target * float(_smoothstep(np.asarray(u)))
            positions[t] = pos + offset * normal
            headings[t] = math.atan2(tangent[1], tangent[0])
        if config.process_noise > 0:
            positions += rng.normal(0.0, config.process_noise, size=positions.shape)
            headings += rng.normal(0.0, config.process_noise * 0.4, size=headings.shape)
        headings = wrap_angle(headings)
        # kinematics from the observation window only, matching how the
        # noise model re-derives them after perturbation
        vel, acc = kinematics_from_positions(
            positions[: config.t_past], np.ones(config.t_past), config.dt
        )

        size = np.asarray(_SIZES[agent_type], dtype=np.float64) * rng.uniform(0.9, 1.1)
        agents.append(
            AgentTrack(
                positions=positions[: config.t_past].copy(),
                headings=headings[: config.t_past].copy(),
                velocities=vel,
                accelerations=acc,
                agent_type=agent_type,
                size=size,
                valid=np.ones(config.t_past, dtype=np.int64),
                future_positions=positions[config.t_past :].copy(),
                future_valid=np.ones(config.t_future, dtype=np.int64),
            )
        )
        agent_path_ids.append(used_paths)
        templates.append(template)
        speeds.append(speed)

    meta = {
        "map_style": style,
        "templates": templates,
        "speeds": speeds,
        "agent_paths": [
            sorted({idx for pid in ids for idx in path_chunks.get(pid, [])})
            for ids in agent_path_ids
        ],
        "lane_spacing": LANE_SPACING,
    }
    target_index = int(rng.integers(config.n_agents))
    return Scene(
        agents=agents,
        polylines=polylines,
        target_index=target_index,
        timestep_dt=config.dt,
        meta=meta,
    )


def _chunk_paths(paths, config: SceneConfig):
    """Sample paths into fixed-size polylines under the configured cap.

    Lanes and connectors are chunked first so the drivable network survives
    small polyline budgets.  Returns the polylines, a path -> chunk-indices
    map, and the covered arc length per path (chunks are consecutive from
    s=0, so coverage is a prefix of each path).
    """
    total_len = sum(p.length for p in paths)
    ds = total_len / max(1, config.n_polylines * (config.n_points - 1))
    ds = min(3.0, max(0.25, ds))

    priority = {"lane": 0, "connector": 0, "boundary": 1, "crosswalk": 2}
    order = sorted(range(len(paths)), key=lambda i: (priority[paths[i].kind], i))

    polylines: list[MapPolyline] = []
    path_chunks: dict[int, list[int]] = {}
    covered: dict[int, float] = {}
    for pid in order:
        path = paths[pid]
        covered[pid] = 0.0
        n_samples = max(2, int(math.floor(path.length / ds)) + 1)
        stations = np.linspace(0.0, path.length, n_samples)
        pts = np.zeros((n_samples, 2))
        dirs = np.zeros((n_samples, 2))
        for si, s in enumerate(stations):
            pts[si], dirs[si] = path.pose_at(float(s))
        wtype = _WAYPOINT_BY_KIND[path.kind]
        for start in range(0, n_samples, config.n_points):
            if len(polylines) >= config.n_polylines:
                break
            chunk_pts = pts[start : start + config.n_points]
            chunk_dirs = dirs[start : start + config.n_points]
            if len(chunk_pts) < 2:
                break
            n_valid = len(chunk_pts)
            full_pts = np.zeros((config.n_points, 2))
            full_dirs = np.zeros((config.n_points, 2))
            full_valid = np.zeros(config.n_points, dtype=np.int64)
            full_pts[:n_valid] = chunk_pts
            full_dirs[:n_valid] = chunk_dirs
            full_valid[:n_valid] = 1
            path_chunks.setdefault(pid, []).append(len(polylines))
            covered[pid] = float(stations[start + n_valid - 1])
            polylines.append(
                MapPolyline(
                    points=full_pts,
                    directions=full_dirs,
                    waypoint_type=wtype,
                    point_valid=full_valid,
                )
            )
    return polylines, path_chunks, covered


def generate_dataset(seed: int, config: SceneConfig, n_scenes: int) -> list[Scene]:
    """Independent scenes with per-scene seeds ``seed + index``."""
    return [generate_scene(seed + i, config) for i in range(n_scenes)]
