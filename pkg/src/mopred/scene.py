"""Scene data model, feature assembly, and JSONL serialization.

A scene is one agent-centric prediction instance: agent histories with
per-timestep validity, map polylines, and ground-truth futures.  All
angles are wrapped to (-pi, pi]; features at invalid timesteps are zeroed,
which is what downstream encoders consume directly (history * validity).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError

SCENE_FORMAT_VERSION = 1

AGENT_TYPES = ("vehicle", "pedestrian", "cyclist")
WAYPOINT_TYPES = ("lane_center", "boundary", "crosswalk")


def wrap_angle(theta):
    """Wrap angles into (-pi, pi]."""
    theta = np.asarray(theta, dtype=np.float64)
    wrapped = np.mod(theta + np.pi, 2.0 * np.pi) - np.pi
    wrapped = np.where(wrapped == -np.pi, np.pi, wrapped)
    if wrapped.ndim == 0:
        return float(wrapped)
    return wrapped


def kinematics_from_positions(positions: np.ndarray, valid: np.ndarray, dt: float):
    """Velocities and accelerations by finite differences over valid steps.

    Central differences between the nearest valid neighbours where both
    sides exist, one-sided at the ends, zero where isolated or invalid.
    The generator and the noise model share this routine so re-deriving
    kinematics is idempotent.
    """
    t = len(positions)
    vel = np.zeros((t, 2))
    valid_idx = np.flatnonzero(np.asarray(valid) > 0)
    for pos_in_list, ti in enumerate(valid_idx):
        prev_i = valid_idx[pos_in_list - 1] if pos_in_list > 0 else None
        next_i = valid_idx[pos_in_list + 1] if pos_in_list + 1 < len(valid_idx) else None
        if prev_i is not None and next_i is not None:
            vel[ti] = (positions[next_i] - positions[prev_i]) / ((next_i - prev_i) * dt)
        elif next_i is not None:
            vel[ti] = (positions[next_i] - positions[ti]) / ((next_i - ti) * dt)
        elif prev_i is not None:
            vel[ti] = (positions[ti] - positions[prev_i]) / ((ti - prev_i) * dt)
    acc = np.zeros((t, 2))
    for pos_in_list, ti in enumerate(valid_idx):
        prev_i = valid_idx[pos_in_list - 1] if pos_in_list > 0 else None
        next_i = valid_idx[pos_in_list + 1] if pos_in_list + 1 < len(valid_idx) else None
        if prev_i is not None and next_i is not None:
            acc[ti] = (vel[next_i] - vel[prev_i]) / ((next_i - prev_i) * dt)
        elif next_i is not None:
            acc[ti] = (vel[next_i] - vel[ti]) / ((next_i - ti) * dt)
        elif prev_i is not None:
            acc[ti] = (vel[ti] - vel[prev_i]) / ((ti - prev_i) * dt)
    return vel, acc


@dataclass
class AgentTrack:
    positions: np.ndarray  # (T_p, 2) meters
    headings: np.ndarray  # (T_p,) radians in (-pi, pi]
    velocities: np.ndarray  # (T_p, 2) m/s
    accelerations: np.ndarray  # (T_p, 2) m/s^2
    agent_type: int  # index into AGENT_TYPES
    size: np.ndarray  # (2,) length/width meters
    valid: np.ndarray  # (T_p,) 0/1
    future_positions: np.ndarray  # (T_f, 2)
    future_valid: np.ndarray  # (T_f,)

    @property
    def t_past(self) -> int:
        return len(self.positions)

    @property
    def t_future(self) -> int:
        return len(self.future_positions)

    def latest_valid_index(self) -> int | None:
        idx = np.flatnonzero(self.valid > 0)
        return int(idx[-1]) if len(idx) else None

    def copy(self) -> "AgentTrack":
        return AgentTrack(
            positions=self.positions.copy(),
            headings=self.headings.copy(),
            velocities=self.velocities.copy(),
            accelerations=self.accelerations.copy(),
            agent_type=self.agent_type,
            size=self.size.copy(),
            valid=self.valid.copy(),
            future_positions=self.future_positions.copy(),
            future_valid=self.future_valid.copy(),
        )


@dataclass
class MapPolyline:
    points: np.ndarray  # (N_p, 2)
    directions: np.ndarray  # (N_p, 2) unit tangents (zero rows for padding)
    waypoint_type: int  # index into WAYPOINT_TYPES
    point_valid: np.ndarray  # (N_p,) 0/1, padding rows are 0

    def copy(self) -> "MapPolyline":
        return MapPolyline(
            points=self.points.copy(),
            directions=self.directions.copy(),
            waypoint_type=self.waypoint_type,
            point_valid=self.point_valid.copy(),
        )

    def center(self) -> np.ndarray:
        m = self.point_valid > 0
        return self.points[m].mean(axis=0)

    def mean_direction(self) -> np.ndarray:
        m = self.point_valid > 0
        d = self.directions[m].mean(axis=0)
        norm = np.linalg.norm(d)
        if norm < 1e-9:
            d = self.directions[m][0]
            norm = np.linalg.norm(d)
            if norm < 1e-9:
                return np.array([1.0, 0.0])
        return d / norm


@dataclass
class Scene:
    agents: list[AgentTrack]
    polylines: list[MapPolyline]
    target_index: int
    timestep_dt: float
    meta: dict = field(default_factory=dict)

    @property
    def n_agents(self) -> int:
        return len(self.agents)

    @property
    def n_polylines(self) -> int:
        return len(self.polylines)

    @property
    def t_past(self) -> int:
        return self.agents[0].t_past

    @property
    def t_future(self) -> int:
        return self.agents[0].t_future

    @property
    def target(self) -> AgentTrack:
        return self.agents[self.target_index]

    def copy(self) -> "Scene":
        return Scene(
            agents=[a.copy() for a in self.agents],
            polylines=[p.copy() for p in self.polylines],
            target_index=self.target_index,
            timestep_dt=self.timestep_dt,
            meta=json.loads(json.dumps(self.meta)),
        )


@dataclass
class RelativeMovement:
    """Target-vs-polyline relative positions and orientations over the past."""

    values: np.ndarray  # (N_l, T_p, 3)


@dataclass
class ValidityMask:
    flags: np.ndarray  # (N_a, T_p) 0/1


def validity_matrix(scene: Scene) -> np.ndarray:
    return np.stack([a.valid for a in scene.agents]).astype(np.float64)


def feature_width_agents(t_past: int) -> int:
    # position 2, heading 1, velocity 2, acceleration 2, type 3, size 2,
    # valid 1, timestep one-hot T_p
    return 13 + t_past


FEATURE_WIDTH_MAP = 7  # position 2, direction 2, waypoint type one-hot 3
FEATURE_WIDTH_RELATIVE = 3  # relative position 2, relative orientation 1


def agent_history_features(scene: Scene) -> np.ndarray:
    """Per-agent past features, rows zeroed at invalid timesteps."""
    t_p = scene.t_past
    eye = np.eye(t_p)
    feats = np.zeros((scene.n_agents, t_p, feature_width_agents(t_p)))
    for i, a in enumerate(scene.agents):
        onehot = np.zeros(3)
        onehot[a.agent_type] = 1.0
        rows = np.concatenate(
            [
                a.positions,
                a.headings[:, None],
                a.velocities,
                a.accelerations,
                np.tile(onehot, (t_p, 1)),
                np.tile(a.size, (t_p, 1)),
                np.ones((t_p, 1)),
                eye,
            ],
            axis=1,
        )
        feats[i] = rows * (a.valid[:, None] > 0)
    return feats


def map_features(scene: Scene) -> tuple[np.ndarray, np.ndarray]:
    """Per-point polyline features plus the padding mask."""
    n_p = len(scene.polylines[0].points)
    feats = np.zeros((scene.n_polylines, n_p, FEATURE_WIDTH_MAP))
    valid = np.zeros((scene.n_polylines, n_p))
    for j, poly in enumerate(scene.polylines):
        onehot = np.zeros(3)
        onehot[poly.waypoint_type] = 1.0
        rows = np.concatenate(
            [poly.points, poly.directions, np.tile(onehot, (n_p, 1))], axis=1
        )
        feats[j] = rows * (poly.point_valid[:, None] > 0)
        valid[j] = poly.point_valid > 0
    return feats, valid


# ---------------------------------------------------------------------------
# serialization


def scene_to_obj(scene: Scene) -> dict:
    return {
        "format_version": SCENE_FORMAT_VERSION,
        "timestep_dt": scene.timestep_dt,
        "target_index": scene.target_index,
        "agents": [
            {
                "positions": a.positions.tolist(),
                "headings": a.headings.tolist(),
                "velocities": a.velocities.tolist(),
                "accelerations": a.accelerations.tolist(),
                "agent_type": int(a.agent_type),
                "size": a.size.tolist(),
                "valid": [int(v) for v in a.valid],
                "future_positions": a.future_positions.tolist(),
                "future_valid": [int(v) for v in a.future_valid],
            }
            for a in scene.agents
        ],
        "polylines": [
            {
                "points": p.points.tolist(),
                "directions": p.directions.tolist(),
                "waypoint_type": int(p.waypoint_type),
                "point_valid": [int(v) for v in p.point_valid],
            }
            for p in scene.polylines
        ],
        "meta": scene.meta,
    }


def scene_from_obj(obj: dict) -> Scene:
    version = obj.get("format_version")
    if version != SCENE_FORMAT_VERSION:
        raise DataError(f"unsupported scene format_version {version!r}")
    try:
        agents = [
            AgentTrack(
                positions=np.asarray(a["positions"], dtype=np.float64),
                headings=np.asarray(a["headings"], dtype=np.float64),
                velocities=np.asarray(a["velocities"], dtype=np.float64),
                accelerations=np.asarray(a["accelerations"], dtype=np.float64),
                agent_type=int(a["agent_type"]),
                size=np.asarray(a["size"], dtype=np.float64),
                valid=np.asarray(a["valid"], dtype=np.int64),
                future_positions=np.asarray(a["future_positions"], dtype=np.float64),
                future_valid=np.asarray(a["future_valid"], dtype=np.int64),
            )
            for a in obj["agents"]
        ]
        polylines = [
            MapPolyline(
                points=np.asarray(p["points"], dtype=np.float64),
                directions=np.asarray(p["directions"], dtype=np.float64),
                waypoint_type=int(p["waypoint_type"]),
                point_valid=np.asarray(p["point_valid"], dtype=np.int64),
            )
            for p in obj["polylines"]
        ]
        return Scene(
            agents=agents,
            polylines=polylines,
            target_index=int(obj["target_index"]),
            timestep_dt=float(obj["timestep_dt"]),
            meta=obj.get("meta", {}),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise DataError(f"malformed scene record: {exc}") from exc


def dumps_scene(scene: Scene) -> str:
    """Canonical one-line JSON encoding (stable for byte-identical round trips)."""
    return json.dumps(scene_to_obj(scene), sort_keys=True, separators=(",", ":"))


def loads_scene(line: str) -> Scene:
    try:
        obj = json.loads(line)
    except json.JSONDecodeError as exc:
        raise DataError(f"invalid scene JSON: {exc}") from exc
    return scene_from_obj(obj)


def save_scenes_jsonl(path: str, scenes: list[Scene]):
    with open(path, "w", encoding="utf-8") as fh:
        for scene in scenes:
            fh.write(dumps_scene(scene))
            fh.write("\n")


def load_scenes_jsonl(path: str) -> list[Scene]:
    scenes = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                scenes.append(loads_scene(line))
    return scenes
