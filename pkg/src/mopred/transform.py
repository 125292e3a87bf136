"""Agent-centric normalization, relative-movement features, and dataset analysis."""

from __future__ import annotations

import numpy as np

from .errors import InvalidSceneError
from .scene import RelativeMovement, Scene, wrap_angle


def _rotation(angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, -s], [s, c]])


def rigid_transform_scene(scene: Scene, angle: float, translation) -> Scene:
    """Rotate then translate every valid observation (helper for tests and
    for the agent-centric normalization below)."""
    out = scene.copy()
    rot = _rotation(angle)
    shift = np.asarray(translation, dtype=np.float64)
    for track in out.agents:
        ok = track.valid > 0
        track.positions[ok] = track.positions[ok] @ rot.T + shift
        track.headings[ok] = wrap_angle(track.headings[ok] + angle)
        track.velocities[ok] = track.velocities[ok] @ rot.T
        track.accelerations[ok] = track.accelerations[ok] @ rot.T
        fok = track.future_valid > 0
        track.future_positions[fok] = track.future_positions[fok] @ rot.T + shift
    for poly in out.polylines:
        ok = poly.point_valid > 0
        poly.points[ok] = poly.points[ok] @ rot.T + shift
        poly.directions[ok] = poly.directions[ok] @ rot.T
    return out


def to_agent_centric(scene: Scene) -> Scene:
    """Re-express the scene so the target's latest valid pose is the origin
    with heading zero."""
    target = scene.target
    latest = target.latest_valid_index()
    if latest is None:
        raise InvalidSceneError("target agent has no valid past timestep")
    anchor_pos = target.positions[latest].copy()
    anchor_heading = float(target.headings[latest])
    rot = _rotation(-anchor_heading)
    return rigid_transform_scene(scene, -anchor_heading, -(rot @ anchor_pos))


def relative_movements(scene: Scene) -> RelativeMovement:
    """Target position/orientation relative to each polyline's center frame.

    For polyline j with center c_j and mean direction angle theta_j, each
    valid past step t contributes the target position expressed in the
    polyline frame and the wrapped heading difference; invalid steps are
    zero rows.
    """
    target = scene.target
    t_p = scene.t_past
    ok = target.valid > 0
    values = np.zeros((scene.n_polylines, t_p, 3))
    for j, poly in enumerate(scene.polylines):
        center = poly.center()
        direction = poly.mean_direction()
        theta = np.arctan2(direction[1], direction[0])
        rot = _rotation(-theta)
        rel = (target.positions - center) @ rot.T
        values[j, :, :2] = np.where(ok[:, None], rel, 0.0)
        values[j, :, 2] = np.where(ok, wrap_angle(target.headings - theta), 0.0)
    return RelativeMovement(values=values)


def validity_distribution(scenes: list[Scene], bins: int = 10) -> dict[str, np.ndarray]:
    """Histogram of per-agent observed fraction, split by target membership.

    Returns normalized masses per group plus the raw per-agent fractions.
    """
    if not scenes:
        raise InvalidSceneError("validity_distribution needs a nonempty dataset")
    fractions = {"target": [], "non_target": []}
    for scene in scenes:
        for i, track in enumerate(scene.agents):
            frac = float(track.valid.sum()) / track.t_past
            key = "target" if i == scene.target_index else "non_target"
            fractions[key].append(frac)
    result: dict[str, np.ndarray] = {}
    for key, vals in fractions.items():
        hist = np.zeros(bins)
        for f in vals:
            hist[min(int(f * bins), bins - 1)] += 1.0
        if vals:
            hist /= hist.sum()
        result[key] = hist
        result[key + "_fractions"] = np.asarray(vals)
    return result


def validity_histogram_rows(dist: dict[str, np.ndarray], bins: int = 10) -> list[tuple]:
    """CSV rows (bin_low, bin_high, fraction, group)."""
    rows = []
    for group in ("target", "non_target"):
        hist = dist[group]
        for b in range(bins):
            rows.append((b / bins, (b + 1) / bins, float(hist[b]), group))
    return rows
