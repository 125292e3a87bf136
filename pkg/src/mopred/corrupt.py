"""History corruption: masking strategies and observation noise.

Masking reproduces the imperfection taxonomy of real perception stacks:
late first detection (prefix drop), occlusion (contiguous gap), random
dropouts, and a mixture of the three.  Masked timesteps are invalidated
and their feature rows zeroed; the target agent's most recent valid
timestep is never masked so the agent-centric frame stays defined.
"""

from __future__ import annotations

import numpy as np

from .errors import ConfigurationError
from .scene import Scene, ValidityMask, kinematics_from_positions, validity_matrix, wrap_angle

MASK_STRATEGIES = ("random_timesteps", "prefix_drop", "contiguous_gap", "mixed")


def _zero_masked(track, masked: np.ndarray, dt: float):
    track.valid = np.where(masked, 0, track.valid).astype(np.int64)
    gone = track.valid <= 0
    track.positions[gone] = 0.0
    track.headings[gone] = 0.0
    # a tracker derives kinematics by differencing detections, so the
    # surviving steps' velocities/accelerations are re-derived from the
    # remaining positions (an isolated detection carries none)
    vel, acc = kinematics_from_positions(track.positions, track.valid, dt)
    track.velocities = vel
    track.accelerations = acc


def _draw_count(rng, ratio: float, t_p: int) -> int:
    """Integer count with expectation ratio * t_p, capped at t_p - 1."""
    n = int(np.floor(ratio * t_p + rng.uniform()))
    return min(n, t_p - 1)


def apply_mask(scene: Scene, strategy: str, ratio: float, seed: int) -> tuple[Scene, ValidityMask]:
    """Return a corrupted copy of the scene plus the resulting validity mask."""
    if not 0.0 <= ratio < 1.0:
        raise ConfigurationError(f"mask ratio must be in [0, 1), got {ratio}")
    if strategy not in MASK_STRATEGIES:
        raise ConfigurationError(
            f"mask strategy must be one of {MASK_STRATEGIES}, got {strategy!r}"
        )
    out = scene.copy()
    if ratio == 0.0:
        return out, ValidityMask(flags=validity_matrix(out).astype(np.int64))
    rng = np.random.default_rng(seed)
    t_p = out.t_past
    for i, track in enumerate(out.agents):
        is_target = i == out.target_index
        chosen = strategy
        if strategy == "mixed":
            chosen = str(rng.choice(MASK_STRATEGIES[:3]))
        masked = np.zeros(t_p, dtype=bool)
        if chosen == "random_timesteps":
            masked = rng.uniform(size=t_p) < ratio
        elif chosen == "prefix_drop":
            masked[: _draw_count(rng, ratio, t_p)] = True
        elif chosen == "contiguous_gap":
            gap = _draw_count(rng, ratio, t_p)
            if gap > 0:
                protected = track.latest_valid_index() if is_target else None
                hi = t_p - gap
                if protected is not None and protected >= t_p - gap:
                    hi = protected - gap + 1
                start = int(rng.integers(0, max(1, hi)))
                masked[start : start + gap] = True
        if is_target:
            latest = track.latest_valid_index()
            if latest is not None:
                masked[latest] = False
        _zero_masked(track, masked, out.timestep_dt)
    return out, ValidityMask(flags=validity_matrix(out).astype(np.int64))


def add_noise(scene: Scene, sigma_pos: float, sigma_heading: float, seed: int) -> Scene:
    """Gaussian perturbation of valid past observations.

    Positions and headings get i.i.d. noise; velocities and accelerations
    are re-derived by finite differencing the perturbed positions, which is
    the same convention the generator uses.  Futures and validity flags are
    untouched.
    """
    if sigma_pos < 0 or sigma_heading < 0:
        raise ConfigurationError("noise sigmas must be >= 0")
    out = scene.copy()
    if sigma_pos == 0 and sigma_heading == 0:
        return out
    rng = np.random.default_rng(seed)
    for track in out.agents:
        ok = track.valid > 0
        if not ok.any():
            continue
        n_valid = int(ok.sum())
        track.positions[ok] += rng.normal(0.0, sigma_pos, size=(n_valid, 2))
        track.headings[ok] = wrap_angle(
            track.headings[ok] + rng.normal(0.0, sigma_heading, size=n_valid)
        )
        vel, acc = kinematics_from_positions(track.positions, track.valid, out.timestep_dt)
        track.velocities = vel
        track.accelerations = acc
    return out
