"""Scene data model: wrapping, features, serialization round trips."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mopred.errors import DataError
from mopred.scene import (
    agent_history_features,
    dumps_scene,
    feature_width_agents,
    load_scenes_jsonl,
    loads_scene,
    map_features,
    save_scenes_jsonl,
    validity_matrix,
    wrap_angle,
)


@settings(max_examples=50, deadline=None)
@given(st.floats(-100.0, 100.0))
def test_wrap_angle_range(theta):
    w = wrap_angle(theta)
    assert -np.pi < w <= np.pi
    # same angle modulo 2*pi
    assert abs(np.remainder(theta - w, 2 * np.pi)) < 1e-9 or abs(
        np.remainder(theta - w, 2 * np.pi) - 2 * np.pi
    ) < 1e-9


def test_wrap_angle_boundary():
    assert wrap_angle(np.pi) == np.pi
    assert wrap_angle(-np.pi) == np.pi
    assert wrap_angle(3 * np.pi) == np.pi


def test_serialization_roundtrip_byte_identical(small_scene):
    line = dumps_scene(small_scene)
    again = dumps_scene(loads_scene(line))
    assert line == again


def test_jsonl_roundtrip(tmp_path, small_scene, tiny_scene):
    path = str(tmp_path / "scenes.jsonl")
    save_scenes_jsonl(path, [small_scene, tiny_scene])
    loaded = load_scenes_jsonl(path)
    assert len(loaded) == 2
    with open(path) as fh:
        original = fh.read()
    save_scenes_jsonl(path, loaded)
    with open(path) as fh:
        assert fh.read() == original


def test_loads_scene_rejects_bad_json():
    with pytest.raises(DataError):
        loads_scene("{not json")


def test_loads_scene_rejects_bad_version(small_scene):
    import json

    obj = json.loads(dumps_scene(small_scene))
    obj["format_version"] = 42
    with pytest.raises(DataError):
        loads_scene(json.dumps(obj))


def test_loads_scene_rejects_missing_fields():
    with pytest.raises(DataError):
        loads_scene('{"format_version": 1, "agents": "oops"}')


def test_feature_width(small_scene):
    feats = agent_history_features(small_scene)
    assert feats.shape == (
        small_scene.n_agents,
        small_scene.t_past,
        feature_width_agents(small_scene.t_past),
    )


def test_agent_features_zeroed_when_invalid(small_scene):
    scene = small_scene.copy()
    scene.agents[0].valid[2] = 0
    feats = agent_history_features(scene)
    assert np.all(feats[0, 2] == 0.0)
    # valid rows carry the valid flag and the timestep one-hot
    assert feats[0, 3, 12] == 1.0  # valid flag column
    assert feats[0, 3, 13 + 3] == 1.0  # one-hot for timestep 3


def test_map_features_shape_and_padding(small_scene):
    feats, valid = map_features(small_scene)
    assert feats.shape[2] == 7
    assert np.all(feats[valid == 0] == 0.0)
    # direction rows unit norm where valid
    norms = np.linalg.norm(feats[:, :, 2:4], axis=2)
    assert np.abs(norms[valid > 0] - 1.0).max() < 1e-6


def test_validity_matrix_matches_tracks(small_scene):
    flags = validity_matrix(small_scene)
    for i, a in enumerate(small_scene.agents):
        assert np.array_equal(flags[i], a.valid.astype(float))
