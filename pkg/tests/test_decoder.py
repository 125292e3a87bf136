"""Decoder: anchor clustering, layer stack invariants, target assignment, NMS."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mopred.corrupt import apply_mask
from mopred.decoder import (
    AnchorSet,
    PredictionSet,
    assign_targets_distinct,
    init_anchors,
    select_final,
)
from mopred.errors import ConfigurationError
from mopred.generate import SceneConfig, generate_scene
from mopred.model import ModelConfig, MotionPredictor
from mopred.tensor import GradientTape
from mopred.transform import to_agent_centric
from mopred import tensor as T

from oracles import oracle_assign_distinct, oracle_select_final


# k-means anchors -------------------------------------------------------------


def test_anchors_recover_tight_clusters():
    rng = np.random.default_rng(0)
    centers = np.array([[0.0, 0.0], [10.0, 0.0], [0.0, 10.0], [10.0, 10.0]])
    pts = np.concatenate([c + rng.normal(0, 0.02, size=(40, 2)) for c in centers])
    anchors = init_anchors(pts, 4, seed=1)
    for c in centers:
        nearest = np.linalg.norm(anchors.points - c, axis=1).min()
        assert nearest < 0.1


def test_anchors_k1_is_mean():
    rng = np.random.default_rng(1)
    pts = rng.standard_normal((50, 2)) * 3 + [2.0, -1.0]
    anchors = init_anchors(pts, 1, seed=0)
    assert np.allclose(anchors.points[0], pts.mean(axis=0), atol=1e-9)


def test_anchors_deterministic():
    rng = np.random.default_rng(2)
    pts = rng.standard_normal((30, 2))
    a = init_anchors(pts, 5, seed=7)
    b = init_anchors(pts, 5, seed=7)
    assert np.array_equal(a.points, b.points)


def test_anchors_too_few_endpoints():
    with pytest.raises(ConfigurationError):
        init_anchors(np.zeros((3, 2)), 4, seed=0)


# target assignment -------------------------------------------------------------


def test_assign_exact_endpoint_selected():
    endpoints = np.array([[0.0, 0.0], [5.0, 5.0], [9.0, 1.0]])
    conf = np.array([0.2, 0.5, 0.3])
    assert assign_targets_distinct(endpoints, conf, np.array([5.0, 5.0]), 2.0) == 1


def test_assign_duplicate_suppression_tiebreak():
    endpoints = np.array([[1.0, 1.0], [1.0, 1.0]])
    conf = np.array([0.9, 0.1])
    assert assign_targets_distinct(endpoints, conf, np.array([1.0, 1.0]), 2.0) == 0


def test_assign_suppressed_mode_not_selectable():
    # second mode is nearest to GT but within the radius of a stronger one
    endpoints = np.array([[0.0, 0.0], [1.0, 0.0], [10.0, 0.0]])
    conf = np.array([0.8, 0.15, 0.05])
    choice = assign_targets_distinct(endpoints, conf, np.array([1.2, 0.0]), 2.0)
    assert choice == 0


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 100_000))
def test_assign_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    k = int(rng.integers(2, 10))
    endpoints = rng.uniform(-10, 10, size=(k, 2))
    conf = rng.dirichlet(np.ones(k))
    gt = rng.uniform(-10, 10, size=2)
    got = assign_targets_distinct(endpoints, conf, gt, 2.0)
    assert got == oracle_assign_distinct(endpoints, conf, gt, 2.0)


# final selection -----------------------------------------------------------------


def _pset(endpoints, conf, t_f=4):
    k = len(conf)
    traj = np.zeros((k, t_f, 2))
    traj[:, -1, :] = endpoints
    gmm = np.concatenate([traj, np.ones((k, t_f, 2)), np.zeros((k, t_f, 1))], axis=2)
    return PredictionSet(trajectories=traj, gmm_params=gmm, confidences=np.asarray(conf))


def test_select_final_far_apart_top_by_confidence():
    rng = np.random.default_rng(3)
    endpoints = np.arange(16)[:, None] * np.array([[5.0, 0.0]])
    conf = rng.dirichlet(np.ones(16))
    out = select_final(_pset(endpoints, conf), top_k=6, radius=2.0)
    expect = np.argsort(-conf, kind="stable")[:6]
    assert np.allclose(out.endpoints, endpoints[expect])
    assert out.confidences.sum() == pytest.approx(1.0)


def test_select_final_all_identical_backfills():
    endpoints = np.ones((8, 2))
    conf = np.linspace(0.3, 0.05, 8)
    conf = conf / conf.sum()
    out = select_final(_pset(endpoints, conf), top_k=6, radius=2.0)
    assert out.trajectories.shape[0] == 6
    assert out.confidences.sum() == pytest.approx(1.0)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 100_000))
def test_select_final_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    k = int(rng.integers(6, 14))
    endpoints = rng.uniform(-8, 8, size=(k, 2))
    conf = rng.dirichlet(np.ones(k))
    got = select_final(_pset(endpoints, conf), top_k=6, radius=2.0)
    expected_idx = oracle_select_final(endpoints, conf, 6, 2.0)
    assert np.allclose(got.endpoints, endpoints[expected_idx])


def test_select_final_needs_enough_modes():
    with pytest.raises(ConfigurationError):
        select_final(_pset(np.zeros((3, 2)), np.ones(3) / 3), top_k=6)


# decode stack ---------------------------------------------------------------------


@pytest.fixture(scope="module")
def decoded():
    config = SceneConfig(n_agents=3, n_polylines=6, t_past=6, t_future=8, n_points=6)
    scene = to_agent_centric(generate_scene(11, config))
    mconf = ModelConfig(d_model=16, heads=2, k_modes=5, knn=4, t_past=6, t_future=8,
                        motion_hidden=32, dense_hidden=32)
    model = MotionPredictor(mconf)
    anchors = AnchorSet(points=np.random.default_rng(5).uniform(-8, 8, size=(5, 2)))
    model.decoder.set_anchors(anchors)
    out = model.forward_scene(scene)
    return model, scene, out, anchors


def test_decode_emits_six_layer_heads(decoded):
    _, _, out, _ = decoded
    assert len(out.layers) == 6


def test_decode_confidences_sum_to_one_per_layer(decoded):
    _, _, out, _ = decoded
    for layer in out.layers:
        assert layer.confidences_np.sum() == pytest.approx(1.0, abs=1e-6)


def test_decode_evolving_anchor_layer_sharing(decoded):
    _, _, out, anchors = decoded
    centers = out.anchor_centers
    assert np.array_equal(centers[0], anchors.points)
    assert np.array_equal(centers[1], anchors.points)
    assert np.array_equal(centers[2], out.layers[1].endpoints_np)
    assert np.array_equal(centers[3], out.layers[1].endpoints_np)
    assert np.array_equal(centers[4], out.layers[3].endpoints_np)
    assert np.array_equal(centers[5], out.layers[3].endpoints_np)


def test_decode_shapes_match_modes_and_horizon(decoded):
    model, _, out, _ = decoded
    k, t_f = model.config.k_modes, model.config.t_future
    for layer in out.layers:
        assert layer.gmm.shape == (k, t_f, 5)
        assert layer.conf_logits.shape == (k,)
    assert out.dense_future.shape == (3, t_f, 2)


def test_decode_gmm_parameter_ranges(decoded):
    _, _, out, _ = decoded
    for layer in out.layers:
        params = layer.gmm.data
        assert np.all(params[:, :, 2] > 0) and np.all(params[:, :, 3] > 0)
        assert np.all(np.abs(params[:, :, 4]) < 1.0)


def test_decode_trajectories_equal_mu(decoded):
    _, _, out, _ = decoded
    pset = out.layers[-1].to_prediction_set()
    assert np.array_equal(pset.trajectories, pset.gmm_params[:, :, :2])


def test_gradient_flows_from_final_gmm_loss_to_msl():
    config = SceneConfig(n_agents=3, n_polylines=6, t_past=6, t_future=6, n_points=6)
    scene = to_agent_centric(generate_scene(12, config))
    masked, _ = apply_mask(scene, "mixed", 0.4, 1)
    mconf = ModelConfig(d_model=16, heads=2, k_modes=4, knn=4, t_past=6, t_future=6,
                        motion_hidden=16, dense_hidden=16)
    model = MotionPredictor(mconf)
    model.decoder.set_anchors(AnchorSet(np.random.default_rng(0).uniform(-5, 5, (4, 2))))
    with GradientTape() as tape:
        out = model.forward_scene(masked)
        nll = T.gmm_nll(out.layers[-1].gmm[0], scene.target.future_positions)
        loss = T.tensor_sum(nll)
    tape.backward(loss)
    grad_norm = 0.0
    for name, p in model.named_parameters():
        if name.startswith("encoder.msl.") and p.grad is not None:
            grad_norm += float((p.grad ** 2).sum())
    assert grad_norm > 0
