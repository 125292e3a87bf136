"""Losses, schedule, and the training loop."""

import math
import os

import numpy as np
import pytest

from mopred import tensor as T
from mopred.corrupt import apply_mask
from mopred.decoder import AnchorSet
from mopred.errors import ConfigurationError, DimensionError
from mopred.generate import SceneConfig, generate_dataset
from mopred.model import ModelConfig, MotionPredictor, load_model
from mopred.tensor import Tensor
from mopred.training import (
    LossBreakdown,
    TrainConfig,
    anchors_from_scenes,
    evaluate_minade,
    lr_at,
    mtr_loss,
    recovery_loss,
    scene_loss,
    train,
)
from mopred.transform import to_agent_centric


# recovery loss ---------------------------------------------------------------


def test_recovery_loss_identity_zero(rng):
    gt = rng.standard_normal((3, 5, 4))
    assert recovery_loss(Tensor(gt.copy()), gt).item() == 0.0


def test_recovery_loss_constant_offset(rng):
    gt = rng.standard_normal((2, 4, 4))
    assert recovery_loss(Tensor(gt + 1.0), gt).item() == pytest.approx(1.0)


def test_recovery_loss_scalar_loop_oracle(rng):
    pred = rng.standard_normal((2, 3, 4))
    gt = rng.standard_normal((2, 3, 4))
    expected = 0.0
    for i in range(2):
        for t in range(3):
            for c in range(4):
                expected += abs(pred[i, t, c] - gt[i, t, c])
    expected /= 24.0
    assert recovery_loss(Tensor(pred), gt).item() == pytest.approx(expected, abs=1e-12)


def test_recovery_loss_shape_mismatch(rng):
    with pytest.raises(DimensionError):
        recovery_loss(Tensor(np.zeros((2, 3, 4))), np.zeros((2, 3, 2)))


# mtr loss ---------------------------------------------------------------------


class _FakeLayer:
    """Minimal stand-in for a decoder LayerOutput."""

    def __init__(self, gmm, conf_logits):
        self.gmm = gmm
        self.conf_logits = conf_logits

    @property
    def endpoints_np(self):
        return self.gmm.data[:, -1, :2]

    @property
    def confidences_np(self):
        logits = self.conf_logits.data
        e = np.exp(logits - logits.max())
        return e / e.sum()


def _fake_layer(gt, conf_logits, offset=0.0):
    t_f = len(gt)
    k = len(conf_logits)
    mu = np.tile(gt[None], (k, 1, 1))
    mu += offset
    # spread non-positive modes away so suppression cannot collapse them
    for mode in range(1, k):
        mu[mode] += mode * 10.0
    sigma = np.ones((k, t_f, 2))
    rho = np.zeros((k, t_f, 1))
    return _FakeLayer(Tensor(np.concatenate([mu, sigma, rho], axis=2)), Tensor(conf_logits))


def test_mtr_loss_perfect_mode_gives_log2pi_per_step():
    rng = np.random.default_rng(0)
    gt = rng.standard_normal((5, 2))
    layer = _fake_layer(gt, np.array([50.0, 0.0, 0.0]))
    dense = Tensor(np.zeros((2, 5, 2)))
    futures = np.zeros((2, 5, 2))
    valid = np.ones((2, 5))
    gmm, cls, dense_loss = mtr_loss(
        [layer], dense, gt, np.ones(5), futures, valid, nms_radius=2.0
    )
    assert gmm.item() == pytest.approx(5 * math.log(2 * math.pi), abs=1e-9)
    assert cls.item() == pytest.approx(0.0, abs=1e-12)
    assert dense_loss.item() == pytest.approx(0.0, abs=1e-12)


def test_mtr_loss_dense_future_identity():
    rng = np.random.default_rng(1)
    gt = rng.standard_normal((4, 2))
    futures = rng.standard_normal((3, 4, 2))
    layer = _fake_layer(gt, np.array([10.0, 0.0]))
    gmm, cls, dense_loss = mtr_loss(
        [layer], Tensor(futures.copy()), gt, np.ones(4), futures, np.ones((3, 4)), 2.0
    )
    assert dense_loss.item() == 0.0


def test_mtr_loss_respects_future_validity():
    rng = np.random.default_rng(2)
    gt = rng.standard_normal((4, 2))
    valid = np.array([1, 1, 0, 0])
    layer = _fake_layer(gt, np.array([10.0, 0.0]))
    gmm, _, _ = mtr_loss(
        [layer], Tensor(np.zeros((1, 4, 2))), gt, valid,
        np.zeros((1, 4, 2)), np.ones((1, 4)), 2.0,
    )
    assert gmm.item() == pytest.approx(2 * math.log(2 * math.pi), abs=1e-9)


# lr schedule -------------------------------------------------------------------


def test_lr_schedule_paper_values():
    config = TrainConfig()
    assert lr_at(0, config) == pytest.approx(1.0e-4)
    assert lr_at(19, config) == pytest.approx(1.0e-4)
    assert lr_at(20, config) == pytest.approx(5.0e-5)
    assert lr_at(21, config) == pytest.approx(5.0e-5)
    assert lr_at(22, config) == pytest.approx(2.5e-5)
    assert lr_at(26, config) == pytest.approx(6.25e-6)
    assert lr_at(31, config) == pytest.approx(6.25e-6)
    assert lr_at(39, config) == pytest.approx(6.25e-6)


def test_lr_schedule_monotone_non_increasing():
    config = TrainConfig()
    values = [lr_at(e, config) for e in range(40)]
    assert all(b <= a for a, b in zip(values, values[1:]))


def test_lr_schedule_rejects_negative_epoch():
    with pytest.raises(ConfigurationError):
        lr_at(-1, TrainConfig())


def test_train_config_validation():
    with pytest.raises(ConfigurationError):
        TrainConfig(mask_ratio=1.0).validate()
    with pytest.raises(ConfigurationError):
        TrainConfig(lr_init=0.0).validate()
    with pytest.raises(ConfigurationError):
        TrainConfig(finetune_lr=1.0).validate()


# loss breakdown ------------------------------------------------------------------


def _tiny_setup(n_scenes=6, use_recovery=True):
    config = SceneConfig(n_agents=3, n_polylines=6, t_past=6, t_future=6, n_points=6)
    scenes = generate_dataset(0, config, n_scenes)
    mconf = ModelConfig(d_model=16, heads=2, k_modes=4, knn=4, t_past=6, t_future=6,
                        motion_hidden=16, dense_hidden=16, top_k=4,
                        use_recovery=use_recovery)
    model = MotionPredictor(mconf)
    model.decoder.set_anchors(anchors_from_scenes(scenes, 4, 0))
    return scenes, model


def test_loss_breakdown_sum_identity():
    scenes, model = _tiny_setup()
    tconf = TrainConfig(mask_ratio=0.5, seed=1)
    clean = to_agent_centric(scenes[0])
    masked, vmask = apply_mask(clean, "mixed", 0.5, 3)
    total, parts = scene_loss(model, clean, masked, tconf, mask_flags=vmask.flags)
    recomposed = sum(p.item() for p in parts.values())
    assert total.item() == pytest.approx(recomposed, abs=1e-9)
    for part in parts.values():
        assert np.isfinite(part.item())


def test_loss_mask_ratio_zero_still_supervises_recovery():
    scenes, model = _tiny_setup()
    tconf = TrainConfig(mask_ratio=0.0, seed=1)
    clean = to_agent_centric(scenes[0])
    total, parts = scene_loss(model, clean, clean, tconf, mask_flags=None)
    assert parts["recovery"].item() > 0.0


def test_no_recovery_model_contributes_zero_recovery_loss():
    scenes, model = _tiny_setup(use_recovery=False)
    tconf = TrainConfig(mask_ratio=0.5, seed=1)
    clean = to_agent_centric(scenes[0])
    masked, vmask = apply_mask(clean, "mixed", 0.5, 3)
    total, parts = scene_loss(model, clean, masked, tconf, mask_flags=vmask.flags)
    assert parts["recovery"].item() == 0.0


# training loop --------------------------------------------------------------------


def test_short_training_reduces_recovery_loss(tmp_path):
    scenes, model = _tiny_setup(n_scenes=8)
    tconf = TrainConfig(
        mask_ratio=0.6, seed=3, batch_size=4, epochs=12, finetune_epochs=0,
        lr_init=2e-3, finetune_lr=1e-5, lr_decay_start=12, weight_decay=0.0,
    )
    result = train(scenes[:6], scenes[6:], model, tconf, str(tmp_path / "run"), log=None)
    first = result.history[0]["recovery"]
    last = result.history[-1]["recovery"]
    assert last < first
    assert os.path.exists(result.checkpoint_path)
    assert os.path.exists(result.metrics_path)
    with open(result.metrics_path) as fh:
        lines = fh.read().strip().splitlines()
    assert lines[0].startswith("epoch,lr,total")
    assert len(lines) == 1 + 12  # header + one row per epoch


def test_checkpoint_roundtrip_bitwise_forward(tmp_path):
    scenes, model = _tiny_setup()
    tconf = TrainConfig(mask_ratio=0.5, seed=4, batch_size=4, epochs=2, finetune_epochs=0,
                        lr_decay_start=2)
    result = train(scenes[:4], scenes[4:], model, tconf, str(tmp_path / "run"), log=None)
    loaded, header, _ = load_model(result.checkpoint_path)
    scene = to_agent_centric(scenes[0])
    a = model.predict(scene)
    b = loaded.predict(scene)
    assert np.array_equal(a.trajectories, b.trajectories)
    assert np.array_equal(a.confidences, b.confidences)
    assert header["epoch"] == 1


def test_resume_reproduces_uninterrupted_run(tmp_path):
    scenes, model_full = _tiny_setup()
    tconf = TrainConfig(mask_ratio=0.5, seed=5, batch_size=4, epochs=4, finetune_epochs=0,
                        lr_decay_start=4)
    full = train(scenes[:4], scenes[4:], model_full, tconf, str(tmp_path / "full"), log=None)

    _, model_a = _tiny_setup()
    tconf_half = TrainConfig(mask_ratio=0.5, seed=5, batch_size=4, epochs=2, finetune_epochs=0,
                             lr_decay_start=4)
    train(scenes[:4], scenes[4:], model_a, tconf_half, str(tmp_path / "half"), log=None)

    from mopred.checkpoint import load_checkpoint

    arrays, header = load_checkpoint(str(tmp_path / "half" / "checkpoint.ckpt"))
    _, model_b = _tiny_setup()
    resumed = train(
        scenes[:4], scenes[4:], model_b, tconf, str(tmp_path / "resumed"),
        resume_arrays=arrays, resume_header=header, log=None,
    )
    full_tail = [row["total"] for row in full.history[2:]]
    resumed_rows = [row["total"] for row in resumed.history]
    assert resumed_rows == pytest.approx(full_tail, rel=1e-12)


def test_training_deterministic_across_runs(tmp_path):
    scenes, model_a = _tiny_setup()
    _, model_b = _tiny_setup()
    tconf = TrainConfig(mask_ratio=0.5, seed=6, batch_size=4, epochs=2, finetune_epochs=0,
                        lr_decay_start=2)
    ra = train(scenes[:4], scenes[4:], model_a, tconf, str(tmp_path / "a"), log=None)
    rb = train(scenes[:4], scenes[4:], model_b, tconf, str(tmp_path / "b"), log=None)
    assert [r["total"] for r in ra.history] == [r["total"] for r in rb.history]


def test_evaluate_minade_perfect_when_prediction_matches(tmp_path):
    scenes, model = _tiny_setup()
    centered = [to_agent_centric(s) for s in scenes[:2]]
    value = evaluate_minade(model, centered)
    assert np.isfinite(value) and value >= 0


def test_divergence_aborts_with_step_index(tmp_path, monkeypatch):
    import mopred.training as training_mod
    from mopred.errors import TrainingDivergenceError

    scenes, model = _tiny_setup()

    def blown_up(*args, **kwargs):
        with np.errstate(divide="ignore"):
            inf_loss = T.div(T.constant(1.0), T.constant(0.0))
        return inf_loss, {k: T.constant(0.0) for k in ("gmm", "cls", "dense", "recovery")}

    monkeypatch.setattr(training_mod, "scene_loss", blown_up)
    tconf = TrainConfig(mask_ratio=0.5, seed=9, batch_size=4, epochs=1, finetune_epochs=0,
                        lr_decay_start=1)
    with pytest.raises(TrainingDivergenceError) as err:
        train(scenes[:4], [], model, tconf, str(tmp_path / "diverge"), log=None)
    assert err.value.step == 0
