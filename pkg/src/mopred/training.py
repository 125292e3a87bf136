"""Loss assembly, learning-rate schedule, and the training loop.

The loop is stateless with respect to randomness: masking seeds derive
from (seed, step) and shuffling from (seed, epoch), so resuming from a
checkpoint reproduces the exact loss trajectory of an uninterrupted run.
"""

from __future__ import annotations

import csv
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .corrupt import apply_mask
from .decoder import AnchorSet, assign_targets_distinct, init_anchors
from .errors import ConfigurationError, TrainingDivergenceError
from .model import ModelOutput, MotionPredictor, save_model
from .optim import AdamW, clip_grad_norm
from .scene import Scene
from .seeding import derive_seed, substream
from .tensor import Tensor
from .transform import to_agent_centric


@dataclass
class LossBreakdown:
    total: float
    decoder_gmm: float
    decoder_cls: float
    dense_future: float
    recovery: float

    def row(self) -> list[float]:
        return [self.total, self.decoder_gmm, self.decoder_cls, self.dense_future, self.recovery]


@dataclass
class TrainConfig:
    mask_ratio: float = 0.7
    mask_strategy: str = "mixed"
    lr_init: float = 1.0e-4
    epochs: int = 30
    finetune_epochs: int = 10
    finetune_lr: float = 6.25e-6
    lr_decay_start: int = 20
    lr_decay_every: int = 2
    batch_size: int = 8
    seed: int = 0
    weight_decay: float = 0.0
    grad_clip: float = 1.0
    w_gmm: float = 1.0
    w_cls: float = 1.0
    w_dense: float = 1.0
    w_recovery: float = 1.0
    recovery_masked_only: bool = False

    def validate(self):
        if not 0.0 <= self.mask_ratio < 1.0:
            raise ConfigurationError(f"mask_ratio must be in [0, 1), got {self.mask_ratio}")
        if self.lr_init <= 0 or self.finetune_lr <= 0:
            raise ConfigurationError("learning rates must be positive")
        if self.finetune_lr > self.lr_init:
            raise ConfigurationError("finetune_lr must not exceed lr_init")
        if self.batch_size < 1 or self.epochs < 0 or self.finetune_epochs < 0:
            raise ConfigurationError("invalid epoch/batch configuration")
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})


def lr_at(epoch: int, config: TrainConfig) -> float:
    """Piecewise schedule: flat, then halving every ``lr_decay_every``
    epochs (never below the fine-tune rate), then the fine-tune rate.

    The floor keeps the schedule monotone non-increasing into the
    fine-tune phase, where the rate is held constant.
    """
    if epoch < 0:
        raise ConfigurationError(f"epoch must be >= 0, got {epoch}")
    if epoch >= config.epochs:
        return config.finetune_lr
    if epoch < config.lr_decay_start:
        return config.lr_init
    halvings = (epoch - config.lr_decay_start + config.lr_decay_every) // config.lr_decay_every
    return max(config.lr_init * 2.0 ** (-halvings), config.finetune_lr)


def total_epochs(config: TrainConfig) -> int:
    return config.epochs + config.finetune_epochs


def recovery_loss(recovered: Tensor, gt_past: np.ndarray, mask: np.ndarray | None = None) -> Tensor:
    """Mean absolute error between recovered history and ground truth
    (N_a, T_p, 4 = position + velocity)."""
    return T.l1_loss(recovered, gt_past, mask=mask)


def recovery_target(scene: Scene) -> np.ndarray:
    """Ground-truth past positions and velocities from an uncorrupted,
    agent-centric scene."""
    return np.stack(
        [np.concatenate([a.positions, a.velocities], axis=1) for a in scene.agents]
    )


def mtr_loss(
    layer_outputs: list,
    dense_future: Tensor,
    target_future: np.ndarray,
    target_future_valid: np.ndarray,
    all_futures: np.ndarray,
    all_future_valid: np.ndarray,
    nms_radius: float,
) -> tuple[Tensor, Tensor, Tensor]:
    """Decoder losses in the MTR convention.

    Per layer: negative log-likelihood of the positive mode (nearest
    distinct endpoint) summed over valid future steps, plus cross-entropy
    of the confidence head against the positive index; both averaged over
    layers.  The dense-future loss is an L1 over all agents' valid futures.
    """
    valid_idx = np.flatnonzero(target_future_valid > 0)
    if len(valid_idx) == 0:
        raise TrainingDivergenceError(-1, "scene has no valid future timestep")
    gt_endpoint = target_future[valid_idx[-1]]
    gmm_terms = []
    cls_terms = []
    for out in layer_outputs:
        pos = assign_targets_distinct(out.endpoints_np, out.confidences_np, gt_endpoint, nms_radius)
        nll = T.gmm_nll(out.gmm[pos], target_future)
        masked_nll = T.mul(nll, T.constant(target_future_valid.astype(np.float64)))
        gmm_terms.append(T.tensor_sum(masked_nll))
        cls_terms.append(T.cross_entropy(out.conf_logits, pos))
    n_layers = float(len(layer_outputs))
    decoder_gmm = T.mul(_sum_tensors(gmm_terms), 1.0 / n_layers)
    decoder_cls = T.mul(_sum_tensors(cls_terms), 1.0 / n_layers)
    dense = T.l1_loss(dense_future, all_futures, mask=all_future_valid)
    return decoder_gmm, decoder_cls, dense


def _sum_tensors(ts: list[Tensor]) -> Tensor:
    acc = ts[0]
    for t in ts[1:]:
        acc = T.add(acc, t)
    return acc


def scene_loss(
    model: MotionPredictor,
    clean_centered: Scene,
    masked_centered: Scene,
    config: TrainConfig,
    mask_flags: np.ndarray | None = None,
) -> tuple[Tensor, dict]:
    """Forward one scene and assemble the weighted total loss."""
    out: ModelOutput = model.forward_scene(masked_centered)
    target = clean_centered.target
    all_futures = np.stack([a.future_positions for a in clean_centered.agents])
    all_valid = np.stack([a.future_valid for a in clean_centered.agents])
    gmm, cls, dense = mtr_loss(
        out.layers,
        out.dense_future,
        target.future_positions,
        target.future_valid,
        all_futures,
        all_valid,
        model.config.nms_radius,
    )
    parts = {
        "gmm": T.mul(gmm, config.w_gmm),
        "cls": T.mul(cls, config.w_cls),
        "dense": T.mul(dense, config.w_dense),
    }
    if out.recovered is not None:
        rec_mask = None
        if config.recovery_masked_only and mask_flags is not None:
            rec_mask = 1.0 - mask_flags
            if rec_mask.sum() == 0:
                rec_mask = None
        rec = recovery_loss(out.recovered.values, recovery_target(clean_centered), mask=rec_mask)
        parts["recovery"] = T.mul(rec, config.w_recovery)
    else:
        parts["recovery"] = T.constant(0.0)
    total = _sum_tensors(list(parts.values()))
    return total, parts


@dataclass
class TrainResult:
    checkpoint_path: str
    metrics_path: str
    epochs_run: int
    global_step: int
    history: list[dict] = field(default_factory=list)


METRICS_HEADER = ["epoch", "lr", "total", "gmm", "cls", "dense", "recovery", "val_minADE"]


def train(
    train_scenes: list[Scene],
    val_scenes: list[Scene],
    model: MotionPredictor,
    config: TrainConfig,
    out_dir: str,
    anchors: AnchorSet | None = None,
    resume_arrays: dict | None = None,
    resume_header: dict | None = None,
    log=print,
) -> TrainResult:
    """Full training loop: mask, forward, backward, clip, AdamW step.

    Saves a checkpoint (parameters, anchors, optimizer moments, epoch
    counters) at the end of every epoch and appends one metrics-CSV row per
    epoch.  Raises TrainingDivergenceError on a non-finite loss, keeping
    the last epoch checkpoint on disk.
    """
    config.validate()
    if not train_scenes:
        raise ConfigurationError("training dataset is empty")
    os.makedirs(out_dir, exist_ok=True)
    ckpt_path = os.path.join(out_dir, "checkpoint.ckpt")
    metrics_path = os.path.join(out_dir, "metrics.csv")

    if anchors is None:
        anchors = anchors_from_scenes(train_scenes, model.config.k_modes, config.seed)
    model.decoder.set_anchors(anchors)

    optimizer = AdamW(
        list(model.named_parameters()),
        lr=config.lr_init,
        weight_decay=config.weight_decay,
    )
    start_epoch = 0
    global_step = 0
    if resume_arrays is not None and resume_header is not None:
        model.load_state_arrays(
            {k: v for k, v in resume_arrays.items() if not k.startswith("optim.")}
        )
        optimizer.load_state_arrays(resume_arrays, resume_header["optimizer_step"])
        start_epoch = int(resume_header["epoch"]) + 1
        global_step = int(resume_header["global_step"])

    centered_train = [to_agent_centric(s) for s in train_scenes]
    centered_val = [to_agent_centric(s) for s in val_scenes]

    n = len(centered_train)
    steps_per_epoch = (n + config.batch_size - 1) // config.batch_size
    history: list[dict] = []
    write_header = start_epoch == 0 or not os.path.exists(metrics_path)
    mode = "w" if write_header else "a"
    epochs = total_epochs(config)
    with open(metrics_path, mode, newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        if write_header:
            writer.writerow(METRICS_HEADER)
        for epoch in range(start_epoch, epochs):
            lr = lr_at(epoch, config)
            order = substream(config.seed, "shuffle", epoch).permutation(n)
            sums = np.zeros(5)
            count = 0
            for bstart in range(0, n, config.batch_size):
                batch_idx = order[bstart : bstart + config.batch_size]
                breakdown = train_step(
                    model, optimizer, [centered_train[i] for i in batch_idx],
                    config, lr, global_step,
                )
                sums += np.asarray(breakdown.row())
                count += 1
                global_step += 1
            avg = sums / max(count, 1)
            val_minade = evaluate_minade(model, centered_val) if centered_val else float("nan")
            row = {
                "epoch": epoch,
                "lr": lr,
                "total": avg[0],
                "gmm": avg[1],
                "cls": avg[2],
                "dense": avg[3],
                "recovery": avg[4],
                "val_minADE": val_minade,
            }
            history.append(row)
            writer.writerow([row[k] for k in METRICS_HEADER])
            fh.flush()
            save_model(
                ckpt_path,
                model,
                extra_header={
                    "train": config.to_dict(),
                    "epoch": epoch,
                    "global_step": global_step,
                    "optimizer_step": optimizer.step_count,
                },
                extra_arrays=optimizer.state_arrays(),
            )
            if log:
                log(
                    f"epoch {epoch}: lr={lr:.3g} total={avg[0]:.4f} recovery={avg[4]:.4f} "
                    f"val_minADE={val_minade:.4f}"
                )
    return TrainResult(
        checkpoint_path=ckpt_path,
        metrics_path=metrics_path,
        epochs_run=epochs - start_epoch,
        global_step=global_step,
        history=history,
    )


def train_step(
    model: MotionPredictor,
    optimizer: AdamW,
    scenes: list[Scene],
    config: TrainConfig,
    lr: float,
    global_step: int,
) -> LossBreakdown:
    """One batch: fresh masks per scene, averaged loss, clipped AdamW update."""
    model.zero_grad()
    parts_sum = {"gmm": 0.0, "cls": 0.0, "dense": 0.0, "recovery": 0.0}
    with T.GradientTape() as tape:
        totals = []
        for i, scene in enumerate(scenes):
            mask_seed = derive_seed(config.seed, "mask", global_step, i)
            masked, vmask = apply_mask(scene, config.mask_strategy, config.mask_ratio, mask_seed)
            total, parts = scene_loss(model, scene, masked, config, mask_flags=vmask.flags)
            totals.append(total)
            for key in parts_sum:
                parts_sum[key] += parts[key].item()
        batch_loss = T.mul(_sum_tensors(totals), 1.0 / len(scenes))
        if not np.isfinite(batch_loss.data).all():
            raise TrainingDivergenceError(global_step)
        tape.backward(batch_loss)
    clip_grad_norm([p for _, p in optimizer.named_params], config.grad_clip)
    optimizer.step(lr)
    k = len(scenes)
    breakdown = LossBreakdown(
        total=batch_loss.item(),
        decoder_gmm=parts_sum["gmm"] / k,
        decoder_cls=parts_sum["cls"] / k,
        dense_future=parts_sum["dense"] / k,
        recovery=parts_sum["recovery"] / k,
    )
    if not np.isfinite(breakdown.total):
        raise TrainingDivergenceError(global_step)
    return breakdown


def evaluate_minade(model: MotionPredictor, centered_scenes: list[Scene]) -> float:
    """Mean min-over-modes average displacement error on clean scenes."""
    if not centered_scenes:
        return float("nan")
    values = []
    for scene in centered_scenes:
        pred = model.predict(scene)
        target = scene.target
        ok = target.future_valid > 0
        if not ok.any():
            continue
        diff = pred.trajectories[:, ok, :] - target.future_positions[None, ok, :]
        ade = np.linalg.norm(diff, axis=2).mean(axis=1)
        values.append(float(ade.min()))
    return float(np.mean(values)) if values else float("nan")


def anchors_from_scenes(scenes: list[Scene], k_modes: int, seed: int) -> AnchorSet:
    """Intention anchors from the agent-centric GT endpoints of a dataset."""
    endpoints = []
    for scene in scenes:
        centered = to_agent_centric(scene)
        target = centered.target
        ok = np.flatnonzero(target.future_valid > 0)
        if len(ok):
            endpoints.append(target.future_positions[ok[-1]])
    return init_anchors(np.asarray(endpoints), k_modes, seed)
