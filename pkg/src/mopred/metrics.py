"""Evaluation metrics and the robustness/ablation sweep harness.

Displacement metrics follow the usual motion-forecasting conventions:
minADE/minFDE over valid future steps, a fixed-radius miss test, a
Brier-weighted final error, and average precision over confidence-pooled
modes (with the "soft" variant that does not penalize extra non-miss
modes).  The sweep evaluates checkpoints on identically-masked datasets
across a mask-ratio grid and fits a degradation slope per metric.
"""

from __future__ import annotations

import json
import os
import time
from dataclasses import dataclass

import numpy as np

from .corrupt import apply_mask
from .decoder import PredictionSet
from .errors import ConfigurationError
from .model import MotionPredictor
from .scene import AGENT_TYPES, Scene
from .seeding import derive_seed
from .transform import to_agent_centric

MISS_THRESHOLD = 2.0


@dataclass
class EvalRecord:
    scene_id: int
    target_type: int
    prediction: PredictionSet  # exactly the emitted top-k modes
    gt_future: np.ndarray  # (T_f, 2)
    gt_valid: np.ndarray  # (T_f,)


@dataclass
class SweepResult:
    ratios: list[float]
    tables: dict[str, dict[float, dict[str, float]]]  # tag -> ratio -> metrics
    slopes: dict[str, dict[str, float]]  # tag -> metric -> least-squares slope


def min_ade(record: EvalRecord) -> float:
    ok = record.gt_valid > 0
    if not ok.any():
        raise ConfigurationError("record has no valid future timestep")
    diff = record.prediction.trajectories[:, ok, :] - record.gt_future[None, ok, :]
    per_mode = np.linalg.norm(diff, axis=2).mean(axis=1)
    return float(per_mode.min())


def min_fde(record: EvalRecord) -> float:
    return float(_final_errors(record).min())


def _final_errors(record: EvalRecord) -> np.ndarray:
    ok = np.flatnonzero(record.gt_valid > 0)
    if len(ok) == 0:
        raise ConfigurationError("record has no valid future timestep")
    last = ok[-1]
    diff = record.prediction.trajectories[:, last, :] - record.gt_future[None, last, :]
    return np.linalg.norm(diff, axis=1)


def miss(record: EvalRecord, threshold: float = MISS_THRESHOLD) -> bool:
    if threshold <= 0:
        raise ConfigurationError(f"miss threshold must be positive, got {threshold}")
    return min_fde(record) > threshold


def brier_min_fde(record: EvalRecord) -> float:
    errors = _final_errors(record)
    best = int(np.argmin(errors))
    p_best = float(record.prediction.confidences[best])
    return float(errors[best]) + (1.0 - p_best) ** 2


def map_metrics(records: list[EvalRecord], threshold: float = MISS_THRESHOLD) -> tuple[float, float]:
    """(mAP, Soft mAP) averaged over non-empty target-type buckets.

    Per record the highest-confidence non-miss mode is the true positive;
    remaining non-miss modes count as false positives for mAP but are
    ignored for Soft mAP; per-mode misses are false positives in both.
    AP is the 11-point interpolated area under the confidence-pooled
    precision-recall curve.
    """
    if not records:
        raise ConfigurationError("map_metrics needs a nonempty record list")
    ap_hard = []
    ap_soft = []
    for bucket in range(len(AGENT_TYPES)):
        group = [r for r in records if r.target_type == bucket]
        if not group:
            continue
        ap_hard.append(_bucket_ap(group, threshold, soft=False))
        ap_soft.append(_bucket_ap(group, threshold, soft=True))
    return float(np.mean(ap_hard)), float(np.mean(ap_soft))


def _bucket_ap(records: list[EvalRecord], threshold: float, soft: bool) -> float:
    entries = []  # (confidence, is_tp, is_fp)
    n_positives = len(records)
    for r in records:
        errors = _final_errors(r)
        conf = r.prediction.confidences
        order = np.argsort(-conf, kind="stable")
        tp_assigned = False
        for mode in order:
            hit = errors[mode] <= threshold
            if hit and not tp_assigned:
                entries.append((float(conf[mode]), 1, 0))
                tp_assigned = True
            elif hit:
                if not soft:
                    entries.append((float(conf[mode]), 0, 1))
            else:
                entries.append((float(conf[mode]), 0, 1))
    # group equal confidences so the PR curve is independent of record order
    by_conf: dict[float, list[int]] = {}
    for conf, tp, fp in entries:
        agg = by_conf.setdefault(conf, [0, 0])
        agg[0] += tp
        agg[1] += fp
    cum_tp = cum_fp = 0
    points = []  # (recall, precision)
    for conf in sorted(by_conf, reverse=True):
        tp, fp = by_conf[conf]
        cum_tp += tp
        cum_fp += fp
        recall = cum_tp / n_positives
        precision = cum_tp / max(cum_tp + cum_fp, 1)
        points.append((recall, precision))
    ap = 0.0
    for r in np.linspace(0.0, 1.0, 11):
        candidates = [p for rec, p in points if rec >= r - 1e-12]
        ap += max(candidates) if candidates else 0.0
    return ap / 11.0


def summarize(records: list[EvalRecord], threshold: float = MISS_THRESHOLD) -> dict[str, float]:
    m_ap, soft = map_metrics(records, threshold)
    return {
        "minADE": float(np.mean([min_ade(r) for r in records])),
        "minFDE": float(np.mean([min_fde(r) for r in records])),
        "miss_rate": float(np.mean([miss(r, threshold) for r in records])),
        "brier_minFDE": float(np.mean([brier_min_fde(r) for r in records])),
        "mAP": m_ap,
        "soft_mAP": soft,
    }


def build_eval_records(
    model: MotionPredictor,
    scenes: list[Scene],
    mask_ratio: float,
    strategy: str,
    seed: int,
    collect_layer_diagnostics: bool = False,
) -> tuple[list[EvalRecord], int, list[dict] | None]:
    """Mask, normalize, and run inference.

    Returns (records, excluded-scene count, per-layer diagnostics or None);
    diagnostics carry each decoder layer's endpoints and confidences."""
    records = []
    diagnostics = [] if collect_layer_diagnostics else None
    excluded = 0
    for i, scene in enumerate(scenes):
        if mask_ratio > 0:
            masked, _ = apply_mask(scene, strategy, mask_ratio, derive_seed(seed, "evalmask", i))
        else:
            masked = scene
        centered = to_agent_centric(masked)
        target = centered.target
        if not (target.future_valid > 0).any():
            excluded += 1
            continue
        if collect_layer_diagnostics:
            from .decoder import select_final

            out = model.forward_scene(centered)
            pred = select_final(
                out.layers[-1].to_prediction_set(),
                top_k=model.config.top_k,
                radius=model.config.nms_radius,
            )
            diagnostics.append(
                {
                    "scene_id": i,
                    "layers": [
                        {
                            "endpoints": layer.endpoints_np.tolist(),
                            "confidences": layer.confidences_np.tolist(),
                        }
                        for layer in out.layers
                    ],
                }
            )
        else:
            pred = model.predict(centered)
        records.append(
            EvalRecord(
                scene_id=i,
                target_type=target.agent_type,
                prediction=pred,
                gt_future=target.future_positions.copy(),
                gt_valid=target.future_valid.copy(),
            )
        )
    return records, excluded, diagnostics


def degradation_slope(ratios: list[float], values: list[float]) -> float:
    """Least-squares slope of metric vs mask ratio (nan for degenerate grids)."""
    x = np.asarray(ratios, dtype=np.float64)
    y = np.asarray(values, dtype=np.float64)
    xm, ym = x.mean(), y.mean()
    denom = ((x - xm) ** 2).sum()
    if denom == 0:
        return float("nan")
    return float(((x - xm) * (y - ym)).sum() / denom)


def robustness_sweep(
    checkpoints: dict[str, MotionPredictor],
    scenes: list[Scene],
    ratios: list[float],
    strategy: str,
    seed: int,
    threads: int = 1,
) -> SweepResult:
    """Evaluate each model tag over a shared mask-ratio grid.

    All models see the identical masked dataset per ratio (same seeds), so
    rows are directly comparable across tags.  With ``threads`` > 1 the
    (tag, ratio) cells evaluate concurrently; models are only read.
    """
    ratios = list(ratios)
    if any(b <= a for a, b in zip(ratios, ratios[1:])):
        raise ConfigurationError("ratio grid must be strictly increasing")
    if ratios and (ratios[0] < 0 or ratios[-1] > 0.9):
        raise ConfigurationError("ratio grid must lie within [0, 0.9]")

    def _cell(tag: str, ratio: float):
        records, _, _ = build_eval_records(
            checkpoints[tag], scenes, ratio, strategy, derive_seed(seed, ratio)
        )
        return tag, ratio, summarize(records)

    cells = [(tag, ratio) for tag in checkpoints for ratio in ratios]
    if threads > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(lambda c: _cell(*c), cells))
    else:
        results = [_cell(*c) for c in cells]

    tables: dict[str, dict[float, dict[str, float]]] = {tag: {} for tag in checkpoints}
    for tag, ratio, summary in results:
        tables[tag][ratio] = summary
    slopes = {
        tag: {
            metric: degradation_slope(ratios, [tables[tag][r][metric] for r in ratios])
            for metric in tables[tag][ratios[0]]
        }
        for tag in checkpoints
    }
    return SweepResult(ratios=ratios, tables=tables, slopes=slopes)


def sweep_to_csv_rows(result: SweepResult) -> list[tuple]:
    """(metric, value, target_type, mask_ratio, model_tag) rows."""
    rows = []
    for tag, table in result.tables.items():
        for ratio, metrics in table.items():
            for metric, value in metrics.items():
                rows.append((metric, value, "all", ratio, tag))
    return rows


def save_sweep(result: SweepResult, out_dir: str):
    os.makedirs(out_dir, exist_ok=True)
    csv_path = os.path.join(out_dir, "sweep.csv")
    with open(csv_path, "w", encoding="utf-8") as fh:
        fh.write("metric,value,target_type,mask_ratio,model_tag\n")
        for metric, value, ttype, ratio, tag in sweep_to_csv_rows(result):
            fh.write(f"{metric},{value:.10g},{ttype},{ratio},{tag}\n")
    summary = {
        "ratios": result.ratios,
        "slopes": result.slopes,
        "tables": {
            tag: {str(r): m for r, m in table.items()} for tag, table in result.tables.items()
        },
    }
    json_path = os.path.join(out_dir, "sweep_summary.json")
    with open(json_path, "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
    return csv_path, json_path


def recovery_l1(
    model: MotionPredictor,
    scenes: list[Scene],
    mask_ratio: float,
    strategy: str,
    seed: int,
    masked_only: bool = False,
) -> float:
    """Mean absolute recovery error (position+velocity channels) against the
    clean histories, optionally restricted to the masked timesteps."""
    errors = []
    for i, scene in enumerate(scenes):
        clean = to_agent_centric(scene)
        masked, vmask = apply_mask(clean, strategy, mask_ratio, derive_seed(seed, "recmask", i))
        _, recovered = model.encode_scene(masked)
        if recovered is None:
            raise ConfigurationError("model has no recovery module")
        gt = np.stack(
            [np.concatenate([a.positions, a.velocities], axis=1) for a in clean.agents]
        )
        diff = np.abs(recovered.values.data - gt)
        if masked_only:
            gone = vmask.flags == 0
            if not gone.any():
                continue
            errors.append(diff[gone].mean())
        else:
            errors.append(diff.mean())
    return float(np.mean(errors))


def param_runtime_report(
    model: MotionPredictor,
    scenes: list[Scene],
    min_scenes: int = 100,
    warmup: int = 3,
) -> dict[str, float]:
    """Parameter count plus mean/std per-scene inference wall time.

    Scenes are cycled until at least ``min_scenes`` timed runs are
    collected; the first ``warmup`` runs are excluded.
    """
    centered = [to_agent_centric(s) for s in scenes]
    n_runs = max(min_scenes, len(centered))
    times = []
    for i in range(n_runs + warmup):
        scene = centered[i % len(centered)]
        start = time.perf_counter()
        model.predict(scene)
        elapsed = time.perf_counter() - start
        if i >= warmup:
            times.append(elapsed)
    return {
        "parameter_count": float(model.param_count()),
        "mean_scene_seconds": float(np.mean(times)),
        "std_scene_seconds": float(np.std(times)),
        "timed_scenes": float(len(times)),
    }
