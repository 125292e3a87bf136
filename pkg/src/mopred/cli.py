"""Command-line operator surface.

Subcommands: generate, train, eval, sweep, analyze, predict.  Every run
writes its outputs under a fresh ``<timestamp>_<command>`` directory and
finishes by atomically writing a manifest (command, config snapshot, seed,
build id, timestamps, produced artifacts) so any run is reproducible from
the manifest alone.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical
divergence, 1 anything else.
"""

from __future__ import annotations

import argparse
import datetime as _dt
import hashlib
import json
import os
import subprocess
import sys
import tempfile
from concurrent.futures import ThreadPoolExecutor

from . import __version__
from .corrupt import MASK_STRATEGIES, apply_mask
from .errors import (
    ConfigurationError,
    DataError,
    DimensionError,
    MopredError,
    TrainingDivergenceError,
)
from .generate import SceneConfig, generate_dataset
from .metrics import (
    build_eval_records,
    param_runtime_report,
    robustness_sweep,
    save_sweep,
    summarize,
)
from .model import ModelConfig, MotionPredictor, load_model
from .scene import AGENT_TYPES, load_scenes_jsonl, save_scenes_jsonl
from .seeding import derive_seed, substream
from .training import TrainConfig, train
from .transform import to_agent_centric, validity_distribution, validity_histogram_rows

EXIT_OK = 0
EXIT_GENERIC = 1
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_DIVERGED = 4


def _build_id() -> str:
    try:
        rev = subprocess.run(
            ["git", "rev-parse", "--short", "HEAD"],
            capture_output=True,
            text=True,
            timeout=5,
        )
        if rev.returncode == 0:
            return f"{__version__}+g{rev.stdout.strip()}"
    except Exception:
        pass
    return __version__


def _file_hash(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _run_dir(base: str, command: str) -> str:
    stamp = _dt.datetime.now().strftime("%Y%m%d-%H%M%S-%f")
    path = os.path.join(base, f"{stamp}_{command}")
    os.makedirs(path, exist_ok=True)
    return path


def _write_manifest(run_dir: str, command: str, config: dict, seed: int, outputs: list[str],
                    started: str, extra: dict | None = None):
    manifest = {
        "command": command,
        "config": config,
        "seed": seed,
        "build_id": _build_id(),
        "started": started,
        "finished": _dt.datetime.now().isoformat(),
        "outputs": sorted(os.path.relpath(p, run_dir) for p in outputs),
    }
    if extra:
        manifest.update(extra)
    fd, tmp = tempfile.mkstemp(dir=run_dir, suffix=".json.tmp")
    with os.fdopen(fd, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    os.replace(tmp, os.path.join(run_dir, "manifest.json"))
    return manifest


def _load_kv_config(path: str) -> dict:
    """Flat ``key = value`` config file; values parsed as JSON scalars."""
    values: dict = {}
    try:
        with open(path, "r", encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                line = line.strip()
                if not line or line.startswith("#"):
                    continue
                if "=" not in line:
                    raise ConfigurationError(f"{path}:{lineno}: expected 'key = value'")
                key, _, raw = line.partition("=")
                raw = raw.strip()
                try:
                    values[key.strip()] = json.loads(raw)
                except json.JSONDecodeError:
                    values[key.strip()] = raw
    except OSError as exc:
        raise DataError(f"cannot read config file {path}: {exc}") from exc
    return values


def _dataset_paths(dataset_dir: str) -> tuple[str, str]:
    train_path = os.path.join(dataset_dir, "train.jsonl")
    val_path = os.path.join(dataset_dir, "val.jsonl")
    for p in (train_path, val_path):
        if not os.path.exists(p):
            raise DataError(f"dataset file missing: {p}")
    return train_path, val_path


def _dataset_manifest_info(dataset_dir: str) -> dict:
    train_path, val_path = _dataset_paths(dataset_dir)
    return {
        "dataset": os.path.abspath(dataset_dir),
        "dataset_hash": {
            "train.jsonl": _file_hash(train_path),
            "val.jsonl": _file_hash(val_path),
        },
    }


# ---------------------------------------------------------------------------
# subcommands


def cmd_generate(args) -> int:
    started = _dt.datetime.now().isoformat()
    overrides = _load_kv_config(args.config) if args.config else {}
    config = SceneConfig.from_dict(overrides)
    if args.map_style:
        config.map_style = args.map_style
    config.validate()
    run_dir = _run_dir(args.out, "generate")
    scenes = generate_dataset(args.seed, config, args.n_scenes)
    order = substream(args.seed, "shuffle").permutation(len(scenes))
    n_val = max(1, len(scenes) // 10) if len(scenes) > 1 else 0
    val_idx = set(order[:n_val].tolist())
    train_scenes = [scenes[i] for i in range(len(scenes)) if i not in val_idx]
    val_scenes = [scenes[i] for i in range(len(scenes)) if i in val_idx]
    train_path = os.path.join(run_dir, "train.jsonl")
    val_path = os.path.join(run_dir, "val.jsonl")
    save_scenes_jsonl(train_path, train_scenes)
    save_scenes_jsonl(val_path, val_scenes)
    manifest_extra = {
        "n_scenes": len(scenes),
        "n_train": len(train_scenes),
        "n_val": len(val_scenes),
        "dataset_hash": {
            "train.jsonl": _file_hash(train_path),
            "val.jsonl": _file_hash(val_path),
        },
    }
    _write_manifest(
        run_dir, "generate", config.to_dict(), args.seed,
        [train_path, val_path], started, manifest_extra,
    )
    print(run_dir)
    return EXIT_OK


def cmd_train(args) -> int:
    started = _dt.datetime.now().isoformat()
    overrides = _load_kv_config(args.config) if args.config else {}
    tconf = TrainConfig.from_dict(overrides)
    mconf = ModelConfig.from_dict(overrides)
    tconf.seed = args.seed
    mconf.init_seed = args.seed
    if args.mask_ratio is not None:
        tconf.mask_ratio = args.mask_ratio
    if args.epochs is not None:
        tconf.epochs = args.epochs
    if args.finetune_epochs is not None:
        tconf.finetune_epochs = args.finetune_epochs
    if args.batch_size is not None:
        tconf.batch_size = args.batch_size
    if args.no_recovery:
        mconf.use_recovery = False
    if args.no_scene_token:
        mconf.use_scene_tokenization = False
    tconf.validate()
    train_path, val_path = _dataset_paths(args.dataset)
    train_scenes = load_scenes_jsonl(train_path)
    val_scenes = load_scenes_jsonl(val_path)
    mconf.t_past = train_scenes[0].t_past
    mconf.t_future = train_scenes[0].t_future
    run_dir = _run_dir(args.out, "train")
    model = MotionPredictor(mconf)
    result = train(train_scenes, val_scenes, model, tconf, run_dir)
    config_snapshot = {"train": tconf.to_dict(), "model": mconf.to_dict()}
    _write_manifest(
        run_dir, "train", config_snapshot, args.seed,
        [result.checkpoint_path, result.metrics_path], started,
        {
            **_dataset_manifest_info(args.dataset),
            "epochs_run": result.epochs_run,
            "global_step": result.global_step,
        },
    )
    print(run_dir)
    return EXIT_OK


def cmd_eval(args) -> int:
    started = _dt.datetime.now().isoformat()
    model, header, _ = load_model(args.checkpoint)
    train_path, val_path = _dataset_paths(args.dataset)
    scenes = load_scenes_jsonl(train_path if args.split == "train" else val_path)
    run_dir = _run_dir(args.out, "eval")
    records, excluded, diagnostics = build_eval_records(
        model, scenes, args.mask_ratio, args.strategy, args.seed,
        collect_layer_diagnostics=args.verbose,
    )
    summary = summarize(records)
    metrics_path = os.path.join(run_dir, "metrics.csv")
    with open(metrics_path, "w", encoding="utf-8") as fh:
        fh.write("metric,value,target_type,mask_ratio,model_tag\n")
        for metric, value in summary.items():
            fh.write(f"{metric},{value:.10g},all,{args.mask_ratio},{args.tag}\n")
    pred_path = os.path.join(run_dir, "predictions.jsonl")
    by_scene = {d["scene_id"]: d for d in diagnostics} if diagnostics else {}
    with open(pred_path, "w", encoding="utf-8") as fh:
        for rec in records:
            obj = {
                "scene_id": rec.scene_id,
                "target_index": scenes[rec.scene_id].target_index,
                "target_type": AGENT_TYPES[rec.target_type],
                "trajectories": rec.prediction.trajectories.tolist(),
                "confidences": rec.prediction.confidences.tolist(),
            }
            if args.verbose:
                obj["gmm_params"] = rec.prediction.gmm_params.tolist()
                obj["layer_diagnostics"] = by_scene[rec.scene_id]["layers"]
            fh.write(json.dumps(obj, sort_keys=True) + "\n")
    _write_manifest(
        run_dir, "eval",
        {"mask_ratio": args.mask_ratio, "strategy": args.strategy, "split": args.split},
        args.seed, [metrics_path, pred_path], started,
        {"summary": summary, "excluded_no_valid_future": excluded,
         "checkpoint": os.path.abspath(args.checkpoint),
         **_dataset_manifest_info(args.dataset)},
    )
    print(json.dumps(summary, indent=2, sort_keys=True))
    print(run_dir)
    return EXIT_OK


def cmd_sweep(args) -> int:
    started = _dt.datetime.now().isoformat()
    ratios = [float(r) for r in args.ratios.split(",")]
    _, val_path = _dataset_paths(args.dataset)
    scenes = load_scenes_jsonl(val_path)
    models = {}
    if args.threads > 1:
        with ThreadPoolExecutor(max_workers=args.threads) as pool:
            loaded = list(pool.map(lambda p: load_model(p)[0], args.checkpoints))
    else:
        loaded = [load_model(p)[0] for p in args.checkpoints]
    for path, model in zip(args.checkpoints, loaded):
        tag = os.path.basename(os.path.dirname(os.path.abspath(path))) or os.path.basename(path)
        if tag in models:
            tag = f"{tag}#{len(models)}"
        models[tag] = model
    result = robustness_sweep(models, scenes, ratios, args.strategy, args.seed,
                              threads=args.threads)
    run_dir = _run_dir(args.out, "sweep")
    csv_path, json_path = save_sweep(result, run_dir)
    _write_manifest(
        run_dir, "sweep",
        {"ratios": ratios, "strategy": args.strategy},
        args.seed, [csv_path, json_path], started,
        {"checkpoints": [os.path.abspath(p) for p in args.checkpoints],
         **_dataset_manifest_info(args.dataset)},
    )
    print(run_dir)
    return EXIT_OK


def cmd_analyze(args) -> int:
    started = _dt.datetime.now().isoformat()
    train_path, val_path = _dataset_paths(args.dataset)
    scenes = load_scenes_jsonl(train_path) + load_scenes_jsonl(val_path)
    if args.mask_ratio > 0:
        scenes = [
            apply_mask(s, args.strategy, args.mask_ratio, derive_seed(args.seed, "analyze", i))[0]
            for i, s in enumerate(scenes)
        ]
    dist = validity_distribution(scenes)
    run_dir = _run_dir(args.out, "analyze")
    hist_path = os.path.join(run_dir, "validity_histogram.csv")
    with open(hist_path, "w", encoding="utf-8") as fh:
        fh.write("bin_low,bin_high,fraction,group\n")
        for lo, hi, frac, group in validity_histogram_rows(dist):
            fh.write(f"{lo},{hi},{frac:.10g},{group}\n")
    _write_manifest(
        run_dir, "analyze", {"mask_ratio": args.mask_ratio, "strategy": args.strategy},
        args.seed, [hist_path], started, _dataset_manifest_info(args.dataset),
    )
    print(run_dir)
    return EXIT_OK


def cmd_predict(args) -> int:
    started = _dt.datetime.now().isoformat()
    model, _, _ = load_model(args.checkpoint)
    train_path, val_path = _dataset_paths(args.dataset)
    scenes = load_scenes_jsonl(train_path if args.split == "train" else val_path)
    run_dir = _run_dir(args.out, "predict")
    pred_path = os.path.join(run_dir, "predictions.jsonl")
    with open(pred_path, "w", encoding="utf-8") as fh:
        for i, scene in enumerate(scenes):
            centered = to_agent_centric(scene)
            pred = model.predict(centered)
            fh.write(
                json.dumps(
                    {
                        "scene_id": i,
                        "target_index": scene.target_index,
                        "trajectories": pred.trajectories.tolist(),
                        "confidences": pred.confidences.tolist(),
                    },
                    sort_keys=True,
                )
                + "\n"
            )
    _write_manifest(run_dir, "predict", {"split": args.split}, args.seed, [pred_path],
                    started, _dataset_manifest_info(args.dataset))
    print(run_dir)
    return EXIT_OK


def cmd_report(args) -> int:
    started = _dt.datetime.now().isoformat()
    model, _, _ = load_model(args.checkpoint)
    _, val_path = _dataset_paths(args.dataset)
    scenes = load_scenes_jsonl(val_path)
    report = param_runtime_report(model, scenes, min_scenes=args.min_scenes)
    run_dir = _run_dir(args.out, "report")
    path = os.path.join(run_dir, "efficiency.json")
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
    _write_manifest(run_dir, "report", {"min_scenes": args.min_scenes}, args.seed, [path], started)
    print(json.dumps(report, indent=2, sort_keys=True))
    print(run_dir)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mopred", description=__doc__)
    parser.add_argument("--seed", type=int, default=0, help="master seed for all sub-streams")
    parser.add_argument("--out", default="runs", help="base directory for run outputs")
    parser.add_argument("--config", default=None, help="flat key=value config file")
    parser.add_argument("--threads", type=int, default=1, help="worker threads where supported")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="generate a synthetic dataset (90/10 split)")
    p.add_argument("--n-scenes", type=int, default=100)
    p.add_argument("--map-style", choices=["straight", "arc", "intersection", "mixed"], default=None)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="train a model on a generated dataset")
    p.add_argument("dataset", help="directory containing train.jsonl/val.jsonl")
    p.add_argument("--mask-ratio", type=float, default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--finetune-epochs", type=int, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--no-recovery", action="store_true", help="ablation: drop the recovery module")
    p.add_argument("--no-scene-token", action="store_true",
                   help="ablation: replace the gating cascade with concatenation")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("dataset")
    p.add_argument("--split", choices=["train", "val"], default="val")
    p.add_argument("--mask-ratio", type=float, default=0.0)
    p.add_argument("--strategy", choices=list(MASK_STRATEGIES), default="mixed")
    p.add_argument("--tag", default="model")
    p.add_argument("--verbose", action="store_true", help="dump per-mode Gaussian parameters")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="robustness sweep over mask ratios")
    p.add_argument("dataset")
    p.add_argument("--checkpoints", nargs="+", required=True)
    p.add_argument("--ratios", default="0,0.3,0.5,0.7,0.9")
    p.add_argument("--strategy", choices=list(MASK_STRATEGIES), default="mixed")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("analyze", help="validity-distribution histogram")
    p.add_argument("dataset")
    p.add_argument("--mask-ratio", type=float, default=0.0)
    p.add_argument("--strategy", choices=list(MASK_STRATEGIES), default="mixed")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("predict", help="dump final predictions for a dataset split")
    p.add_argument("checkpoint")
    p.add_argument("dataset")
    p.add_argument("--split", choices=["train", "val"], default="val")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("report", help="parameter/runtime efficiency report")
    p.add_argument("checkpoint")
    p.add_argument("dataset")
    p.add_argument("--min-scenes", type=int, default=100)
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except TrainingDivergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (ConfigurationError, DimensionError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except MopredError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_GENERIC


if __name__ == "__main__":
    sys.exit(main())
