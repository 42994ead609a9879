"""Command-line pipeline: gen, train, predict, eval, dist.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
Every command drops a ``run_manifest.json`` (or ``<output>.manifest.json``
for single-file outputs) recording the resolved configuration, seed, paths,
tool version and timestamp, so runs can be reproduced.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__, evaluation, gridcodec, postprocess, scenegen
from .geometry import ObjectSpecError, Pose, load_object
from .gridcodec import FormatError, GridTensor, camera_from_dict
from .losses import LossSpec, LossWeights
from .model import (
    ModelConfig,
    TrainConfig,
    load_checkpoint,
    save_checkpoint,
    save_history,
    train,
)


class ConfigError(Exception):
    """Bad user input: config files, flags, mismatched artifacts."""


def _load_json(path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from exc


def _write_run_manifest(target: Path, command: str, config: dict, seed, inputs, outputs) -> None:
    doc = {
        "command": command,
        "tool_version": __version__,
        "timestamp": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
        "seed": seed,
        "config": config,
        "inputs": [str(p) for p in inputs],
        "outputs": [str(p) for p in outputs],
    }
    target.write_text(json.dumps(doc, indent=1) + "\n")


def _scene_stem(index: int) -> str:
    return f"scene_{index:05d}"


def _atomic_write(path: Path, writer) -> None:
    tmp = path.with_name(path.name + ".tmp")
    writer(tmp)
    tmp.replace(path)


# ---------------------------------------------------------------------------
# gen
# ---------------------------------------------------------------------------


def cmd_gen(args) -> int:
    cfg = _load_json(args.config)
    cfg_dir = Path(args.config).parent
    try:
        obj = load_object(cfg_dir / cfg["object"])
        camera = camera_from_dict(cfg["camera"])
        augment_params = (
            scenegen.AugmentParams(**cfg["augment"]) if cfg.get("augment") else None
        )
        scene_config = scenegen.SceneConfig(
            object_id=obj.object_id,
            count_range=tuple(cfg["count_range"]),
            bin_center=tuple(cfg["bin"]["center"]),
            bin_extents=tuple(cfg["bin"]["extents"]),
            camera=camera,
            seed=args.seed if args.seed is not None else int(cfg.get("seed", 0)),
            min_separation_factor=float(cfg.get("min_separation_factor", 0.5)),
            bin_jitter=float(cfg.get("bin_jitter", 0.0)),
            distractor_plane=bool(cfg.get("distractor_plane", False)),
        )
    except (KeyError, TypeError, ValueError, ObjectSpecError) as exc:
        raise ConfigError(f"bad generation config: {exc}") from exc

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    manifest = scenegen.DatasetManifest(
        camera=camera, object_meta=scenegen.object_meta(obj), scenes=[]
    )
    for index in range(args.count):
        rng = np.random.default_rng([scene_config.seed, index])
        depth, imap, gt = scenegen.generate_scene(scene_config, obj, rng, augment_params)
        stem = _scene_stem(index)
        names = {
            "depth": f"{stem}.depth.bin",
            "instance_map": f"{stem}.imap.bin",
            "ground_truth": f"{stem}.gt.json",
        }
        _atomic_write(out / names["depth"], lambda p: scenegen.save_depth(p, depth))
        _atomic_write(out / names["instance_map"], lambda p: scenegen.save_instance_map(p, imap))
        _atomic_write(out / names["ground_truth"], lambda p: gridcodec.save_scene(p, camera, gt))
        manifest.scenes.append(names)
    scenegen.save_manifest(out / "manifest.json", manifest)
    _write_run_manifest(
        out / "run_manifest.json", "gen", cfg, scene_config.seed, [args.config], [out]
    )
    print(f"generated {args.count} scenes in {out}")
    return 0


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------


def _load_training_data(dataset_dir: Path):
    manifest = scenegen.load_manifest(dataset_dir / "manifest.json")
    obj = scenegen.object_from_meta(manifest.object_meta)
    camera = manifest.camera
    examples = []
    for entry in manifest.scenes:
        depth = scenegen.load_depth(dataset_dir / entry["depth"])
        if not depth.valid_mask.all():
            depth = scenegen.interpolate_missing(depth)
        image = scenegen.normalize_depth(depth)
        _, gt = gridcodec.load_scene(dataset_dir / entry["ground_truth"])
        examples.append((image, gt))
    return manifest, obj, camera, examples


def cmd_train(args) -> int:
    cfg = _load_json(args.config)
    dataset_dir = Path(args.dataset)
    if not (dataset_dir / "manifest.json").exists():
        raise ConfigError(f"no dataset manifest in {dataset_dir}")
    manifest, obj, camera, raw_examples = _load_training_data(dataset_dir)

    expected_c = gridcodec.channel_count(obj.symmetry)
    model_cfg_dict = dict(cfg.get("model", {}))
    model_cfg_dict.setdefault("out_channels", expected_c)
    try:
        model_config = ModelConfig.from_dict(
            {"input_size": 32, "grid_size": 8, "channels": [16, 32], "seed": 0} | model_cfg_dict
        )
        train_cfg_raw = dict(cfg.get("train", {}))
        weights = LossWeights(
            lambda1=float(train_cfg_raw.pop("lambda1", 0.1)),
            lambda2=float(train_cfg_raw.pop("lambda2", 0.25)),
            lambda4=train_cfg_raw.pop("lambda4", None),
        )
        seed = args.seed if args.seed is not None else int(train_cfg_raw.pop("seed", 0))
        if args.loss is not None:
            train_cfg_raw["loss_variant"] = args.loss
        train_config = TrainConfig(**train_cfg_raw)
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"bad training config: {exc}") from exc
    if model_config.out_channels != expected_c:
        raise ConfigError(
            f"model out_channels {model_config.out_channels} does not match object "
            f"symmetry ({expected_c} channels)"
        )
    if model_config.input_size != camera.height or model_config.input_size != camera.width:
        raise ConfigError(
            f"model input {model_config.input_size} does not match dataset images "
            f"{camera.width}x{camera.height}"
        )

    dataset = []
    for image, gt in raw_examples:
        target, _ = gridcodec.encode(gt, camera, model_config.grid_size, obj)
        dataset.append((image, target))

    loss_spec = LossSpec(object_model=obj, variant=train_config.loss_variant, weights=weights)
    params, history = train(
        dataset, model_config, train_config, loss_spec, np.random.default_rng(seed)
    )

    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    meta = {
        "object": manifest.object_meta,
        "camera": gridcodec._camera_to_dict(camera),
        "loss_variant": train_config.loss_variant,
    }
    save_checkpoint(out, params, model_config, meta)
    history_path = out.with_name(out.stem + "_history.csv")
    save_history(history_path, history)
    _write_run_manifest(
        out.with_name(out.name + ".manifest.json"),
        "train",
        cfg,
        seed,
        [args.dataset, args.config],
        [out, history_path],
    )
    print(f"final training loss {history[-1].train_loss:.6g} after {len(history)} epochs")
    return 0


# ---------------------------------------------------------------------------
# predict
# ---------------------------------------------------------------------------


def cmd_predict(args) -> int:
    from .model import _forward_batch  # batched path, same math as forward()

    try:
        params, model_config, meta = load_checkpoint(args.checkpoint)
    except (FormatError, OSError) as exc:
        raise ConfigError(f"cannot load checkpoint: {exc}") from exc
    dataset_dir = Path(args.dataset)
    manifest = scenegen.load_manifest(dataset_dir / "manifest.json")
    obj = scenegen.object_from_meta(manifest.object_meta)
    camera = manifest.camera
    if meta.get("object", {}).get("id") not in (None, obj.object_id):
        raise ConfigError(
            f"checkpoint was trained for object {meta['object']['id']!r}, "
            f"dataset uses {obj.object_id!r}"
        )
    if model_config.out_channels != gridcodec.channel_count(obj.symmetry):
        raise ConfigError("checkpoint channel count does not match the dataset object")
    if camera.width != model_config.input_size or camera.height != model_config.input_size:
        raise ConfigError("checkpoint input size does not match the dataset images")

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    dedup_config = postprocess.DedupConfig(radius_factor=args.dedup_radius)
    outputs = []
    for entry in manifest.scenes:
        depth = scenegen.load_depth(dataset_dir / entry["depth"])
        if not depth.valid_mask.all():
            depth = scenegen.interpolate_missing(depth)
        image = scenegen.normalize_depth(depth)
        pred, _ = _forward_batch(image[None], params, model_config)
        detections = gridcodec.decode(
            GridTensor(pred[0]), camera, obj, p_min=args.p_min, v_min=args.v_min
        )
        if args.dedup:
            detections = postprocess.remove_duplicates(detections, obj, dedup_config)
        target = out / entry["depth"].replace(".depth.bin", ".pred.json")
        _atomic_write(target, lambda p: gridcodec.save_predictions(p, detections))
        outputs.append(target)
    _write_run_manifest(
        out / "run_manifest.json",
        "predict",
        {
            "p_min": args.p_min,
            "v_min": args.v_min,
            "dedup": args.dedup,
            "dedup_radius": args.dedup_radius,
        },
        None,
        [args.checkpoint, args.dataset],
        outputs,
    )
    print(f"wrote {len(outputs)} prediction files to {out}")
    return 0


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------


def cmd_eval(args) -> int:
    try:
        obj = load_object(args.object)
    except ObjectSpecError as exc:
        raise ConfigError(str(exc)) from exc
    gt_dir = Path(args.gt)
    pred_dir = Path(args.predictions)
    manifest_path = gt_dir / "manifest.json"
    if manifest_path.exists():
        gt_files = [gt_dir / e["ground_truth"] for e in scenegen.load_manifest(manifest_path).scenes]
    else:
        gt_files = sorted(gt_dir.glob("*.gt.json"))
    if not gt_files:
        raise ConfigError(f"no ground-truth scenes found in {gt_dir}")
    scenes = []
    for gt_file in gt_files:
        pred_file = pred_dir / gt_file.name.replace(".gt.json", ".pred.json")
        if not pred_file.exists():
            raise ConfigError(f"missing predictions for scene {gt_file.name}")
        _, gt = gridcodec.load_scene(gt_file)
        detections = gridcodec.load_predictions(pred_file)
        scenes.append((detections, gt))
    report = evaluation.evaluate_dataset(scenes, obj)

    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    evaluation.save_report(out, report)
    curve_path = out.with_name(out.stem + "_curve.csv")
    evaluation.save_curve_csv(curve_path, report)
    _write_run_manifest(
        out.with_name(out.name + ".manifest.json"),
        "eval",
        {"object": str(args.object)},
        None,
        [args.predictions, args.gt, args.object],
        [out, curve_path],
    )
    print(f"AP: {report.ap:.6f}")
    return 0


# ---------------------------------------------------------------------------
# dist
# ---------------------------------------------------------------------------


def _parse_pose(text: str) -> Pose:
    candidate = Path(text)
    try:
        if candidate.exists():
            raw = json.loads(candidate.read_text())
        else:
            raw = json.loads(text)
        rotation = np.asarray(raw["rotation"], dtype=float).reshape(3, 3)
        translation = np.asarray(raw["translation"], dtype=float)
        return Pose(rotation, translation)
    except (OSError, json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"cannot parse pose {text!r}: {exc}") from exc


def cmd_dist(args) -> int:
    try:
        obj = load_object(args.object)
    except ObjectSpecError as exc:
        raise ConfigError(str(exc)) from exc
    pose_a = _parse_pose(args.pose_a)
    pose_b = _parse_pose(args.pose_b)
    from .geometry import pose_distance

    d = pose_distance(pose_a, pose_b, obj)
    verdict = "accept" if d < obj.accept_radius else "reject"
    print(f"distance_m: {d:.9f}")
    print(f"threshold_m: {obj.accept_radius:.9f}")
    print(f"verdict: {verdict}")
    return 0


# ---------------------------------------------------------------------------
# parser / entry point
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="gridpose",
        description="Grid-cell 6D pose toolkit: synthetic data, training, evaluation.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a synthetic depth dataset")
    p.add_argument("--config", required=True, help="scene generation config (JSON)")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--count", type=int, required=True, help="number of scenes")
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="train the miniature regressor on a dataset")
    p.add_argument("--dataset", required=True)
    p.add_argument("--config", required=True, help="model/train config (JSON)")
    p.add_argument("--out", required=True, help="checkpoint output path")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--loss", choices=["ori1", "ori2"], default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="decode pose hypotheses for a dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True, help="prediction output directory")
    p.add_argument("--p-min", type=float, default=0.5)
    p.add_argument("--v-min", type=float, default=0.5)
    p.add_argument("--dedup", action="store_true", help="remove near-duplicate detections")
    p.add_argument("--dedup-radius", type=float, default=0.1)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("eval", help="score predictions against ground truth")
    p.add_argument("--predictions", required=True)
    p.add_argument("--gt", required=True, help="dataset directory with ground-truth scenes")
    p.add_argument("--object", required=True, help="object definition file")
    p.add_argument("--out", required=True, help="report output path (JSON)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("dist", help="symmetry-aware distance between two poses")
    p.add_argument("--object", required=True)
    p.add_argument("--pose-a", required=True, help="pose JSON (inline or file path)")
    p.add_argument("--pose-b", required=True, help="pose JSON (inline or file path)")
    p.set_defaults(func=cmd_dist)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (FormatError, ObjectSpecError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # runtime failures: divergence, congestion, IO
        print(f"failure: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
