"""Command-line interface for the dataset, feature, training and report flows."""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import replace

import numpy as np

from .errors import MisalignError
from .features import FeatureConfig, SinkhornParams
from .geometry import atomic_write_text, load_cloud, save_cloud
from .harness import (
    DatasetConfig,
    IcpParams,
    SceneSpec,
    build_dataset,
    load_manifest,
    parse_config,
    random_scene_specs,
    worker_count,
)
from .metrics import confusion_to_csv, save_report
from .models import TrainConfig, load_model, save_history_csv, save_model
from .pipeline import (
    binary_eval,
    coral_baseline,
    correct_map,
    evaluate_dataset,
    featurize_dataset,
    metric_study,
    train_from_dataset,
)
from .preprocess import RadiusParams, covisibility_scores

__all__ = ["main"]


def _typed(cfg: dict, key: str, cast, default):
    if key not in cfg:
        return default
    value = cfg[key]
    if cast is bool:
        return value.lower() in ("1", "true", "yes")
    return cast(value)


def _scene_template(cfg: dict) -> SceneSpec:
    base = SceneSpec()
    return replace(
        base,
        extent=_typed(cfg, "extent", float, base.extent),
        plane_count=_typed(cfg, "plane_count", int, base.plane_count),
        wall_height=_typed(cfg, "wall_height", float, base.wall_height),
        box_count=_typed(cfg, "box_count", int, base.box_count),
        box_size_min=_typed(cfg, "box_size_min", float, base.box_size_min),
        box_size_max=_typed(cfg, "box_size_max", float, base.box_size_max),
        vertical_angular_resolution=_typed(cfg, "alpha", float, base.vertical_angular_resolution),
        horizontal_resolution=_typed(cfg, "horizontal_resolution", float, base.horizontal_resolution),
        elev_min=_typed(cfg, "elev_min", float, base.elev_min),
        elev_max=_typed(cfg, "elev_max", float, base.elev_max),
        max_range=_typed(cfg, "max_range", float, base.max_range),
        sensor_height=_typed(cfg, "sensor_height", float, base.sensor_height),
        noise_sigma=_typed(cfg, "noise_sigma", float, base.noise_sigma),
    )


def _dataset_config(cfg: dict) -> DatasetConfig:
    base = DatasetConfig()
    icp = IcpParams(
        max_iters=_typed(cfg, "icp_max_iters", int, base.icp.max_iters),
        inlier_threshold=_typed(cfg, "icp_threshold", float, base.icp.inlier_threshold),
        max_source_points=_typed(cfg, "icp_max_source_points", int, base.icp.max_source_points),
    )
    choices = base.icp_iteration_choices
    if "icp_iteration_choices" in cfg:
        raw = cfg["icp_iteration_choices"].strip()
        choices = tuple(int(v) for v in raw.split(",")) if raw else ()
    return DatasetConfig(
        poses_per_scene=_typed(cfg, "poses_per_scene", int, base.poses_per_scene),
        pose_step=_typed(cfg, "pose_step", float, base.pose_step),
        icp=icp,
        init_translation_range=(
            _typed(cfg, "init_translation_min", float, base.init_translation_range[0]),
            _typed(cfg, "init_translation_max", float, base.init_translation_range[1]),
        ),
        init_rotation_range=(
            _typed(cfg, "init_rotation_min", float, base.init_rotation_range[0]),
            _typed(cfg, "init_rotation_max", float, base.init_rotation_range[1]),
        ),
        icp_iteration_choices=choices,
    )


def _feature_config(cfg: dict) -> FeatureConfig:
    base = FeatureConfig()
    radius = RadiusParams(
        k=_typed(cfg, "radius_k", float, base.radius.k),
        r_min=_typed(cfg, "r_min", float, base.radius.r_min),
        r_max=_typed(cfg, "r_max", float, base.radius.r_max),
    )
    sinkhorn = SinkhornParams(
        epsilon_reg=_typed(cfg, "sinkhorn_epsilon", float, base.sinkhorn.epsilon_reg),
        max_iters=_typed(cfg, "sinkhorn_max_iters", int, base.sinkhorn.max_iters),
        tolerance=_typed(cfg, "sinkhorn_tolerance", float, base.sinkhorn.tolerance),
    )
    return FeatureConfig(
        fps_count=_typed(cfg, "fps_count", int, base.fps_count),
        flip_radius_factor=_typed(cfg, "flip_radius_factor", float, base.flip_radius_factor),
        radius=radius,
        sinkhorn=sinkhorn,
        min_neighborhood=_typed(cfg, "min_neighborhood", int, base.min_neighborhood),
        cov_lambda=_typed(cfg, "cov_lambda", float, base.cov_lambda),
        sinkhorn_max_members=_typed(cfg, "sinkhorn_max_members", int, base.sinkhorn_max_members),
        sinkhorn_mode=_typed(cfg, "sinkhorn_mode", str, base.sinkhorn_mode),
    )


def _train_config(cfg: dict, loss: str, num_classes: int, seed: int) -> TrainConfig:
    base = TrainConfig()
    hidden = cfg.get("hidden")
    hidden_sizes = tuple(int(v) for v in hidden.split(",")) if hidden else base.hidden
    return TrainConfig(
        loss=loss,
        num_classes=num_classes,
        hidden=hidden_sizes,
        epochs=_typed(cfg, "epochs", int, base.epochs),
        batch_size=_typed(cfg, "batch_size", int, base.batch_size),
        learning_rate=_typed(cfg, "learning_rate", float, base.learning_rate),
        lr_step=_typed(cfg, "lr_step", int, base.lr_step),
        lr_gamma=_typed(cfg, "lr_gamma", float, base.lr_gamma),
        weight_decay=_typed(cfg, "weight_decay", float, base.weight_decay),
        seed=seed,
    )


def _load_cfg(args) -> dict:
    return parse_config(args.config) if args.config else {}


def _write_json(path: str, payload: dict) -> None:
    atomic_write_text(path, json.dumps(payload, sort_keys=True, indent=2) + "\n")


def _cmd_gen_scenes(args) -> int:
    cfg = _load_cfg(args)
    template = _scene_template(cfg)
    specs = random_scene_specs(args.count, args.seed, template)
    os.makedirs(args.out, exist_ok=True)
    payload = [s.to_json_dict() for s in specs]
    _write_json(os.path.join(args.out, "scenes.json"), {"scenes": payload})
    print(f"wrote {len(specs)} scene specs to {args.out}/scenes.json")
    return 0


def _read_scenes(path: str) -> list[SceneSpec]:
    scene_file = path if path.endswith(".json") else os.path.join(path, "scenes.json")
    with open(scene_file) as fh:
        payload = json.load(fh)
    return [SceneSpec.from_json_dict(d) for d in payload["scenes"]]


def _cmd_build_dataset(args) -> int:
    cfg = _load_cfg(args)
    specs = _read_scenes(args.scenes)
    manifest = build_dataset(specs, args.scheme, args.out, args.seed, _dataset_config(cfg))
    print(f"dataset {args.scheme}: {len(manifest.entries)} pairs, "
          f"class histogram {manifest.class_histogram}")
    for warning in manifest.warnings:
        print(f"warning: {warning}", file=sys.stderr)
    return 0


def _cmd_featurize(args) -> int:
    cfg = _load_cfg(args)
    paths = featurize_dataset(args.dataset, args.out, _feature_config(cfg), args.workers)
    print(f"wrote {len(paths)} feature maps to {args.out}")
    return 0


def _cmd_train(args) -> int:
    cfg = _load_cfg(args)
    manifest = load_manifest(args.dataset)
    num_classes = 10 if manifest.scheme == "synthetic10" else 5
    config = _train_config(cfg, args.loss, num_classes, args.seed)
    model, history = train_from_dataset(args.dataset, args.features, config)
    save_model(model, args.out)
    save_history_csv(history, os.path.splitext(args.out)[0] + "_history.csv")
    best = min(h["val_loss"] for h in history)
    print(f"trained {args.loss} model for {config.epochs} epochs, "
          f"best val loss {best:.6f}, saved to {args.out}")
    return 0


def _read_predictions(path: str) -> dict[str, int]:
    preds = {}
    with open(path) as fh:
        header = fh.readline()
        if "pair_id" not in header:
            raise ValueError("predictions CSV must start with a pair_id header")
        for line in fh:
            if not line.strip():
                continue
            pair_id, value = line.strip().split(",")[:2]
            preds[pair_id] = int(value)
    return preds


def _cmd_eval(args) -> int:
    model = load_model(args.model) if args.model else None
    predictions = _read_predictions(args.predictions) if args.predictions else None
    report, entries, pred, true = evaluate_dataset(
        args.dataset, args.features, model, args.split, predictions
    )
    os.makedirs(args.out_dir, exist_ok=True)
    save_report(report, os.path.join(args.out_dir, "report.json"))
    confusion_to_csv(report.confusion, os.path.join(args.out_dir, "confusion.csv"))
    rows = ["pair_id,predicted,true"]
    rows += [f"{e['pair_id']},{p},{t}" for e, p, t in zip(entries, pred, true)]
    atomic_write_text(os.path.join(args.out_dir, "predictions.csv"), "\n".join(rows) + "\n")
    xi_text = " ".join(f"xi_{k + 1}={v:.4f}" for k, v in enumerate(report.xi))
    print(f"accuracy={report.accuracy:.4f} {xi_text}")
    return 0


def _parse_classes(text: str) -> tuple[int, int]:
    parts = text.split(",")
    if len(parts) != 2:
        raise ValueError("expected two comma-separated class indices")
    a, b = sorted(int(p) for p in parts)
    return a, b


def _cmd_binary_eval(args) -> int:
    model = load_model(args.model)
    result = binary_eval(args.dataset, args.features, model, _parse_classes(args.classes), args.split)
    _write_json(args.out, result)
    print(f"binary task {result['classes']}: accuracy={result['accuracy']:.4f} "
          f"over {result['count']} pairs")
    return 0


def _cmd_coral_baseline(args) -> int:
    cfg = _load_cfg(args)
    radius = RadiusParams(
        k=_typed(cfg, "radius_k", float, 5.0),
        r_min=_typed(cfg, "r_min", float, 0.5),
        r_max=_typed(cfg, "r_max", float, 7.5),
    )
    result = coral_baseline(args.dataset, _parse_classes(args.classes), radius, args.workers)
    _write_json(args.out, result)
    print(f"coral baseline {result['classes']}: accuracy={result['accuracy']:.4f} "
          f"over {result['test_count']} test pairs")
    return 0


def _cmd_metric_study(args) -> int:
    cfg = _load_cfg(args)
    model = load_model(args.model)
    sinkhorn = SinkhornParams(
        epsilon_reg=_typed(cfg, "sinkhorn_epsilon", float, 0.01),
        max_iters=_typed(cfg, "sinkhorn_max_iters", int, 200),
        tolerance=_typed(cfg, "sinkhorn_tolerance", float, 1e-6),
    )
    summary = metric_study(
        args.dataset, args.features, model, args.out_dir, args.split,
        _typed(cfg, "metric_fps", int, 1024), sinkhorn,
    )
    for name, r in sorted(summary["correlations"].items()):
        shown = "nan" if r is None else f"{r:+.3f}"
        print(f"pearson({name}, label) = {shown}")
    return 0


def _cmd_correct_map(args) -> int:
    model = load_model(args.model)
    result = correct_map(args.dataset, args.features, model, args.threshold, args.split)
    _write_json(args.out, result)
    before = result["mean_epsilon_before"]
    after = result["mean_epsilon_after"]
    reduction = 0.0 if before == 0 else 100.0 * (1.0 - after / before)
    print(f"corrected {result['corrected_count']}/{result['count']} poses "
          f"({100 * result['corrected_fraction']:.1f}%), mean error "
          f"{before:.4f} -> {after:.4f} m ({reduction:.1f}% reduction)")
    return 0


def _cmd_visibility(args) -> int:
    cloud = load_cloud(args.cloud)
    viewpoint = (
        np.array([float(v) for v in args.viewpoint.split(",")])
        if args.viewpoint
        else cloud.sensor_position
    )
    result = covisibility_scores(cloud.points, viewpoint, args.flip_radius_factor)
    quality = np.where(result.visible_mask, np.nan_to_num(result.covis_score), -1.0)
    save_cloud(cloud, args.out, quality=quality)
    visible = int(result.visible_mask.sum())
    print(f"{visible}/{len(cloud)} points visible; wrote {args.out}")
    return 0


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="misalign",
        description="Misalignment classification toolkit for registered point cloud pairs",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--seed", type=int, default=0, help="master RNG seed")
        p.add_argument("--config", help="key=value configuration file")

    p = sub.add_parser("gen-scenes", help="generate randomized scene specs")
    common(p)
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, default=10)
    p.set_defaults(func=_cmd_gen_scenes)

    p = sub.add_parser("build-dataset", help="scan scenes and build registered pairs")
    common(p)
    p.add_argument("--scenes", required=True, help="scene directory or scenes.json")
    p.add_argument("--scheme", choices=("synthetic10", "epsilon5"), required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_build_dataset)

    p = sub.add_parser("featurize", help="extract feature maps for every pair")
    common(p)
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--workers", type=int, default=None)
    p.set_defaults(func=_cmd_featurize)

    p = sub.add_parser("train", help="train the pooled-feature classifier")
    common(p)
    p.add_argument("--dataset", required=True)
    p.add_argument("--features", required=True)
    p.add_argument("--loss", choices=("rbc", "regression", "ce-only"), default="rbc")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval", help="evaluate a model or stored predictions")
    common(p)
    p.add_argument("--dataset", required=True)
    p.add_argument("--features", required=True)
    p.add_argument("--model")
    p.add_argument("--predictions", help="CSV of pair_id,predicted")
    p.add_argument("--split", default="test", choices=("train", "val", "test", "all"))
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("binary-eval", help="map multinomial predictions to a binary task")
    common(p)
    p.add_argument("--dataset", required=True)
    p.add_argument("--features", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--classes", required=True, help="two class indices, e.g. 0,3")
    p.add_argument("--split", default="test", choices=("train", "val", "test", "all"))
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_binary_eval)

    p = sub.add_parser("coral-baseline", help="aggregate-entropy logistic baseline")
    common(p)
    p.add_argument("--dataset", required=True)
    p.add_argument("--classes", required=True, help="two class indices, e.g. 0,1")
    p.add_argument("--workers", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_coral_baseline)

    p = sub.add_parser("metric-study", help="whole-cloud metrics vs registration error")
    common(p)
    p.add_argument("--dataset", required=True)
    p.add_argument("--features", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--split", default="test", choices=("train", "val", "test", "all"))
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=_cmd_metric_study)

    p = sub.add_parser("correct-map", help="reset poses predicted as badly misaligned")
    common(p)
    p.add_argument("--dataset", required=True)
    p.add_argument("--features", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--threshold", type=int, default=3)
    p.add_argument("--split", default="all", choices=("train", "val", "test", "all"))
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_correct_map)

    p = sub.add_parser("visibility", help="export a visibility-scored PLY")
    common(p)
    p.add_argument("--cloud", required=True, help="input PLY path")
    p.add_argument("--viewpoint", help="x,y,z (defaults to the sensor position)")
    p.add_argument("--flip-radius-factor", type=float, default=100.0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_visibility)

    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except MisalignError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (OSError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
