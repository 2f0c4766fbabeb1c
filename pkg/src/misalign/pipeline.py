"""End-to-end workflows over datasets: featurize, train, evaluate, correct.

These functions are the library-level implementations behind the command-line
tool; each takes explicit directories and configuration objects so they are
directly scriptable as well.
"""

from __future__ import annotations

import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from .features import (
    FeatureConfig,
    FeatureMap,
    SinkhornParams,
    extract_pair_features,
    load_feature_map,
    save_feature_map,
    sinkhorn_divergence,
)
from .geometry import atomic_write_text
from .harness import (
    DatasetManifest,
    entries_for_split,
    load_manifest,
    load_pair,
    worker_count,
)
from .metrics import (
    EvalReport,
    binary_accuracy,
    chamfer,
    confusion_to_csv,
    correction_selection,
    evaluate_predictions,
    hausdorff,
    pearson,
    save_report,
    scatter_to_csv,
)
from .models import (
    CoralModel,
    MlpParams,
    TrainConfig,
    TrainingSet,
    coral_fit,
    coral_predict,
    predict_class,
    train_mlp,
)
from .preprocess import RadiusParams, farthest_point_sampling

__all__ = [
    "featurize_dataset",
    "feature_map_path",
    "load_split_features",
    "training_sets",
    "train_from_dataset",
    "evaluate_dataset",
    "binary_eval",
    "coral_features_for_entries",
    "coral_baseline",
    "metric_study",
    "correct_map",
    "save_scatter_svg",
]


def feature_map_path(features_dir: str, pair_id: str) -> str:
    return os.path.join(features_dir, f"{pair_id}.fmap")


def _featurize_one(args) -> str:
    entry, dataset_dir, features_dir, config = args
    pair = load_pair(entry, dataset_dir)
    fm = extract_pair_features(pair, config)
    path = feature_map_path(features_dir, entry["pair_id"])
    save_feature_map(fm, path)
    return path


def featurize_dataset(
    dataset_dir: str,
    features_dir: str,
    config: FeatureConfig = FeatureConfig(),
    workers: int | None = None,
) -> list[str]:
    """Extract and store a feature map for every pair of a dataset."""
    manifest = load_manifest(dataset_dir)
    os.makedirs(features_dir, exist_ok=True)
    jobs = [(e, dataset_dir, features_dir, config) for e in manifest.entries]
    if workers is None:
        workers = worker_count()
    if workers <= 1 or len(jobs) <= 1:
        return [_featurize_one(job) for job in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_featurize_one, jobs, chunksize=4))


def load_split_features(
    manifest: DatasetManifest, features_dir: str, split: str
) -> tuple[list[dict], list[FeatureMap]]:
    entries = entries_for_split(manifest, split)
    maps = [load_feature_map(feature_map_path(features_dir, e["pair_id"])) for e in entries]
    return entries, maps


def training_sets(
    manifest: DatasetManifest, features_dir: str
) -> dict[str, TrainingSet]:
    out = {}
    for split in ("train", "val", "test"):
        entries, maps = load_split_features(manifest, features_dir, split)
        eps = [e["epsilon"] for e in entries]
        if maps:
            out[split] = TrainingSet.from_feature_maps(maps, eps)
        else:
            out[split] = TrainingSet(np.empty((0, 1)), np.empty(0, dtype=int), np.empty(0))
    return out


def train_from_dataset(
    dataset_dir: str, features_dir: str, config: TrainConfig
) -> tuple[MlpParams, list[dict]]:
    manifest = load_manifest(dataset_dir)
    sets = training_sets(manifest, features_dir)
    return train_mlp(sets["train"], sets["val"], config)


def evaluate_dataset(
    dataset_dir: str,
    features_dir: str,
    model: MlpParams | None,
    split: str = "test",
    predictions: dict[str, int] | None = None,
) -> tuple[EvalReport, list[dict], np.ndarray, np.ndarray]:
    """Report for a split, predicting with a model or a supplied mapping."""
    manifest = load_manifest(dataset_dir)
    entries, maps = load_split_features(manifest, features_dir, split)
    true = np.array([e["label"] for e in entries], dtype=int)
    if predictions is not None:
        pred = np.array([predictions[e["pair_id"]] for e in entries], dtype=int)
    else:
        if model is None:
            raise ValueError("need a model or a predictions mapping")
        pred = np.array([predict_class(model, fm) for fm in maps], dtype=int)
    m = 10 if manifest.scheme == "synthetic10" else 5
    report = evaluate_predictions(pred, true, m)
    return report, entries, pred, true


def binary_eval(
    dataset_dir: str,
    features_dir: str,
    model: MlpParams,
    classes: tuple[int, int],
    split: str = "test",
) -> dict:
    """Fractional-credit binary accuracy on pairs whose labels match the task."""
    manifest = load_manifest(dataset_dir)
    entries, maps = load_split_features(manifest, features_dir, split)
    keep = [i for i, e in enumerate(entries) if e["label"] in classes]
    if not keep:
        raise ValueError(f"no pairs with labels {classes} in split {split!r}")
    true = np.array([entries[i]["label"] for i in keep], dtype=int)
    pred = np.array([predict_class(model, maps[i]) for i in keep], dtype=int)
    acc = binary_accuracy(pred, true, classes)
    return {
        "classes": list(classes),
        "split": split,
        "count": len(keep),
        "accuracy": float(acc),
    }


def _coral_one(args):
    entry, dataset_dir, radius = args
    from .features import coral_pair_features

    pair = load_pair(entry, dataset_dir)
    return coral_pair_features(pair, radius)


def coral_features_for_entries(
    entries: list[dict],
    dataset_dir: str,
    radius: RadiusParams = RadiusParams(),
    workers: int | None = None,
) -> np.ndarray:
    """(H_joint, H_sep) feature rows for a list of manifest entries."""
    jobs = [(e, dataset_dir, radius) for e in entries]
    if workers is None:
        workers = worker_count()
    if workers <= 1 or len(jobs) <= 1:
        rows = [_coral_one(job) for job in jobs]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(_coral_one, jobs, chunksize=4))
    return np.array(rows)


def coral_baseline(
    dataset_dir: str,
    classes: tuple[int, int],
    radius: RadiusParams = RadiusParams(),
    workers: int | None = None,
) -> dict:
    """Fit and test the aggregate-entropy logistic baseline on a binary task.

    Pairs with the lower class count as aligned (0), the higher as misaligned
    (1). The model is fit on the train split and scored on the test split.
    """
    manifest = load_manifest(dataset_dir)
    c_low, c_high = classes

    def subset(split):
        entries = [e for e in entries_for_split(manifest, split) if e["label"] in classes]
        labels = np.array([1.0 if e["label"] == c_high else 0.0 for e in entries])
        return entries, labels

    train_entries, train_labels = subset("train")
    test_entries, test_labels = subset("test")
    if not train_entries or not test_entries:
        raise ValueError("binary task has empty train or test subset")
    x_train = coral_features_for_entries(train_entries, dataset_dir, radius, workers)
    x_test = coral_features_for_entries(test_entries, dataset_dir, radius, workers)
    model = coral_fit(x_train, train_labels)
    prob = coral_predict(model, x_test)
    pred = (prob >= 0.5).astype(float)
    acc = float((pred == test_labels).mean())
    return {
        "classes": list(classes),
        "train_count": len(train_entries),
        "test_count": len(test_entries),
        "accuracy": acc,
        "weight": [float(v) for v in model.weight],
        "bias": float(model.bias),
    }


def _full_cloud_sinkhorn(pair, fps_cap: int, params: SinkhornParams) -> float:
    a = pair.cloud0.points
    b = pair.cloud1_in_common_frame()
    if a.shape[0] > fps_cap:
        a = a[farthest_point_sampling(a, fps_cap)]
    if b.shape[0] > fps_cap:
        b = b[farthest_point_sampling(b, fps_cap)]
    wa = np.full(a.shape[0], 1.0 / a.shape[0])
    wb = np.full(b.shape[0], 1.0 / b.shape[0])
    return sinkhorn_divergence(a, wa, b, wb, params)


def metric_study(
    dataset_dir: str,
    features_dir: str,
    model: MlpParams,
    out_dir: str,
    split: str = "test",
    metric_fps: int = 1024,
    sinkhorn_params: SinkhornParams = SinkhornParams(),
) -> dict:
    """Correlate whole-cloud metrics and residuals against the true labels.

    For every pair of the split this computes the Chamfer distance, Hausdorff
    distance, subsampled full-cloud Sinkhorn divergence, and collects the
    stored ICP fitness and inlier RMSE, then compares each metric's label
    correlation against the trained model's. Scatter CSVs and an SVG figure
    land in ``out_dir``.
    """
    manifest = load_manifest(dataset_dir)
    entries, maps = load_split_features(manifest, features_dir, split)
    if not entries:
        raise ValueError(f"split {split!r} is empty")
    os.makedirs(out_dir, exist_ok=True)
    true = np.array([e["label"] for e in entries], dtype=float)
    eps = np.array([e["epsilon"] for e in entries], dtype=float)

    columns: dict[str, np.ndarray] = {}
    chamfer_vals, hausdorff_vals, sink_vals = [], [], []
    for entry in entries:
        pair = load_pair(entry, dataset_dir)
        pts1 = pair.cloud1_in_common_frame()
        chamfer_vals.append(chamfer(pair.cloud0.points, pts1))
        hausdorff_vals.append(hausdorff(pair.cloud0.points, pts1))
        sink_vals.append(_full_cloud_sinkhorn(pair, metric_fps, sinkhorn_params))
    columns["chamfer"] = np.array(chamfer_vals)
    columns["hausdorff"] = np.array(hausdorff_vals)
    columns["sinkhorn"] = np.array(sink_vals)
    if all("fitness" in e for e in entries):
        columns["fitness"] = np.array([e["fitness"] for e in entries], dtype=float)
        columns["inlier_rmse"] = np.array([e["inlier_rmse"] for e in entries], dtype=float)
    pred = np.array([predict_class(model, fm) for fm in maps], dtype=float)
    columns["model_prediction"] = pred

    summary = {"split": split, "count": len(entries), "correlations": {}}
    for name, values in columns.items():
        scatter_to_csv(
            list(zip(values, eps)),
            os.path.join(out_dir, f"{name}_vs_epsilon.csv"),
            header=f"{name},epsilon",
        )
        try:
            r = pearson(values, true)
        except Exception:
            r = float("nan")
        summary["correlations"][name] = None if np.isnan(r) else float(r)
    save_scatter_svg(
        {name: (eps, values) for name, values in columns.items() if name != "model_prediction"},
        os.path.join(out_dir, "metrics_vs_epsilon.svg"),
    )
    atomic_write_text(
        os.path.join(out_dir, "metric_study.json"),
        json.dumps(summary, sort_keys=True, indent=2) + "\n",
    )
    return summary


def correct_map(
    dataset_dir: str,
    features_dir: str,
    model: MlpParams,
    threshold_class: int = 3,
    split: str = "all",
) -> dict:
    """Replace poses predicted at or above the threshold with ground truth.

    Corrected pairs contribute zero registration error; the report compares
    the mean error before and after.
    """
    manifest = load_manifest(dataset_dir)
    entries, maps = load_split_features(manifest, features_dir, split)
    if not entries:
        raise ValueError(f"split {split!r} is empty")
    pred = np.array([predict_class(model, fm) for fm in maps], dtype=int)
    eps = np.array([e["epsilon"] for e in entries], dtype=float)
    selected = correction_selection(pred, threshold_class)
    corrected = eps.copy()
    corrected[selected] = 0.0
    return {
        "split": split,
        "threshold_class": threshold_class,
        "count": len(entries),
        "corrected_count": int(selected.size),
        "corrected_fraction": float(selected.size / len(entries)),
        "mean_epsilon_before": float(eps.mean()),
        "mean_epsilon_after": float(corrected.mean()),
        "selected_pair_ids": [entries[i]["pair_id"] for i in selected],
    }


def save_scatter_svg(columns: dict[str, tuple[np.ndarray, np.ndarray]], path: str) -> None:
    """Small-multiple scatter plots of metrics against the registration error."""
    import matplotlib

    matplotlib.use("Agg")
    matplotlib.rcParams["svg.hashsalt"] = "misalign"
    import matplotlib.pyplot as plt

    names = list(columns)
    fig, axes = plt.subplots(1, max(1, len(names)), figsize=(4 * max(1, len(names)), 3.2))
    if len(names) == 1:
        axes = [axes]
    for ax, name in zip(axes, names):
        x, y = columns[name]
        ax.scatter(x, y, s=8, alpha=0.6)
        ax.set_xlabel("registration error [m]")
        ax.set_ylabel(name)
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
