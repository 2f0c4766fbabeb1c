"""Synthetic scenes, simulated lidar scans, minimal ICP and dataset assembly.

Scenes are boxes and axis-aligned planes inside a square room. Scans ray-cast
a spinning-lidar pattern (elevation rings spaced by the vertical angular
resolution, uniform azimuth) and store first hits in the sensor frame, with
optional Gaussian range noise. Datasets pair consecutive poses of short
trajectories; misalignment comes either from the ten synthetic perturbation
classes or from ICP registrations started at randomized initializations.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, replace
from typing import NamedTuple, Sequence

import numpy as np

from .errors import EmptyScanError, NoCorrespondencesError
from .geometry import (
    EPSILON_BIN_EDGES,
    PerturbationSpec,
    PointCloud,
    RegisteredPair,
    RigidTransform,
    SYNTHETIC_CLASS_COUNT,
    atomic_write_text,
    bin_epsilon,
    load_cloud,
    pair_from_manifest,
    pair_to_manifest,
    perturbation_transform,
    point_transformation_error,
    save_cloud,
    synthetic_class_spec,
)

__all__ = [
    "SceneSpec",
    "Box",
    "build_scene",
    "generate_scene_scan",
    "trajectory_poses",
    "IcpParams",
    "IcpResult",
    "icp_point2point",
    "scan_pattern",
    "DatasetConfig",
    "DatasetManifest",
    "build_dataset",
    "load_manifest",
    "entries_for_split",
    "load_pair",
    "worker_count",
    "parse_config",
    "random_scene_specs",
]

_SPLIT_NAMES = ("train", "val", "test")


@dataclass(frozen=True)
class SceneSpec:
    """Parameters of one generated scene and its lidar."""

    rng_seed: int = 0
    extent: float = 40.0
    plane_count: int = 5            # ground plus up to four walls
    wall_height: float = 4.0
    box_count: int = 12
    box_size_min: float = 0.6
    box_size_max: float = 3.0
    vertical_angular_resolution: float = 0.0175
    horizontal_resolution: float = 0.0175
    elev_min: float = -0.42
    elev_max: float = 0.08
    max_range: float = 60.0
    sensor_height: float = 1.5
    noise_sigma: float = 0.02

    def __post_init__(self):
        if self.extent <= 0 or self.vertical_angular_resolution <= 0:
            raise ValueError("extent and angular resolution must be positive")
        if self.horizontal_resolution <= 0 or self.max_range <= 0:
            raise ValueError("horizontal resolution and max range must be positive")
        if self.plane_count < 1:
            raise ValueError("at least the ground plane is required")

    def to_json_dict(self) -> dict:
        return {k: (int(v) if isinstance(v, (int, np.integer)) else float(v))
                for k, v in self.__dict__.items()}

    @staticmethod
    def from_json_dict(d: dict) -> "SceneSpec":
        kwargs = dict(d)
        kwargs["rng_seed"] = int(kwargs.get("rng_seed", 0))
        kwargs["plane_count"] = int(kwargs.get("plane_count", 5))
        kwargs["box_count"] = int(kwargs.get("box_count", 12))
        return SceneSpec(**kwargs)


@dataclass(frozen=True)
class Box:
    """A yaw-rotated box primitive."""

    center: np.ndarray
    half_sizes: np.ndarray
    yaw: float

    def rotation(self) -> np.ndarray:
        c, s = np.cos(self.yaw), np.sin(self.yaw)
        return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def build_scene(spec: SceneSpec) -> list[Box]:
    """Deterministic primitive list for a scene spec.

    The ground and walls are thin boxes, so a single ray-box intersector
    covers everything.
    """
    rng = np.random.default_rng(np.random.PCG64([spec.rng_seed, 0xACE]))
    half = spec.extent / 2.0
    thin = 0.05
    prims = [Box(np.array([0.0, 0.0, -thin]), np.array([half, half, thin]), 0.0)]
    wall_defs = [
        (np.array([half, 0.0, spec.wall_height / 2]), np.array([thin, half, spec.wall_height / 2])),
        (np.array([-half, 0.0, spec.wall_height / 2]), np.array([thin, half, spec.wall_height / 2])),
        (np.array([0.0, half, spec.wall_height / 2]), np.array([half, thin, spec.wall_height / 2])),
        (np.array([0.0, -half, spec.wall_height / 2]), np.array([half, thin, spec.wall_height / 2])),
    ]
    for center, half_sizes in wall_defs[: max(0, spec.plane_count - 1)]:
        prims.append(Box(center, half_sizes, 0.0))
    for _ in range(spec.box_count):
        sizes = rng.uniform(spec.box_size_min, spec.box_size_max, size=3)
        center_xy = rng.uniform(-0.8 * half, 0.8 * half, size=2)
        yaw = rng.uniform(0.0, np.pi)
        prims.append(Box(np.array([center_xy[0], center_xy[1], sizes[2] / 2.0]),
                         sizes / 2.0, yaw))
    return prims


def _ray_box_hits(origin: np.ndarray, directions: np.ndarray, box: Box) -> np.ndarray:
    """Entry parameter t per ray for one box (inf where the ray misses)."""
    rot = box.rotation()
    o = rot.T @ (origin - box.center)
    d = directions @ rot
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / d
        t1 = (-box.half_sizes - o) * inv
        t2 = (box.half_sizes - o) * inv
    # Rays parallel to a slab axis hit only if the origin lies inside the slab.
    lo = np.where(np.isnan(t1), -np.inf, np.minimum(t1, t2))
    hi = np.where(np.isnan(t2), np.inf, np.maximum(t1, t2))
    parallel = d == 0.0
    inside = np.abs(o)[None, :] <= box.half_sizes[None, :]
    lo = np.where(parallel & ~inside, np.inf, lo)
    hi = np.where(parallel & ~inside, -np.inf, hi)
    t_near = lo.max(axis=1)
    t_far = hi.min(axis=1)
    hit = (t_far >= t_near) & (t_far > 0.0)
    t = np.where(t_near > 0.0, t_near, t_far)
    return np.where(hit, t, np.inf)


def scan_pattern(spec: SceneSpec) -> tuple[np.ndarray, np.ndarray]:
    """Elevation rings (spaced by the vertical resolution) and azimuth steps."""
    n_rings = int(np.floor((spec.elev_max - spec.elev_min) / spec.vertical_angular_resolution)) + 1
    elev = spec.elev_min + spec.vertical_angular_resolution * np.arange(n_rings)
    azim = np.arange(0.0, 2.0 * np.pi, spec.horizontal_resolution)
    return elev, azim


def generate_scene_scan(
    spec: SceneSpec,
    sensor_pose: RigidTransform,
    primitives: list[Box] | None = None,
    rng: np.random.Generator | None = None,
) -> PointCloud:
    """Simulate one scan from a pose; points are stored in the sensor frame."""
    if primitives is None:
        primitives = build_scene(spec)
    elev, azim = scan_pattern(spec)
    el, az = np.meshgrid(elev, azim, indexing="ij")
    ce = np.cos(el.ravel())
    dirs_sensor = np.stack(
        [ce * np.cos(az.ravel()), ce * np.sin(az.ravel()), np.sin(el.ravel())], axis=1
    )
    dirs_world = dirs_sensor @ sensor_pose.rotation.T
    origin = sensor_pose.translation

    t_hit = np.full(dirs_world.shape[0], np.inf)
    for box in primitives:
        np.minimum(t_hit, _ray_box_hits(origin, dirs_world, box), out=t_hit)
    valid = (t_hit > 0.05) & (t_hit <= spec.max_range)
    if not np.any(valid):
        raise EmptyScanError("no rays hit the scene")
    t = t_hit[valid]
    if spec.noise_sigma > 0.0:
        if rng is None:
            rng = np.random.default_rng(np.random.PCG64([spec.rng_seed, 0xD1CE]))
        t = t + rng.normal(0.0, spec.noise_sigma, size=t.shape)
    points = dirs_sensor[valid] * t[:, None]
    return PointCloud(points, RigidTransform.identity(), spec.vertical_angular_resolution)


def trajectory_poses(
    spec: SceneSpec, count: int, rng: np.random.Generator, step: float = 2.0
) -> list[RigidTransform]:
    """A short driving trajectory of level sensor poses inside the scene."""
    half = spec.extent / 2.0
    pos = rng.uniform(-0.4 * half, 0.4 * half, size=2)
    heading = rng.uniform(0.0, 2.0 * np.pi)
    poses = []
    for _ in range(count):
        rot = RigidTransform.from_axis_angle([0.0, 0.0, 1.0], heading).rotation
        poses.append(RigidTransform(rot, np.array([pos[0], pos[1], spec.sensor_height])))
        heading += rng.uniform(-0.35, 0.35)
        nxt = pos + step * np.array([np.cos(heading), np.sin(heading)])
        if np.abs(nxt).max() > 0.7 * half:
            # Steer back toward the room center instead of walking into a wall.
            heading = np.arctan2(-pos[1], -pos[0]) + rng.uniform(-0.3, 0.3)
            nxt = pos + step * np.array([np.cos(heading), np.sin(heading)])
        pos = nxt
    return poses


# ---------------------------------------------------------------------------
# Iterative closest point with a closed-form SVD update
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class IcpParams:
    max_iters: int = 40
    inlier_threshold: float = 1.0
    tolerance: float = 1e-8
    max_source_points: int = 3000


class IcpResult(NamedTuple):
    transform: RigidTransform
    fitness: float
    inlier_rmse: float
    iteration_errors: list
    converged: bool


def _best_rigid(a: np.ndarray, b: np.ndarray) -> RigidTransform:
    """Least-squares rigid transform with T(a) closest to b."""
    ca = a.mean(axis=0)
    cb = b.mean(axis=0)
    h = (a - ca).T @ (b - cb)
    u, _, vt = np.linalg.svd(h)
    d = np.sign(np.linalg.det(vt.T @ u.T))
    rot = vt.T @ np.diag([1.0, 1.0, d]) @ u.T
    return RigidTransform(rot, cb - rot @ ca)


def icp_point2point(
    source: PointCloud,
    target: PointCloud,
    init: RigidTransform,
    params: IcpParams = IcpParams(),
) -> IcpResult:
    """Classic point-to-point ICP from an initial transform.

    Correspondences are nearest neighbors within the inlier threshold; each
    iteration solves the closed-form rigid update over the inliers. Fitness is
    the final inlier fraction, the RMSE is over the final correspondences.
    """
    from scipy.spatial import cKDTree

    src = source.points
    if params.max_source_points and src.shape[0] > params.max_source_points:
        stride = int(np.ceil(src.shape[0] / params.max_source_points))
        src = src[::stride]
    tgt = target.points
    if src.shape[0] < 10 or tgt.shape[0] < 10:
        raise ValueError("ICP needs at least 10 points per cloud")
    tree = cKDTree(tgt)

    current = init
    errors: list[float] = []
    converged = False
    for it in range(params.max_iters):
        moved = current.apply(src)
        dist, idx = tree.query(moved)
        inliers = dist < params.inlier_threshold
        if not np.any(inliers):
            if it == 0:
                raise NoCorrespondencesError("no inliers at the initial transform")
            break
        errors.append(float(np.sqrt(np.mean(dist[inliers] ** 2))))
        update = _best_rigid(src[inliers], tgt[idx[inliers]])
        if update.is_close(current, params.tolerance):
            converged = True
            current = update
            break
        current = update

    moved = current.apply(src)
    dist, _ = tree.query(moved)
    inliers = dist < params.inlier_threshold
    fitness = float(np.mean(inliers))
    rmse = float(np.sqrt(np.mean(dist[inliers] ** 2))) if np.any(inliers) else float("inf")
    return IcpResult(current, fitness, rmse, errors, converged)


# ---------------------------------------------------------------------------
# Dataset assembly
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DatasetConfig:
    poses_per_scene: int = 3
    pose_step: float = 2.0
    icp: IcpParams = field(default_factory=IcpParams)
    # Initialization offsets for epsilon-binned registrations, log-uniform.
    init_translation_range: tuple[float, float] = (0.005, 1.6)
    init_rotation_range: tuple[float, float] = (0.002, 0.17)
    # Per-pair ICP iteration budgets; on clean simulated scenes the init
    # offsets alone give a bimodal error distribution (ICP either converges
    # or fails), so varying the budget realizes the intermediate error bins.
    icp_iteration_choices: tuple[int, ...] = (1, 2, 4, 8, 16, 40)


@dataclass
class DatasetManifest:
    scheme: str
    entries: list
    scene_splits: dict
    class_histogram: list
    warnings: list

    def to_json_dict(self) -> dict:
        return {
            "scheme": self.scheme,
            "entries": self.entries,
            "scene_splits": self.scene_splits,
            "class_histogram": self.class_histogram,
            "warnings": self.warnings,
        }


def random_scene_specs(count: int, seed: int, template: SceneSpec = SceneSpec()) -> list[SceneSpec]:
    """Scene specs with varied seeds and box counts from one master seed."""
    rng = np.random.default_rng(np.random.PCG64([seed, 0x5CE9E]))
    specs = []
    for i in range(count):
        specs.append(replace(
            template,
            rng_seed=int(rng.integers(0, 2**31 - 1)),
            box_count=int(rng.integers(max(3, template.box_count - 4),
                                       template.box_count + 5)),
        ))
    return specs


def _assign_splits(scene_ids: list[str], seed: int) -> dict:
    rng = np.random.default_rng(np.random.PCG64([seed, 0x59117]))
    order = list(scene_ids)
    rng.shuffle(order)
    n = len(order)
    n_train = int(round(0.60 * n))
    n_val = int(round(0.15 * n))
    splits = {}
    for i, sid in enumerate(order):
        if i < n_train:
            splits[sid] = "train"
        elif i < n_train + n_val:
            splits[sid] = "val"
        else:
            splits[sid] = "test"
    return splits


def _sample_init_offset(rng: np.random.Generator, config: DatasetConfig) -> RigidTransform:
    t_lo, t_hi = config.init_translation_range
    r_lo, r_hi = config.init_rotation_range
    magnitude = float(np.exp(rng.uniform(np.log(t_lo), np.log(t_hi))))
    angle = float(np.exp(rng.uniform(np.log(r_lo), np.log(r_hi))))
    heading = rng.uniform(0.0, 2.0 * np.pi)
    sign = 1.0 if rng.random() < 0.5 else -1.0
    offset = np.array([np.cos(heading), np.sin(heading), 0.0]) * magnitude
    rot = RigidTransform.from_axis_angle([0.0, 0.0, 1.0], sign * angle)
    return RigidTransform(rot.rotation, offset)


def build_dataset(
    scene_specs: Sequence[SceneSpec],
    scheme: str,
    out_dir: str,
    seed: int = 0,
    config: DatasetConfig = DatasetConfig(),
) -> DatasetManifest:
    """Generate scans and registered pairs for all scenes and write them out.

    ``synthetic10`` turns every consecutive-pose pair into ten pairs, one per
    perturbation class, folding the perturbation into the estimated transform.
    ``epsilon5`` registers each pair with ICP from a randomized initialization
    and bins the resulting point transformation error. Scenes are assigned
    whole to train/val/test splits at 60/15/25.
    """
    if scheme not in ("synthetic10", "epsilon5"):
        raise ValueError("scheme must be synthetic10 or epsilon5")
    os.makedirs(os.path.join(out_dir, "clouds"), exist_ok=True)
    num_classes = SYNTHETIC_CLASS_COUNT if scheme == "synthetic10" else len(EPSILON_BIN_EDGES)
    histogram = [0] * num_classes
    entries = []
    warnings = []
    scene_ids = [f"s{idx:03d}" for idx in range(len(scene_specs))]
    splits = _assign_splits(scene_ids, seed)

    for idx, spec in enumerate(scene_specs):
        sid = scene_ids[idx]
        scene_rng = np.random.default_rng(np.random.PCG64([seed, idx, 0xB0B]))
        prims = build_scene(spec)
        poses = trajectory_poses(spec, config.poses_per_scene, scene_rng, config.pose_step)
        clouds = []
        paths = []
        for k, pose in enumerate(poses):
            cloud = generate_scene_scan(spec, pose, prims, scene_rng)
            rel = os.path.join("clouds", f"{sid}_scan{k}.ply")
            save_cloud(cloud, os.path.join(out_dir, rel))
            clouds.append(cloud)
            paths.append(rel)

        for k in range(len(poses) - 1):
            gt = poses[k].inverse().compose(poses[k + 1])
            cloud0, cloud1 = clouds[k], clouds[k + 1]
            if scheme == "synthetic10":
                for cls in range(SYNTHETIC_CLASS_COUNT):
                    spec_seed = int(scene_rng.integers(0, 2**31 - 1))
                    pspec = synthetic_class_spec(cls, spec_seed)
                    perturbation = perturbation_transform(cloud1, pspec)
                    est = gt.compose(perturbation)
                    pair = RegisteredPair(cloud0, cloud1, gt, est, 0.0, cls, scheme)
                    eps = point_transformation_error(pair)
                    pair_id = f"{sid}_p{k:02d}_c{cls}"
                    entries.append(pair_to_manifest(
                        RegisteredPair(cloud0, cloud1, gt, est, eps, cls, scheme),
                        paths[k], paths[k + 1],
                        pair_id=pair_id, scene_id=sid, split=splits[sid],
                        theta=pspec.theta, e_d=pspec.e_d,
                    ))
                    histogram[cls] += 1
            else:
                offset = _sample_init_offset(scene_rng, config)
                init = gt.compose(offset)
                icp_params = config.icp
                if config.icp_iteration_choices:
                    icp_params = replace(
                        icp_params,
                        max_iters=int(scene_rng.choice(config.icp_iteration_choices)),
                    )
                result = icp_point2point(cloud1, cloud0, init, icp_params)
                pair = RegisteredPair(cloud0, cloud1, gt, result.transform, 0.0, 0, scheme)
                eps = point_transformation_error(pair)
                label = bin_epsilon(eps)
                pair_id = f"{sid}_p{k:02d}"
                entries.append(pair_to_manifest(
                    RegisteredPair(cloud0, cloud1, gt, result.transform, eps, label, scheme),
                    paths[k], paths[k + 1],
                    pair_id=pair_id, scene_id=sid, split=splits[sid],
                    fitness=result.fitness, inlier_rmse=result.inlier_rmse,
                ))
                histogram[label] += 1

    if scheme == "epsilon5":
        for cls, count in enumerate(histogram):
            if count == 0:
                warnings.append(f"class {cls} has no examples")

    manifest = DatasetManifest(scheme, entries, splits, histogram, warnings)
    atomic_write_text(
        os.path.join(out_dir, "manifest.json"),
        json.dumps(manifest.to_json_dict(), sort_keys=True, indent=2) + "\n",
    )
    return manifest


def load_manifest(dataset_dir: str) -> DatasetManifest:
    with open(os.path.join(dataset_dir, "manifest.json")) as fh:
        d = json.load(fh)
    return DatasetManifest(d["scheme"], d["entries"], d["scene_splits"],
                           d["class_histogram"], d["warnings"])


def entries_for_split(manifest: DatasetManifest, split: str) -> list[dict]:
    if split == "all":
        return list(manifest.entries)
    if split not in _SPLIT_NAMES:
        raise ValueError(f"unknown split {split!r}")
    return [e for e in manifest.entries if e["split"] == split]


def load_pair(entry: dict, dataset_dir: str) -> RegisteredPair:
    return pair_from_manifest(entry, dataset_dir)


def worker_count() -> int:
    """Worker cap from MISALIGN_THREADS, defaulting to the CPU count."""
    env = os.environ.get("MISALIGN_THREADS")
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


def parse_config(path: str) -> dict[str, str]:
    """Flat key=value config file; '#' starts a comment."""
    out: dict[str, str] = {}
    with open(path) as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected key=value")
            key, value = line.split("=", 1)
            out[key.strip()] = value.strip()
    return out
