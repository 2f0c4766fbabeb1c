"""Rigid-motion algebra, registration error metrics, perturbations and class binning.

Conventions used throughout the library:

* A point cloud's ``points`` live in the cloud's own coordinate frame and
  ``sensor_pose`` places the sensor inside that same frame (for raw scans the
  frame is the sensor frame and the pose is the identity).
* For a registered pair, ``gt_transform`` and ``est_transform`` both map
  cloud1's frame into cloud0's frame, so cloud0's frame is the common frame.
"""

from __future__ import annotations

import json
import os
import tempfile
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import EmptyCloudError, InvalidEpsilonError

__all__ = [
    "RigidTransform",
    "PointCloud",
    "RegisteredPair",
    "PerturbationSpec",
    "EPSILON_BIN_EDGES",
    "SYNTHETIC_CLASS_COUNT",
    "apply_transform",
    "point_transformation_error",
    "bin_epsilon",
    "synthetic_class_spec",
    "perturb",
    "perturbation_transform",
    "save_cloud",
    "load_cloud",
    "pair_to_manifest",
    "pair_from_manifest",
    "atomic_write_text",
]

_ORTHONORMAL_TOL = 1e-9

# Registration-error class edges in meters; the last bin is open above.
EPSILON_BIN_EDGES = (0.0, 0.03, 0.10, 0.25, 0.50)

SYNTHETIC_CLASS_COUNT = 10


def _as_points(points) -> np.ndarray:
    pts = np.asarray(points, dtype=float)
    if pts.ndim == 1 and pts.size == 3:
        pts = pts.reshape(1, 3)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise ValueError(f"expected (n, 3) points, got shape {pts.shape}")
    return pts


@dataclass(frozen=True)
class RigidTransform:
    """A rotation plus translation acting on 3-D points."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        rot = np.asarray(self.rotation, dtype=float).reshape(3, 3)
        tra = np.asarray(self.translation, dtype=float).reshape(3)
        if not np.all(np.isfinite(rot)) or not np.all(np.isfinite(tra)):
            raise ValueError("transform entries must be finite")
        err = np.abs(rot.T @ rot - np.eye(3)).max()
        if err > _ORTHONORMAL_TOL:
            raise ValueError(f"rotation not orthonormal (max deviation {err:.2e})")
        if abs(np.linalg.det(rot) - 1.0) > _ORTHONORMAL_TOL:
            raise ValueError("rotation must have determinant +1")
        rot.setflags(write=False)
        tra.setflags(write=False)
        object.__setattr__(self, "rotation", rot)
        object.__setattr__(self, "translation", tra)

    @staticmethod
    def identity() -> "RigidTransform":
        return RigidTransform(np.eye(3), np.zeros(3))

    @staticmethod
    def from_axis_angle(axis, angle: float, center=None) -> "RigidTransform":
        """Rotation by ``angle`` about ``axis`` through ``center`` (origin by default)."""
        axis = np.asarray(axis, dtype=float)
        norm = np.linalg.norm(axis)
        if norm == 0.0:
            raise ValueError("rotation axis must be nonzero")
        ux, uy, uz = axis / norm
        c, s = np.cos(angle), np.sin(angle)
        k = np.array([[0.0, -uz, uy], [uz, 0.0, -ux], [-uy, ux, 0.0]])
        rot = np.eye(3) + s * k + (1.0 - c) * (k @ k)
        if center is None:
            tra = np.zeros(3)
        else:
            center = np.asarray(center, dtype=float).reshape(3)
            tra = center - rot @ center
        return RigidTransform(rot, tra)

    def apply(self, points) -> np.ndarray:
        """Apply to one point (3,) or a stack of points (n, 3)."""
        pts = np.asarray(points, dtype=float)
        if pts.ndim == 1:
            return self.rotation @ pts + self.translation
        return pts @ self.rotation.T + self.translation

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """Return self after other, i.e. (self @ other)(p) = self(other(p))."""
        return RigidTransform(
            self.rotation @ other.rotation,
            self.rotation @ other.translation + self.translation,
        )

    def inverse(self) -> "RigidTransform":
        return RigidTransform(self.rotation.T, -(self.rotation.T @ self.translation))

    def is_close(self, other: "RigidTransform", tol: float = 1e-9) -> bool:
        return (
            np.abs(self.rotation - other.rotation).max() <= tol
            and np.abs(self.translation - other.translation).max() <= tol
        )

    def to_json_dict(self) -> dict:
        return {
            "rotation": [float(v) for v in self.rotation.reshape(-1)],
            "translation": [float(v) for v in self.translation],
        }

    @staticmethod
    def from_json_dict(d: dict) -> "RigidTransform":
        rot = np.array(d["rotation"], dtype=float).reshape(3, 3)
        return RigidTransform(rot, np.array(d["translation"], dtype=float))


@dataclass(frozen=True)
class PointCloud:
    """Points in one coordinate frame plus the sensor pose within that frame."""

    points: np.ndarray
    sensor_pose: RigidTransform = field(default_factory=RigidTransform.identity)
    vertical_angular_resolution: float = 0.01

    def __post_init__(self):
        pts = _as_points(self.points)
        if not np.all(np.isfinite(pts)):
            raise ValueError("point coordinates must be finite")
        if self.vertical_angular_resolution <= 0.0:
            raise ValueError("vertical angular resolution must be positive")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)

    def __len__(self) -> int:
        return self.points.shape[0]

    @property
    def sensor_position(self) -> np.ndarray:
        return self.sensor_pose.translation


@dataclass(frozen=True)
class PerturbationSpec:
    """Rotation angle (radians), planar offset distance (meters) and a seed."""

    theta: float
    e_d: float
    rng_seed: int = 0

    def __post_init__(self):
        if self.theta < 0.0 or self.e_d < 0.0:
            raise ValueError("theta and e_d must be non-negative")


@dataclass(frozen=True)
class RegisteredPair:
    """Two clouds with ground-truth and estimated cloud1-to-cloud0 transforms."""

    cloud0: PointCloud
    cloud1: PointCloud
    gt_transform: RigidTransform
    est_transform: RigidTransform
    epsilon: float
    label: int
    scheme: str = "epsilon5"

    def __post_init__(self):
        if self.epsilon < 0.0:
            raise InvalidEpsilonError("epsilon must be non-negative")

    def cloud1_in_common_frame(self) -> np.ndarray:
        return self.est_transform.apply(self.cloud1.points)

    def sensor_positions_common(self) -> tuple[np.ndarray, np.ndarray]:
        """Both sensor positions expressed in cloud0's frame under est_transform."""
        s0 = self.cloud0.sensor_position
        s1 = self.est_transform.apply(self.cloud1.sensor_position)
        return s0, s1


def apply_transform(t: RigidTransform, cloud: PointCloud) -> PointCloud:
    """Move a whole cloud (points and sensor pose) by a rigid transform."""
    if len(cloud) == 0:
        raise EmptyCloudError("cannot transform an empty cloud")
    return PointCloud(
        t.apply(cloud.points),
        t.compose(cloud.sensor_pose),
        cloud.vertical_angular_resolution,
    )


def point_transformation_error(pair: RegisteredPair) -> float:
    """Mean displacement of cloud1's points between the true and estimated transforms."""
    pts = pair.cloud1.points
    if pts.shape[0] == 0:
        raise EmptyCloudError("cloud1 is empty")
    delta = pair.gt_transform.apply(pts) - pair.est_transform.apply(pts)
    return float(np.mean(np.linalg.norm(delta, axis=1)))


def bin_epsilon(epsilon: float) -> int:
    """Class index for a registration error; bins are half-open, open above."""
    if epsilon < 0.0:
        raise InvalidEpsilonError(f"epsilon must be non-negative, got {epsilon}")
    # Edges 0.03/0.10/0.25/0.50 m; the lower edge belongs to the bin above it.
    return int(np.searchsorted(EPSILON_BIN_EDGES[1:], epsilon, side="right"))


def synthetic_class_spec(class_index: int, rng_seed: int = 0) -> PerturbationSpec:
    """The (theta, e_d) perturbation defining one of the ten synthetic classes."""
    if not 0 <= class_index < SYNTHETIC_CLASS_COUNT:
        raise ValueError(f"class index must be in [0, {SYNTHETIC_CLASS_COUNT - 1}]")
    return PerturbationSpec(0.01 * class_index, 0.1 * class_index, rng_seed)


def perturbation_transform(cloud: PointCloud, spec: PerturbationSpec) -> RigidTransform:
    """Sample the rigid perturbation for a cloud without applying it.

    Rotates by +/- theta (random sign) about the sensor's vertical axis through
    the sensor origin, then shifts by e_d along a uniformly random horizontal
    heading. Deterministic given ``spec.rng_seed``.
    """
    rng = np.random.default_rng(np.random.PCG64(spec.rng_seed))
    sign = 1.0 if rng.random() < 0.5 else -1.0
    phi = rng.uniform(0.0, 2.0 * np.pi)
    axis = cloud.sensor_pose.rotation @ np.array([0.0, 0.0, 1.0])
    rot = RigidTransform.from_axis_angle(axis, sign * spec.theta, cloud.sensor_position)
    shift = RigidTransform(np.eye(3), spec.e_d * np.array([np.cos(phi), np.sin(phi), 0.0]))
    return shift.compose(rot)


def perturb(cloud: PointCloud, spec: PerturbationSpec) -> tuple[PointCloud, RigidTransform]:
    """Apply a seeded misalignment perturbation; returns (perturbed cloud, transform)."""
    t = perturbation_transform(cloud, spec)
    return apply_transform(t, cloud), t


# ---------------------------------------------------------------------------
# Serialization: ASCII PLY plus JSON sidecar, and pair manifests.
# ---------------------------------------------------------------------------


def atomic_write_text(path: str, text: str) -> None:
    """Write text to ``path`` via a temp file and rename, so writes are atomic."""
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", text=True)
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_cloud(cloud: PointCloud, ply_path: str, quality: np.ndarray | None = None) -> None:
    """Write an ASCII PLY file and a JSON sidecar next to it.

    ``quality`` optionally adds a per-vertex float property (used to export
    visibility scores for inspection). Coordinates are written with full
    round-trip precision.
    """
    n = len(cloud)
    lines = ["ply", "format ascii 1.0", f"element vertex {n}"]
    lines += ["property float x", "property float y", "property float z"]
    if quality is not None:
        if len(quality) != n:
            raise ValueError("quality must have one value per point")
        lines.append("property float quality")
    lines += ["end_header"]
    for i in range(n):
        x, y, z = (float(v) for v in cloud.points[i])
        row = f"{x!r} {y!r} {z!r}"
        if quality is not None:
            row += f" {float(quality[i])!r}"
        lines.append(row)
    atomic_write_text(ply_path, "\n".join(lines) + "\n")

    sidecar = {
        "sensor_pose": cloud.sensor_pose.to_json_dict(),
        "vertical_angular_resolution": float(cloud.vertical_angular_resolution),
    }
    atomic_write_text(_sidecar_path(ply_path), json.dumps(sidecar, sort_keys=True, indent=2) + "\n")


def _sidecar_path(ply_path: str) -> str:
    base, _ = os.path.splitext(ply_path)
    return base + ".json"


def load_cloud(ply_path: str) -> PointCloud:
    """Read a cloud written by :func:`save_cloud`."""
    with open(ply_path) as fh:
        header = fh.readline().strip()
        if header != "ply":
            raise ValueError(f"{ply_path} is not a PLY file")
        n = None
        properties: list[str] = []
        for line in fh:
            line = line.strip()
            if line.startswith("element vertex"):
                n = int(line.split()[-1])
            elif line.startswith("property"):
                properties.append(line.split()[-1])
            elif line == "end_header":
                break
        if n is None:
            raise ValueError(f"{ply_path} has no vertex element")
        try:
            xi, yi, zi = (properties.index(a) for a in ("x", "y", "z"))
        except ValueError:
            raise ValueError(f"{ply_path} lacks x/y/z vertex properties") from None
        pts = np.empty((n, 3), dtype=float)
        for i in range(n):
            fields = fh.readline().split()
            pts[i] = (float(fields[xi]), float(fields[yi]), float(fields[zi]))

    with open(_sidecar_path(ply_path)) as fh:
        sidecar = json.load(fh)
    return PointCloud(
        pts,
        RigidTransform.from_json_dict(sidecar["sensor_pose"]),
        float(sidecar["vertical_angular_resolution"]),
    )


def pair_to_manifest(
    pair: RegisteredPair, cloud0_path: str, cloud1_path: str, **extra
) -> dict:
    """JSON-ready manifest entry for a registered pair (clouds stored by path)."""
    entry = {
        "cloud0": cloud0_path,
        "cloud1": cloud1_path,
        "gt_transform": pair.gt_transform.to_json_dict(),
        "est_transform": pair.est_transform.to_json_dict(),
        "epsilon": float(pair.epsilon),
        "label": int(pair.label),
        "scheme": pair.scheme,
    }
    entry.update(extra)
    return entry


def pair_from_manifest(entry: dict, root: str = ".") -> RegisteredPair:
    """Load the clouds referenced by a manifest entry and rebuild the pair."""
    cloud0 = load_cloud(os.path.join(root, entry["cloud0"]))
    cloud1 = load_cloud(os.path.join(root, entry["cloud1"]))
    return RegisteredPair(
        cloud0,
        cloud1,
        RigidTransform.from_json_dict(entry["gt_transform"]),
        RigidTransform.from_json_dict(entry["est_transform"]),
        float(entry["epsilon"]),
        int(entry["label"]),
        entry.get("scheme", "epsilon5"),
    )
