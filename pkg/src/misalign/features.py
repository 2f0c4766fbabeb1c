"""Per-point feature extraction for registered pairs.

Each FPS-sampled point contributes one row with eight entries, in this order:

====  ============  =====================================================
col   name          meaning
====  ============  =====================================================
0     h_sep         differential entropy of the separate neighborhood
1     h_joint       differential entropy of the joint neighborhood
2     sinkhorn_div  local Sinkhorn divergence between the two clouds'
                    members of the joint neighborhood
3     covis         fused co-visibility score in [0, 1]
4     origin_flag   0 if the sample comes from cloud0, 1 for cloud1
5     w_sep         |separate neighborhood| / |own cloud|
6     w_joint       |joint neighborhood| / |joint cloud|
7     range         distance from the sample to its own sensor
====  ============  =====================================================

Entropies are in nats. Local features that cannot be computed (too few
members, or one cloud absent from a joint neighborhood) are marked undefined
and imputed with the per-pair mean of the defined values.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field, replace
from typing import NamedTuple, Sequence

import numpy as np
from scipy.spatial import cKDTree

from .errors import BadMeasureError, NoValidNeighborhoodsError, NotEnoughPointsError
from .geometry import PointCloud, RegisteredPair, atomic_write_text
from .preprocess import (
    DEFAULT_FLIP_RADIUS_FACTOR,
    Neighborhood,
    RadiusParams,
    VisibilityResult,
    build_neighborhoods,
    farthest_point_sampling,
    pair_covisibility,
)

__all__ = [
    "FEATURE_NAMES",
    "FEATURE_DIM",
    "SinkhornParams",
    "SinkhornResult",
    "FeatureConfig",
    "FeatureMap",
    "local_diff_entropy",
    "coral_pair_features",
    "sinkhorn_distance",
    "sinkhorn_divergence",
    "local_sinkhorn_feature",
    "assemble_features",
    "extract_pair_features",
    "save_feature_map",
    "load_feature_map",
    "feature_map_to_csv",
]

FEATURE_NAMES = (
    "h_sep",
    "h_joint",
    "sinkhorn_div",
    "covis",
    "origin_flag",
    "w_sep",
    "w_joint",
    "range",
)
FEATURE_DIM = len(FEATURE_NAMES)

_LOG_2PIE = float(np.log(2.0 * np.pi * np.e))


class SinkhornResult(NamedTuple):
    value: float
    converged: bool
    iterations: int


@dataclass(frozen=True)
class SinkhornParams:
    """Entropic optimal transport settings; the cost is fixed at 0.5 * ||x - y||^2."""

    epsilon_reg: float = 0.01
    max_iters: int = 200
    tolerance: float = 1e-6

    def __post_init__(self):
        if self.epsilon_reg <= 0.0:
            raise ValueError("epsilon_reg must be positive")
        if self.max_iters < 1:
            raise ValueError("max_iters must be at least 1")


@dataclass(frozen=True)
class FeatureConfig:
    """Settings of the per-pair feature extraction pipeline."""

    fps_count: int = 1024
    flip_radius_factor: float = DEFAULT_FLIP_RADIUS_FACTOR
    radius: RadiusParams = field(default_factory=RadiusParams)
    sinkhorn: SinkhornParams = field(default_factory=SinkhornParams)
    min_neighborhood: int = 5
    cov_lambda: float = 1e-6
    # Cap on points per side fed to the local Sinkhorn solve; dense desk
    # scenes otherwise make the divergence the dominant cost.
    sinkhorn_max_members: int = 64
    # "cross" compares the two clouds' partitions of the joint neighborhood;
    # "sep-vs-joint" compares the separate against the joint neighborhood.
    sinkhorn_mode: str = "cross"

    def __post_init__(self):
        if self.sinkhorn_mode not in ("cross", "sep-vs-joint"):
            raise ValueError("sinkhorn_mode must be 'cross' or 'sep-vs-joint'")


@dataclass(frozen=True)
class FeatureMap:
    """N x 8 features plus N x 3 common-frame coordinates and the class label."""

    features: np.ndarray
    coords: np.ndarray
    label: int

    def __post_init__(self):
        feats = np.ascontiguousarray(self.features, dtype=np.float32)
        coords = np.ascontiguousarray(self.coords, dtype=np.float32)
        if feats.ndim != 2 or feats.shape[1] != FEATURE_DIM:
            raise ValueError(f"features must be (n, {FEATURE_DIM})")
        if coords.shape != (feats.shape[0], 3):
            raise ValueError("coords must be (n, 3)")
        feats.setflags(write=False)
        coords.setflags(write=False)
        object.__setattr__(self, "features", feats)
        object.__setattr__(self, "coords", coords)


def local_diff_entropy(
    members, min_count: int = 5, cov_lambda: float = 1e-6
) -> float:
    """Gaussian differential entropy of a neighborhood, in nats.

    Uses the sample covariance (divisor n - 1) regularized with
    ``cov_lambda * I``. Returns NaN when fewer than ``min_count`` members are
    available, which downstream assembly treats as an undefined feature.
    """
    pts = np.asarray(members, dtype=float)
    if pts.ndim != 2 or pts.shape[0] < min_count:
        return float("nan")
    centered = pts - pts.mean(axis=0)
    cov = centered.T @ centered / (pts.shape[0] - 1)
    cov[np.diag_indices(3)] += cov_lambda
    det = np.linalg.det(cov)
    return float(0.5 * (3.0 * _LOG_2PIE + np.log(det)))


def _det3(covs: np.ndarray) -> np.ndarray:
    a = covs
    return (
        a[:, 0, 0] * (a[:, 1, 1] * a[:, 2, 2] - a[:, 1, 2] * a[:, 2, 1])
        - a[:, 0, 1] * (a[:, 1, 0] * a[:, 2, 2] - a[:, 1, 2] * a[:, 2, 0])
        + a[:, 0, 2] * (a[:, 1, 0] * a[:, 2, 1] - a[:, 1, 1] * a[:, 2, 0])
    )


def _entropies(points: np.ndarray, member_lists, min_count: int, cov_lambda: float) -> np.ndarray:
    """Vectorized entropy for many neighborhoods over one point array."""
    n = len(member_lists)
    covs = np.zeros((n, 3, 3))
    defined = np.zeros(n, dtype=bool)
    for i, idx in enumerate(member_lists):
        if len(idx) < min_count:
            continue
        m = points[idx]
        c = m - m.mean(axis=0)
        covs[i] = c.T @ c / (len(idx) - 1)
        defined[i] = True
    covs[:, 0, 0] += cov_lambda
    covs[:, 1, 1] += cov_lambda
    covs[:, 2, 2] += cov_lambda
    out = np.full(n, np.nan)
    if np.any(defined):
        out[defined] = 0.5 * (3.0 * _LOG_2PIE + np.log(_det3(covs[defined])))
    return out


# ---------------------------------------------------------------------------
# CorAl baseline features
# ---------------------------------------------------------------------------


def coral_pair_features(
    pair: RegisteredPair,
    radius_params: RadiusParams = RadiusParams(),
    min_count: int = 5,
    cov_lambda: float = 1e-6,
) -> tuple[float, float]:
    """Aggregate (H_joint, H_sep) entropy features of a registered pair.

    Every point of each cloud gets a neighborhood with radius
    ``clip(d * sin(alpha), r_min, r_max)`` where d is the distance to the
    point's own sensor, queried in its own cloud (separate) and in the union
    cloud (joint). Each aggregate sums the defined local entropies and
    normalizes by the total point count of the union.
    """
    pts0 = pair.cloud0.points
    pts1 = pair.cloud1_in_common_frame()
    joint = np.vstack([pts0, pts1])
    s0, s1 = pair.sensor_positions_common()
    d0 = np.linalg.norm(pts0 - s0, axis=1)
    d1 = np.linalg.norm(pts1 - s1, axis=1)
    r0 = np.clip(d0 * np.sin(pair.cloud0.vertical_angular_resolution),
                 radius_params.r_min, radius_params.r_max)
    r1 = np.clip(d1 * np.sin(pair.cloud1.vertical_angular_resolution),
                 radius_params.r_min, radius_params.r_max)
    radii = np.concatenate([r0, r1])

    tree0, tree1 = cKDTree(pts0), cKDTree(pts1)
    joint_tree = cKDTree(joint)
    sep_members = list(tree0.query_ball_point(pts0, r0)) + list(tree1.query_ball_point(pts1, r1))
    joint_members = list(joint_tree.query_ball_point(joint, radii))

    # The query is inclusive at the boundary; membership is strict.
    def strict(mem, center, source, radius):
        idx = np.asarray(mem, dtype=int)
        keep = np.linalg.norm(source[idx] - center, axis=1) < radius
        return idx[keep]

    n0 = pts0.shape[0]
    sep_lists = [
        strict(m, joint[i], pts0 if i < n0 else pts1, radii[i])
        for i, m in enumerate(sep_members)
    ]
    joint_lists = [strict(m, joint[i], joint, radii[i]) for i, m in enumerate(joint_members)]

    h_sep0 = _entropies(pts0, sep_lists[:n0], min_count, cov_lambda)
    h_sep1 = _entropies(pts1, sep_lists[n0:], min_count, cov_lambda)
    h_joint = _entropies(joint, joint_lists, min_count, cov_lambda)

    total = joint.shape[0]
    sep_values = np.concatenate([h_sep0, h_sep1])
    if np.all(np.isnan(sep_values)) or np.all(np.isnan(h_joint)):
        raise NoValidNeighborhoodsError("every local entropy was undefined")
    h_sep_total = float(np.nansum(sep_values)) / total
    h_joint_total = float(np.nansum(h_joint)) / total
    return h_joint_total, h_sep_total


# ---------------------------------------------------------------------------
# Entropic optimal transport
# ---------------------------------------------------------------------------


def _check_measure(points: np.ndarray, weights: np.ndarray) -> None:
    if points.shape[0] != weights.shape[0]:
        raise BadMeasureError("one weight per atom required")
    if np.any(weights <= 0.0):
        raise BadMeasureError("weights must be positive")
    if abs(weights.sum() - 1.0) > 1e-8:
        raise BadMeasureError(f"weights must sum to 1, got {weights.sum()!r}")


def _logsumexp(m: np.ndarray, axis: int) -> np.ndarray:
    mx = m.max(axis=axis, keepdims=True)
    out = mx + np.log(np.exp(m - mx).sum(axis=axis, keepdims=True))
    return np.squeeze(out, axis=axis)


def sinkhorn_distance(
    a_points, a_weights, b_points, b_weights, params: SinkhornParams = SinkhornParams()
) -> SinkhornResult:
    """Entropic optimal transport cost between two weighted point sets.

    Runs log-domain alternating dual updates until the largest dual change
    drops below ``params.tolerance`` or ``params.max_iters`` is reached, and
    evaluates the primal objective, entropic term included, on the resulting
    plan. The returned flag reports whether the updates converged.
    """
    xa = np.atleast_2d(np.asarray(a_points, dtype=float))
    xb = np.atleast_2d(np.asarray(b_points, dtype=float))
    wa = np.asarray(a_weights, dtype=float).reshape(-1)
    wb = np.asarray(b_weights, dtype=float).reshape(-1)
    _check_measure(xa, wa)
    _check_measure(xb, wb)

    eps = params.epsilon_reg
    diff = xa[:, None, :] - xb[None, :, :]
    cost = 0.5 * np.einsum("ijk,ijk->ij", diff, diff)
    log_a = np.log(wa)
    log_b = np.log(wb)

    f = np.zeros(xa.shape[0])
    g = np.zeros(xb.shape[0])
    converged = False
    iterations = params.max_iters
    for it in range(params.max_iters):
        f_new = -eps * _logsumexp(log_b[None, :] + (g[None, :] - cost) / eps, axis=1)
        g_new = -eps * _logsumexp(log_a[:, None] + (f_new[:, None] - cost) / eps, axis=0)
        err = max(np.abs(f_new - f).max(), np.abs(g_new - g).max())
        f, g = f_new, g_new
        if err < params.tolerance:
            converged = True
            iterations = it + 1
            break

    # Dual objective <a, f> + <b, g>; at convergence this equals the primal
    # cost with the entropic term included, and unlike the plan-based primal
    # it is second-order accurate in the remaining dual error.
    value = float(f @ wa + g @ wb)
    return SinkhornResult(value, converged, iterations)


def _self_transport_cost(points: np.ndarray, weights: np.ndarray, params: SinkhornParams) -> float:
    """W(a, a) via the symmetric fixed point f = g, with damped updates."""
    eps = params.epsilon_reg
    diff = points[:, None, :] - points[None, :, :]
    cost = 0.5 * np.einsum("ijk,ijk->ij", diff, diff)
    log_w = np.log(weights)
    f = np.zeros(points.shape[0])
    for _ in range(params.max_iters):
        f_new = 0.5 * (f - eps * _logsumexp(log_w[None, :] + (f[None, :] - cost) / eps, axis=1))
        err = np.abs(f_new - f).max()
        f = f_new
        if err < params.tolerance:
            break
    return float(2.0 * (f @ weights))


def sinkhorn_divergence(
    a_points,
    a_weights,
    b_points,
    b_weights,
    params: SinkhornParams = SinkhornParams(),
    clamp: bool = True,
) -> float:
    """Debiased entropic transport cost; non-negative up to solver noise.

    The self-terms use the symmetric fixed-point iteration, which reaches the
    same optimum as the alternating updates in far fewer sweeps.
    """
    xa = np.atleast_2d(np.asarray(a_points, dtype=float))
    xb = np.atleast_2d(np.asarray(b_points, dtype=float))
    wa = np.asarray(a_weights, dtype=float).reshape(-1)
    wb = np.asarray(b_weights, dtype=float).reshape(-1)
    w_ab = sinkhorn_distance(xa, wa, xb, wb, params).value
    _check_measure(xa, wa)
    _check_measure(xb, wb)
    w_aa = _self_transport_cost(xa, wa, params)
    w_bb = _self_transport_cost(xb, wb, params)
    value = w_ab - 0.5 * w_aa - 0.5 * w_bb
    if clamp and value < 0.0:
        value = 0.0
    return float(value)


def _subsample(points: np.ndarray, cap: int) -> np.ndarray:
    if cap <= 0 or points.shape[0] <= cap:
        return points
    idx = np.round(np.linspace(0, points.shape[0] - 1, cap)).astype(int)
    return points[idx]


def local_sinkhorn_feature(
    center,
    members_a,
    members_b,
    params: SinkhornParams = SinkhornParams(),
    max_members: int = 0,
) -> float:
    """Sinkhorn divergence between two member sets of one neighborhood.

    Coordinates are re-centered at the sampled point and weighted uniformly.
    Returns NaN when either side is empty. ``max_members`` > 0 caps each side
    with a deterministic evenly spaced subsample.
    """
    a = np.atleast_2d(np.asarray(members_a, dtype=float))
    b = np.atleast_2d(np.asarray(members_b, dtype=float))
    if a.size == 0 or b.size == 0:
        return float("nan")
    center = np.asarray(center, dtype=float).reshape(1, 3)
    a = _subsample(a - center, max_members)
    b = _subsample(b - center, max_members)
    wa = np.full(a.shape[0], 1.0 / a.shape[0])
    wb = np.full(b.shape[0], 1.0 / b.shape[0])
    return sinkhorn_divergence(a, wa, b, wb, params)


# ---------------------------------------------------------------------------
# Feature map assembly
# ---------------------------------------------------------------------------


def _impute_column(values: np.ndarray) -> np.ndarray:
    missing = np.isnan(values)
    if not missing.any():
        return values
    defined = values[~missing]
    fill = float(defined.mean()) if defined.size else 0.0
    out = values.copy()
    out[missing] = fill
    return out


def assemble_features(
    pair: RegisteredPair,
    visibility: tuple[VisibilityResult, VisibilityResult],
    fps_indices: tuple[np.ndarray, np.ndarray],
    neighborhoods: tuple[list[Neighborhood], list[Neighborhood]],
    config: FeatureConfig = FeatureConfig(),
) -> FeatureMap:
    """Assemble the per-sample feature matrix for one (filtered) pair.

    ``visibility`` holds fused co-visibility results aligned with the pair's
    clouds, ``fps_indices`` the sampled indices per cloud and
    ``neighborhoods`` the (separate, joint) lists from
    :func:`misalign.preprocess.build_neighborhoods`, cloud0 samples first.
    Undefined entries are imputed with per-pair column means.
    """
    pts0 = pair.cloud0.points
    pts1 = pair.cloud1_in_common_frame()
    joint = np.vstack([pts0, pts1])
    n0 = pts0.shape[0]
    n_joint = joint.shape[0]
    s0, s1 = pair.sensor_positions_common()
    separate, joint_nbhd = neighborhoods
    idx0 = np.asarray(fps_indices[0], dtype=int)
    idx1 = np.asarray(fps_indices[1], dtype=int)
    counts = (idx0.size, idx1.size)
    total = counts[0] + counts[1]
    if len(separate) != total or len(joint_nbhd) != total:
        raise ValueError("neighborhood lists do not match the sampled indices")

    sep_lists0 = [nb.member_indices for nb in separate[: counts[0]]]
    sep_lists1 = [nb.member_indices for nb in separate[counts[0]:]]
    joint_lists = [nb.member_indices for nb in joint_nbhd]

    h_sep = np.concatenate([
        _entropies(pts0, sep_lists0, config.min_neighborhood, config.cov_lambda),
        _entropies(pts1, sep_lists1, config.min_neighborhood, config.cov_lambda),
    ]) if total else np.empty(0)
    h_joint = _entropies(joint, joint_lists, config.min_neighborhood, config.cov_lambda)

    centers = np.vstack([pts0[idx0], pts1[idx1]]) if total else np.empty((0, 3))
    sink = np.full(total, np.nan)
    for row, nb in enumerate(joint_nbhd):
        members = nb.member_indices
        if config.sinkhorn_mode == "cross":
            side_a = joint[members[members < n0]]
            side_b = joint[members[members >= n0]]
        else:
            side_a = joint[separate[row].member_indices + (0 if row < counts[0] else n0)]
            side_b = joint[members]
        sink[row] = local_sinkhorn_feature(
            centers[row], side_a, side_b, config.sinkhorn, config.sinkhorn_max_members
        )

    covis = np.concatenate([
        visibility[0].covis_score[idx0],
        visibility[1].covis_score[idx1],
    ])
    origin = np.concatenate([np.zeros(counts[0]), np.ones(counts[1])])
    w_sep = np.array([
        len(m) / (n0 if row < counts[0] else n_joint - n0)
        for row, m in enumerate(sep_lists0 + sep_lists1)
    ])
    w_joint = np.array([len(m) / n_joint for m in joint_lists])
    own_sensor = np.vstack([np.tile(s0, (counts[0], 1)), np.tile(s1, (counts[1], 1))])
    ranges = np.linalg.norm(centers - own_sensor, axis=1)

    columns = [
        _impute_column(h_sep),
        _impute_column(h_joint),
        _impute_column(sink),
        _impute_column(covis),
        origin,
        w_sep,
        w_joint,
        ranges,
    ]
    features = np.stack(columns, axis=1)
    return FeatureMap(features, centers, pair.label)


def extract_pair_features(pair: RegisteredPair, config: FeatureConfig = FeatureConfig()) -> FeatureMap:
    """Full preprocessing plus feature extraction for one registered pair.

    Filters both clouds to their co-visible points, farthest-point-samples
    ``config.fps_count`` centers per cloud, builds dynamic-radius
    neighborhoods and assembles the feature map.
    """
    vis0, vis1 = pair_covisibility(pair, config.flip_radius_factor)
    keep0 = np.flatnonzero(vis0.visible_mask)
    keep1 = np.flatnonzero(vis1.visible_mask)
    if keep0.size < config.fps_count or keep1.size < config.fps_count:
        raise NotEnoughPointsError(
            f"co-visible points ({keep0.size}, {keep1.size}) below fps_count"
        )
    filtered = RegisteredPair(
        PointCloud(pair.cloud0.points[keep0], pair.cloud0.sensor_pose,
                   pair.cloud0.vertical_angular_resolution),
        PointCloud(pair.cloud1.points[keep1], pair.cloud1.sensor_pose,
                   pair.cloud1.vertical_angular_resolution),
        pair.gt_transform,
        pair.est_transform,
        pair.epsilon,
        pair.label,
        pair.scheme,
    )
    vis_filtered = (
        VisibilityResult(np.ones(keep0.size, dtype=bool), vis0.covis_score[keep0]),
        VisibilityResult(np.ones(keep1.size, dtype=bool), vis1.covis_score[keep1]),
    )
    fps0 = farthest_point_sampling(filtered.cloud0.points, config.fps_count)
    fps1 = farthest_point_sampling(filtered.cloud1_in_common_frame(), config.fps_count)
    neighborhoods = build_neighborhoods(filtered, (fps0, fps1), config.radius)
    return assemble_features(filtered, vis_filtered, (fps0, fps1), neighborhoods, config)


# ---------------------------------------------------------------------------
# Feature map serialization
# ---------------------------------------------------------------------------

_FMAP_MAGIC = b"FMAP"
_FMAP_VERSION = 1


def save_feature_map(fm: FeatureMap, path: str) -> None:
    """Write the little-endian binary feature map format."""
    n = fm.features.shape[0]
    blob = bytearray()
    blob += _FMAP_MAGIC
    blob += struct.pack("<III", _FMAP_VERSION, n, FEATURE_DIM)
    blob += np.ascontiguousarray(fm.features, dtype="<f4").tobytes()
    blob += np.ascontiguousarray(fm.coords, dtype="<f4").tobytes()
    blob += struct.pack("<I", fm.label)
    directory = os.path.dirname(os.path.abspath(path))
    tmp = os.path.join(directory, f".tmp-{os.path.basename(path)}")
    with open(tmp, "wb") as fh:
        fh.write(blob)
    os.replace(tmp, path)


def load_feature_map(path: str) -> FeatureMap:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != _FMAP_MAGIC:
        raise ValueError(f"{path} is not a feature map file")
    version, n, d = struct.unpack_from("<III", blob, 4)
    if version != _FMAP_VERSION:
        raise ValueError(f"unsupported feature map version {version}")
    if d != FEATURE_DIM:
        raise ValueError(f"expected {FEATURE_DIM} feature columns, found {d}")
    offset = 16
    feats = np.frombuffer(blob, dtype="<f4", count=n * d, offset=offset).reshape(n, d)
    offset += 4 * n * d
    coords = np.frombuffer(blob, dtype="<f4", count=n * 3, offset=offset).reshape(n, 3)
    offset += 4 * n * 3
    (label,) = struct.unpack_from("<I", blob, offset)
    return FeatureMap(feats, coords, int(label))


def feature_map_to_csv(fm: FeatureMap, path: str) -> None:
    """Debug export with one row per sample."""
    header = ",".join(FEATURE_NAMES + ("x", "y", "z", "label"))
    rows = [header]
    for i in range(fm.features.shape[0]):
        vals = [repr(float(v)) for v in fm.features[i]]
        vals += [repr(float(v)) for v in fm.coords[i]]
        vals.append(str(fm.label))
        rows.append(",".join(vals))
    atomic_write_text(path, "\n".join(rows) + "\n")
