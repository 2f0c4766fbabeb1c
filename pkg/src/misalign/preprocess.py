"""Co-visibility filtering, farthest point sampling and neighborhood construction.

Visibility follows the spherical-flipping construction: every point is mirrored
outward about a sphere around the viewpoint; points whose flipped image lands
on the convex hull of the flipped set (plus the viewpoint) are the ones a
sensor at that viewpoint can see. Visible points additionally get a soft
co-visibility score measuring how far in front of its hull neighbors a point
sits, seen from the viewpoint.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import ConvexHull, QhullError, cKDTree

from .errors import (
    DegenerateHullError,
    InvalidDistanceError,
    MalformedHullError,
    NotEnoughPointsError,
)
from .geometry import PointCloud, RegisteredPair

__all__ = [
    "VisibilityResult",
    "Neighborhood",
    "RadiusParams",
    "DEFAULT_FLIP_RADIUS_FACTOR",
    "hidden_point_removal",
    "covisibility_scores",
    "pair_covisibility",
    "farthest_point_sampling",
    "dynamic_radius",
    "build_neighborhoods",
]

# Spherical-flipping radius as a multiple of the largest viewpoint distance.
DEFAULT_FLIP_RADIUS_FACTOR = 100.0


@dataclass(frozen=True)
class VisibilityResult:
    """Visibility mask plus normalized co-visibility scores (NaN where hidden)."""

    visible_mask: np.ndarray
    covis_score: np.ndarray
    coincident_count: int = 0


@dataclass(frozen=True)
class RadiusParams:
    """Parameters of the dynamic neighborhood radius."""

    k: float = 5.0
    r_min: float = 0.5
    r_max: float = 7.5

    def __post_init__(self):
        if self.k < 1.0:
            raise ValueError("k must be at least 1")
        if not 0.0 < self.r_min < self.r_max:
            raise ValueError("need 0 < r_min < r_max")


@dataclass(frozen=True)
class Neighborhood:
    """Members of one range query around a sampled center point."""

    center_index: int
    member_indices: np.ndarray
    radius: float


def _flip_points(points: np.ndarray, viewpoint: np.ndarray, flip_radius_factor: float):
    """Spherically flip points about the viewpoint.

    Returns (valid_index, flipped, coincident_count) where valid_index maps the
    flipped rows back to rows of ``points``; points coincident with the
    viewpoint cannot be flipped and are dropped.
    """
    if flip_radius_factor <= 1.0:
        raise ValueError("flip_radius_factor must exceed 1")
    rel = np.asarray(points, dtype=float) - np.asarray(viewpoint, dtype=float)
    norms = np.linalg.norm(rel, axis=1)
    valid = norms > 0.0
    coincident = int(np.count_nonzero(~valid))
    rel = rel[valid]
    norms = norms[valid]
    if rel.shape[0] == 0:
        raise DegenerateHullError("no points distinct from the viewpoint")
    radius = flip_radius_factor * norms.max()
    flipped = rel * (2.0 * radius / norms - 1.0)[:, None]
    return np.flatnonzero(valid), flipped, coincident


def _hull_of_flipped(flipped: np.ndarray) -> ConvexHull:
    # The viewpoint sits at the origin of the flipped frame and joins the hull.
    augmented = np.vstack([flipped, np.zeros(3)])
    try:
        return ConvexHull(augmented)
    except QhullError as exc:
        raise DegenerateHullError(f"convex hull failed: {exc}") from exc


def hidden_point_removal(
    points, viewpoint, flip_radius_factor: float = DEFAULT_FLIP_RADIUS_FACTOR
) -> np.ndarray:
    """Boolean mask of the points visible from ``viewpoint``.

    A point is visible exactly when its spherically flipped image is a vertex
    of the convex hull of the flipped cloud plus the viewpoint. Points
    coincident with the viewpoint are reported hidden.
    """
    points = np.asarray(points, dtype=float)
    valid_idx, flipped, _ = _flip_points(points, viewpoint, flip_radius_factor)
    hull = _hull_of_flipped(flipped)
    mask = np.zeros(points.shape[0], dtype=bool)
    vertices = hull.vertices[hull.vertices < flipped.shape[0]]
    mask[valid_idx[vertices]] = True
    return mask


def covisibility_scores(
    points, viewpoint, flip_radius_factor: float = DEFAULT_FLIP_RADIUS_FACTOR
) -> VisibilityResult:
    """Visibility mask plus per-point co-visibility scores from one viewpoint.

    For each visible point p the score averages, over its hull-adjacent
    visible neighbors q, the difference between the angle at p and the angle
    at q in the triangle (viewpoint, p, q), computed with the law of cosines
    on the original (unflipped) geometry. Points in front of their neighbors
    get large positive averages. Raw averages are min-max normalized per
    cloud; if all raw values coincide every score is set to 0.5.
    """
    points = np.asarray(points, dtype=float)
    viewpoint = np.asarray(viewpoint, dtype=float).reshape(3)
    valid_idx, flipped, coincident = _flip_points(points, viewpoint, flip_radius_factor)
    hull = _hull_of_flipped(flipped)
    n_flipped = flipped.shape[0]

    hull_vertices = hull.vertices[hull.vertices < n_flipped]
    on_hull = np.zeros(n_flipped + 1, dtype=bool)
    on_hull[hull.vertices] = True

    # Undirected hull edges from the triangular facets, keeping both directions
    # so each vertex can average over all of its neighbors.
    simplices = hull.simplices
    edges = np.concatenate(
        [simplices[:, [0, 1]], simplices[:, [1, 2]], simplices[:, [0, 2]]], axis=0
    )
    edges = np.unique(np.sort(edges, axis=1), axis=0)
    edges = np.concatenate([edges, edges[:, ::-1]], axis=0)
    # Drop pairs involving the viewpoint vertex (index n_flipped): the triangle
    # with the viewpoint as a corner degenerates.
    keep = (edges[:, 0] < n_flipped) & (edges[:, 1] < n_flipped)
    edges = edges[keep]

    centers = valid_idx[edges[:, 0]]
    neighbors = valid_idx[edges[:, 1]]
    p = points[centers]
    q = points[neighbors]
    pq = np.linalg.norm(p - q, axis=1)
    pc = np.linalg.norm(p - viewpoint, axis=1)
    qc = np.linalg.norm(q - viewpoint, axis=1)
    ok = pq > 0.0
    gamma = np.arccos(np.clip((pc**2 + pq**2 - qc**2) / (2.0 * pc * pq), -1.0, 1.0))
    beta = np.arccos(np.clip((qc**2 + pq**2 - pc**2) / (2.0 * qc * pq), -1.0, 1.0))
    diff = np.where(ok, gamma - beta, 0.0)

    sums = np.zeros(n_flipped)
    counts = np.zeros(n_flipped)
    np.add.at(sums, edges[:, 0], diff)
    np.add.at(counts, edges[:, 0], ok.astype(float))

    if np.any(counts[hull_vertices] == 0):
        raise MalformedHullError("a hull vertex has no usable hull neighbors")
    raw = np.full(points.shape[0], np.nan)
    raw[valid_idx[hull_vertices]] = sums[hull_vertices] / counts[hull_vertices]

    mask = ~np.isnan(raw)
    score = np.full(points.shape[0], np.nan)
    if np.any(mask):
        values = raw[mask]
        lo, hi = values.min(), values.max()
        if hi > lo:
            score[mask] = (values - lo) / (hi - lo)
        else:
            score[mask] = 0.5
    return VisibilityResult(mask, score, coincident)


def pair_covisibility(
    pair: RegisteredPair, flip_radius_factor: float = DEFAULT_FLIP_RADIUS_FACTOR
) -> tuple[VisibilityResult, VisibilityResult]:
    """Fused co-visibility of each cloud from both sensors of a registered pair.

    Each cloud is scored in the common frame from its own sensor and from the
    other cloud's sensor (under the estimated transform). A point counts as
    co-visible when both viewpoints see it; its score is the minimum of the
    two normalized scores.
    """
    s0, s1 = pair.sensor_positions_common()
    results = []
    for pts in (pair.cloud0.points, pair.cloud1_in_common_frame()):
        own = covisibility_scores(pts, s0 if len(results) == 0 else s1, flip_radius_factor)
        other = covisibility_scores(pts, s1 if len(results) == 0 else s0, flip_radius_factor)
        mask = own.visible_mask & other.visible_mask
        score = np.full(pts.shape[0], np.nan)
        score[mask] = np.minimum(own.covis_score[mask], other.covis_score[mask])
        results.append(
            VisibilityResult(mask, score, own.coincident_count + other.coincident_count)
        )
    return results[0], results[1]


def farthest_point_sampling(
    points, count: int, start_rule: str = "max_norm_from_centroid"
) -> np.ndarray:
    """Greedy max-min subset selection, deterministic.

    Starts from the point farthest from the centroid, then repeatedly adds the
    point with the largest distance to the selected set. Ties break toward the
    lowest index.
    """
    pts = np.asarray(points, dtype=float)
    n = pts.shape[0]
    if count > n:
        raise NotEnoughPointsError(f"requested {count} samples from {n} points")
    if start_rule != "max_norm_from_centroid":
        raise ValueError(f"unknown start rule {start_rule!r}")
    if count == 0:
        return np.empty(0, dtype=int)
    centroid = pts.mean(axis=0)
    first = int(np.argmax(np.linalg.norm(pts - centroid, axis=1)))
    selected = np.empty(count, dtype=int)
    selected[0] = first
    min_dist = np.linalg.norm(pts - pts[first], axis=1)
    for i in range(1, count):
        nxt = int(np.argmax(min_dist))
        selected[i] = nxt
        np.minimum(min_dist, np.linalg.norm(pts - pts[nxt], axis=1), out=min_dist)
    return selected


def dynamic_radius(d, d_tilde, alpha: float, params: RadiusParams = RadiusParams()):
    """Neighborhood radius from the distances to both sensors, clipped.

    Accepts scalars or arrays for ``d`` and ``d_tilde``.
    """
    d = np.asarray(d, dtype=float)
    d_tilde = np.asarray(d_tilde, dtype=float)
    if np.any(d <= 0.0) or np.any(d_tilde <= 0.0):
        raise InvalidDistanceError("sensor distances must be positive")
    k_alpha = params.k * alpha
    if not 0.0 < k_alpha < np.pi / 2.0:
        raise ValueError("k * alpha must lie in (0, pi/2)")
    r = np.sqrt(2.0) * np.sin(k_alpha) * d * d_tilde / np.sqrt(d**2 + d_tilde**2)
    out = np.clip(r, params.r_min, params.r_max)
    return float(out) if out.ndim == 0 else out


def _range_query(tree: cKDTree, source: np.ndarray, centers: np.ndarray, radii: np.ndarray):
    """Indices of source points strictly inside each query ball, sorted."""
    hits = tree.query_ball_point(centers, radii)
    members = []
    for center, radius, idx in zip(centers, radii, hits):
        idx = np.asarray(idx, dtype=int)
        dist = np.linalg.norm(source[idx] - center, axis=1)
        members.append(np.sort(idx[dist < radius]))
    return members


def build_neighborhoods(
    pair: RegisteredPair,
    sampled_indices: tuple[np.ndarray, np.ndarray],
    params: RadiusParams = RadiusParams(),
) -> tuple[list[Neighborhood], list[Neighborhood]]:
    """Separate and joint neighborhoods for FPS-sampled points of both clouds.

    Radii come from :func:`dynamic_radius` with each sample's distances to the
    two sensor positions in the common frame. Separate neighborhoods index
    into the sample's own cloud; joint neighborhoods index into the
    concatenated cloud [cloud0; cloud1], cloud1 rows offset by len(cloud0).
    The result lists all cloud0 samples first, then all cloud1 samples.
    """
    pts0 = pair.cloud0.points
    pts1 = pair.cloud1_in_common_frame()
    joint = np.vstack([pts0, pts1])
    s0, s1 = pair.sensor_positions_common()
    trees = (cKDTree(pts0), cKDTree(pts1))
    joint_tree = cKDTree(joint)

    separate: list[Neighborhood] = []
    joint_result: list[Neighborhood] = []
    alphas = (pair.cloud0.vertical_angular_resolution, pair.cloud1.vertical_angular_resolution)
    clouds = (pts0, pts1)
    sensors = ((s0, s1), (s1, s0))
    offsets = (0, pts0.shape[0])
    for side in (0, 1):
        idx = np.asarray(sampled_indices[side], dtype=int)
        centers = clouds[side][idx]
        own, other = sensors[side]
        d = np.linalg.norm(centers - own, axis=1)
        d_tilde = np.linalg.norm(centers - other, axis=1)
        radii = dynamic_radius(d, d_tilde, alphas[side], params)
        radii = np.atleast_1d(radii)
        sep_members = _range_query(trees[side], clouds[side], centers, radii)
        joint_members = _range_query(joint_tree, joint, centers, radii)
        for center_idx, radius, sep, jnt in zip(idx, radii, sep_members, joint_members):
            separate.append(Neighborhood(int(center_idx), sep, float(radius)))
            joint_result.append(
                Neighborhood(int(center_idx) + offsets[side], jnt, float(radius))
            )
    return separate, joint_result
