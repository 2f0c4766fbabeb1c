import itertools

import numpy as np
import pytest

from misalign.errors import BadMeasureError, NotEnoughPointsError
from misalign.features import (
    FEATURE_DIM,
    FeatureConfig,
    FeatureMap,
    SinkhornParams,
    assemble_features,
    coral_pair_features,
    extract_pair_features,
    feature_map_to_csv,
    load_feature_map,
    local_diff_entropy,
    local_sinkhorn_feature,
    save_feature_map,
    sinkhorn_distance,
    sinkhorn_divergence,
)
from misalign.geometry import PointCloud, RegisteredPair, RigidTransform
from misalign.preprocess import RadiusParams, build_neighborhoods
from conftest import make_pair, random_transform

_H_IDENTITY = 4.2568155996140185  # 1.5 * ln(2 pi e)

_TIGHT = SinkhornParams(epsilon_reg=0.01, max_iters=5000, tolerance=1e-9)


def _identity_cov_points(cov_lambda: float = 1e-6) -> np.ndarray:
    # Six axis points whose regularized sample covariance is exactly I.
    a = np.sqrt(5.0 * (1.0 - cov_lambda) / 2.0)
    return np.array(
        [[a, 0, 0], [-a, 0, 0], [0, a, 0], [0, -a, 0], [0, 0, a], [0, 0, -a]], float
    )


class TestLocalDiffEntropy:
    def test_identity_covariance(self):
        h = local_diff_entropy(_identity_cov_points())
        assert h == pytest.approx(_H_IDENTITY, abs=1e-9)

    @pytest.mark.parametrize("scale", [2.0, 10.0])
    def test_scaling_law(self, rng, scale):
        pts = rng.normal(size=(60, 3))
        pts = pts / np.abs(pts).max() * 2.0  # spread well above 0.1 m
        mean = pts.mean(axis=0)
        h_base = local_diff_entropy(pts)
        h_scaled = local_diff_entropy(mean + scale * (pts - mean))
        assert h_scaled - h_base == pytest.approx(3.0 * np.log(scale), abs=1e-4)

    def test_collinear_against_eigenvalue_oracle(self):
        pts = np.stack([np.linspace(0.0, 1.0, 5), np.zeros(5), np.zeros(5)], axis=1)
        centered = pts - pts.mean(axis=0)
        eig = np.linalg.eigvalsh(centered.T @ centered / 4.0)
        oracle = 0.5 * (3.0 * np.log(2.0 * np.pi * np.e) + np.log(np.prod(eig + 1e-6)))
        assert local_diff_entropy(pts) == pytest.approx(oracle, abs=1e-12)

    def test_too_few_members_is_nan(self):
        assert np.isnan(local_diff_entropy(np.zeros((4, 3))))

    def test_rigid_invariance(self, rng):
        pts = rng.normal(size=(30, 3))
        t = random_transform(rng)
        assert local_diff_entropy(t.apply(pts)) == pytest.approx(
            local_diff_entropy(pts), abs=1e-9
        )


def _cluster_pair() -> RegisteredPair:
    """Disjoint 6-point clusters with identity covariance, far enough apart
    that every neighborhood contains exactly one cluster."""
    base = _identity_cov_points()
    centers0 = np.array([[15.0, 0.0, 0.0], [0.0, 16.0, 0.0], [-15.0, 0.0, 0.0]])
    centers1 = np.array([[0.0, -16.0, 0.0], [11.5, 11.5, 0.0], [-11.5, -11.5, 0.0]])
    pts0 = np.vstack([base + c for c in centers0])
    pts1 = np.vstack([base + c for c in centers1])
    alpha = 0.3  # keeps the radius d*sin(alpha) around 3.5-4.5 m out there
    cloud0 = PointCloud(pts0, RigidTransform.identity(), alpha)
    cloud1 = PointCloud(pts1, RigidTransform.identity(), alpha)
    ident = RigidTransform.identity()
    return RegisteredPair(cloud0, cloud1, ident, ident, 0.0, 0)


class TestCoralPairFeatures:
    def test_identity_covariance_clusters(self):
        pair = _cluster_pair()
        h_joint, h_sep = coral_pair_features(pair)
        assert h_joint == pytest.approx(_H_IDENTITY, abs=1e-9)
        assert h_sep == pytest.approx(_H_IDENTITY, abs=1e-9)

    def test_aligned_pair_joint_not_larger(self):
        pair = make_pair(seed=21, n=900)
        # Shrink the spread so the clipped radii give populated neighborhoods.
        pts = pair.cloud0.points * 0.3
        cloud0 = PointCloud(pts, pair.cloud0.sensor_pose, 0.3)
        inv = pair.gt_transform.inverse()
        cloud1 = PointCloud(inv.apply(pts), pair.cloud1.sensor_pose, 0.3)
        aligned = RegisteredPair(cloud0, cloud1, pair.gt_transform, pair.gt_transform, 0.0, 0)
        # A wider radius floor keeps every neighborhood above the size guard,
        # so the separate and joint sums cover the same points.
        h_joint, h_sep = coral_pair_features(aligned, RadiusParams(r_min=1.2, r_max=7.5))
        assert h_joint <= h_sep + 1e-6

    def test_duplicate_cloud_close(self):
        pair = make_pair(seed=22, n=700)
        pts = pair.cloud0.points * 0.3
        cloud = PointCloud(pts, pair.cloud0.sensor_pose, 0.3)
        ident = RigidTransform.identity()
        dup = RegisteredPair(cloud, cloud, ident, ident, 0.0, 0)
        h_joint, h_sep = coral_pair_features(dup, RadiusParams(r_min=1.2, r_max=7.5))
        # Doubling every sample changes the n-1 covariance divisor slightly,
        # so the aggregates match only approximately.
        assert h_joint == pytest.approx(h_sep, abs=0.05)
        assert h_joint <= h_sep + 1e-6


def _lp_uniform(a: np.ndarray, b: np.ndarray) -> float:
    n = a.shape[0]
    return min(
        sum(0.5 * np.sum((a[i] - b[p]) ** 2) for i, p in enumerate(perm)) / n
        for perm in itertools.permutations(range(n))
    )


class TestSinkhornDistance:
    def test_forced_single_atom_plan(self):
        r = sinkhorn_distance([[0.0, 0.0, 0.0]], [1.0], [[1.0, 0.0, 0.0]], [1.0])
        assert r.value == pytest.approx(0.5, abs=1e-12)
        assert r.converged

    def test_identical_measures_finite(self, rng):
        a = rng.normal(size=(6, 3))
        w = np.full(6, 1.0 / 6.0)
        r = sinkhorn_distance(a, w, a, w)
        assert np.isfinite(r.value)

    def test_against_lp_oracle(self, rng):
        params = SinkhornParams(epsilon_reg=0.001, max_iters=20000, tolerance=1e-9)
        for n in (3, 4, 3):
            a = rng.normal(size=(n, 3))
            b = rng.normal(size=(n, 3)) + 1.5
            w = np.full(n, 1.0 / n)
            lp = _lp_uniform(a, b)
            r = sinkhorn_distance(a, w, b, w, params)
            assert abs(r.value - lp) / lp < 0.02

    def test_smaller_epsilon_closer_to_lp(self, rng):
        a = rng.normal(size=(4, 3))
        b = rng.normal(size=(4, 3)) + 1.0
        w = np.full(4, 0.25)
        lp = _lp_uniform(a, b)
        tight = sinkhorn_distance(a, w, b, w, SinkhornParams(0.001, 20000, 1e-9)).value
        loose = sinkhorn_distance(a, w, b, w, SinkhornParams(0.1, 20000, 1e-9)).value
        assert abs(tight - lp) < abs(loose - lp)

    def test_rejects_bad_weights(self):
        pts = np.zeros((2, 3))
        with pytest.raises(BadMeasureError):
            sinkhorn_distance(pts, [0.6, 0.6], pts, [0.5, 0.5])
        with pytest.raises(BadMeasureError):
            sinkhorn_distance(pts, [1.2, -0.2], pts, [0.5, 0.5])

    def test_unconverged_flag(self, rng):
        a = rng.normal(size=(5, 3))
        b = rng.normal(size=(5, 3)) + 3.0
        w = np.full(5, 0.2)
        r = sinkhorn_distance(a, w, b, w, SinkhornParams(0.001, 3, 1e-12))
        assert not r.converged
        assert np.isfinite(r.value)


class TestSinkhornDivergence:
    def test_self_divergence_zero(self, rng):
        a = rng.normal(size=(5, 3))
        w = np.full(5, 0.2)
        assert sinkhorn_divergence(a, w, a, w) < 1e-6

    def test_single_atoms(self):
        v = sinkhorn_divergence([[0.0, 0.0, 0.0]], [1.0], [[1.0, 0.0, 0.0]], [1.0])
        assert v == pytest.approx(0.5, abs=1e-9)

    def test_symmetry(self, rng):
        for _ in range(5):
            a = rng.normal(size=(5, 3))
            b = rng.normal(size=(5, 3))
            wa = rng.uniform(0.5, 1.0, 5)
            wa /= wa.sum()
            wb = rng.uniform(0.5, 1.0, 5)
            wb /= wb.sum()
            s_ab = sinkhorn_divergence(a, wa, b, wb, _TIGHT)
            s_ba = sinkhorn_divergence(b, wb, a, wa, _TIGHT)
            assert s_ab == pytest.approx(s_ba, abs=1e-7)

    def test_non_negative_on_random_pairs(self, rng):
        for _ in range(200):
            a = rng.normal(size=(5, 3))
            b = rng.normal(size=(5, 3))
            w = np.full(5, 0.2)
            raw = sinkhorn_divergence(a, w, b, w, clamp=False)
            assert raw >= -1e-9


class TestLocalSinkhornFeature:
    def test_identical_sides_zero(self, rng):
        a = rng.normal(size=(20, 3))
        assert local_sinkhorn_feature(np.zeros(3), a, a) < 1e-6

    def test_translated_copy_matches_half_t_squared(self, rng):
        a = rng.uniform(-1.5, 1.5, size=(40, 3))
        t = np.array([0.3, 0.0, 0.0])
        v = local_sinkhorn_feature(np.zeros(3), a, a + t, _TIGHT)
        assert v == pytest.approx(0.5 * 0.09, rel=0.10)

    def test_empty_side_is_nan(self, rng):
        assert np.isnan(local_sinkhorn_feature(np.zeros(3), np.empty((0, 3)), rng.normal(size=(3, 3))))

    def test_member_cap_is_deterministic(self, rng):
        a = rng.normal(size=(100, 3))
        b = rng.normal(size=(120, 3))
        v1 = local_sinkhorn_feature(np.zeros(3), a, b, max_members=32)
        v2 = local_sinkhorn_feature(np.zeros(3), a, b, max_members=32)
        assert v1 == v2

    def test_grows_with_offset_sweep(self, rng):
        # Mean local divergence over many neighborhoods rises with the offset.
        base = make_pair(seed=31, n=1200)
        pts = base.cloud0.points * 0.5
        cloud0 = PointCloud(pts, base.cloud0.sensor_pose, 0.05)
        inv = base.gt_transform.inverse()
        cloud1 = PointCloud(inv.apply(pts), base.cloud1.sensor_pose, 0.05)
        fps = (np.arange(0, 1200, 9), np.arange(4, 1200, 9))
        params = RadiusParams(k=5.0, r_min=1.0, r_max=7.5)
        means = []
        for offset in (0.0, 0.3, 0.9):
            shift = RigidTransform(np.eye(3), np.array([offset, 0.0, 0.0]))
            est = shift.compose(base.gt_transform)
            pair = RegisteredPair(cloud0, cloud1, base.gt_transform, est, offset, 0)
            _, joint = build_neighborhoods(pair, fps, params)
            joint_pts = np.vstack([pts, est.apply(cloud1.points)])
            n0 = pts.shape[0]
            values = []
            for nb in joint:
                members = nb.member_indices
                side_a = joint_pts[members[members < n0]]
                side_b = joint_pts[members[members >= n0]]
                center = joint_pts[nb.center_index]
                values.append(local_sinkhorn_feature(center, side_a, side_b, max_members=48))
            values = np.asarray(values)
            assert np.isfinite(values).sum() >= 100
            means.append(np.nanmean(values))
        assert means[0] < means[1] < means[2]


def _small_config(fps: int = 48) -> FeatureConfig:
    return FeatureConfig(fps_count=fps, sinkhorn_max_members=32,
                         radius=RadiusParams(k=5.0, r_min=1.0, r_max=7.5))


class TestAssembleFeatures:
    def test_shapes_and_flags(self):
        pair = make_pair(seed=41, n=2000)
        fm = extract_pair_features(pair, _small_config())
        assert fm.features.shape == (96, FEATURE_DIM)
        assert fm.coords.shape == (96, 3)
        origin = fm.features[:, 4]
        assert (origin == 0).sum() == 48
        assert (origin == 1).sum() == 48
        assert np.isfinite(fm.features).all()
        assert ((fm.features[:, 5] > 0) & (fm.features[:, 5] <= 1)).all()
        assert ((fm.features[:, 6] > 0) & (fm.features[:, 6] <= 1)).all()

    def test_aligned_duplicate_entropy_gap_small(self):
        pair = make_pair(seed=42, n=2000, misalign=0.0)
        fm = extract_pair_features(pair, _small_config())
        gap = fm.features[:, 1].mean() - fm.features[:, 0].mean()
        assert gap <= 0.05

    def test_permutation_equivariance(self, rng):
        pair = make_pair(seed=43, n=1500)
        fm1 = extract_pair_features(pair, _small_config(fps=32))
        perm0 = rng.permutation(len(pair.cloud0))
        perm1 = rng.permutation(len(pair.cloud1))
        shuffled = RegisteredPair(
            PointCloud(pair.cloud0.points[perm0], pair.cloud0.sensor_pose,
                       pair.cloud0.vertical_angular_resolution),
            PointCloud(pair.cloud1.points[perm1], pair.cloud1.sensor_pose,
                       pair.cloud1.vertical_angular_resolution),
            pair.gt_transform, pair.est_transform, pair.epsilon, pair.label,
        )
        fm2 = extract_pair_features(shuffled, _small_config(fps=32))
        order1 = np.lexsort(fm1.coords.T)
        order2 = np.lexsort(fm2.coords.T)
        np.testing.assert_allclose(
            fm1.features[order1], fm2.features[order2], atol=1e-5
        )

    def test_determinism(self):
        pair = make_pair(seed=44, n=1500)
        fm1 = extract_pair_features(pair, _small_config(fps=32))
        fm2 = extract_pair_features(pair, _small_config(fps=32))
        np.testing.assert_array_equal(fm1.features, fm2.features)
        np.testing.assert_array_equal(fm1.coords, fm2.coords)

    def test_not_enough_covisible_points(self):
        pair = make_pair(seed=45, n=300)
        with pytest.raises(NotEnoughPointsError):
            extract_pair_features(pair, FeatureConfig(fps_count=5000))


class TestFeatureMapIO:
    def test_roundtrip_bit_exact(self, tmp_path):
        pair = make_pair(seed=46, n=1200)
        fm = extract_pair_features(pair, _small_config(fps=16))
        path = str(tmp_path / "pair.fmap")
        save_feature_map(fm, path)
        first = open(path, "rb").read()
        loaded = load_feature_map(path)
        np.testing.assert_array_equal(loaded.features, fm.features)
        np.testing.assert_array_equal(loaded.coords, fm.coords)
        assert loaded.label == fm.label
        save_feature_map(loaded, path)
        assert open(path, "rb").read() == first

    def test_csv_export(self, tmp_path, rng):
        fm = FeatureMap(rng.normal(size=(4, FEATURE_DIM)), rng.normal(size=(4, 3)), 3)
        path = str(tmp_path / "fm.csv")
        feature_map_to_csv(fm, path)
        lines = open(path).read().splitlines()
        assert lines[0].startswith("h_sep,h_joint,sinkhorn_div")
        assert len(lines) == 5

    def test_rejects_wrong_magic(self, tmp_path):
        path = tmp_path / "bad.fmap"
        path.write_bytes(b"NOPE" + b"\x00" * 16)
        with pytest.raises(ValueError):
            load_feature_map(str(path))
