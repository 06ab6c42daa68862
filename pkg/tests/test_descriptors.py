import numpy as np
import pytest
from hypothesis import assume, given, settings, strategies as st

from conftest import fibonacci_sphere, grid_plane, interior_mask, random_rotation, wavy_surface
from pointanom.descriptors import (DegeneratePairError, DescriptorConfig, descriptor_scores, fpfh,
                                   pair_features, spfh, spfh_all, threshold_scores)
from pointanom.geometry import PointCloud, build_index, estimate_normals, rigid_transform

S2 = 1 / np.sqrt(2)


def frame_features(ps, ns, pt, nt):
    """Oracle: express the target normal in the source's (u, v, w) frame."""
    d = (pt - ps) / np.linalg.norm(pt - ps)
    v = np.cross(d, ns)
    v /= np.linalg.norm(v)
    M = np.stack([ns, v, np.cross(ns, v)])
    local = M @ nt
    return local[1], ns @ d, np.arctan2(local[2], local[0])


def oracle_spfh(points, normals, i, nbrs, bins):
    feats = []
    for j in nbrs:
        a, b = min(i, j), max(i, j)
        d = points[b] - points[a]
        d /= np.linalg.norm(d)
        if abs(normals[b] @ d) > abs(normals[a] @ d) + 1e-12:
            a, b = b, a
        feats.append(frame_features(points[a], normals[a], points[b], normals[b]))
    f = np.array(feats)
    ranges = [(-1, 1), (-1, 1), (-np.pi, np.pi)]
    return np.concatenate([np.histogram(f[:, c], bins=bins, range=ranges[c])[0] / len(f)
                           for c in range(3)])


def unit(rng):
    v = rng.normal(size=3)
    return v / np.linalg.norm(v)


class TestPairFeatures:
    def test_coplanar_parallel_normals(self):
        f = pair_features([0, 0, 0], [0, 0, 1], [1, 0, 0], [0, 0, 1])
        assert f.as_tuple() == pytest.approx((0.0, 0.0, 0.0), abs=1e-15)

    def test_tilted_target_normal(self):
        f = pair_features([0, 0, 0], [0, 1, 0], [1, 0, 0], [0, S2, S2])
        assert f.as_tuple() == pytest.approx((0.7071067811865475, 0.0, 0.0), abs=1e-12)

    def test_matches_frame_oracle(self, rng):
        for _ in range(50):
            p, q = rng.normal(size=3), rng.normal(size=3)
            n, m = unit(rng), unit(rng)
            d = (q - p) / np.linalg.norm(q - p)
            if abs(m @ d) > abs(n @ d):
                want = frame_features(q, m, p, n)
            else:
                want = frame_features(p, n, q, m)
            assert pair_features(p, n, q, m).as_tuple() == pytest.approx(want, abs=1e-12)

    def test_source_is_smaller_angle_point(self):
        # second point's normal is closer to the connecting line
        f = pair_features([0, 0, 0], [0, 0, 1], [1, 0, 0], [S2, 0, S2])
        g = pair_features([1, 0, 0], [S2, 0, S2], [0, 0, 0], [0, 0, 1])
        assert f.as_tuple() == pytest.approx(g.as_tuple(), abs=1e-15)

    def test_coincident_points(self):
        with pytest.raises(DegeneratePairError):
            pair_features([1, 1, 1], [0, 0, 1], [1, 1, 1], [0, 1, 0])

    def test_line_parallel_to_normal(self):
        with pytest.raises(DegeneratePairError):
            pair_features([0, 0, 0], [0, 0, 1], [0, 0, 2], [0, 0, 1])

    @settings(max_examples=60, deadline=None)
    @given(st.integers(0, 2 ** 32 - 1))
    def test_rigid_invariance(self, seed):
        rng = np.random.default_rng(seed)
        p, q = rng.normal(size=3), rng.normal(size=3)
        n, m = unit(rng), unit(rng)
        d = (q - p) / np.linalg.norm(q - p)
        # stay away from the degenerate and near-tie configurations
        assume(min(np.linalg.norm(np.cross(d, n)), np.linalg.norm(np.cross(d, m))) > 1e-3)
        assume(abs(abs(n @ d) - abs(m @ d)) > 1e-6)
        R, t = random_rotation(rng), rng.normal(size=3) * 10
        f = pair_features(p, n, q, m).as_tuple()
        g = pair_features(R @ p + t, R @ n, R @ q + t, R @ m).as_tuple()
        assert g == pytest.approx(f, abs=1e-9)

    @settings(max_examples=60, deadline=None)
    @given(st.integers(0, 2 ** 32 - 1))
    def test_ranges(self, seed):
        rng = np.random.default_rng(seed)
        try:
            a, ph, th = pair_features(rng.normal(size=3), unit(rng), rng.normal(size=3), unit(rng)).as_tuple()
        except DegeneratePairError:
            return
        assert -1 <= a <= 1 and -1 <= ph <= 1 and -np.pi < th <= np.pi


def plane_setup(n=10, k=8):
    c = grid_plane(n)
    idx = build_index(c, k=k)
    return c, idx, estimate_normals(c, idx)


class TestSpfh:
    def test_plane_interior_center_bins(self):
        c, idx, nrm = plane_setup()
        h = spfh(c, nrm, idx, 55, DescriptorConfig(k=8))
        expected = np.zeros(33)
        expected[[5, 16, 27]] = 1.0
        assert np.array_equal(h, expected)

    def test_single_neighbor(self, rng):
        c = wavy_surface(40, rng)
        idx = build_index(c, k=2)
        nrm = estimate_normals(c, build_index(c, k=8))
        cfg = DescriptorConfig(k=2)
        # neighbour lists of one point via a 2-point cloud
        two = PointCloud(c.points[:2])
        from pointanom.geometry import UnitNormalField
        nf = UnitNormalField(nrm.normals[:2], np.zeros(2, bool))
        h = spfh(two, nf, build_index(two, k=1), 0, DescriptorConfig(k=2))
        for f in range(3):
            block = h[f * 11:(f + 1) * 11]
            assert np.count_nonzero(block) == 1 and block.sum() == 1.0
        assert spfh(c, nrm, idx, 0, cfg).sum() == pytest.approx(3.0)

    def test_matches_binning_oracle(self, rng):
        c = wavy_surface(300, rng)
        idx = build_index(c, k=12)
        nrm = estimate_normals(c, idx)
        hist, counts, skipped = spfh_all(c, nrm, idx, DescriptorConfig(k=12))
        nb = idx.knn_all(12)
        assert skipped == 0 and np.all(counts == 12)
        for i in range(0, 300, 7):
            want = oracle_spfh(c.points, nrm.normals, i, nb[i], 11)
            np.testing.assert_allclose(hist[i], want, atol=1e-12)

    def test_degenerate_pairs_skipped_and_flagged(self):
        # collinear points with normals along the line: every pair is degenerate
        p = np.column_stack([np.zeros(5), np.zeros(5), np.arange(5.0)])
        c = PointCloud(p)
        from pointanom.geometry import UnitNormalField
        nf = UnitNormalField(np.tile([0, 0, 1.0], (5, 1)), np.zeros(5, bool))
        d = fpfh(c, nf, build_index(c, k=2), DescriptorConfig(k=2))
        assert d.flags.all() and d.skipped_pairs == 10
        assert np.all(d.histograms == 0)


class TestFpfh:
    def test_plane_interior_identical(self):
        n = 14
        c, idx, nrm = plane_setup(n, 8)
        h = fpfh(c, nrm, idx, DescriptorConfig(k=8)).histograms[interior_mask(n, 3)]
        assert np.abs(h - h[0]).sum(axis=1).max() < 1e-6

    def test_sphere_uniform(self):
        c = fibonacci_sphere(4000)
        idx = build_index(c, k=16)
        nrm = estimate_normals(c, idx, orient="outward")
        h = fpfh(c, nrm, idx, DescriptorConfig(k=16, bins=11)).histograms
        med = np.median(h, axis=0)
        assert np.abs(h - med).sum(axis=1).max() < 0.05

    def test_blocks_normalized(self, rng):
        c = wavy_surface(200, rng)
        idx = build_index(c, k=10)
        d = fpfh(c, estimate_normals(c, idx), idx, DescriptorConfig(k=10))
        for f in range(3):
            np.testing.assert_allclose(d.block(f).sum(axis=1), 1.0, atol=1e-12)

    def test_aggregation_formula(self, rng):
        c = wavy_surface(150, rng)
        idx = build_index(c, k=8)
        nrm = estimate_normals(c, idx)
        cfg = DescriptorConfig(k=8)
        s, _, _ = spfh_all(c, nrm, idx, cfg)
        nb = idx.knn_all(8)
        h = fpfh(c, nrm, idx, cfg).histograms
        for i in range(0, 150, 11):
            raw = s[i] + np.mean([s[j] / w for j, w in zip(nb[i], nb.dist(i))], axis=0)
            want = np.concatenate([b / b.sum() for b in np.split(raw, 3)])
            np.testing.assert_allclose(h[i], want, atol=1e-12)

    def test_rigid_invariance(self, rng):
        c = wavy_surface(500, rng)
        R, t = random_rotation(rng), rng.normal(size=3)
        ct = rigid_transform(c, R, t)
        h0 = fpfh(c, estimate_normals(c, build_index(c, k=10)), build_index(c, k=16)).histograms
        h1 = fpfh(ct, estimate_normals(ct, build_index(ct, k=10), viewpoint=R @ [0, 0, 1.0]),
                  build_index(ct, k=16)).histograms
        assert np.abs(h0 - h1).sum(axis=1).max() < 1e-6


class TestScores:
    def test_plane_scores_zero(self):
        n = 12
        c, idx, nrm = plane_setup(n, 8)
        # wrap-free interior: restrict to the points whose neighborhoods are all interior
        d = descriptor_scores(fpfh(c, nrm, idx, DescriptorConfig(k=8)))
        m = interior_mask(n, 3)
        sub = d.histograms[m]
        med = np.median(sub, axis=0)
        assert np.abs(sub - med).sum(axis=1).max() < 1e-6
        assert np.median(d.scores) < 1e-6

    def test_pushed_point_has_largest_score(self):
        n = 15
        p = grid_plane(n).points.copy()
        i = 7 * n + 7
        p[i, 2] = 5.0
        c = PointCloud(p)
        idx = build_index(c, k=16)
        nrm = estimate_normals(c, build_index(c, k=10))
        d = descriptor_scores(fpfh(c, nrm, idx))
        assert np.argmax(d.scores) == i
        assert np.sum(d.scores == d.scores.max()) == 1

    def test_duplicated_descriptors_same_multiset(self, rng):
        from pointanom.descriptors import DescriptorSet
        h = rng.dirichlet(np.ones(33), size=120)
        one = descriptor_scores(DescriptorSet(h, np.zeros(120, bool), 11)).scores
        perm = rng.permutation(240)
        two = descriptor_scores(DescriptorSet(np.vstack([h, h])[perm], np.zeros(240, bool), 11)).scores
        np.testing.assert_allclose(np.sort(two), np.sort(np.concatenate([one, one])), atol=1e-15)

    def test_far_copy_same_multiset(self, rng):
        c = wavy_surface(200, rng)
        both = PointCloud(np.vstack([c.points, c.points + [100.0, 0, 0]]))
        nrm = estimate_normals(both, build_index(both, k=10))
        s = descriptor_scores(fpfh(both, nrm, build_index(both, k=12))).scores
        np.testing.assert_allclose(np.sort(s[:200]), np.sort(s[200:]), atol=1e-9)

    def test_exact_source_tie_goes_to_lower_index(self):
        # equal normals: both endpoints make the same angle with the line
        p = np.array([[0.0, 0, 0], [1, 0, 0.5]])
        n = np.tile([0, 0, 1.0], (2, 1))
        from pointanom.geometry import UnitNormalField
        nf = UnitNormalField(n, np.zeros(2, bool))
        fwd = spfh(PointCloud(p), nf, build_index(PointCloud(p), k=1), 0, DescriptorConfig(k=2))
        rev = spfh(PointCloud(p[::-1]), nf, build_index(PointCloud(p[::-1]), k=1), 0, DescriptorConfig(k=2))
        phi = pair_features(p[0], n[0], p[1], n[1]).phi
        assert phi > 0
        # reversing the storage order makes the other point the source
        assert not np.array_equal(fwd, rev)

    def test_flagged_get_max_score(self):
        from pointanom.descriptors import DescriptorSet
        h = np.array([[1, 0, 1, 0, 1, 0], [0, 1, 0, 1, 0, 1], [0, 0, 0, 0, 0, 0.0]])
        d = descriptor_scores(DescriptorSet(h, np.array([False, False, True]), 2))
        assert d.scores[2] == d.scores[:2].max()


class TestThreshold:
    def test_single_outlier(self):
        assert threshold_scores([0, 0, 0, 0, 0, 0, 0, 10]).tolist() == [0] * 7 + [1]

    def test_constant(self):
        assert not threshold_scores(np.full(20, 3.3)).any()

    def test_too_few_for_mad(self):
        with pytest.raises(ValueError):
            threshold_scores([0, 1, 2])

    def test_rules(self):
        s = np.arange(10.0)
        assert threshold_scores(s, "value", 6.5).sum() == 3
        assert threshold_scores(s, "quantile", 0.8).tolist() == [0] * 8 + [1, 1]
        with pytest.raises(ValueError):
            threshold_scores(s, "bogus")

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.floats(0, 1e3, allow_nan=False), min_size=8, max_size=60),
           st.floats(1e-3, 1e3))
    def test_scale_equivariant(self, s, c):
        s = np.array(s)
        assert np.array_equal(threshold_scores(s), threshold_scores(s * c)) or \
            np.isclose(np.abs(s - np.median(s)), 0).any()

    def test_mad_formula(self, rng):
        s = rng.gamma(2.0, size=500)
        med = np.median(s)
        cut = med + 3 * 1.4826 * np.median(np.abs(s - med))
        assert np.array_equal(threshold_scores(s), (s > cut).astype(np.int8))
