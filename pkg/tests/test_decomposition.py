import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import grid_plane, interior_mask, random_rotation, wavy_surface
from pointanom.decomposition import (DecompositionConfig, DecompositionResult, bisect_lambda,
                                     build_smoothness_operator, gaussian_weights,
                                     group_log_penalty, group_soft_threshold, labels_from_rows,
                                     lambda_max, marginal_weight, objective, solve_decomposition,
                                     spectral_norm_sq)
from pointanom.geometry import PointCloud, build_index, rigid_transform


def spiked_plane(n, spikes, height=1.0):
    p = grid_plane(n).points.copy()
    ids = [a * n + b for a, b in spikes]
    p[ids, 2] = height
    return PointCloud(p), sorted(ids)


def operator(cloud, k=8, **kw):
    return build_smoothness_operator(cloud, build_index(cloud, k=k), k, **kw)


class TestOperator:
    def test_interior_grid_row_zero(self):
        n = 9
        c = grid_plane(n)
        H = operator(c, k=8)
        HX = H.H @ c.points
        # symmetric 8-neighborhood of a node away from the edge
        assert np.linalg.norm(HX[4 * n + 4]) < 1e-14

    def test_rows_sum_to_zero(self, rng):
        c = wavy_surface(300, rng)
        H = operator(c, drop_boundary=False)
        np.testing.assert_allclose(H.H @ np.ones(300), 0.0, atol=1e-14)
        const = np.tile(rng.normal(size=3), (300, 1))
        np.testing.assert_allclose(H.H @ const, 0.0, atol=1e-13)

    def test_weights_convex(self, rng):
        c = wavy_surface(200, rng)
        H = operator(c, k=10)
        w = H.weights
        assert np.all(w > 0)
        np.testing.assert_allclose(np.bincount(np.repeat(np.arange(200), np.diff(H.indptr)), w), 1.0)

    def test_gaussian_weights_formula(self):
        d = np.array([1.0, 2.0, 3.0, 0.5, 0.5])
        indptr = np.array([0, 3, 5])
        w = gaussian_weights(d, indptr)
        raw = np.exp(-(d[:3] / 2.0) ** 2)
        np.testing.assert_allclose(w[:3], raw / raw.sum())
        np.testing.assert_allclose(w[3:], [0.5, 0.5])

    def test_plane_interior_rows_small(self):
        n = 40
        c = grid_plane(n, spacing=0.7)
        H = operator(c)
        HX = H.H @ c.points
        assert np.linalg.norm(HX, axis=1).max() <= 1e-8 * c.diameter()

    def test_boundary_ring_dropped(self):
        n = 12
        H = operator(grid_plane(n))
        assert np.array_equal(H.active, interior_mask(n, 1))

    def test_tilted_plane_same_active_set(self, rng):
        n = 12
        c = rigid_transform(grid_plane(n), random_rotation(rng), [3.0, -1.0, 2.0])
        H = operator(c)
        assert np.array_equal(H.active, interior_mask(n, 1))
        assert np.linalg.norm(H.H @ c.points, axis=1).max() <= 1e-8 * c.diameter()

    def test_isolated_points_listed(self):
        p = np.array([[0.0, 0, 0], [1, 0, 0], [0, 1, 0], [1, 1, 0], [50, 50, 50]])
        c = PointCloud(p)
        with pytest.raises(ValueError, match=r"\[4\]"):
            build_smoothness_operator(c, build_index(c, r=2.0), k=4)


class TestPenalty:
    def test_single_row_eps_to_zero(self):
        assert group_log_penalty([[3.0, 4.0, 0.0]], 1e-14) == pytest.approx(np.log(10.0), abs=1e-12)

    def test_zero_rows(self):
        assert group_log_penalty(np.zeros((7, 3)), 1e-4) == pytest.approx(7 * -4.605170185988091, abs=1e-12)

    def test_matches_direct_evaluation(self, rng):
        A = rng.normal(size=(50, 3))
        eps = 0.37
        want = sum(np.log(np.sqrt(a @ a + eps) + np.sqrt(a @ a)) for a in A)
        assert group_log_penalty(A, eps) == pytest.approx(want, abs=1e-12)

    def test_eps_positive(self):
        with pytest.raises(ValueError):
            group_log_penalty(np.zeros((2, 3)), 0.0)

    @settings(max_examples=50, deadline=None)
    @given(st.floats(1e-6, 1e2), st.floats(1e-6, 10.0))
    def test_marginal_weight_is_derivative(self, a, eps):
        h = 1e-6 * max(a, 1.0)
        f = lambda x: np.log(np.sqrt(x * x + eps) + x)
        num = (f(a + h) - f(a - h)) / (2 * h)
        assert marginal_weight(a, 1.0, eps) == pytest.approx(num, rel=1e-5)

    def test_group_soft_threshold(self):
        Z = np.array([[3.0, 4.0, 0.0], [0.3, 0.4, 0.0], [0.0, 0.0, 0.0]])
        out = group_soft_threshold(Z, np.array([1.0, 1.0, 1.0]))
        np.testing.assert_allclose(out, [[2.4, 3.2, 0.0], [0, 0, 0], [0, 0, 0]])


class TestLambdaMax:
    def test_plane_near_zero(self):
        c = grid_plane(20)
        assert lambda_max(operator(c), c, 1e-4 * c.diameter() ** 2) < 1e-10

    def test_spike_row_dominates(self):
        c, ids = spiked_plane(15, [(7, 7)])
        H = operator(c)
        G = np.linalg.norm(H.H.T @ (H.H @ c.points), axis=1)
        eps = 1e-4 * c.diameter() ** 2
        assert np.argmax(G) == ids[0]
        assert lambda_max(H, c, eps) == pytest.approx(2 * np.sqrt(eps) * G[ids[0]], rel=1e-14)

    def test_zero_is_stationary_above(self):
        c, _ = spiked_plane(15, [(5, 9)])
        H = operator(c)
        res = solve_decomposition(c, H, DecompositionConfig(lam=1.01 * lambda_max(H, c, 1e-4 * c.diameter() ** 2)))
        assert np.all(res.row_norms < res.delta)


class TestSolver:
    def test_plane_at_lambda_max(self):
        c = grid_plane(12)
        H = operator(c)
        res = solve_decomposition(c, H, DecompositionConfig(lam_ratio=1.0))
        assert np.all(res.A == 0)
        assert np.array_equal(res.X_hat, c.points)

    @pytest.mark.parametrize("n,spikes", [(15, [(7, 7)]), (20, [(5, 5), (14, 12)]),
                                          (25, [(6, 6), (12, 18), (18, 8)])])
    def test_spike_support(self, n, spikes):
        c, ids = spiked_plane(n, spikes)
        H = operator(c)
        res = solve_decomposition(c, H, DecompositionConfig(lam_ratio=0.1))
        G = np.linalg.norm(H.H.T @ (H.H @ c.points), axis=1)
        oracle = sorted(np.argsort(-G, kind="stable")[:len(ids)].tolist())
        assert oracle == ids
        assert np.flatnonzero(labels_from_rows(res)).tolist() == ids

    def test_objective_non_increasing(self, rng):
        c = wavy_surface(400, rng)
        H = operator(c, drop_boundary=False)
        for ratio in (0.01, 0.1, 0.5):
            res = solve_decomposition(c, H, DecompositionConfig(lam_ratio=ratio, max_outer=15))
            assert np.all(np.diff(res.objective) <= 1e-10)
            assert res.rejected_steps == 0

    def test_objective_value_matches_trace(self, rng):
        c, _ = spiked_plane(12, [(6, 6)])
        H = operator(c)
        res = solve_decomposition(c, H)
        assert res.objective[-1] == pytest.approx(objective(H, c, res.A, res.lam, res.eps), rel=1e-12)
        np.testing.assert_allclose(res.E, H.H @ res.X_hat)

    def test_negative_lambda(self):
        with pytest.raises(ValueError):
            DecompositionConfig(lam=-1.0)

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_non_finite_objective(self):
        c = grid_plane(6)
        H = operator(c)
        Y = c.points.copy()
        Y[14, 2] = 1e200
        with pytest.raises(FloatingPointError):
            solve_decomposition(Y, H, DecompositionConfig(lam=1.0, eps=1.0), diameter=10.0)

    def test_deterministic(self, rng):
        c = wavy_surface(300, rng)
        H = operator(c)
        a = solve_decomposition(c, H)
        b = solve_decomposition(c, H)
        assert np.array_equal(a.A, b.A) and a.objective == b.objective

    def test_spectral_norm(self, rng):
        c = wavy_surface(150, rng)
        H = operator(c, drop_boundary=False).H
        exact = np.linalg.eigvalsh((H.T @ H).toarray()).max()
        assert spectral_norm_sq(H) == pytest.approx(exact, rel=1e-4)


class TestLabels:
    def test_zero_rows_all_normal(self):
        res = DecompositionResult(np.zeros((5, 3)), np.zeros((5, 3)), np.zeros((5, 3)), delta=1e-6)
        assert not labels_from_rows(res).any()

    def test_one_row(self):
        A = np.zeros((4, 3))
        A[2] = [0.3, 0.4, 0.0]
        res = DecompositionResult(A, A, A, delta=1e-6 * 10.0)
        assert labels_from_rows(res).tolist() == [0, 0, 1, 0]

    def test_translation_invariant(self, rng):
        c, _ = spiked_plane(14, [(6, 7)])
        t = rigid_transform(c, np.eye(3), rng.normal(size=3) * 50)
        la = labels_from_rows(solve_decomposition(c, operator(c)))
        lb = labels_from_rows(solve_decomposition(t, operator(t)))
        assert np.array_equal(la, lb)


class TestBisect:
    def test_fraction_respected(self):
        c, ids = spiked_plane(20, [(5, 5), (14, 12)], height=0.5)
        H = operator(c)
        lam, res = bisect_lambda(c, H, 0.01)
        assert labels_from_rows(res).mean() <= 0.01
        assert 0 < lam <= res.lam_max

    def test_bad_fraction(self):
        c = grid_plane(6)
        with pytest.raises(ValueError):
            bisect_lambda(c, operator(c), 1.5)
