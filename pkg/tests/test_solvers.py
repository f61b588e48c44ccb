import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from patchsr import solvers
from patchsr.errors import InsufficientDataError


def svd_pinv(A, rcond=1e-10):
    u, s, vt = np.linalg.svd(A, full_matrices=False)
    keep = s > rcond * s[0]
    return (vt[keep].T / s[keep]) @ u[:, keep].T


def lasso_kkt_violation(A, x, w, lam):
    g = A.T @ (x - A @ w)
    zero = w == 0
    v_zero = np.max(np.abs(g[zero]) - lam, initial=0.0)
    v_nz = np.max(np.abs(g[~zero] - lam * np.sign(w[~zero])), initial=0.0)
    return max(v_zero, v_nz)


class TestEigenModel:
    def test_two_points_by_hand(self):
        L = np.array([[0.0, 2.0], [0.0, 2.0]])
        m = solvers.fit_eigenmodel(L, L)
        np.testing.assert_allclose(m.mean_lr, [1.0, 1.0])
        assert m.rank == 1
        np.testing.assert_allclose(np.abs(m.eigenfaces[:, 0]), [1 / np.sqrt(2)] * 2)

    def test_identical_columns_degenerate(self):
        L = np.ones((4, 3))
        m = solvers.fit_eigenmodel(L, 2 * L)
        assert m.rank == 0
        np.testing.assert_allclose(m.lr_centered, 0.0)
        assert np.all(solvers.eigen_weights(np.ones(4), m) == 0)

    def test_eigenfaces_orthonormal(self):
        rng = np.random.default_rng(0)
        L = rng.normal(size=(10, 6))
        m = solvers.fit_eigenmodel(L, rng.normal(size=(20, 6)), variance_keep=1.0)
        np.testing.assert_allclose(m.eigenfaces.T @ m.eigenfaces, np.eye(m.rank), atol=1e-8)
        assert m.rank == 5  # M - 1 after centering

    def test_mean_input_gives_zero_weights(self):
        rng = np.random.default_rng(1)
        L = rng.normal(size=(8, 5))
        m = solvers.fit_eigenmodel(L, L)
        np.testing.assert_allclose(solvers.eigen_weights(m.mean_lr, m), 0.0, atol=1e-12)

    def test_training_column_reproduced(self):
        rng = np.random.default_rng(2)
        L = rng.normal(size=(12, 5))
        m = solvers.fit_eigenmodel(L, L, variance_keep=1.0)
        for i in range(5):
            w = solvers.eigen_weights(L[:, i], m)
            np.testing.assert_allclose(m.lr_centered @ w + m.mean_lr, L[:, i], atol=1e-6)

    def test_orthogonal_input(self):
        L = np.array([[1.0, -1.0], [0.0, 0.0], [0.0, 0.0]])
        m = solvers.fit_eigenmodel(L, L)
        w = solvers.eigen_weights(np.array([0.0, 3.0, -2.0]), m)
        np.testing.assert_allclose(w, 0.0, atol=1e-12)

    def test_needs_two_samples(self):
        with pytest.raises(InsufficientDataError):
            solvers.fit_eigenmodel(np.ones((3, 1)), np.ones((3, 1)))

    @pytest.mark.parametrize("d,m", [(6, 10), (10, 6), (7, 7)])
    def test_batched_matches_reference(self, d, m):
        rng = np.random.default_rng(d * 31 + m)
        L = rng.normal(size=(3, d, m))
        H = rng.normal(size=(3, 2 * d, m))
        x = rng.normal(size=(3, d))
        got = solvers.eigentransform_batch(L, H, x, 0.95)
        for n in range(3):
            model = solvers.fit_eigenmodel(L[n], H[n], 0.95)
            ref = model.hr_centered @ solvers.eigen_weights(x[n], model) + model.mean_hr
            np.testing.assert_allclose(got[n], ref, atol=1e-9)


class TestSumToOne:
    def test_single_neighbour(self):
        assert solvers.solve_sum_to_one(np.array([[3.0], [4.0]]), np.array([1.0, 1.0])).tolist() == [1.0]

    def test_exact_basis(self):
        w = solvers.solve_sum_to_one(np.eye(2), np.array([1.0, 0.0]))
        np.testing.assert_allclose(w, [1.0, 0.0], atol=1e-8)

    def test_identical_columns(self):
        A = np.array([[2.0, 2.0], [5.0, 5.0]])
        w = solvers.solve_sum_to_one(A, np.array([2.0, 5.0]))
        np.testing.assert_allclose(w, [0.5, 0.5])

    @given(st.integers(2, 12), st.integers(1, 8), st.integers(0, 2 ** 31))
    @settings(max_examples=40, deadline=None)
    def test_constraint_holds(self, d, k, seed):
        rng = np.random.default_rng(seed)
        w = solvers.solve_sum_to_one(rng.normal(size=(d, k)), rng.normal(size=d))
        assert w.sum() == pytest.approx(1.0, abs=1e-9)


class TestRidge:
    def test_scalar(self):
        assert solvers.solve_ridge(np.array([[2.0]]), np.array([[4.0]]), 0.0)[0, 0] == pytest.approx(2.0)

    def test_identity(self):
        np.testing.assert_allclose(solvers.solve_ridge(np.eye(3), np.eye(3)), np.eye(3), atol=1e-12)

    def test_shrinkage(self):
        assert solvers.solve_ridge(np.array([[1.0]]), np.array([[1.0]]), 1.0)[0, 0] == pytest.approx(0.5)

    def test_normal_equations(self):
        rng = np.random.default_rng(3)
        L, H, lam = rng.normal(size=(5, 9)), rng.normal(size=(7, 9)), 0.3
        ref = H @ L.T @ np.linalg.inv(L @ L.T + lam * np.eye(5))
        np.testing.assert_allclose(solvers.solve_ridge(L, H, lam), ref, atol=1e-10)

    def test_negative_lambda(self):
        with pytest.raises(ValueError):
            solvers.solve_ridge(np.eye(2), np.eye(2), -1.0)


class TestLasso:
    def test_soft_threshold_closed_form(self):
        w = solvers.solve_lasso(np.eye(2), np.array([3.0, 0.5]), 1.0)
        np.testing.assert_allclose(w, [2.0, 0.0])

    def test_full_shrinkage(self):
        rng = np.random.default_rng(4)
        A, x = rng.normal(size=(6, 3)), rng.normal(size=6)
        lam = np.abs(A.T @ x).max()
        assert np.all(solvers.solve_lasso(A, x, lam) == 0)

    @pytest.mark.parametrize("seed", range(5))
    def test_kkt_random(self, seed):
        rng = np.random.default_rng(seed)
        A, x = rng.normal(size=(8, 4)), rng.normal(size=8)
        lam = 0.2 * np.abs(A.T @ x).max()
        w = solvers.solve_lasso(A, x, lam)
        assert lasso_kkt_violation(A, x, w, lam) <= 1e-6

    def test_objective_history_monotone(self):
        rng = np.random.default_rng(9)
        A, x = rng.normal(size=(10, 15)), rng.normal(size=10)
        w, hist = solvers.solve_lasso(A, x, 0.1, return_history=True)
        assert np.all(np.diff(hist) <= 1e-12)
        final = 0.5 * np.sum((x - A @ w) ** 2) + 0.1 * np.abs(w).sum()
        assert hist[-1] == pytest.approx(final, rel=1e-9)

    def test_batched_matches_single(self):
        rng = np.random.default_rng(10)
        A, x = rng.normal(size=(3, 6, 5)), rng.normal(size=(3, 6))
        wb = solvers.lasso_batch(A, x, 0.3, 10000, 1e-12)
        for n in range(3):
            np.testing.assert_allclose(wb[n], solvers.solve_lasso(A[n], x[n], 0.3, tol=1e-12), atol=1e-10)

    def test_lambda_must_be_positive(self):
        with pytest.raises(ValueError):
            solvers.solve_lasso(np.eye(2), np.ones(2), 0.0)


class TestLocality:
    def test_tau_zero_square(self):
        rng = np.random.default_rng(5)
        A, x = rng.normal(size=(4, 4)) + 4 * np.eye(4), rng.normal(size=4)
        w = solvers.solve_locality_regularized(A, x, np.ones(4), 0.0)
        np.testing.assert_allclose(w, np.linalg.solve(A, x), atol=1e-10)

    def test_scalar(self):
        w = solvers.solve_locality_regularized(np.array([[1.0]]), np.array([2.0]), np.array([1.0]), 1.0)
        assert w[0] == pytest.approx(1.0)

    def test_infinite_penalty(self):
        rng = np.random.default_rng(6)
        w = solvers.solve_locality_regularized(rng.normal(size=(5, 3)), rng.normal(size=5), np.ones(3), 1e12)
        np.testing.assert_allclose(w, 0.0, atol=1e-9)

    def test_matches_stacked_lstsq(self):
        rng = np.random.default_rng(7)
        A, x, dist = rng.normal(size=(6, 9)), rng.normal(size=6), rng.uniform(0.5, 2, 9)
        got = solvers.solve_locality_regularized(A, x, dist, 0.4)
        aug = np.vstack([A, np.sqrt(0.4) * np.diag(dist)])
        ref = np.linalg.lstsq(aug, np.concatenate([x, np.zeros(9)]), rcond=None)[0]
        np.testing.assert_allclose(got, ref, atol=1e-10)

    def test_zero_distance_falls_back_to_pinv(self):
        A = np.array([[1.0, 1.0], [0.0, 0.0]])
        w = solvers.solve_locality_regularized(A, np.array([2.0, 0.0]), np.array([0.0, 0.0]), 1.0)
        np.testing.assert_allclose(w, [1.0, 1.0], atol=1e-10)


class TestPinvAndKnn:
    @given(st.integers(1, 12), st.integers(1, 12), st.integers(0, 2 ** 31))
    @settings(max_examples=40, deadline=None)
    def test_lstsq_matches_svd_oracle(self, d, k, seed):
        rng = np.random.default_rng(seed)
        A, x = rng.normal(size=(d, k)), rng.normal(size=d)
        np.testing.assert_allclose(solvers.lstsq_pinv(A, x), svd_pinv(A) @ x, atol=1e-9)

    def test_knn_all(self):
        idx, _ = solvers.knn(np.zeros(2), np.eye(2)[:, [0, 1, 0]], 3)
        assert sorted(idx.tolist()) == [0, 1, 2]

    def test_knn_exact_match_first(self):
        rng = np.random.default_rng(8)
        cols = rng.normal(size=(4, 6))
        idx, dist = solvers.knn(cols[:, 3], cols, 2)
        assert idx[0] == 3 and dist[0] == 0.0

    def test_knn_ties_lower_index(self):
        cols = np.array([[1.0, -1.0, 1.0]])
        idx, _ = solvers.knn(np.zeros(1), cols, 2)
        assert idx.tolist() == [0, 1]

    def test_knn_sort_oracle(self):
        rng = np.random.default_rng(11)
        cols, q = rng.normal(size=(5, 6)), rng.normal(size=5)
        full = sorted(range(6), key=lambda i: (np.linalg.norm(cols[:, i] - q), i))
        assert solvers.knn(q, cols, 2)[0].tolist() == full[:2]

    def test_knn_bad_k(self):
        with pytest.raises(ValueError):
            solvers.knn(np.zeros(2), np.eye(2), 3)
