import numpy as np
import pytest

from treebal.errors import DimensionError, InvalidSpecError
from treebal.forest import EnsembleModel, ForestParams, fit_random_forest
from treebal.kernel import (
    MODE_KERNEL_ONLY,
    MODE_KERNEL_PLUS_RAW,
    MODE_RAW_ONLY,
    KernelMatrix,
    assemble_features,
    forest_kernel,
    gaussian_kernel,
    kernel_imbalance,
    matrix_to_csv,
    polynomial_kernel,
    select_bandwidth_max_variance,
    spectral_features,
)
from treebal.trees import Internal, Leaf, leaf_ids, renumber_leaves


def _stump(var, thr):
    return renumber_leaves(
        Internal(var=var, threshold=thr, left=Leaf(-1, 0.0), right=Leaf(-1, 1.0))
    )


def _ensemble(roots, p):
    return EnsembleModel(
        trees=[(0, t, r) for t, r in enumerate(roots)],
        kind="rf",
        B=1,
        T=len(roots),
        p=p,
    )


def explicit_leaf_features(model, X):
    """One-hot leaf indicators over all trees, scaled by 1/sqrt(B*T)."""
    blocks = []
    for _, _, root in model.trees:
        ids = leaf_ids(root, X)
        block = np.zeros((X.shape[0], ids.max() + 1))
        block[np.arange(X.shape[0]), ids] = 1.0
        blocks.append(block)
    return np.hstack(blocks) / np.sqrt(len(model.trees))


def explicit_imbalance(model, X, w, Z):
    Phi = explicit_leaf_features(model, X)
    n1 = (Z == 1).sum()
    diff = ((1 - Z) * w) @ Phi - (Z == 1) @ Phi / n1
    return float(diff @ diff)


class TestForestKernel:
    def test_single_tree_shared_leaf_gives_one(self):
        model = _ensemble([_stump(0, 0.5)], p=1)
        K = forest_kernel(model, [[0.1], [0.2], [0.9]]).K
        assert K[0, 1] == 1.0
        assert K[0, 2] == 0.0

    def test_two_trees_one_coleaf_gives_half(self):
        model = _ensemble([_stump(0, 0.5), _stump(0, 0.15)], p=1)
        # rows 0.1 and 0.2 share a leaf in the first stump only
        K = forest_kernel(model, [[0.1], [0.2]]).K
        assert K[0, 1] == 0.5

    def test_diagonal_exactly_one(self):
        rng = np.random.default_rng(0)
        X = rng.standard_normal((40, 3))
        model = fit_random_forest(X, rng.standard_normal(40), ForestParams(T=7), seed=1)
        K = forest_kernel(model, X).K
        assert (np.diag(K) == 1.0).all()
        assert np.array_equal(K, K.T)
        assert K.min() >= 0.0 and K.max() <= 1.0

    def test_dimension_mismatch(self):
        model = _ensemble([_stump(0, 0.5)], p=1)
        with pytest.raises(DimensionError):
            forest_kernel(model, np.zeros((3, 2)))


class TestGaussianKernel:
    def test_identical_rows_give_one(self):
        X = np.array([[1.0, -1.0], [1.0, -1.0], [-2.0, 2.0]])
        K = gaussian_kernel(X - X.mean(0), 4.0).K
        assert K[0, 1] == pytest.approx(1.0, abs=1e-15)

    def test_distance_equal_bandwidth_gives_inverse_e(self):
        b = 4.0
        X = np.array([[1.0], [-1.0]])  # squared distance 4
        K = gaussian_kernel(X, b).K
        assert K[0, 1] == pytest.approx(np.exp(-1.0), abs=1e-12)

    def test_large_bandwidth_limit(self):
        rng = np.random.default_rng(1)
        X = rng.standard_normal((30, 4))
        K = gaussian_kernel(X - X.mean(0), 1e12).K
        assert np.abs(K - 1.0).max() < 1e-6

    def test_rejects_bad_inputs(self):
        X = np.array([[1.0], [-1.0]])
        with pytest.raises(InvalidSpecError):
            gaussian_kernel(X, 0.0)
        with pytest.raises(InvalidSpecError):
            gaussian_kernel(X + 5.0, 1.0)  # not centered

    def test_bandwidth_search_returns_grid_point(self):
        rng = np.random.default_rng(2)
        X = rng.standard_normal((25, 3))
        X = (X - X.mean(0)) / X.std(0, ddof=1)
        grid = np.array([0.5, 2.0, 8.0])
        assert select_bandwidth_max_variance(X, grid) in grid


class TestPolynomialKernel:
    def test_linear_dot_product(self):
        K = polynomial_kernel([[1.0, 2.0], [3.0, 4.0]], np.eye(2), 0.0, 1).K
        assert K[0, 1] == 11.0

    def test_shifted_square(self):
        K = polynomial_kernel([[1.0, 2.0], [3.0, 4.0]], np.eye(2), 1.0, 2).K
        assert K[0, 1] == 144.0

    def test_linear_kernel_equals_gram(self):
        rng = np.random.default_rng(3)
        X = rng.standard_normal((12, 4))
        K = polynomial_kernel(X, np.eye(4), 0.0, 1).K
        np.testing.assert_allclose(K, X @ X.T, rtol=0, atol=1e-12)

    def test_non_psd_sigma_rejected(self):
        with pytest.raises(InvalidSpecError):
            polynomial_kernel([[1.0, 0.0]], np.diag([1.0, -1.0]), 0.0, 1)


class TestSpectralFeatures:
    def test_full_rank_reconstruction(self):
        rng = np.random.default_rng(4)
        A = rng.standard_normal((20, 20))
        K = A @ A.T
        sf = spectral_features(K, 20)
        top = sf.sigmas[0] ** 2
        assert np.abs(sf.Phi @ sf.Phi.T - K).max() <= 1e-8 * top

    def test_identity_spectrum(self):
        sf = spectral_features(np.eye(15), 15)
        np.testing.assert_allclose(sf.sigmas, np.ones(15), atol=1e-12)
        np.testing.assert_allclose(sf.Phi @ sf.Phi.T, np.eye(15), atol=1e-8)

    def test_rank_one_reconstruction(self):
        v = np.random.default_rng(5).standard_normal(30)
        K = np.outer(v, v)
        sf = spectral_features(K, 1)
        np.testing.assert_allclose(sf.Phi @ sf.Phi.T, K, atol=1e-8 * sf.sigmas[0] ** 2)

    def test_descending_and_orthonormal(self):
        rng = np.random.default_rng(6)
        A = rng.standard_normal((25, 10))
        sf = spectral_features(A @ A.T, 10)
        assert (np.diff(sf.sigmas) <= 1e-12).all()
        U = sf.Phi / sf.sigmas
        np.testing.assert_allclose(U.T @ U, np.eye(sf.r), atol=1e-8)

    def test_truncation_frobenius_bound(self):
        rng = np.random.default_rng(7)
        for trial in range(5):
            A = rng.standard_normal((30, 12))
            K = A @ A.T
            eigvals = np.linalg.eigvalsh(K)[::-1]
            r = int(rng.integers(1, 10))
            sf = spectral_features(K, r)
            err = np.linalg.norm(sf.Phi @ sf.Phi.T - K, "fro") ** 2
            assert err <= np.sum(eigvals[r:] ** 2) + 1e-6

    def test_rank_cap_and_negative_clamp(self):
        v = np.random.default_rng(8).standard_normal(10)
        K = np.outer(v, v)  # rank one
        sf = spectral_features(K, 5)
        assert sf.r == 1
        tiny = np.diag([1.0, 1e-14, -1e-14])
        sf2 = spectral_features(tiny, 3)
        assert sf2.r == 1  # others fall below 1e-10 * top

    def test_asymmetric_rejected(self):
        M = np.array([[1.0, 0.5], [0.0, 1.0]])
        with pytest.raises(InvalidSpecError):
            spectral_features(M, 1)


class TestAssembleFeatures:
    def test_raw_only_variances(self):
        rng = np.random.default_rng(9)
        X = rng.standard_normal((40, 4)) * [1.0, 3.0, 10.0, 0.2]
        fm = assemble_features(X, None, MODE_RAW_ONLY)
        v = fm.Phi.var(axis=0, ddof=1)
        np.testing.assert_allclose(v, 0.25, atol=1e-10)
        assert abs(v.sum() - 1.0) < 1e-10
        assert fm.block_spans == ((0, 4), None)
        np.testing.assert_allclose(fm.Phi.mean(axis=0), 0.0, atol=1e-12)

    def test_kernel_only_sum_and_ratios(self):
        rng = np.random.default_rng(10)
        A = rng.standard_normal((30, 30))
        sf = spectral_features(A @ A.T, 5)
        fm = assemble_features(rng.standard_normal((30, 2)), sf, MODE_KERNEL_ONLY)
        v = fm.Phi.var(axis=0, ddof=1)
        assert abs(v.sum() - 1.0) < 1e-8
        centered = sf.Phi - sf.Phi.mean(axis=0)
        raw_v = centered.var(axis=0, ddof=1)
        np.testing.assert_allclose(v / v[0], raw_v / raw_v[0], rtol=1e-10)

    def test_plus_raw_block_sums(self):
        rng = np.random.default_rng(11)
        A = rng.standard_normal((30, 30))
        sf = spectral_features(A @ A.T, 3)
        X = rng.standard_normal((30, 4))
        fm = assemble_features(X, sf, MODE_KERNEL_PLUS_RAW)
        raw_span, kern_span = fm.block_spans
        v = fm.Phi.var(axis=0, ddof=1)
        assert abs(v[raw_span[0] : raw_span[1]].sum() - 1.0) < 1e-10
        assert abs(v[kern_span[0] : kern_span[1]].sum() - 1.0) < 1e-8

    def test_zero_variance_column_named(self):
        X = np.ones((10, 3))
        X[:, 0] = np.arange(10)
        with pytest.raises(InvalidSpecError, match=r"\[1, 2\]"):
            assemble_features(X, None, MODE_RAW_ONLY)

    def test_reproducible_bytes(self):
        rng = np.random.default_rng(12)
        X = rng.standard_normal((20, 3))
        a = assemble_features(X, None, MODE_RAW_ONLY)
        b = assemble_features(X, None, MODE_RAW_ONLY)
        assert a.Phi.tobytes() == b.Phi.tobytes()


class TestKernelImbalance:
    def test_duplicated_controls_balance_exactly(self):
        rng = np.random.default_rng(13)
        Xt = rng.standard_normal((6, 2))
        X = np.vstack([Xt, Xt])
        Z = np.array([1] * 6 + [0] * 6)
        model = fit_random_forest(X, rng.standard_normal(12), ForestParams(T=5, min_leaf=1), seed=0)
        K = forest_kernel(model, X)
        w = np.where(Z == 0, 1.0 / 6.0, 0.0)
        assert kernel_imbalance(K, w, Z) <= 1e-10

    def test_single_tree_matches_bruteforce_histograms(self):
        rng = np.random.default_rng(14)
        X = rng.standard_normal((25, 3))
        y = rng.standard_normal(25)
        model = fit_random_forest(X, y, ForestParams(T=1, min_leaf=2, bootstrap=False), seed=3)
        Z = (rng.random(25) < 0.4).astype(int)
        if Z.sum() == 0:
            Z[0] = 1
        w = np.where(Z == 0, rng.random(25), 0.0)
        got = kernel_imbalance(forest_kernel(model, X), w, Z)
        want = explicit_imbalance(model, X, w, Z)
        assert got == pytest.approx(want, rel=1e-8)

    def test_kernel_trick_identity_multi_tree(self):
        rng = np.random.default_rng(15)
        X = rng.standard_normal((30, 4))
        y = rng.standard_normal(30)
        model = fit_random_forest(X, y, ForestParams(T=5, min_leaf=2), seed=4)
        Z = np.array([1] * 10 + [0] * 20)
        w = np.where(Z == 0, rng.random(30), 0.0)
        w[Z == 0] /= w[Z == 0].sum()
        got = kernel_imbalance(forest_kernel(model, X), w, Z)
        want = explicit_imbalance(model, X, w, Z)
        assert got == pytest.approx(want, rel=1e-8)
        assert got >= 0.0

    def test_validation(self):
        K = KernelMatrix(K=np.eye(3), kind="rf")
        with pytest.raises(DimensionError):
            kernel_imbalance(K, np.ones(2), np.array([0, 1, 0]))
        with pytest.raises(InvalidSpecError):
            kernel_imbalance(K, np.array([-0.1, 0.5, 0.6]), np.array([0, 1, 0]))


def test_matrix_csv_full_precision(tmp_path):
    M = np.array([[np.pi, 1e-17], [3.0, 2.0 / 3.0]])
    path = tmp_path / "k.csv"
    matrix_to_csv(M, str(path))
    back = np.loadtxt(str(path), delimiter=",")
    np.testing.assert_array_equal(back, M)


def test_dense_kernel_size_cap():
    X = np.zeros((20001, 1))
    X[:, 0] = np.linspace(-1, 1, 20001)  # centered
    with pytest.raises(InvalidSpecError, match="20000"):
        gaussian_kernel(X, 1.0)
