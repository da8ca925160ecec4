import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from bimpala.linalg import col2im, im2col, im2col_cb, col2im_cb, make_rng, matmul, svd, sym_eig

from conftest import rel_err


def _random_sym(rng, n, scale=1.0):
    a = rng.standard_normal((n, n)) * scale
    return 0.5 * (a + a.T)


class TestIm2col:
    def test_matches_explicit_windows(self, rng):
        x = rng.standard_normal((2, 5, 6))
        cols = im2col(x, 3, 1, 1)
        xp = np.pad(x, ((0, 0), (1, 1), (1, 1)))
        assert cols.shape == (18, 30)
        for p in range(30):
            r, c = divmod(p, 6)
            assert np.array_equal(cols[:, p], xp[:, r : r + 3, c : c + 3].ravel())

    def test_col2im_is_adjoint(self, rng):
        x = rng.standard_normal((3, 6, 6))
        y = rng.standard_normal((27, 36))
        lhs = np.sum(im2col(x, 3, 1, 1) * y)
        rhs = np.sum(x * col2im(y, x.shape, 3, 1, 1))
        assert abs(lhs - rhs) <= 1e-10 * abs(lhs)

    def test_cb_layout_adjoint_and_batch_fold(self, rng):
        x = rng.standard_normal((2, 3, 4, 4))  # [C, B, H, W]
        cols = im2col_cb(x, 3, 1, 1)
        assert cols.shape == (18, 48)
        per_sample = [im2col(x[:, b], 3, 1, 1) for b in range(3)]
        assert np.array_equal(cols, np.concatenate(per_sample, axis=1))
        y = rng.standard_normal(cols.shape)
        assert np.isclose(np.sum(cols * y), np.sum(x * col2im_cb(y, x.shape, 3, 1, 1)))

    @given(k=st.sampled_from([1, 3, 5]), pad=st.integers(0, 4), h=st.integers(1, 7), stride=st.integers(1, 2))
    def test_cb_fast_path_matches_windows(self, k, pad, h, stride):
        x = np.arange(2 * 3 * h * (h + 1), dtype=np.float64).reshape(2, 3, h, h + 1)
        if h + 2 * pad < k:
            return
        cols = im2col_cb(x, k, stride, pad)
        per_sample = [im2col(x[:, b], k, stride, pad) for b in range(3)]
        assert np.array_equal(cols, np.concatenate(per_sample, axis=1))

    def test_even_kernel_rejected(self):
        with pytest.raises(ValueError, match="odd"):
            im2col(np.zeros((1, 4, 4)), 2)


def test_matmul_shape_check():
    with pytest.raises(ValueError, match="shape mismatch"):
        matmul(np.zeros((2, 3)), np.zeros((2, 3)))
    assert np.array_equal(matmul(np.eye(2), np.ones((2, 1))), np.ones((2, 1)))


class TestSymEig:
    @pytest.mark.parametrize("n", [1, 2, 3, 7, 16, 33])
    def test_against_lapack(self, rng, n):
        q = _random_sym(rng, n)
        res = sym_eig(q)
        assert np.all(np.diff(res.eigenvalues) <= 0)
        assert np.allclose(res.eigenvalues, np.sort(np.linalg.eigvalsh(q))[::-1], atol=1e-12)
        f = res.eigenvectors
        assert np.allclose(f @ f.T, np.eye(n), atol=1e-12)
        assert rel_err(res.reconstruct(), q) <= 1e-12

    def test_diagonal_and_zero(self):
        res = sym_eig(np.diag([1.0, -3.0, 2.0]))
        assert np.array_equal(res.eigenvalues, [2.0, 1.0, -3.0])
        z = sym_eig(np.zeros((4, 4)))
        assert np.array_equal(z.eigenvalues, np.zeros(4))
        assert np.allclose(z.eigenvectors @ z.eigenvectors.T, np.eye(4))

    def test_degenerate_spectrum(self, rng):
        # rank-2 form: two nonzero eigenvalues, the rest exact-ish zero
        a, b = rng.standard_normal(12), rng.standard_normal(12)
        q = 0.5 * (np.outer(a, b) + np.outer(b, a))
        lam = sym_eig(q).eigenvalues
        assert np.sum(np.abs(lam) > 1e-10 * np.abs(lam).max()) == 2

    def test_rejects_bad_input(self):
        with pytest.raises(ValueError):
            sym_eig(np.zeros((2, 3)))
        with pytest.raises(ValueError):
            sym_eig(np.array([[1.0, 2.0], [0.0, 1.0]]))
        with pytest.raises(ValueError):
            sym_eig(np.array([[np.nan, 0.0], [0.0, 1.0]]))

    @given(st.integers(1, 12), st.integers(0, 2**31), st.floats(1e-3, 1e3))
    def test_property_reconstruction(self, n, seed, scale):
        q = _random_sym(np.random.default_rng(seed), n, scale)
        res = sym_eig(q)
        assert rel_err(res.reconstruct(), q) <= 1e-11
        assert np.allclose(res.eigenvectors @ res.eigenvectors.T, np.eye(n), atol=1e-11)


class TestSvd:
    @pytest.mark.parametrize("shape", [(1, 1), (5, 3), (3, 5), (16, 64), (32, 16), (7, 7)])
    def test_against_lapack(self, rng, shape):
        a = rng.standard_normal(shape)
        res = svd(a)
        assert np.allclose(res.singular_values, np.linalg.svd(a, compute_uv=False), atol=1e-12)
        r, c = shape
        assert res.left.shape == (r, r) and res.right.shape == (c, c)
        assert np.allclose(res.left.T @ res.left, np.eye(r), atol=1e-12)
        assert np.allclose(res.right.T @ res.right, np.eye(c), atol=1e-12)
        assert rel_err(res.reconstruct(), a) <= 1e-12

    def test_rank_one(self, rng):
        a = np.outer(rng.standard_normal(6), rng.standard_normal(4))
        s = svd(a).singular_values
        assert s[0] > 0 and np.all(s[1:] <= 1e-12 * s[0])

    def test_rank_deficient_basis_is_complete(self):
        a = np.zeros((5, 3))
        a[0, 0] = 2.0
        res = svd(a)
        assert np.allclose(res.left.T @ res.left, np.eye(5), atol=1e-12)
        assert rel_err(res.reconstruct(), a) <= 1e-14

    def test_rejects_nan(self):
        with pytest.raises(ValueError):
            svd(np.array([[np.nan]]))


def test_rng_is_reproducible():
    a = make_rng(7).standard_normal(5)
    b = make_rng(7).standard_normal(5)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, make_rng(8).standard_normal(5))
