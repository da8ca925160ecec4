import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from bimpala.layers import (
    BConvParams,
    FCBilinearParams,
    KernelSpec,
    bconv2d_forward,
    bconv2d_grad,
    conv2d_forward,
    conv2d_grad,
    fc_bilinear_forward,
    fc_bilinear_grad,
    maxpool2x2,
    maxpool2x2_backward,
)

from conftest import finite_diff, naive_conv, rel_err


def test_kernel_spec():
    s = KernelSpec(3, 4, 8)
    assert s.padding == 1 and s.patch_dim == 36
    with pytest.raises(ValueError):
        KernelSpec(4, 1, 1)


class TestConv:
    def test_matches_naive_oracle(self, rng):
        x = rng.standard_normal((3, 7, 6))
        w = rng.standard_normal((4, 3, 3, 3))
        assert np.allclose(conv2d_forward(x, w), naive_conv(x, w, 1), atol=1e-12)

    def test_batched_equals_per_sample(self, rng):
        x = rng.standard_normal((3, 2, 5, 5))
        w = rng.standard_normal((4, 2, 3, 3))
        out = conv2d_forward(x, w)
        for b in range(3):
            assert np.allclose(out[b], conv2d_forward(x[b], w), atol=1e-13)

    def test_identity_kernel(self, rng):
        x = rng.standard_normal((2, 5, 5))
        w = np.zeros((2, 2, 3, 3))
        w[0, 0, 1, 1] = w[1, 1, 1, 1] = 1.0
        assert np.array_equal(conv2d_forward(x, w), x)


class TestBConv:
    def test_is_product_of_convs(self, rng):
        x = rng.standard_normal((2, 6, 6))
        p = BConvParams(rng.standard_normal((3, 2, 3, 3)), rng.standard_normal((3, 2, 3, 3)))
        expect = naive_conv(x, p.u, 1) * naive_conv(x, p.v, 1)
        assert np.allclose(bconv2d_forward(x, p), expect, atol=1e-12)

    def test_zero_input_gives_zero(self, rng):
        p = BConvParams(rng.standard_normal((3, 2, 3, 3)), rng.standard_normal((3, 2, 3, 3)))
        assert not np.any(bconv2d_forward(np.zeros((2, 4, 4)), p))

    def test_homogeneous_of_degree_two(self, rng):
        x = rng.standard_normal((2, 5, 5))
        p = BConvParams(rng.standard_normal((3, 2, 3, 3)), rng.standard_normal((3, 2, 3, 3)))
        assert np.allclose(bconv2d_forward(-2.5 * x, p), 6.25 * bconv2d_forward(x, p))

    def test_shape_mismatch(self, rng):
        with pytest.raises(ValueError):
            BConvParams(np.zeros((2, 2, 3, 3)), np.zeros((2, 2, 5, 5)))


class TestFcBilinear:
    def test_elementwise_product(self, rng):
        x = rng.standard_normal(5)
        p = FCBilinearParams(rng.standard_normal((5, 3)), rng.standard_normal((5, 3)))
        assert np.allclose(fc_bilinear_forward(x, p), (x @ p.f) * (x @ p.h))

    def test_wrong_length(self, rng):
        p = FCBilinearParams(np.zeros((5, 3)), np.zeros((5, 3)))
        with pytest.raises(ValueError):
            fc_bilinear_forward(np.zeros(4), p)


class TestMaxPool:
    def test_single_window(self):
        out, idx = maxpool2x2(np.array([[[1.0, 2.0], [3.0, 4.0]]]))
        assert out.item() == 4.0 and idx.item() == 3

    def test_against_window_oracle(self, rng):
        x = rng.standard_normal((3, 8, 8))
        out, _ = maxpool2x2(x)
        oracle = np.array([[[x[c, 2 * i : 2 * i + 2, 2 * j : 2 * j + 2].max() for j in range(4)] for i in range(4)] for c in range(3)])
        assert np.array_equal(out, oracle)

    def test_ties_route_to_first(self):
        x = np.ones((1, 2, 2))
        out, idx = maxpool2x2(x)
        g = maxpool2x2_backward(np.ones_like(out), idx, x.shape)
        assert np.array_equal(g, np.array([[[1.0, 0.0], [0.0, 0.0]]]))

    def test_odd_extent_rejected(self):
        with pytest.raises(ValueError):
            maxpool2x2(np.zeros((1, 3, 4)))


# --- gradient checks: three shapes per layer type, central differences eps=1e-5 ---

CONV_SHAPES = [(1, 1, 4, 4, 1), (2, 3, 5, 4, 2), (3, 2, 6, 6, 1)]  # n, m, H, W, batch


@pytest.mark.parametrize("n,m,h,w,b", CONV_SHAPES)
def test_conv_gradcheck(rng, n, m, h, w, b):
    x = rng.standard_normal((b, n, h, w))
    wt = rng.standard_normal((m, n, 3, 3))
    dout = rng.standard_normal((b, m, h, w))
    dx, dw = conv2d_grad(x, wt, dout)
    f = lambda: np.sum(dout * conv2d_forward(x, wt))
    assert rel_err(dx, finite_diff(f, x)) <= 1e-4
    assert rel_err(dw, finite_diff(f, wt)) <= 1e-4


@pytest.mark.parametrize("n,m,h,w,b", CONV_SHAPES)
def test_bconv_gradcheck(rng, n, m, h, w, b):
    x = rng.standard_normal((b, n, h, w))
    p = BConvParams(rng.standard_normal((m, n, 3, 3)), rng.standard_normal((m, n, 3, 3)))
    dout = rng.standard_normal((b, m, h, w))
    dx, du, dv = bconv2d_grad(x, p, dout)
    f = lambda: np.sum(dout * bconv2d_forward(x, p))
    assert rel_err(dx, finite_diff(f, x)) <= 1e-4
    assert rel_err(du, finite_diff(f, p.u)) <= 1e-4
    assert rel_err(dv, finite_diff(f, p.v)) <= 1e-4


@pytest.mark.parametrize("d_in,d_h,b", [(1, 1, 1), (6, 4, 3), (10, 7, 2)])
def test_fc_gradcheck(rng, d_in, d_h, b):
    x = rng.standard_normal((b, d_in))
    p = FCBilinearParams(rng.standard_normal((d_in, d_h)), rng.standard_normal((d_in, d_h)))
    dout = rng.standard_normal((b, d_h))
    dx, df, dh = fc_bilinear_grad(x, p, dout)
    f = lambda: np.sum(dout * fc_bilinear_forward(x, p))
    assert rel_err(dx, finite_diff(f, x)) <= 1e-4
    assert rel_err(df, finite_diff(f, p.f)) <= 1e-4
    assert rel_err(dh, finite_diff(f, p.h)) <= 1e-4


@pytest.mark.parametrize("shape", [(1, 2, 2), (2, 4, 6), (3, 2, 8, 8)])
def test_maxpool_gradcheck(rng, shape):
    x = rng.standard_normal(shape)
    out, idx = maxpool2x2(x)
    dout = rng.standard_normal(out.shape)
    g = maxpool2x2_backward(dout, idx, x.shape)
    f = lambda: np.sum(dout * maxpool2x2(x)[0])
    assert rel_err(g, finite_diff(f, x)) <= 1e-4


@given(st.integers(1, 3), st.integers(1, 3), st.integers(3, 6), st.integers(0, 2**31))
def test_bconv_conv_consistency_property(n, m, size, seed):
    r = np.random.default_rng(seed)
    x = r.standard_normal((n, size, size))
    p = BConvParams(r.standard_normal((m, n, 3, 3)), r.standard_normal((m, n, 3, 3)))
    assert np.allclose(bconv2d_forward(x, p), conv2d_forward(x, p.u) * conv2d_forward(x, p.v), atol=1e-12)
