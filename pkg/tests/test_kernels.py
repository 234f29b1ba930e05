"""Convolution kernels: numpy reference vs compiled backend, shape rules."""

import numpy as np
import pytest

from ctb.net import kernels as K

SHAPES = [
    # (cin, cout, dims, k, stride, pad)
    (1, 3, (8, 8, 8), 3, 1, 1),
    (2, 4, (6, 7, 9), 3, 2, 1),
    (3, 2, (5, 5, 5), 1, 1, 0),
    (2, 2, (8, 6, 4), 3, 1, 1),
    (4, 8, (4, 4, 4), 2, 2, 0),
]


def test_out_shape_arithmetic():
    assert K.out_shape((1, 8, 8, 8), (4, 1, 3, 3, 3), 1, 1) == (4, 8, 8, 8)
    assert K.out_shape((1, 8, 8, 8), (4, 1, 3, 3, 3), 2, 1) == (4, 4, 4, 4)
    assert K.out_shape((2, 5, 5, 5), (3, 2, 1, 1, 1), 1, 0) == (3, 5, 5, 5)


def test_identity_kernel_copies_input():
    x = np.random.default_rng(0).standard_normal((1, 4, 4, 4), dtype=np.float32)
    w = np.ones((1, 1, 1, 1, 1), dtype=np.float32)
    b = np.zeros(1, dtype=np.float32)
    y = K.conv3d_forward(x, w, b, 1, 0)
    assert np.allclose(y, x)


def test_hand_computed_sum_kernel():
    # all-ones 3x3x3 kernel over a constant volume: interior voxels see 27
    # contributions, corner voxels (with pad 1) see 8
    x = np.ones((1, 4, 4, 4), dtype=np.float32)
    w = np.ones((1, 1, 3, 3, 3), dtype=np.float32)
    b = np.zeros(1, dtype=np.float32)
    y = K.conv3d_forward(x, w, b, 1, 1)
    assert y[0, 1, 1, 1] == 27.0
    assert y[0, 0, 0, 0] == 8.0
    assert y[0, 0, 1, 1] == 18.0


def test_bias_added_everywhere():
    x = np.zeros((2, 4, 4, 4), dtype=np.float32)
    w = np.zeros((3, 2, 3, 3, 3), dtype=np.float32)
    b = np.array([1.5, -2.0, 0.25], dtype=np.float32)
    y = K.conv3d_forward(x, w, b, 1, 1)
    for c in range(3):
        assert np.all(y[c] == b[c])


@pytest.mark.skipif(not K.native_available(), reason="compiled kernels absent")
class TestNativeMatchesNumpy:
    def test_forward(self):
        rng = np.random.default_rng(1)
        for cin, cout, dims, k, stride, pad in SHAPES:
            x = rng.standard_normal((cin, *dims), dtype=np.float32)
            w = rng.standard_normal((cout, cin, k, k, k), dtype=np.float32)
            b = rng.standard_normal(cout, dtype=np.float32)
            got = K.conv3d_forward(x, w, b, stride, pad)
            ref = K.conv3d_forward_numpy(x, w, b, stride, pad)
            assert got.shape == ref.shape
            assert np.allclose(got, ref, atol=1e-4)

    def test_input_grad(self):
        rng = np.random.default_rng(2)
        for cin, cout, dims, k, stride, pad in SHAPES:
            x_shape = (cin, *dims)
            w = rng.standard_normal((cout, cin, k, k, k), dtype=np.float32)
            dy = rng.standard_normal(
                K.out_shape(x_shape, w.shape, stride, pad), dtype=np.float32)
            got = K.conv3d_input_grad(dy, w, x_shape, stride, pad)
            ref = K.conv3d_input_grad_numpy(dy, w, x_shape, stride, pad)
            assert np.allclose(got, ref, atol=1e-4)

    def test_param_grad(self):
        rng = np.random.default_rng(3)
        for cin, cout, dims, k, stride, pad in SHAPES:
            x = rng.standard_normal((cin, *dims), dtype=np.float32)
            w_shape = (cout, cin, k, k, k)
            dy = rng.standard_normal(
                K.out_shape(x.shape, w_shape, stride, pad), dtype=np.float32)
            gw, gb = K.conv3d_param_grad(dy, x, w_shape, stride, pad)
            rw, rb = K.conv3d_param_grad_numpy(dy, x, w_shape, stride, pad)
            assert np.allclose(gw, rw, atol=1e-4)
            assert np.allclose(gb, rb, atol=1e-4)

    def test_float64_supported(self):
        rng = np.random.default_rng(4)
        x = rng.standard_normal((2, 6, 6, 6))
        w = rng.standard_normal((3, 2, 3, 3, 3))
        b = rng.standard_normal(3)
        got = K.conv3d_forward(x, w, b, 1, 1)
        ref = K.conv3d_forward_numpy(x, w, b, 1, 1)
        assert got.dtype == np.float64
        assert np.allclose(got, ref, atol=1e-12)


class TestAdjointConsistency:
    def test_input_grad_is_adjoint_of_forward(self):
        # <conv(x), dy> == <x, conv_input_grad(dy)> for zero bias
        rng = np.random.default_rng(5)
        for cin, cout, dims, k, stride, pad in SHAPES:
            x = rng.standard_normal((cin, *dims))
            w = rng.standard_normal((cout, cin, k, k, k))
            b = np.zeros(cout)
            y = K.conv3d_forward_numpy(x, w, b, stride, pad)
            dy = rng.standard_normal(y.shape)
            dx = K.conv3d_input_grad_numpy(dy, w, x.shape, stride, pad)
            assert np.dot(y.ravel(), dy.ravel()) == pytest.approx(
                np.dot(x.ravel(), dx.ravel()), rel=1e-10)

    def test_param_grad_matches_finite_differences(self):
        rng = np.random.default_rng(6)
        x = rng.standard_normal((2, 5, 5, 5))
        w = rng.standard_normal((2, 2, 3, 3, 3))
        b = rng.standard_normal(2)
        dy = rng.standard_normal(K.out_shape(x.shape, w.shape, 1, 1))
        gw, gb = K.conv3d_param_grad_numpy(dy, x, w.shape, 1, 1)
        eps = 1e-6
        for idx in [(0, 0, 0, 0, 0), (1, 1, 2, 2, 2), (0, 1, 1, 0, 2)]:
            wp, wm = w.copy(), w.copy()
            wp[idx] += eps
            wm[idx] -= eps
            lp = np.dot(K.conv3d_forward_numpy(x, wp, b, 1, 1).ravel(), dy.ravel())
            lm = np.dot(K.conv3d_forward_numpy(x, wm, b, 1, 1).ravel(), dy.ravel())
            assert (lp - lm) / (2 * eps) == pytest.approx(gw[idx], rel=1e-6)
        lp = np.dot(K.conv3d_forward_numpy(x, w, b + [eps, 0], 1, 1).ravel(), dy.ravel())
        lm = np.dot(K.conv3d_forward_numpy(x, w, b - [eps, 0], 1, 1).ravel(), dy.ravel())
        assert (lp - lm) / (2 * eps) == pytest.approx(gb[0], rel=1e-6)
