"""3D convolution compute kernels with two interchangeable backends.

The hot loops (convolution forward, input gradient, weight gradient) exist
twice: a compiled Cython extension (_convkern) and a pure-numpy shift-and-add
implementation that turns each kernel offset into one GEMM. The compiled
backend is selected at import when available; setting CTB_NO_NATIVE=1 forces
the numpy path. Both produce the same values up to float summation order.

Tensor layout is channel-first without a batch axis: inputs (C, D, H, W),
weights (Cout, Cin, k, k, k), biases (Cout,). Padding is symmetric.
"""

from __future__ import annotations

import os

import numpy as np

try:
    from . import _convkern
except ImportError:
    _convkern = None

_FORCE_PYTHON = os.environ.get("CTB_NO_NATIVE", "") not in ("", "0")


def native_available():
    return _convkern is not None


def active_backend():
    return "native" if (_convkern is not None and not _FORCE_PYTHON) else "numpy"


def _out_len(n, k, stride, pad):
    return (n + 2 * pad - k) // stride + 1


def out_shape(x_shape, w_shape, stride, pad):
    ci, d, h, w = x_shape
    co, ci2, k, _, _ = w_shape
    if ci2 != ci:
        raise ValueError(f"input has {ci} channels, weights expect {ci2}")
    return (co, _out_len(d, k, stride, pad), _out_len(h, k, stride, pad),
            _out_len(w, k, stride, pad))


def _offsets(k):
    for a in range(k):
        for b in range(k):
            for c in range(k):
                yield a, b, c


def conv3d_forward_numpy(x, w, b, stride=1, pad=1):
    co, do, ho, wo = out_shape(x.shape, w.shape, stride, pad)
    k = w.shape[2]
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (pad, pad))) if pad else x
    y = np.zeros((co, do, ho, wo), dtype=x.dtype)
    for a, bb, c in _offsets(k):
        xs = xp[:, a:a + do * stride:stride, bb:bb + ho * stride:stride,
                c:c + wo * stride:stride]
        y += np.tensordot(w[:, :, a, bb, c], xs, axes=(1, 0))
    return y + b[:, None, None, None]


def conv3d_input_grad_numpy(dy, w, x_shape, stride=1, pad=1):
    ci, d, h, wd = x_shape
    k = w.shape[2]
    _, do, ho, wo = dy.shape
    dxp = np.zeros((ci, d + 2 * pad, h + 2 * pad, wd + 2 * pad), dtype=dy.dtype)
    for a, bb, c in _offsets(k):
        t = np.tensordot(w[:, :, a, bb, c], dy, axes=(0, 0))
        dxp[:, a:a + do * stride:stride, bb:bb + ho * stride:stride,
            c:c + wo * stride:stride] += t
    if pad:
        return np.ascontiguousarray(dxp[:, pad:pad + d, pad:pad + h, pad:pad + wd])
    return dxp


def conv3d_param_grad_numpy(dy, x, w_shape, stride=1, pad=1):
    co, ci, k, _, _ = w_shape
    _, do, ho, wo = dy.shape
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (pad, pad))) if pad else x
    dw = np.empty(w_shape, dtype=dy.dtype)
    dyf = dy.reshape(co, -1)
    for a, bb, c in _offsets(k):
        xs = xp[:, a:a + do * stride:stride, bb:bb + ho * stride:stride,
                c:c + wo * stride:stride]
        dw[:, :, a, bb, c] = dyf @ xs.reshape(ci, -1).T
    return dw, dy.sum(axis=(1, 2, 3))


def _native_ok(*arrays):
    if _convkern is None or _FORCE_PYTHON:
        return False
    dt = arrays[0].dtype
    return dt in (np.float32, np.float64) and all(a.dtype == dt for a in arrays)


def conv3d_forward(x, w, b, stride=1, pad=1):
    if _native_ok(x, w, b):
        co, do, ho, wo = out_shape(x.shape, w.shape, stride, pad)
        y = np.zeros((co, do, ho, wo), dtype=x.dtype)
        _convkern.conv3d_forward(
            np.ascontiguousarray(x), np.ascontiguousarray(w),
            np.ascontiguousarray(b), y, stride, pad)
        return y
    return conv3d_forward_numpy(x, w, b, stride, pad)


def conv3d_input_grad(dy, w, x_shape, stride=1, pad=1):
    if _native_ok(dy, w):
        dx = np.zeros(x_shape, dtype=dy.dtype)
        _convkern.conv3d_input_grad(
            np.ascontiguousarray(dy), np.ascontiguousarray(w), dx, stride, pad)
        return dx
    return conv3d_input_grad_numpy(dy, w, x_shape, stride, pad)


def conv3d_param_grad(dy, x, w_shape, stride=1, pad=1):
    if _native_ok(dy, x):
        dw = np.zeros(w_shape, dtype=dy.dtype)
        db = np.zeros(w_shape[0], dtype=dy.dtype)
        _convkern.conv3d_param_grad(
            np.ascontiguousarray(dy), np.ascontiguousarray(x), dw, db, stride, pad)
        return dw, db
    return conv3d_param_grad_numpy(dy, x, w_shape, stride, pad)
