# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled 3D convolution kernels.

Direct loops over (out-channel, in-channel, kernel offset) blocks; the
innermost loop runs along the contiguous x axis so the compiler can
vectorize it. Shapes and padding are validated by the Python wrapper in
ctb.net.kernels, which allocates the output arrays.
"""

import numpy as np

cimport cython

ctypedef fused real:
    float
    double


cdef inline Py_ssize_t _lo(Py_ssize_t off, Py_ssize_t pad, Py_ssize_t stride) noexcept nogil:
    # smallest output index whose source index off + o*stride - pad is >= 0
    cdef Py_ssize_t d = pad - off
    if d <= 0:
        return 0
    return (d + stride - 1) // stride


cdef inline Py_ssize_t _hi(Py_ssize_t off, Py_ssize_t pad, Py_ssize_t stride,
                           Py_ssize_t n_in, Py_ssize_t n_out) noexcept nogil:
    # one past the largest output index whose source index stays < n_in
    cdef Py_ssize_t m = n_in - 1 - off + pad
    cdef Py_ssize_t h
    if m < 0:
        return 0
    h = m // stride + 1
    if h > n_out:
        return n_out
    return h


def conv3d_forward(real[:, :, :, ::1] x, real[:, :, :, :, ::1] w,
                   real[::1] bias, real[:, :, :, ::1] y,
                   Py_ssize_t stride, Py_ssize_t pad):
    cdef Py_ssize_t ci_n = x.shape[0], d_in = x.shape[1], h_in = x.shape[2], w_in = x.shape[3]
    cdef Py_ssize_t co_n = y.shape[0], d_out = y.shape[1], h_out = y.shape[2], w_out = y.shape[3]
    cdef Py_ssize_t k = w.shape[2]
    cdef Py_ssize_t co, ci, a, b, c, od, oh, ow, id_, ih, base
    cdef Py_ssize_t od_lo, od_hi, oh_lo, oh_hi, ow_lo, ow_hi
    cdef real wv
    cdef real* xrow
    cdef real* yrow

    for co in range(co_n):
        for od in range(d_out):
            for oh in range(h_out):
                for ow in range(w_out):
                    y[co, od, oh, ow] = bias[co]

    with nogil:
        for co in range(co_n):
            for ci in range(ci_n):
                for a in range(k):
                    od_lo = _lo(a, pad, stride); od_hi = _hi(a, pad, stride, d_in, d_out)
                    for b in range(k):
                        oh_lo = _lo(b, pad, stride); oh_hi = _hi(b, pad, stride, h_in, h_out)
                        for c in range(k):
                            ow_lo = _lo(c, pad, stride); ow_hi = _hi(c, pad, stride, w_in, w_out)
                            wv = w[co, ci, a, b, c]
                            if wv == 0:
                                continue
                            base = c - pad
                            for od in range(od_lo, od_hi):
                                id_ = od * stride + a - pad
                                for oh in range(oh_lo, oh_hi):
                                    ih = oh * stride + b - pad
                                    xrow = &x[ci, id_, ih, 0]
                                    yrow = &y[co, od, oh, 0]
                                    if stride == 1:
                                        for ow in range(ow_lo, ow_hi):
                                            yrow[ow] += wv * xrow[ow + base]
                                    else:
                                        for ow in range(ow_lo, ow_hi):
                                            yrow[ow] += wv * xrow[ow * stride + base]


def conv3d_input_grad(real[:, :, :, ::1] dy, real[:, :, :, :, ::1] w,
                      real[:, :, :, ::1] dx, Py_ssize_t stride, Py_ssize_t pad):
    cdef Py_ssize_t co_n = dy.shape[0], d_out = dy.shape[1], h_out = dy.shape[2], w_out = dy.shape[3]
    cdef Py_ssize_t ci_n = dx.shape[0], d_in = dx.shape[1], h_in = dx.shape[2], w_in = dx.shape[3]
    cdef Py_ssize_t k = w.shape[2]
    cdef Py_ssize_t co, ci, a, b, c, od, oh, ow, id_, ih, base
    cdef Py_ssize_t od_lo, od_hi, oh_lo, oh_hi, ow_lo, ow_hi
    cdef real wv
    cdef real* gxrow
    cdef real* gyrow

    with nogil:
        for ci in range(ci_n):
            for co in range(co_n):
                for a in range(k):
                    od_lo = _lo(a, pad, stride); od_hi = _hi(a, pad, stride, d_in, d_out)
                    for b in range(k):
                        oh_lo = _lo(b, pad, stride); oh_hi = _hi(b, pad, stride, h_in, h_out)
                        for c in range(k):
                            ow_lo = _lo(c, pad, stride); ow_hi = _hi(c, pad, stride, w_in, w_out)
                            wv = w[co, ci, a, b, c]
                            if wv == 0:
                                continue
                            base = c - pad
                            for od in range(od_lo, od_hi):
                                id_ = od * stride + a - pad
                                for oh in range(oh_lo, oh_hi):
                                    ih = oh * stride + b - pad
                                    gxrow = &dx[ci, id_, ih, 0]
                                    gyrow = &dy[co, od, oh, 0]
                                    if stride == 1:
                                        for ow in range(ow_lo, ow_hi):
                                            gxrow[ow + base] += wv * gyrow[ow]
                                    else:
                                        for ow in range(ow_lo, ow_hi):
                                            gxrow[ow * stride + base] += wv * gyrow[ow]


def conv3d_param_grad(real[:, :, :, ::1] dy, real[:, :, :, ::1] x,
                      real[:, :, :, :, ::1] dw, real[::1] db,
                      Py_ssize_t stride, Py_ssize_t pad):
    cdef Py_ssize_t co_n = dy.shape[0], d_out = dy.shape[1], h_out = dy.shape[2], w_out = dy.shape[3]
    cdef Py_ssize_t ci_n = x.shape[0], d_in = x.shape[1], h_in = x.shape[2], w_in = x.shape[3]
    cdef Py_ssize_t k = dw.shape[2]
    cdef Py_ssize_t co, ci, a, b, c, od, oh, ow, id_, ih, base
    cdef Py_ssize_t od_lo, od_hi, oh_lo, oh_hi, ow_lo, ow_hi
    cdef real acc, s
    cdef real* xrow
    cdef real* gyrow

    with nogil:
        for co in range(co_n):
            acc = 0
            for od in range(d_out):
                for oh in range(h_out):
                    gyrow = &dy[co, od, oh, 0]
                    for ow in range(w_out):
                        acc += gyrow[ow]
            db[co] = acc

        for co in range(co_n):
            for ci in range(ci_n):
                for a in range(k):
                    od_lo = _lo(a, pad, stride); od_hi = _hi(a, pad, stride, d_in, d_out)
                    for b in range(k):
                        oh_lo = _lo(b, pad, stride); oh_hi = _hi(b, pad, stride, h_in, h_out)
                        for c in range(k):
                            ow_lo = _lo(c, pad, stride); ow_hi = _hi(c, pad, stride, w_in, w_out)
                            base = c - pad
                            acc = 0
                            for od in range(od_lo, od_hi):
                                id_ = od * stride + a - pad
                                for oh in range(oh_lo, oh_hi):
                                    ih = oh * stride + b - pad
                                    xrow = &x[ci, id_, ih, 0]
                                    gyrow = &dy[co, od, oh, 0]
                                    s = 0
                                    if stride == 1:
                                        for ow in range(ow_lo, ow_hi):
                                            s += gyrow[ow] * xrow[ow + base]
                                    else:
                                        for ow in range(ow_lo, ow_hi):
                                            s += gyrow[ow] * xrow[ow * stride + base]
                                    acc += s
                            dw[co, ci, a, b, c] = acc
