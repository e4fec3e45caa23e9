# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled inner loops for depthwise convolution and linear interpolation.

Every routine writes into caller-allocated, C-contiguous output buffers so the
Python side owns allocation and dtype policy. The loop orders match the numpy
fallback in :mod:`convtimenet._kernels_py` so both backends accumulate in the
same order.
"""
from libc.math cimport floor

ctypedef fused real:
    float
    double


def dw_conv1d_forward(const real[:, :, ::1] xpad, const real[:, ::1] w,
                      const real[::1] b, real[:, :, ::1] out):
    cdef Py_ssize_t B = out.shape[0], C = out.shape[1], L = out.shape[2]
    cdef Py_ssize_t K = w.shape[1]
    cdef Py_ssize_t n, c, i, j
    cdef real wj, bc
    with nogil:
        for n in range(B):
            for c in range(C):
                bc = b[c]
                for i in range(L):
                    out[n, c, i] = bc
                for j in range(K):
                    wj = w[c, j]
                    for i in range(L):
                        out[n, c, i] = out[n, c, i] + wj * xpad[n, c, i + j]


def dw_conv1d_backward(const real[:, :, ::1] xpad, const real[:, ::1] w,
                       const real[:, :, ::1] gy, real[:, :, ::1] gxpad,
                       real[:, ::1] gw):
    """Accumulate d/dxpad into ``gxpad`` (zeroed by caller) and write d/dw."""
    cdef Py_ssize_t B = gy.shape[0], C = gy.shape[1], L = gy.shape[2]
    cdef Py_ssize_t K = w.shape[1]
    cdef Py_ssize_t n, c, i, j
    cdef real wj
    cdef double acc
    with nogil:
        for c in range(C):
            for j in range(K):
                acc = 0.0
                for n in range(B):
                    for i in range(L):
                        acc = acc + gy[n, c, i] * xpad[n, c, i + j]
                gw[c, j] = <real>acc
        for n in range(B):
            for c in range(C):
                for j in range(K):
                    wj = w[c, j]
                    for i in range(L):
                        gxpad[n, c, i + j] = gxpad[n, c, i + j] + gy[n, c, i] * wj


cdef inline Py_ssize_t _left_index(double p, Py_ssize_t tp) nogil:
    cdef Py_ssize_t i0 = <Py_ssize_t>floor(p)
    if i0 < 0:
        i0 = 0
    elif i0 > tp - 2:
        i0 = tp - 2
    return i0


def interp_forward(const real[:, :, ::1] series, const real[:, ::1] pos,
                   real[:, :, ::1] out):
    cdef Py_ssize_t B = series.shape[0], C = series.shape[1], Tp = series.shape[2]
    cdef Py_ssize_t Q = pos.shape[1]
    cdef Py_ssize_t n, c, q, i0
    cdef real f, p
    with nogil:
        for n in range(B):
            for q in range(Q):
                p = pos[n, q]
                i0 = _left_index(p, Tp)
                f = p - <real>i0
                for c in range(C):
                    out[n, c, q] = series[n, c, i0] * (1 - f) + series[n, c, i0 + 1] * f


def interp_backward(const real[:, :, ::1] series, const real[:, ::1] pos,
                    const real[:, :, ::1] gout, real[:, :, ::1] gseries,
                    real[:, ::1] gpos):
    """Accumulate into ``gseries`` (zeroed by caller) and write ``gpos``."""
    cdef Py_ssize_t B = series.shape[0], C = series.shape[1], Tp = series.shape[2]
    cdef Py_ssize_t Q = pos.shape[1]
    cdef Py_ssize_t n, c, q, i0
    cdef real f, p, g
    cdef double acc
    with nogil:
        for n in range(B):
            for q in range(Q):
                p = pos[n, q]
                i0 = _left_index(p, Tp)
                f = p - <real>i0
                acc = 0.0
                for c in range(C):
                    g = gout[n, c, q]
                    gseries[n, c, i0] = gseries[n, c, i0] + g * (1 - f)
                    gseries[n, c, i0 + 1] = gseries[n, c, i0 + 1] + g * f
                    acc = acc + g * (series[n, c, i0 + 1] - series[n, c, i0])
                gpos[n, q] = <real>acc
