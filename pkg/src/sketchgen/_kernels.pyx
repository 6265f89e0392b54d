# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled inner loops for valid cross-correlation, forward and backward.

The innermost index always walks the contiguous width axis so the C
compiler can vectorize the multiply-accumulate. Summation order is fixed,
which keeps results bitwise deterministic from run to run.
"""

import numpy as np


def conv2d_forward(const double[:, :, ::1] x,
                   const double[:, :, :, ::1] kernel,
                   const double[::1] bias):
    """Valid cross-correlation of x (C,H,W) with kernel (O,C,kh,kw) plus bias."""
    cdef Py_ssize_t oc = kernel.shape[0], ic = kernel.shape[1]
    cdef Py_ssize_t kh = kernel.shape[2], kw = kernel.shape[3]
    cdef Py_ssize_t oh = x.shape[1] - kh + 1, ow = x.shape[2] - kw + 1
    out_arr = np.empty((oc, oh, ow), dtype=np.float64)
    cdef double[:, :, ::1] out = out_arr
    cdef Py_ssize_t o, c, u, v, i, j
    cdef double wv, b

    for o in range(oc):
        b = bias[o]
        for i in range(oh):
            for j in range(ow):
                out[o, i, j] = b
        for c in range(ic):
            for u in range(kh):
                for v in range(kw):
                    wv = kernel[o, c, u, v]
                    for i in range(oh):
                        for j in range(ow):
                            out[o, i, j] += wv * x[c, i + u, j + v]
    return out_arr


def conv2d_backward(const double[:, :, ::1] x,
                    const double[:, :, :, ::1] kernel,
                    const double[:, :, ::1] grad_out):
    """Gradients of conv2d_forward w.r.t. input, kernel, and bias."""
    cdef Py_ssize_t oc = kernel.shape[0], ic = kernel.shape[1]
    cdef Py_ssize_t kh = kernel.shape[2], kw = kernel.shape[3]
    cdef Py_ssize_t oh = grad_out.shape[1], ow = grad_out.shape[2]
    grad_x_arr = np.zeros((x.shape[0], x.shape[1], x.shape[2]), dtype=np.float64)
    grad_k_arr = np.empty((oc, ic, kh, kw), dtype=np.float64)
    grad_b_arr = np.empty(oc, dtype=np.float64)
    cdef double[:, :, ::1] gx = grad_x_arr
    cdef double[:, :, :, ::1] gk = grad_k_arr
    cdef double[::1] gb = grad_b_arr
    cdef Py_ssize_t o, c, u, v, i, j
    cdef double wv, gv, acc

    for o in range(oc):
        acc = 0.0
        for i in range(oh):
            for j in range(ow):
                acc += grad_out[o, i, j]
        gb[o] = acc
        for c in range(ic):
            for u in range(kh):
                for v in range(kw):
                    wv = kernel[o, c, u, v]
                    acc = 0.0
                    for i in range(oh):
                        for j in range(ow):
                            gv = grad_out[o, i, j]
                            acc += gv * x[c, i + u, j + v]
                            gx[c, i + u, j + v] += wv * gv
                    gk[o, c, u, v] = acc
    return grad_x_arr, grad_k_arr, grad_b_arr
