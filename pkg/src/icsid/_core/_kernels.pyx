# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled sequential kernels: IIR difference equations and Elman RNN scans.

These are the two inner loops that cannot be vectorized (each step depends
on the previous one).  `icsid._core._kernels_py` holds the plain-numpy
equivalents; `icsid._core` selects a backend at import time.
"""

import numpy as np

cimport numpy as cnp
from scipy.linalg.cython_blas cimport dgemm, sgemm

cnp.import_array()

ctypedef fused real:
    float
    double


cdef inline void _rm_gemm(bint ta, bint tb, int m, int n, int k,
                          real alpha, real* a, int lda, real* b, int ldb,
                          real beta, real* c, int ldc) noexcept nogil:
    # Row-major C(m,n) = alpha * op(A)(m,k) @ op(B)(k,n) + beta * C,
    # expressed through the column-major Fortran BLAS by computing C^T.
    cdef char fa = b'T' if ta else b'N'
    cdef char fb = b'T' if tb else b'N'
    if real is float:
        sgemm(&fb, &fa, &n, &m, &k, <float*> &alpha, <float*> b, &ldb,
              <float*> a, &lda, <float*> &beta, <float*> c, &ldc)
    else:
        dgemm(&fb, &fa, &n, &m, &k, <double*> &alpha, <double*> b, &ldb,
              <double*> a, &lda, <double*> &beta, <double*> c, &ldc)


def iir_filter(double[::1] b, double[::1] a, double[::1] u, double[::1] zi):
    """Run the transposed direct-form II difference equation over `u`.

    `a` and `b` must have equal length with a[0] == 1 (pad `b` with zeros);
    `zi` is the length ``len(a) - 1`` delay line, updated in place so state
    carries across calls.  Returns the output sequence.
    """
    cdef Py_ssize_t T = u.shape[0]
    cdef Py_ssize_t n = a.shape[0] - 1
    cdef cnp.ndarray[double, ndim=1] y_arr = np.empty(T, dtype=np.float64)
    cdef double[::1] y = y_arr
    cdef Py_ssize_t k, i
    cdef double uk, yk
    with nogil:
        if n == 0:
            for k in range(T):
                y[k] = b[0] * u[k]
        else:
            for k in range(T):
                uk = u[k]
                yk = b[0] * uk + zi[0]
                for i in range(n - 1):
                    zi[i] = b[i + 1] * uk + zi[i + 1] - a[i + 1] * yk
                zi[n - 1] = b[n] * uk - a[n] * yk
                y[k] = yk
    return y_arr


def rnn_scan_fwd(real[:, :, ::1] xw, real[:, ::1] w_rec, real[:, ::1] h0,
                 real[:, :, ::1] h_out):
    """tanh recurrence h_t = tanh(xw_t + h_{t-1} @ w_rec), time-major layout.

    `xw` is the precomputed input drive x @ w_in + bias, shape (T, B, H);
    `h_out` (same shape) receives the full hidden sequence.  The recurrence
    matmul goes through BLAS; the elementwise add+tanh through numpy's SIMD
    loops, which beat a scalar libm loop by two orders of magnitude.
    """
    cdef int T = xw.shape[0]
    cdef int B = xw.shape[1]
    cdef int H = xw.shape[2]
    xw_arr = np.asarray(xw)
    h_arr = np.asarray(h_out)
    tmp = np.empty((B, H), dtype=xw_arr.dtype)
    cdef real[:, ::1] tmp_view = tmp
    cdef real* prev
    cdef int t
    for t in range(T):
        prev = &h0[0, 0] if t == 0 else &h_out[t - 1, 0, 0]
        _rm_gemm[real](0, 0, B, H, H, <real> 1.0, prev, H,
                       &w_rec[0, 0], H, <real> 0.0, &tmp_view[0, 0], H)
        np.add(xw_arr[t], tmp, out=tmp)
        np.tanh(tmp, out=h_arr[t])


def rnn_scan_bwd(real[:, :, ::1] h_all, real[:, ::1] h0, real[:, ::1] w_rec,
                 real[:, :, ::1] grad_h, real[:, :, ::1] da,
                 real[:, ::1] dh0, real[:, ::1] dw_rec):
    """Backprop-through-time companion of `rnn_scan_fwd`.

    Fills `da` with gradients w.r.t. the pre-activations (the caller turns
    those into input/weight gradients with two large matmuls), `dh0` with the
    gradient w.r.t. the initial hidden state, and accumulates `dw_rec`.
    """
    cdef int T = h_all.shape[0]
    cdef int B = h_all.shape[1]
    cdef int H = h_all.shape[2]
    h_arr = np.asarray(h_all)
    g_arr = np.asarray(grad_h)
    da_arr = np.asarray(da)
    carry = np.zeros((B, H), dtype=h_arr.dtype)
    scratch = np.empty((B, H), dtype=h_arr.dtype)
    cdef real[:, ::1] carry_view = carry
    cdef real[:, ::1] da_t
    cdef real* prev
    cdef int t
    for t in range(T - 1, -1, -1):
        # da_t = (grad_h_t + carry) * (1 - h_t^2), vectorized
        ht = h_arr[t]
        np.multiply(ht, ht, out=scratch)
        np.subtract(1.0, scratch, out=scratch)
        np.add(g_arr[t], carry, out=carry)
        np.multiply(carry, scratch, out=da_arr[t])
        da_t = da_arr[t]
        prev = &h0[0, 0] if t == 0 else &h_all[t - 1, 0, 0]
        # dw_rec += prev^T @ da_t
        _rm_gemm[real](1, 0, H, H, B, <real> 1.0, prev, H,
                       &da_t[0, 0], H, <real> 1.0, &dw_rec[0, 0], H)
        # carry = da_t @ w_rec^T
        _rm_gemm[real](0, 1, B, H, H, <real> 1.0, &da_t[0, 0], H,
                       &w_rec[0, 0], H, <real> 0.0, &carry_view[0, 0], H)
    np.copyto(np.asarray(dh0), carry)
