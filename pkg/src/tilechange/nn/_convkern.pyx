# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled convolution kernels: fused im2col + BLAS gemm.

Same three entry points as kernels_np; selected by nn.backend at import
when the extension is available. Column buffers are built by tight C
loops (zero-padding handled by bounds checks, no padded copy of the
input) and the contractions go through single-threaded BLAS calls, so
results are bitwise reproducible run to run.
"""

import numpy as np

cimport cython
from scipy.linalg.cython_blas cimport dgemm, sgemm

NAME = "compiled"

ctypedef fused real:
    float
    double


cdef inline void _rm_gemm(bint ta, bint tb, int m, int n, int k,
                          real* a, int lda, real* b, int ldb,
                          real beta, real* c) noexcept nogil:
    """C(m,n) += op_a(A) . op_b(B) for row-major buffers.

    Maps to column-major BLAS via C^T = op(B)^T . op(A)^T; `lda`/`ldb` are
    the stored row lengths.
    """
    cdef char fa = b'T' if ta else b'N'
    cdef char fb = b'T' if tb else b'N'
    cdef real one = 1.0
    if real is float:
        sgemm(&fb, &fa, &n, &m, &k, &one, b, &ldb, a, &lda, &beta, c, &n)
    else:
        dgemm(&fb, &fa, &n, &m, &k, &one, b, &ldb, a, &lda, &beta, c, &n)


cdef inline void _fill_col(real[:, :, :, ::1] x, real[:, ::1] col, int b,
                           int kh, int kw, int stride, int dilation, int pad,
                           int ho, int wo) noexcept nogil:
    cdef int ci, i, j, oy, ox, iy, ix, row
    cdef int c_in = x.shape[1]
    cdef int h = x.shape[2]
    cdef int w = x.shape[3]
    for ci in range(c_in):
        for i in range(kh):
            for j in range(kw):
                row = (ci * kh + i) * kw + j
                for oy in range(ho):
                    iy = oy * stride + i * dilation - pad
                    if iy < 0 or iy >= h:
                        for ox in range(wo):
                            col[row, oy * wo + ox] = 0.0
                        continue
                    for ox in range(wo):
                        ix = ox * stride + j * dilation - pad
                        col[row, oy * wo + ox] = x[b, ci, iy, ix] if 0 <= ix < w else 0.0


cpdef _conv2d_forward(real[:, :, :, ::1] x, real[:, :, :, ::1] w,
                      int stride, int dilation, int pad):
    cdef int bsz = x.shape[0]
    cdef int co = w.shape[0]
    cdef int ci = w.shape[1]
    cdef int kh = w.shape[2]
    cdef int kw = w.shape[3]
    cdef int eff_h = (kh - 1) * dilation + 1
    cdef int eff_w = (kw - 1) * dilation + 1
    cdef int ho = (x.shape[2] + 2 * pad - eff_h) // stride + 1
    cdef int wo = (x.shape[3] + 2 * pad - eff_w) // stride + 1
    cdef int kdim = ci * kh * kw
    cdef int p = ho * wo

    dtype = np.float32 if real is float else np.float64
    y_arr = np.empty((bsz, co, ho, wo), dtype=dtype)
    col_arr = np.empty((kdim, p), dtype=dtype)
    cdef real[:, :, :, ::1] y = y_arr
    cdef real[:, ::1] col = col_arr
    cdef int b
    with nogil:
        for b in range(bsz):
            _fill_col(x, col, b, kh, kw, stride, dilation, pad, ho, wo)
            _rm_gemm(False, False, co, p, kdim,
                     &w[0, 0, 0, 0], kdim, &col[0, 0], p, 0.0, &y[b, 0, 0, 0])
    return y_arr


cpdef _conv2d_grad_input(real[:, :, :, ::1] gy, real[:, :, :, ::1] w,
                         int h, int wdt, int stride, int dilation, int pad):
    cdef int bsz = gy.shape[0]
    cdef int co = w.shape[0]
    cdef int ci = w.shape[1]
    cdef int kh = w.shape[2]
    cdef int kw = w.shape[3]
    cdef int ho = gy.shape[2]
    cdef int wo = gy.shape[3]
    cdef int kdim = ci * kh * kw
    cdef int p = ho * wo

    dtype = np.float32 if real is float else np.float64
    gx_arr = np.zeros((bsz, ci, h, wdt), dtype=dtype)
    gcol_arr = np.empty((kdim, p), dtype=dtype)
    cdef real[:, :, :, ::1] gx = gx_arr
    cdef real[:, ::1] gcol = gcol_arr
    cdef int b, c, i, j, oy, ox, iy, ix, row
    with nogil:
        for b in range(bsz):
            _rm_gemm(True, False, kdim, p, co,
                     &w[0, 0, 0, 0], kdim, &gy[b, 0, 0, 0], p, 0.0, &gcol[0, 0])
            for c in range(ci):
                for i in range(kh):
                    for j in range(kw):
                        row = (c * kh + i) * kw + j
                        for oy in range(ho):
                            iy = oy * stride + i * dilation - pad
                            if iy < 0 or iy >= h:
                                continue
                            for ox in range(wo):
                                ix = ox * stride + j * dilation - pad
                                if 0 <= ix < wdt:
                                    gx[b, c, iy, ix] += gcol[row, oy * wo + ox]
    return gx_arr


cpdef _conv2d_grad_weight(real[:, :, :, ::1] gy, real[:, :, :, ::1] x,
                          int co, int ci, int kh, int kw,
                          int stride, int dilation, int pad):
    cdef int bsz = x.shape[0]
    cdef int ho = gy.shape[2]
    cdef int wo = gy.shape[3]
    cdef int kdim = ci * kh * kw
    cdef int p = ho * wo

    dtype = np.float32 if real is float else np.float64
    gw_arr = np.zeros((co, kdim), dtype=dtype)
    col_arr = np.empty((kdim, p), dtype=dtype)
    cdef real[:, ::1] gw = gw_arr
    cdef real[:, ::1] col = col_arr
    cdef int b
    with nogil:
        for b in range(bsz):
            _fill_col(x, col, b, kh, kw, stride, dilation, pad, ho, wo)
            _rm_gemm(False, True, co, kdim, p,
                     &gy[b, 0, 0, 0], p, &col[0, 0], p, 1.0, &gw[0, 0])
    return gw_arr.reshape(co, ci, kh, kw)


def conv2d_forward(x, w, stride, dilation, pad):
    """x: (B, Ci, H, W), w: (Co, Ci, kh, kw) -> (B, Co, Ho, Wo)."""
    x = np.ascontiguousarray(x)
    w = np.ascontiguousarray(w)
    if x.dtype == np.float32:
        return _conv2d_forward[cython.float](x, w, stride, dilation, pad)
    return _conv2d_forward[cython.double](x, w, stride, dilation, pad)


def conv2d_grad_input(gy, w, x_shape, stride, dilation, pad):
    gy = np.ascontiguousarray(gy)
    w = np.ascontiguousarray(w)
    if gy.dtype == np.float32:
        return _conv2d_grad_input[cython.float](gy, w, x_shape[2], x_shape[3], stride, dilation, pad)
    return _conv2d_grad_input[cython.double](gy, w, x_shape[2], x_shape[3], stride, dilation, pad)


def conv2d_grad_weight(gy, x, w_shape, stride, dilation, pad):
    gy = np.ascontiguousarray(gy)
    x = np.ascontiguousarray(x)
    co, ci, kh, kw = w_shape
    if gy.dtype == np.float32:
        return _conv2d_grad_weight[cython.float](gy, x, co, ci, kh, kw, stride, dilation, pad)
    return _conv2d_grad_weight[cython.double](gy, x, co, ci, kh, kw, stride, dilation, pad)
