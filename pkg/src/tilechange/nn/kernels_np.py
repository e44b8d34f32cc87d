"""Pure-numpy convolution kernels (im2col + BLAS matmul).

This is the fallback backend; the compiled extension in `_convkern.pyx`
implements the same three entry points. All loops that build or scatter
the column matrix run over the kernel window only (kh*kw slice copies),
so the heavy lifting stays inside contiguous vectorized numpy ops with a
fixed summation order.
"""

from __future__ import annotations

import numpy as np

NAME = "numpy"


def out_size(n: int, k: int, stride: int, dilation: int, pad: int) -> int:
    eff = (k - 1) * dilation + 1
    return (n + 2 * pad - eff) // stride + 1


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, dilation: int, ho: int, wo: int) -> np.ndarray:
    b, c, _, _ = xp.shape
    col = np.empty((b, c, kh, kw, ho, wo), dtype=xp.dtype)
    for i in range(kh):
        ys = i * dilation
        for j in range(kw):
            xs = j * dilation
            col[:, :, i, j] = xp[:, :, ys : ys + ho * stride : stride, xs : xs + wo * stride : stride]
    return col.reshape(b, c * kh * kw, ho * wo)


def _pad(x: np.ndarray, pad: int) -> np.ndarray:
    if pad == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))


def conv2d_forward(x: np.ndarray, w: np.ndarray, stride: int, dilation: int, pad: int) -> np.ndarray:
    """x: (B, Ci, H, W), w: (Co, Ci, kh, kw) -> (B, Co, Ho, Wo)."""
    b = x.shape[0]
    co, _, kh, kw = w.shape
    ho = out_size(x.shape[2], kh, stride, dilation, pad)
    wo = out_size(x.shape[3], kw, stride, dilation, pad)
    col = _im2col(_pad(x, pad), kh, kw, stride, dilation, ho, wo)
    y = np.matmul(w.reshape(co, -1)[None], col)
    return y.reshape(b, co, ho, wo)


def conv2d_grad_input(gy: np.ndarray, w: np.ndarray, x_shape, stride: int, dilation: int, pad: int) -> np.ndarray:
    b, ci, h, wdt = x_shape
    co, _, kh, kw = w.shape
    ho, wo = gy.shape[2], gy.shape[3]
    gcol = np.matmul(w.reshape(co, -1).T[None], gy.reshape(b, co, ho * wo))
    gcol = gcol.reshape(b, ci, kh, kw, ho, wo)
    gxp = np.zeros((b, ci, h + 2 * pad, wdt + 2 * pad), dtype=gy.dtype)
    for i in range(kh):
        ys = i * dilation
        for j in range(kw):
            xs = j * dilation
            gxp[:, :, ys : ys + ho * stride : stride, xs : xs + wo * stride : stride] += gcol[:, :, i, j]
    if pad:
        return gxp[:, :, pad:-pad, pad:-pad]
    return gxp


def conv2d_grad_weight(gy: np.ndarray, x: np.ndarray, w_shape, stride: int, dilation: int, pad: int) -> np.ndarray:
    b = x.shape[0]
    co, ci, kh, kw = w_shape
    ho, wo = gy.shape[2], gy.shape[3]
    col = _im2col(_pad(x, pad), kh, kw, stride, dilation, ho, wo)
    gw = np.matmul(gy.reshape(b, co, ho * wo), col.transpose(0, 2, 1)).sum(axis=0)
    return gw.reshape(co, ci, kh, kw)
