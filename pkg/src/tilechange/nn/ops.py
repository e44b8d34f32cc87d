"""Differentiable tensor operations.

Layout convention: activations are (B, C, H, W). Convolutions are
cross-correlations. The fixed-filter ops (gaussian_lowpass,
blurpool_downsample) use reflect padding and carry no learnable
parameters; learnable convolutions use zero 'same' or 'valid' padding.
"""

from __future__ import annotations

import numpy as np

from ..errors import DomainError, ShapeError
from . import backend
from .tensor import Tensor, from_op

LEAKY_SLOPE = 0.01
NORM_EPS = 1e-5


def _as4d(x: Tensor, op: str) -> Tensor:
    if x.ndim != 4:
        raise ShapeError(f"{op} expects (B, C, H, W), got {x.shape}")
    return x


def _check_dtype(a: Tensor, b: Tensor, op: str):
    if a.dtype != b.dtype:
        raise DomainError(f"{op}: mixed dtypes {a.dtype} vs {b.dtype}")


# ---------------------------------------------------------------------------
# learnable convolution


def conv2d(x: Tensor, w: Tensor, stride: int = 1, dilation: int = 1, padding: str = "same") -> Tensor:
    """Cross-correlate x (B, Ci, H, W) with w (Co, Ci, kh, kw)."""
    _as4d(x, "conv2d")
    if w.ndim != 4:
        raise ShapeError(f"conv2d kernel must be 4-D, got {w.shape}")
    co, ci, kh, kw = w.shape
    if x.shape[1] != ci:
        raise ShapeError(f"conv2d: input has {x.shape[1]} channels, kernel expects {ci}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError(f"conv2d kernel spatial size must be odd, got {kh}x{kw}")
    if stride < 1 or dilation < 1:
        raise DomainError(f"stride/dilation must be >= 1, got {stride}/{dilation}")
    _check_dtype(x, w, "conv2d")
    eff_h = (kh - 1) * dilation + 1
    eff_w = (kw - 1) * dilation + 1
    if padding == "same":
        pad = (eff_h - 1) // 2
    elif padding == "valid":
        pad = 0
        if x.shape[2] < eff_h or x.shape[3] < eff_w:
            raise ShapeError(
                f"conv2d valid: input {x.shape[2]}x{x.shape[3]} smaller than "
                f"effective kernel {eff_h}x{eff_w}"
            )
    else:
        raise DomainError(f"unknown padding {padding!r}")
    k = backend.kernels
    y = k.conv2d_forward(x.data, w.data, stride, dilation, pad)

    def vjp(g):
        if x.requires_grad:
            x.accumulate(k.conv2d_grad_input(g, w.data, x.shape, stride, dilation, pad))
        if w.requires_grad:
            w.accumulate(k.conv2d_grad_weight(g, x.data, w.shape, stride, dilation, pad))

    return from_op(y, (x, w), vjp)


# ---------------------------------------------------------------------------
# reflect padding and fixed depthwise filters


def _reflect_pad(arr: np.ndarray, p: int) -> np.ndarray:
    return np.pad(arr, ((0, 0), (0, 0), (p, p), (p, p)), mode="reflect")


def _reflect_adjoint_axis(gp: np.ndarray, p: int, axis: int) -> np.ndarray:
    """Fold one axis of a reflect-padded gradient back onto the source.

    Padded position k < p mirrors source index p - k; position p + n + k
    mirrors n - 2 - k.
    """
    n = gp.shape[axis] - 2 * p

    def sl(a, b):
        s = [slice(None)] * gp.ndim
        s[axis] = slice(a, b)
        return tuple(s)

    g = gp[sl(p, p + n)].copy()
    g[sl(1, 1 + p)] += np.flip(gp[sl(0, p)], axis=axis)
    g[sl(n - 1 - p, n - 1)] += np.flip(gp[sl(p + n, p + n + p)], axis=axis)
    return g


def _reflect_pad_adjoint(gp: np.ndarray, p: int) -> np.ndarray:
    """Adjoint of reflect padding on the last two axes."""
    if p == 0:
        return gp
    return _reflect_adjoint_axis(_reflect_adjoint_axis(gp, p, 3), p, 2)


def _depthwise_valid(xp: np.ndarray, kern: np.ndarray) -> np.ndarray:
    kh, kw = kern.shape
    ho = xp.shape[2] - kh + 1
    wo = xp.shape[3] - kw + 1
    y = np.zeros(xp.shape[:2] + (ho, wo), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            y += kern[i, j] * xp[:, :, i : i + ho, j : j + wo]
    return y


def _depthwise_valid_adjoint(g: np.ndarray, kern: np.ndarray, padded_shape) -> np.ndarray:
    kh, kw = kern.shape
    ho, wo = g.shape[2], g.shape[3]
    gxp = np.zeros(padded_shape, dtype=g.dtype)
    for i in range(kh):
        for j in range(kw):
            gxp[:, :, i : i + ho, j : j + wo] += kern[i, j] * g
    return gxp


def gaussian_kernel(kernel_size: int = 5, sigma: float = 1.0) -> np.ndarray:
    """Sampled 2-D Gaussian, normalized to unit sum, float64."""
    if kernel_size % 2 == 0:
        raise ShapeError(f"gaussian kernel size must be odd, got {kernel_size}")
    half = kernel_size // 2
    t = np.arange(-half, half + 1, dtype=np.float64)
    g1 = np.exp(-0.5 * (t / sigma) ** 2)
    k = np.outer(g1, g1)
    return k / k.sum()


def gaussian_lowpass(x: Tensor, kernel_size: int = 5, sigma: float = 1.0) -> Tensor:
    """Depthwise Gaussian smoothing with reflect padding; unit DC gain."""
    _as4d(x, "gaussian_lowpass")
    kern = gaussian_kernel(kernel_size, sigma).astype(x.dtype)
    p = kernel_size // 2
    y = _depthwise_valid(_reflect_pad(x.data, p), kern)

    def vjp(g):
        if x.requires_grad:
            x.accumulate(_reflect_pad_adjoint(_depthwise_valid_adjoint(g, kern, g.shape[:2] + (g.shape[2] + 2 * p, g.shape[3] + 2 * p)), p))

    return from_op(y, (x,), vjp)


# Binomial blur for anti-aliased downsampling; [1, 2, 1] x [1, 2, 1] / 16.
_BINOMIAL3 = np.array([[1.0, 2.0, 1.0], [2.0, 4.0, 2.0], [1.0, 2.0, 1.0]]) / 16.0


def blurpool_downsample(x: Tensor) -> Tensor:
    """Anti-aliased 2x downsampling: binomial low-pass, then stride-2 pick.

    Requires even spatial dims; halves H and W. Subsampling keeps the even
    indices of the blurred map.
    """
    _as4d(x, "blurpool_downsample")
    if x.shape[2] % 2 or x.shape[3] % 2:
        raise ShapeError(f"blurpool needs even spatial dims, got {x.shape[2]}x{x.shape[3]}")
    kern = _BINOMIAL3.astype(x.dtype)
    blurred = _depthwise_valid(_reflect_pad(x.data, 1), kern)
    y = blurred[:, :, ::2, ::2].copy()

    def vjp(g):
        if x.requires_grad:
            gb = np.zeros(x.shape, dtype=g.dtype)
            gb[:, :, ::2, ::2] = g
            padded = (x.shape[0], x.shape[1], x.shape[2] + 2, x.shape[3] + 2)
            x.accumulate(_reflect_pad_adjoint(_depthwise_valid_adjoint(gb, kern, padded), 1))

    return from_op(y, (x,), vjp)


# ---------------------------------------------------------------------------
# pointwise and normalization layers


def leaky_relu(x: Tensor, slope: float = LEAKY_SLOPE) -> Tensor:
    factor = np.where(x.data >= 0, x.dtype.type(1), x.dtype.type(slope))
    y = x.data * factor

    def vjp(g):
        if x.requires_grad:
            x.accumulate(g * factor)

    return from_op(y, (x,), vjp)


def channel_norm(x: Tensor, gamma: Tensor, shift: Tensor) -> Tensor:
    """Per-sample, per-channel normalization over the spatial extent.

    Batch-independent by construction, so single-tile inference matches
    batched inference. gamma/shift are per-channel learnable affines.
    """
    _as4d(x, "channel_norm")
    c = x.shape[1]
    if gamma.shape != (c,) or shift.shape != (c,):
        raise ShapeError(f"channel_norm affine shapes {gamma.shape}/{shift.shape} != ({c},)")
    n = x.shape[2] * x.shape[3]
    if n < 2:
        raise ShapeError("channel_norm needs >= 2 spatial elements per channel")
    mu = x.data.mean(axis=(2, 3), keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=(2, 3), keepdims=True)
    inv_std = 1.0 / np.sqrt(var + x.dtype.type(NORM_EPS))
    xhat = xc * inv_std
    y = gamma.data[None, :, None, None] * xhat + shift.data[None, :, None, None]

    def vjp(g):
        if gamma.requires_grad:
            gamma.accumulate((g * xhat).sum(axis=(0, 2, 3)))
        if shift.requires_grad:
            shift.accumulate(g.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            gx_hat = g * gamma.data[None, :, None, None]
            m1 = gx_hat.mean(axis=(2, 3), keepdims=True)
            m2 = (gx_hat * xhat).mean(axis=(2, 3), keepdims=True)
            x.accumulate(inv_std * (gx_hat - m1 - xhat * m2))

    return from_op(y, (x, gamma, shift), vjp)


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Affine map x @ w.T + b; accepts (D,) or (B, D) inputs."""
    if w.ndim != 2:
        raise ShapeError(f"linear weights must be 2-D, got {w.shape}")
    out_f, in_f = w.shape
    if b.shape != (out_f,):
        raise ShapeError(f"linear bias shape {b.shape} != ({out_f},)")
    squeeze = x.ndim == 1
    xd = x.data[None, :] if squeeze else x.data
    if xd.ndim != 2 or xd.shape[1] != in_f:
        raise ShapeError(f"linear: input {x.shape} incompatible with weights {w.shape}")
    y = xd @ w.data.T + b.data
    if squeeze:
        y = y[0]

    def vjp(g):
        g2 = g[None, :] if squeeze else g
        if x.requires_grad:
            gx = g2 @ w.data
            x.accumulate(gx[0] if squeeze else gx)
        if w.requires_grad:
            w.accumulate(g2.T @ xd)
        if b.requires_grad:
            b.accumulate(g2.sum(axis=0))

    return from_op(y, (x, w, b), vjp)


def nn_upsample(x: Tensor, factor: int = 2) -> Tensor:
    """Nearest-neighbor upsampling: each pixel becomes a factor x factor block."""
    _as4d(x, "nn_upsample")
    if factor < 2:
        raise DomainError(f"upsample factor must be >= 2, got {factor}")
    y = x.data.repeat(factor, axis=2).repeat(factor, axis=3)

    def vjp(g):
        if x.requires_grad:
            b, c, h, w = x.shape
            x.accumulate(g.reshape(b, c, h, factor, w, factor).sum(axis=(3, 5)))

    return from_op(y, (x,), vjp)


def global_avg_pool(x: Tensor) -> Tensor:
    """Per-channel spatial mean, (B, C, H, W) -> (B, C)."""
    _as4d(x, "global_avg_pool")
    n = x.shape[2] * x.shape[3]
    y = x.data.mean(axis=(2, 3))

    def vjp(g):
        if x.requires_grad:
            gx = np.zeros(x.shape, dtype=g.dtype)
            gx += (g / n)[:, :, None, None]
            x.accumulate(gx)

    return from_op(y, (x,), vjp)


# ---------------------------------------------------------------------------
# structural / arithmetic ops used to assemble the model and its loss


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"add: {a.shape} vs {b.shape}")
    y = a.data + b.data

    def vjp(g):
        if a.requires_grad:
            a.accumulate(g)
        if b.requires_grad:
            b.accumulate(g)

    return from_op(y, (a, b), vjp)


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"sub: {a.shape} vs {b.shape}")
    y = a.data - b.data

    def vjp(g):
        if a.requires_grad:
            a.accumulate(g)
        if b.requires_grad:
            b.accumulate(-g)

    return from_op(y, (a, b), vjp)


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product (same shape)."""
    if a.shape != b.shape:
        raise ShapeError(f"mul: {a.shape} vs {b.shape}")
    y = a.data * b.data

    def vjp(g):
        if a.requires_grad:
            a.accumulate(g * b.data)
        if b.requires_grad:
            b.accumulate(g * a.data)

    return from_op(y, (a, b), vjp)


def scale(x: Tensor, s: float) -> Tensor:
    y = x.data * x.dtype.type(s)

    def vjp(g):
        if x.requires_grad:
            x.accumulate(g * x.dtype.type(s))

    return from_op(y, (x,), vjp)


def add_const(x: Tensor, c: float) -> Tensor:
    y = x.data + x.dtype.type(c)

    def vjp(g):
        if x.requires_grad:
            x.accumulate(g)

    return from_op(y, (x,), vjp)


def square(x: Tensor) -> Tensor:
    y = x.data * x.data

    def vjp(g):
        if x.requires_grad:
            x.accumulate(2.0 * x.data * g)

    return from_op(y, (x,), vjp)


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)

    def vjp(g):
        if x.requires_grad:
            x.accumulate(g * y)

    return from_op(y, (x,), vjp)


def clamp(x: Tensor, lo: float, hi: float) -> Tensor:
    """Clip values; gradient passes through where lo <= x <= hi, else 0."""
    y = np.clip(x.data, lo, hi)
    inside = ((x.data >= lo) & (x.data <= hi)).astype(x.data.dtype)

    def vjp(g):
        if x.requires_grad:
            x.accumulate(g * inside)

    return from_op(y, (x,), vjp)


def concat(parts, axis: int = 1) -> Tensor:
    parts = list(parts)
    y = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def vjp(g):
        for p, start, stop in zip(parts, offsets[:-1], offsets[1:]):
            if p.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(start, stop)
                p.accumulate(g[tuple(sl)])

    return from_op(y, tuple(parts), vjp)


def reshape(x: Tensor, shape) -> Tensor:
    y = x.data.reshape(shape)

    def vjp(g):
        if x.requires_grad:
            x.accumulate(g.reshape(x.shape))

    return from_op(y, (x,), vjp)


def sum_all(x: Tensor) -> Tensor:
    y = np.asarray(x.data.sum())

    def vjp(g):
        if x.requires_grad:
            gx = np.zeros(x.shape, dtype=x.data.dtype)
            gx += g
            x.accumulate(gx)

    return from_op(y, (x,), vjp)


def mean_all(x: Tensor) -> Tensor:
    n = x.size
    y = np.asarray(x.data.mean())

    def vjp(g):
        if x.requires_grad:
            gx = np.zeros(x.shape, dtype=x.data.dtype)
            gx += g / n
            x.accumulate(gx)

    return from_op(y, (x,), vjp)
