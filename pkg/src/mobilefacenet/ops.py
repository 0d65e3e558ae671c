"""Forward and backward for every layer primitive the networks use.

Convolutions ship two paths: a vectorized fast path (im2col / strided
windows feeding BLAS) and a naive loop reference path. The fast path must
stay elementwise-equal to the reference within 1e-5 in float32; the test
suite enforces this on random instances.

All functions are pure in their array inputs. The only mutation anywhere
is the train-mode batch-norm running-statistics update, which is owned by
the training thread.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import _kernels
from .tensor import ShapeError


# ---------------------------------------------------------------------------
# parameter containers


@dataclass
class ConvParams:
    weight: np.ndarray  # (out_c, in_c, kh, kw)
    bias: np.ndarray | None = None  # (out_c,); absent while a BN follows
    stride: tuple[int, int] = (1, 1)
    padding: tuple[int, int] = (0, 0)


@dataclass
class DepthwiseConvParams:
    weight: np.ndarray  # (c, 1, kh, kw), one filter per channel
    bias: np.ndarray | None = None
    stride: tuple[int, int] = (1, 1)
    padding: tuple[int, int] = (0, 0)


@dataclass
class GDConvParams:
    """Global depthwise kernel; spatial size must equal the incoming map."""

    weight: np.ndarray  # (c, 1, kh, kw)
    bias: np.ndarray | None = None  # only appears after BN folding


@dataclass
class BatchNormParams:
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    eps: float = 1e-5
    momentum: float = 0.9


@dataclass
class PReLUParams:
    slope: np.ndarray  # (c,), negative-half slope per channel


# ---------------------------------------------------------------------------
# shape helpers


def conv_out_hw(h: int, w: int, kh: int, kw: int, stride, padding) -> tuple[int, int]:
    """Output spatial extents by the floor formula."""
    sh, sw = stride
    ph, pw = padding
    if h + 2 * ph < kh or w + 2 * pw < kw:
        raise ShapeError(f"kernel {kh}x{kw} larger than padded input {h + 2 * ph}x{w + 2 * pw}")
    return (h + 2 * ph - kh) // sh + 1, (w + 2 * pw - kw) // sw + 1


def _pad(x: np.ndarray, ph: int, pw: int) -> np.ndarray:
    if ph == 0 and pw == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))


def _windows(xp: np.ndarray, kh: int, kw: int, sh: int, sw: int) -> np.ndarray:
    """Strided view (n, c, ho, wo, kh, kw) over the padded input."""
    v = sliding_window_view(xp, (kh, kw), axis=(2, 3))
    return v[:, :, ::sh, ::sw]


def _require_channels(x: np.ndarray, expected: int, what: str):
    if x.ndim != 4:
        raise ShapeError(f"{what}: input must be 4-D, got {x.ndim}-D")
    if x.shape[1] != expected:
        raise ShapeError(f"{what}: got {x.shape[1]} channels, expected {expected}")


# ---------------------------------------------------------------------------
# standard convolution


def conv2d_forward(x: np.ndarray, p: ConvParams) -> np.ndarray:
    """Cross-correlation of x with p.weight; output per the floor formula."""
    co, ci, kh, kw = p.weight.shape
    _require_channels(x, ci, "conv2d")
    sh, sw = p.stride
    ph, pw = p.padding
    ho, wo = conv_out_hw(x.shape[2], x.shape[3], kh, kw, p.stride, p.padding)
    n = x.shape[0]
    if kh == 1 and kw == 1 and ph == 0 and pw == 0:
        xs = x if sh == sw == 1 else np.ascontiguousarray(x[:, :, ::sh, ::sw])
        x3 = xs.reshape(n, ci, ho * wo)
        y = np.matmul(p.weight[None, :, :, 0, 0], x3).reshape(n, co, ho, wo)
    else:
        win = _windows(_pad(x, ph, pw), kh, kw, sh, sw)
        cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, ci * kh * kw)
        y = (cols @ p.weight.reshape(co, -1).T).reshape(n, ho, wo, co).transpose(0, 3, 1, 2)
        y = np.ascontiguousarray(y)
    if p.bias is not None:
        y += p.bias[None, :, None, None]
    return y


def conv2d_reference(x: np.ndarray, p: ConvParams) -> np.ndarray:
    """Direct loop convolution; the correctness reference for the fast path."""
    co, ci, kh, kw = p.weight.shape
    _require_channels(x, ci, "conv2d")
    sh, sw = p.stride
    ph, pw = p.padding
    ho, wo = conv_out_hw(x.shape[2], x.shape[3], kh, kw, p.stride, p.padding)
    xp = _pad(x, ph, pw)
    n = x.shape[0]
    y = np.zeros((n, co, ho, wo), dtype=x.dtype)
    for b in range(n):
        for o in range(co):
            for i in range(ho):
                for j in range(wo):
                    win = xp[b, :, i * sh : i * sh + kh, j * sw : j * sw + kw]
                    y[b, o, i, j] = np.sum(win * p.weight[o])
            if p.bias is not None:
                y[b, o] += p.bias[o]
    return y


def conv2d_backward(x: np.ndarray, p: ConvParams, grad: np.ndarray):
    """Gradients of conv2d_forward; returns (dx, dweight, dbias)."""
    co, ci, kh, kw = p.weight.shape
    sh, sw = p.stride
    ph, pw = p.padding
    ho, wo = conv_out_hw(x.shape[2], x.shape[3], kh, kw, p.stride, p.padding)
    if grad.shape != (x.shape[0], co, ho, wo):
        raise ShapeError(f"upstream grad {grad.shape} != output shape {(x.shape[0], co, ho, wo)}")
    n, _, h, w = x.shape
    db = grad.sum(axis=(0, 2, 3)) if p.bias is not None else None

    if kh == 1 and kw == 1 and ph == 0 and pw == 0 and sh == 1 and sw == 1:
        g3 = grad.reshape(n, co, ho * wo)
        x3 = x.reshape(n, ci, ho * wo)
        dw = np.matmul(g3, x3.transpose(0, 2, 1)).sum(axis=0)[:, :, None, None]
        dx = np.matmul(p.weight[None, :, :, 0, 0].transpose(0, 2, 1), g3).reshape(x.shape)
        return dx, dw, db

    xp = _pad(x, ph, pw)
    win = _windows(xp, kh, kw, sh, sw)
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, ci * kh * kw)
    gcols = grad.transpose(0, 2, 3, 1).reshape(n * ho * wo, co)
    dw = (gcols.T @ cols).reshape(co, ci, kh, kw)

    dxp = np.zeros_like(xp)
    for i in range(kh):
        for j in range(kw):
            t = np.tensordot(grad, p.weight[:, :, i, j], axes=([1], [0]))
            dxp[:, :, i : i + sh * ho : sh, j : j + sw * wo : sw] += t.transpose(0, 3, 1, 2)
    dx = dxp[:, :, ph : ph + h, pw : pw + w]
    return dx, dw, db


# ---------------------------------------------------------------------------
# depthwise convolution


def depthwise_conv2d_forward(x: np.ndarray, p: DepthwiseConvParams) -> np.ndarray:
    c, one, kh, kw = p.weight.shape
    if one != 1:
        raise ShapeError(f"depthwise weight must be (c, 1, kh, kw), got {p.weight.shape}")
    _require_channels(x, c, "depthwise_conv2d")
    sh, sw = p.stride
    ph, pw = p.padding
    ho, wo = conv_out_hw(x.shape[2], x.shape[3], kh, kw, p.stride, p.padding)
    xp = _pad(x, ph, pw)
    y = np.empty((x.shape[0], c, ho, wo), dtype=x.dtype)
    if _kernels.HAVE_NUMBA and x.dtype in (np.float32, np.float64):
        _kernels.dw_forward(np.ascontiguousarray(xp), p.weight[:, 0], sh, sw, y)
    else:
        # one strided multiply-add per kernel tap beats a general contraction
        y[:] = 0
        for i in range(kh):
            for j in range(kw):
                y += p.weight[None, :, 0, i, j, None, None] * xp[:, :, i : i + sh * ho : sh, j : j + sw * wo : sw]
    if p.bias is not None:
        y += p.bias[None, :, None, None]
    return y


def depthwise_conv2d_reference(x: np.ndarray, p: DepthwiseConvParams) -> np.ndarray:
    """Per-channel loop reference."""
    c, _, kh, kw = p.weight.shape
    _require_channels(x, c, "depthwise_conv2d")
    sh, sw = p.stride
    ph, pw = p.padding
    ho, wo = conv_out_hw(x.shape[2], x.shape[3], kh, kw, p.stride, p.padding)
    xp = _pad(x, ph, pw)
    n = x.shape[0]
    y = np.zeros((n, c, ho, wo), dtype=x.dtype)
    for b in range(n):
        for ch in range(c):
            for i in range(ho):
                for j in range(wo):
                    win = xp[b, ch, i * sh : i * sh + kh, j * sw : j * sw + kw]
                    y[b, ch, i, j] = np.sum(win * p.weight[ch, 0])
            if p.bias is not None:
                y[b, ch] += p.bias[ch]
    return y


def depthwise_conv2d_backward(x: np.ndarray, p: DepthwiseConvParams, grad: np.ndarray):
    c, _, kh, kw = p.weight.shape
    sh, sw = p.stride
    ph, pw = p.padding
    ho, wo = conv_out_hw(x.shape[2], x.shape[3], kh, kw, p.stride, p.padding)
    if grad.shape != (x.shape[0], c, ho, wo):
        raise ShapeError(f"upstream grad {grad.shape} != output shape {(x.shape[0], c, ho, wo)}")
    n, _, h, w = x.shape
    xp = _pad(x, ph, pw)
    dxp = np.zeros_like(xp)
    if _kernels.HAVE_NUMBA and x.dtype in (np.float32, np.float64):
        dw = np.zeros_like(p.weight)
        _kernels.dw_backward(np.ascontiguousarray(xp), p.weight[:, 0], grad, sh, sw, dxp, dw[:, 0])
    else:
        dw = np.empty_like(p.weight)
        for i in range(kh):
            for j in range(kw):
                xs = xp[:, :, i : i + sh * ho : sh, j : j + sw * wo : sw]
                dw[:, 0, i, j] = np.einsum("nchw,nchw->c", grad, xs)
                dxp[:, :, i : i + sh * ho : sh, j : j + sw * wo : sw] += (
                    grad * p.weight[None, :, 0, i, j, None, None]
                )
    dx = dxp[:, :, ph : ph + h, pw : pw + w]
    db = grad.sum(axis=(0, 2, 3)) if p.bias is not None else None
    return dx, dw, db


# ---------------------------------------------------------------------------
# global depthwise convolution


def gdconv_forward(x: np.ndarray, p: GDConvParams) -> np.ndarray:
    """One weighted spatial sum per channel: out[n, m] = sum_ij K[m,i,j] * x[n,m,i,j].

    The kernel is defined only at the exact incoming spatial size; any
    mismatch is a builder bug and is rejected rather than adapted to.
    Accumulation is kept in plain index order so results are reproducible
    bit-for-bit against a direct double-loop evaluation.
    """
    c, one, kh, kw = p.weight.shape
    if one != 1:
        raise ShapeError(f"gdconv weight must be (c, 1, kh, kw), got {p.weight.shape}")
    _require_channels(x, c, "gdconv")
    if x.shape[2] != kh or x.shape[3] != kw:
        raise ShapeError(
            f"gdconv kernel {kh}x{kw} must equal input spatial size {x.shape[2]}x{x.shape[3]}"
        )
    # Accumulate position by position in row-major order: the result is then
    # bit-identical to the definition's double loop, and the op is tiny.
    k = p.weight[:, 0]
    y = np.zeros((x.shape[0], c), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            y += k[:, i, j] * x[:, :, i, j]
    if p.bias is not None:
        y = y + p.bias[None, :]
    return y.reshape(x.shape[0], c, 1, 1)


def gdconv_backward(x: np.ndarray, p: GDConvParams, grad: np.ndarray):
    c = p.weight.shape[0]
    if grad.shape != (x.shape[0], c, 1, 1):
        raise ShapeError(f"upstream grad {grad.shape} != output shape {(x.shape[0], c, 1, 1)}")
    g = grad[:, :, 0, 0]
    dw = np.einsum("nc,nchw->chw", g, x, optimize=True)[:, None]
    dx = p.weight[None, :, 0] * g[:, :, None, None]
    db = g.sum(axis=0) if p.bias is not None else None
    return dx, dw, db


# ---------------------------------------------------------------------------
# batch normalization


def batchnorm_forward(x: np.ndarray, p: BatchNormParams, train: bool):
    """Normalize per channel; returns (y, cache) for the matching backward.

    Train mode normalizes with biased batch statistics and folds them into
    the running statistics as running = momentum*running + (1-momentum)*batch.
    Eval mode uses the stored running statistics.
    """
    _require_channels(x, p.gamma.shape[0], "batchnorm")
    if train:
        mu = x.mean(axis=(0, 2, 3))
        xc = x - mu[None, :, None, None]
        m = x.shape[0] * x.shape[2] * x.shape[3]
        var = np.einsum("nchw,nchw->c", xc, xc) / m  # biased estimator
        p.running_mean = (p.momentum * p.running_mean + (1.0 - p.momentum) * mu).astype(
            p.running_mean.dtype
        )
        p.running_var = (p.momentum * p.running_var + (1.0 - p.momentum) * var).astype(
            p.running_var.dtype
        )
    else:
        mu = p.running_mean.astype(x.dtype)
        var = p.running_var.astype(x.dtype)
        xc = x - mu[None, :, None, None]
    inv = (1.0 / np.sqrt(var + p.eps)).astype(x.dtype)
    xhat = xc
    xhat *= inv[None, :, None, None]
    y = p.gamma[None, :, None, None] * xhat
    y += p.beta[None, :, None, None]
    return y, (xhat, inv, train)


def batchnorm_backward(p: BatchNormParams, cache, grad: np.ndarray):
    xhat, inv, train = cache
    if grad.shape != xhat.shape:
        raise ShapeError(f"upstream grad {grad.shape} != output shape {xhat.shape}")
    dgamma = np.einsum("nchw,nchw->c", grad, xhat)
    dbeta = grad.sum(axis=(0, 2, 3))
    scale = (p.gamma * inv)[None, :, None, None]
    if train:
        m = grad.shape[0] * grad.shape[2] * grad.shape[3]
        dx = grad - xhat * (dgamma[None, :, None, None] / m)
        dx -= dbeta[None, :, None, None] / m
        dx *= scale
    else:
        dx = grad * scale
    return dx, dgamma, dbeta


# ---------------------------------------------------------------------------
# activations


def prelu_forward(x: np.ndarray, p: PReLUParams) -> np.ndarray:
    _require_channels(x, p.slope.shape[0], "prelu")
    y = np.maximum(x, 0)
    y += p.slope[None, :, None, None] * np.minimum(x, 0)
    return y


def prelu_backward(x: np.ndarray, p: PReLUParams, grad: np.ndarray):
    # x == 0 takes the negative-branch slope (subgradient convention).
    if grad.shape != x.shape:
        raise ShapeError(f"upstream grad {grad.shape} != input shape {x.shape}")
    if (
        _kernels.HAVE_NUMBA
        and x.dtype in (np.float32, np.float64)
        and x.flags.c_contiguous
        and grad.flags.c_contiguous
    ):
        dx = np.empty_like(grad)
        dslope = np.zeros_like(p.slope)
        _kernels.prelu_backward_kernel(x, p.slope, grad, dx, dslope)
        return dx, dslope
    dx = np.where(x > 0, grad, p.slope[None, :, None, None] * grad)
    # x * [x <= 0] == min(x, 0), so the slope gradient is a single contraction
    dslope = np.einsum("nchw,nchw->c", grad, np.minimum(x, 0)).astype(p.slope.dtype)
    return dx, dslope


def relu_forward(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def relu_backward(x: np.ndarray, grad: np.ndarray) -> np.ndarray:
    if grad.shape != x.shape:
        raise ShapeError(f"upstream grad {grad.shape} != input shape {x.shape}")
    return np.where(x > 0, grad, 0)


# ---------------------------------------------------------------------------
# heads


def gapool_forward(x: np.ndarray) -> np.ndarray:
    """Global average pooling to (n, c, 1, 1)."""
    return x.mean(axis=(2, 3), keepdims=True)


def gapool_backward(x_shape, grad: np.ndarray) -> np.ndarray:
    n, c, h, w = x_shape
    if grad.shape != (n, c, 1, 1):
        raise ShapeError(f"upstream grad {grad.shape} != output shape {(n, c, 1, 1)}")
    return np.broadcast_to(grad / (h * w), x_shape).copy()


def fc_forward(x: np.ndarray, weight: np.ndarray) -> np.ndarray:
    """Flatten the feature map and project: (n, c*h*w) @ weight.T, no bias."""
    n = x.shape[0]
    flat = x.reshape(n, -1)
    if flat.shape[1] != weight.shape[1]:
        raise ShapeError(f"fc: flattened dim {flat.shape[1]} != weight in-dim {weight.shape[1]}")
    out = flat @ weight.T
    return out.reshape(n, weight.shape[0], 1, 1)


def fc_backward(x: np.ndarray, weight: np.ndarray, grad: np.ndarray):
    n = x.shape[0]
    g = grad.reshape(n, weight.shape[0])
    flat = x.reshape(n, -1)
    dw = g.T @ flat
    dx = (g @ weight).reshape(x.shape)
    return dx, dw
