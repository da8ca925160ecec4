"""Bias-free layer kernels: linear conv, bilinear conv, bilinear FC, 2x2 max-pool.

Public functions take a single ``[C, H, W]`` tensor or a ``[B, C, H, W]``
batch and return the same rank.  The ``*_cb`` variants work on
``[C, B, H, W]`` arrays, which is what the network uses internally: the batch
folds into the GEMM columns so no transposes are needed between layers.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .linalg import col2im_cb, conv_output_size, im2col_cb


@dataclass(frozen=True)
class KernelSpec:
    kernel_size: int
    in_channels: int
    out_channels: int
    stride: int = 1
    pad: int | None = None  # None means "same": K // 2

    def __post_init__(self):
        if self.kernel_size < 1 or self.kernel_size % 2 != 1:
            raise ValueError(f"kernel_size must be odd, got {self.kernel_size}")
        if self.stride < 1:
            raise ValueError(f"stride must be >= 1, got {self.stride}")

    @property
    def padding(self) -> int:
        return self.kernel_size // 2 if self.pad is None else self.pad

    @property
    def patch_dim(self) -> int:
        return self.in_channels * self.kernel_size**2


@dataclass(frozen=True)
class BConvParams:
    """Paired conv kernels U, V of shape [m, n, K, K]; output (x*U) . (x*V)."""

    u: np.ndarray
    v: np.ndarray
    stride: int = 1

    def __post_init__(self):
        if self.u.shape != self.v.shape or self.u.ndim != 4:
            raise ValueError(f"U and V must share a [m,n,K,K] shape, got {self.u.shape} / {self.v.shape}")
        if self.u.shape[2] != self.u.shape[3] or self.u.shape[2] % 2 != 1:
            raise ValueError("kernels must be square with odd size")

    @property
    def spec(self) -> KernelSpec:
        m, n, k, _ = self.u.shape
        return KernelSpec(kernel_size=k, in_channels=n, out_channels=m, stride=self.stride)


@dataclass(frozen=True)
class FCBilinearParams:
    """Bilinear encoder (xF) . (xH), both [d_in, d_hidden]; no bias, no down-projection."""

    f: np.ndarray
    h: np.ndarray

    def __post_init__(self):
        if self.f.shape != self.h.shape or self.f.ndim != 2:
            raise ValueError(f"F and H must share a 2-D shape, got {self.f.shape} / {self.h.shape}")


def to_cb(x: np.ndarray) -> tuple[np.ndarray, bool]:
    """[C,H,W] or [B,C,H,W] -> ([C,B,H,W], was_single)."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 3:
        return x[:, None], True
    if x.ndim != 4:
        raise ValueError(f"expected [C,H,W] or [B,C,H,W], got shape {x.shape}")
    return x.transpose(1, 0, 2, 3), False


def from_cb(x: np.ndarray, single: bool) -> np.ndarray:
    return x[:, 0] if single else np.ascontiguousarray(x.transpose(1, 0, 2, 3))


# --- [C, B, H, W] kernels -------------------------------------------------


def conv_cb(x: np.ndarray, w: np.ndarray, stride: int = 1, pad: int | None = None):
    """Returns ``(out [m,B,Ho,Wo], cols)``."""
    m, n, k, k2 = w.shape
    if k != k2:
        raise ValueError("only square kernels are supported")
    if x.shape[0] != n:
        raise ValueError(f"input has {x.shape[0]} channels, kernel expects {n}")
    pad = k // 2 if pad is None else pad
    _, b, h, wd = x.shape
    ho = conv_output_size(h, k, stride, pad)
    wo = conv_output_size(wd, k, stride, pad)
    cols = im2col_cb(x, k, stride, pad)
    out = w.reshape(m, n * k * k) @ cols
    return out.reshape(m, b, ho, wo), cols


def conv_cb_backward(dout, cols, w, x_shape, stride: int = 1, pad: int | None = None):
    """Returns ``(dx, dw)``."""
    m, n, k, _ = w.shape
    pad = k // 2 if pad is None else pad
    d2 = dout.reshape(m, -1)
    dw = (d2 @ cols.T).reshape(w.shape)
    if stride == 1 and 0 <= pad <= k - 1:
        # stride-1 adjoint is a correlation with the flipped, transposed kernel;
        # one im2col + GEMM beats the col2im scatter
        wt = np.ascontiguousarray(w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
        dx, _ = conv_cb(dout, wt, 1, k - 1 - pad)
        return dx, dw
    dx = col2im_cb(w.reshape(m, -1).T @ d2, x_shape, k, stride, pad)
    return dx, dw


def bconv_cb(x: np.ndarray, params: BConvParams):
    """Returns ``(out, u_out, v_out, cols)``; U and V share one im2col and one GEMM."""
    m = params.u.shape[0]
    both = np.concatenate([params.u, params.v], axis=0)
    uv, cols = conv_cb(x, both, params.stride)
    u_out, v_out = uv[:m], uv[m:]
    return u_out * v_out, u_out, v_out, cols


def bconv_cb_backward(dout, u_out, v_out, cols, params: BConvParams, x_shape):
    """Product rule through (x*U).(x*V). Returns ``(dx, du, dv)``."""
    both = np.concatenate([params.u, params.v], axis=0)
    duv = np.concatenate([dout * v_out, dout * u_out], axis=0)
    dx, dboth = conv_cb_backward(duv, cols, both, x_shape, params.stride)
    m = params.u.shape[0]
    return dx, dboth[:m], dboth[m:]


# --- public, standard layout ---------------------------------------------


def conv2d_forward(x: np.ndarray, w: np.ndarray, stride: int = 1, pad: int | None = None) -> np.ndarray:
    xc, single = to_cb(x)
    out, _ = conv_cb(xc, np.asarray(w, dtype=np.float64), stride, pad)
    return from_cb(out, single)


def conv2d_grad(x, w, dout, stride: int = 1, pad: int | None = None):
    """Gradients ``(dx, dw)`` of ``sum(dout * conv2d_forward(x, w))``."""
    xc, single = to_cb(x)
    _, cols = conv_cb(xc, w, stride, pad)
    dc, _ = to_cb(dout)
    dx, dw = conv_cb_backward(dc, cols, w, xc.shape, stride, pad)
    return from_cb(dx, single), dw


def bconv2d_forward(x: np.ndarray, params: BConvParams) -> np.ndarray:
    xc, single = to_cb(x)
    return from_cb(bconv_cb(xc, params)[0], single)


def bconv2d_grad(x, params: BConvParams, dout):
    """Gradients ``(dx, du, dv)`` of ``sum(dout * bconv2d_forward(x, params))``."""
    xc, single = to_cb(x)
    _, uo, vo, cols = bconv_cb(xc, params)
    dc, _ = to_cb(dout)
    dx, du, dv = bconv_cb_backward(dc, uo, vo, cols, params, xc.shape)
    return from_cb(dx, single), du, dv


def fc_bilinear_forward(x: np.ndarray, params: FCBilinearParams) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != params.f.shape[0]:
        raise ValueError(f"input length {x.shape[-1]} != d_in {params.f.shape[0]}")
    return (x @ params.f) * (x @ params.h)


def fc_bilinear_grad(x, params: FCBilinearParams, dout):
    """Gradients ``(dx, df, dh)`` for batched ``x`` [B, d_in]."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    dout = np.atleast_2d(dout)
    xf = x @ params.f
    xh = x @ params.h
    gf = dout * xh
    gh = dout * xf
    return gf @ params.f.T + gh @ params.h.T, x.T @ gf, x.T @ gh


def maxpool2x2(x: np.ndarray):
    """2x2/stride-2 max pool over the last two axes. Returns ``(out, argmax)``.

    ``argmax`` is 0..3 in row-major window order; ties go to the first
    maximal element.
    """
    x = np.asarray(x)
    if x.dtype not in (np.float32, np.float64):
        x = x.astype(np.float64)
    *lead, h, w = x.shape
    if h % 2 or w % 2:
        raise ValueError(f"maxpool2x2 needs even spatial extents, got {h}x{w}")
    q = [x[..., i::2, j::2] for i in (0, 1) for j in (0, 1)]
    out = q[0].copy()
    idx = np.zeros(out.shape, dtype=np.int8)
    for n in (1, 2, 3):
        # strict '>' keeps the first maximal element on ties
        better = q[n] > out
        out = np.maximum(out, q[n])
        idx += better.view(np.int8) * (np.int8(n) - idx)
    return out, idx


def maxpool2x2_backward(dout: np.ndarray, argmax: np.ndarray, x_shape) -> np.ndarray:
    dx = np.zeros(x_shape, dtype=dout.dtype)
    for n, (i, j) in enumerate(((0, 0), (0, 1), (1, 0), (1, 1))):
        dx[..., i::2, j::2] = dout * (argmax == n)
    return dx
