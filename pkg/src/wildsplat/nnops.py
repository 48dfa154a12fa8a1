"""Structured differentiable ops for convolutional networks and image filters.

All ops record onto the shared tape from :mod:`wildsplat.tensor`.  Linear
resampling ops (pooling, upsampling, patching) implement exact adjoints, so
finite-difference and adjoint-identity tests cover them directly.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ShapeError
from .tensor import F32, Tensor, _wrap, make_op, reshape, transpose

# -- convolution --------------------------------------------------------------


def _im2col(xp, kh, kw):
    # [B,C,Hp,Wp] -> [B, H'*W', C*kh*kw] patch matrix (copies once).
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))  # [B,C,H',W',kh,kw]
    b, c, ho, wo = win.shape[:4]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(b, ho * wo, c * kh * kw)
    return np.ascontiguousarray(cols), ho, wo


def conv2d(x, w, b=None, pad=0):
    """2D convolution (cross-correlation), stride 1, symmetric zero padding.

    x: [B,C,H,W]; w: [O,C,kh,kw]; b: [O] or None.
    """
    x, w = _wrap(x), _wrap(w)
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError("conv2d expects x[B,C,H,W] and w[O,C,kh,kw]")
    if x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv2d channel mismatch: {x.shape} vs {w.shape}")
    bt = _wrap(b) if b is not None else None
    o, c, kh, kw = w.shape
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    cols, ho, wo = _im2col(xp, kh, kw)
    w_mat = w.data.reshape(o, -1)
    y = cols @ w_mat.T  # [B, H'W', O]
    if bt is not None:
        y = y + bt.data
    out = y.transpose(0, 2, 1).reshape(x.shape[0], o, ho, wo)

    def bwd(g):
        gmat = g.reshape(x.shape[0], o, ho * wo).transpose(0, 2, 1)  # [B,N,O]
        # patch matrix is recomputed instead of stored: tape memory stays flat
        cols2, _, _ = _im2col(xp, kh, kw)
        gw = np.einsum("bno,bnk->ok", gmat, cols2, optimize=True).reshape(w.shape)
        gcols = gmat @ w_mat  # [B,N,C*kh*kw]
        gwin = gcols.reshape(x.shape[0], ho, wo, c, kh, kw).transpose(0, 3, 1, 2, 4, 5)
        gxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i : i + ho, j : j + wo] += gwin[:, :, :, :, i, j]
        gx = gxp[:, :, pad : pad + x.shape[2], pad : pad + x.shape[3]] if pad else gxp
        if bt is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    inputs = (x, w) if bt is None else (x, w, bt)
    return make_op(out, inputs, bwd, "conv2d")


def correlate2d_fixed(x, kernel):
    """Valid-mode per-channel correlation with a fixed (non-learned) 2D kernel.

    x: [B,C,H,W]; kernel: [kh,kw] plain array.  Gradient flows to x only.
    """
    x = _wrap(x)
    k = np.asarray(kernel, dtype=F32)
    kh, kw = k.shape
    win = sliding_window_view(x.data, (kh, kw), axis=(2, 3))
    out = np.einsum("bchwij,ij->bchw", win, k, optimize=True).astype(F32)

    def bwd(g):
        # adjoint of valid correlation: full correlation with the flipped kernel
        gp = np.pad(g, ((0, 0), (0, 0), (kh - 1, kh - 1), (kw - 1, kw - 1)))
        gwin = sliding_window_view(gp, (kh, kw), axis=(2, 3))
        kr = k[::-1, ::-1]
        return (np.einsum("bchwij,ij->bchw", gwin, kr, optimize=True).astype(F32),)

    return make_op(out, (x,), bwd, "correlate2d")


# -- resampling ---------------------------------------------------------------


def avgpool2(x):
    """2x2 average pooling, stride 2.  H and W must be even."""
    x = _wrap(x)
    b, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"avgpool2 needs even spatial dims, got {x.shape}")
    out = x.data.reshape(b, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5), dtype=F32)

    def bwd(g):
        g4 = (g * F32(0.25))[:, :, :, None, :, None]
        return (np.broadcast_to(g4, (b, c, h // 2, 2, w // 2, 2)).reshape(x.shape).copy(),)

    return make_op(out, (x,), bwd, "avgpool2")


def upsample_nearest2(x):
    """2x nearest-neighbor upsampling."""
    x = _wrap(x)
    b, c, h, w = x.shape
    out = np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3)

    def bwd(g):
        return (g.reshape(b, c, h, 2, w, 2).sum(axis=(3, 5), dtype=F32),)

    return make_op(out, (x,), bwd, "upsample_nearest2")


def _lerp_up1d(x, axis):
    # 2x upsampling with half-pixel-aligned linear weights (3/4, 1/4) and
    # clamped borders, applied along one axis.
    x = np.moveaxis(x, axis, -1)
    n = x.shape[-1]
    left = np.concatenate([x[..., :1], x[..., : n - 1]], axis=-1)
    right = np.concatenate([x[..., 1:], x[..., n - 1 :]], axis=-1)
    y = np.empty(x.shape[:-1] + (2 * n,), dtype=F32)
    y[..., 0::2] = F32(0.75) * x + F32(0.25) * left
    y[..., 1::2] = F32(0.75) * x + F32(0.25) * right
    return np.moveaxis(y, -1, axis)


def _lerp_up1d_adjoint(g, axis):
    g = np.moveaxis(g, axis, -1)
    ge = g[..., 0::2]
    go = g[..., 1::2]
    n = ge.shape[-1]
    dx = F32(0.75) * (ge + go)
    # adjoint of clamped left shift feeding the even taps
    dx[..., : n - 1] += F32(0.25) * ge[..., 1:]
    dx[..., 0] += F32(0.25) * ge[..., 0]
    # adjoint of clamped right shift feeding the odd taps
    dx[..., 1:] += F32(0.25) * go[..., : n - 1]
    dx[..., n - 1] += F32(0.25) * go[..., n - 1]
    return np.moveaxis(dx, -1, axis)


def bilinear_up2(x):
    """2x bilinear upsampling (half-pixel centers), separable over H then W."""
    x = _wrap(x)
    out = _lerp_up1d(_lerp_up1d(x.data, 2), 3)

    def bwd(g):
        return (_lerp_up1d_adjoint(_lerp_up1d_adjoint(g, 3), 2),)

    return make_op(out, (x,), bwd, "bilinear_up2")


def space_to_depth2(x):
    """[B,C,H,W] -> [B,4C,H/2,W/2]; out channel c*4 + 2*di + dj."""
    x = _wrap(x)
    b, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"space_to_depth2 needs even spatial dims, got {x.shape}")
    r = reshape(x, (b, c, h // 2, 2, w // 2, 2))
    t = transpose(r, (0, 1, 3, 5, 2, 4))
    return reshape(t, (b, c * 4, h // 2, w // 2))


def depth_to_space2(x):
    """Inverse of :func:`space_to_depth2`."""
    x = _wrap(x)
    b, c4, h, w = x.shape
    if c4 % 4:
        raise ShapeError(f"depth_to_space2 needs channels divisible by 4, got {x.shape}")
    c = c4 // 4
    r = reshape(x, (b, c, 2, 2, h, w))
    t = transpose(r, (0, 1, 4, 2, 5, 3))
    return reshape(t, (b, c, h * 2, w * 2))
