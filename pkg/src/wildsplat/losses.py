"""Photometric losses and image metrics.

The masked variants share the exact summation structure of the full ones, so
a zero mask reproduces the full loss bit for bit (multiplying by 1.0 and
dividing by the same count are the identical float operations).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError, DegeneracyError, ShapeError
from .nnops import correlate2d_fixed
from .tensor import F32, Tensor, _wrap, absolute, mean, mul, sub, sum_

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2


@dataclass(frozen=True)
class LossWeights:
    """lambda1 (L1), lambda2 (1-SSIM), lambda3 (novel-view term)."""

    lambda1: float = 0.8
    lambda2: float = 0.2
    lambda3: float = 1.0

    def __post_init__(self):
        if self.lambda1 < 0 or self.lambda2 < 0 or self.lambda3 < 0:
            raise ContractError("loss weights must be nonnegative")


def _check_same_shape(a, b, opname):
    if a.shape != b.shape:
        raise ShapeError(f"{opname}: shapes {a.shape} vs {b.shape}")


def gaussian_window(size=SSIM_WINDOW, sigma=SSIM_SIGMA):
    half = (size - 1) / 2.0
    x = np.arange(size, dtype=np.float64) - half
    g = np.exp(-(x * x) / (2.0 * sigma * sigma))
    k = np.outer(g, g)
    return (k / k.sum()).astype(F32)


def l1(a, b):
    a, b = _wrap(a), _wrap(b)
    _check_same_shape(a, b, "l1")
    n = a.size
    return mul(sum_(absolute(sub(a, b))), 1.0 / n)


def masked_l1(a, b, mask):
    """Mean absolute difference over unmasked pixels only (mask 1 = excluded)."""
    a, b = _wrap(a), _wrap(b)
    _check_same_shape(a, b, "masked_l1")
    keep = _keep_map(mask, a.shape)
    count = float(keep.sum()) * a.shape[0]
    if count == 0:
        raise DegeneracyError("masked_l1: mask excludes every pixel")
    weighted = mul(absolute(sub(a, b)), Tensor(keep[None, :, :]))
    return mul(sum_(weighted), 1.0 / count)


def _keep_map(mask, image_shape):
    m = mask.data if isinstance(mask, Tensor) else np.asarray(mask, dtype=F32)
    m = m.reshape(m.shape[-2], m.shape[-1])
    if m.shape != image_shape[-2:]:
        raise ShapeError(f"mask shape {m.shape} vs image {image_shape}")
    return (F32(1) - m.astype(F32))


def _ssim_impl(a, b, mask):
    a, b = _wrap(a), _wrap(b)
    _check_same_shape(a, b, "ssim")
    if a.ndim != 3:
        raise ShapeError(f"ssim expects [C,H,W], got {a.shape}")
    c, h, w = a.shape
    if h < SSIM_WINDOW or w < SSIM_WINDOW:
        raise ContractError(f"image {h}x{w} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")
    win = gaussian_window()
    x = a.reshape(1, c, h, w)
    y = b.reshape(1, c, h, w)

    mu_x = correlate2d_fixed(x, win)
    mu_y = correlate2d_fixed(y, win)
    xx = correlate2d_fixed(mul(x, x), win)
    yy = correlate2d_fixed(mul(y, y), win)
    xy = correlate2d_fixed(mul(x, y), win)
    mu_xx = mul(mu_x, mu_x)
    mu_yy = mul(mu_y, mu_y)
    mu_xy = mul(mu_x, mu_y)
    var_x = sub(xx, mu_xx)
    var_y = sub(yy, mu_yy)
    cov = sub(xy, mu_xy)

    c1, c2 = F32(SSIM_C1), F32(SSIM_C2)
    num = mul(mul(2.0, mu_xy) + c1, mul(2.0, cov) + c2)
    den = mul(mu_xx + mu_yy + c1, var_x + var_y + c2)
    ssim_map = num / den  # [1,C,H',W']

    if mask is None:
        valid = np.ones(ssim_map.shape[-2:], dtype=F32)
    else:
        keep = _keep_map(mask, a.shape)
        occupied = _window_hits(1.0 - keep)
        valid = (occupied == 0).astype(F32)
    count = float(valid.sum()) * c
    if count == 0:
        raise DegeneracyError("ssim: no window avoids the mask")
    weighted = mul(ssim_map, Tensor(valid[None, None, :, :]))
    return mul(sum_(weighted), 1.0 / count)


def _window_hits(mask_hw):
    # number of masked pixels under each valid window position
    from numpy.lib.stride_tricks import sliding_window_view

    win = sliding_window_view(mask_hw, (SSIM_WINDOW, SSIM_WINDOW))
    return win.sum(axis=(2, 3))


def ssim(a, b):
    """Mean local SSIM over valid (fully-inside) windows, all channels."""
    return _ssim_impl(a, b, None)


def masked_ssim(a, b, mask):
    """SSIM over windows whose footprint avoids every masked pixel."""
    return _ssim_impl(a, b, mask)


def loss_c(a, b, weights=LossWeights(), mask=None):
    """Photometric pair loss: lambda1 * L1 + lambda2 * (1 - SSIM)."""
    if mask is None:
        term_l1 = l1(a, b)
        term_ssim = ssim(a, b)
    else:
        term_l1 = masked_l1(a, b, mask)
        term_ssim = masked_ssim(a, b, mask)
    one_minus = sub(Tensor(np.asarray(1.0, dtype=F32)), term_ssim)
    return mul(term_l1, weights.lambda1) + mul(one_minus, weights.lambda2)


def loss_total(l_o, l_c, lambda3=1.0):
    """Total objective: training-view term plus weighted novel-view term."""
    return _wrap(l_o) + mul(_wrap(l_c), lambda3)


def psnr(a, b, cap=99.0):
    """Peak signal-to-noise ratio in dB on [0,1] images (numpy, not taped)."""
    x = a.data if isinstance(a, Tensor) else np.asarray(a)
    y = b.data if isinstance(b, Tensor) else np.asarray(b)
    if x.shape != y.shape:
        raise ShapeError(f"psnr: shapes {x.shape} vs {y.shape}")
    mse = float(np.mean((x.astype(np.float64) - y.astype(np.float64)) ** 2))
    if mse == 0.0:
        return float(cap)
    return float(min(10.0 * np.log10(1.0 / mse), cap))


def masked_region_error(a, b, mask):
    """Mean absolute error restricted to masked pixels (mask 1 = region)."""
    x = a.data if isinstance(a, Tensor) else np.asarray(a)
    y = b.data if isinstance(b, Tensor) else np.asarray(b)
    m = mask.data if isinstance(mask, Tensor) else np.asarray(mask)
    m = m.reshape(m.shape[-2], m.shape[-1]).astype(bool)
    if not m.any():
        raise DegeneracyError("masked_region_error: empty mask")
    diff = np.abs(x.astype(np.float64) - y.astype(np.float64))
    return float(diff[:, m].mean())


def patch_stat_distance(a, b, patch=8):
    """Mean distance between per-patch (mean, std) feature vectors.

    A lightweight distribution-shift proxy; this is not FID.
    """
    def feats(img):
        x = img.data if isinstance(img, Tensor) else np.asarray(img)
        c, h, w = x.shape
        hp, wp = h // patch, w // patch
        x = x[:, : hp * patch, : wp * patch].reshape(c, hp, patch, wp, patch)
        mu = x.mean(axis=(2, 4))
        sd = x.std(axis=(2, 4))
        return np.concatenate([mu.reshape(c, -1), sd.reshape(c, -1)], axis=1)

    fa, fb = feats(a), feats(b)
    return float(np.linalg.norm(fa - fb, axis=0).mean())


def gradient_orientation_distance(a, b, bins=16):
    """Distance between magnitude-weighted edge-orientation histograms.

    Sobel gradients of the luminance channel vote into ``bins`` orientation
    buckets weighted by edge strength; the result is half the L1 distance
    between the two normalized histograms (0 = identical edge statistics,
    1 = disjoint).  A cheap structure-change measure.
    """
    kx = np.array([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]])

    def hist(img):
        x = img.data if isinstance(img, Tensor) else np.asarray(img)
        if x.ndim != 3:
            raise ShapeError(f"expected [C,H,W], got {x.shape}")
        lum = x.astype(np.float64).mean(axis=0)
        pad = np.pad(lum, 1, mode="edge")
        win = np.lib.stride_tricks.sliding_window_view(pad, (3, 3))
        gx = (win * kx).sum(axis=(2, 3))
        gy = (win * kx.T).sum(axis=(2, 3))
        mag = np.hypot(gx, gy).ravel()
        theta = np.arctan2(gy, gx).ravel()
        h, _ = np.histogram(theta, bins=bins, range=(-np.pi, np.pi), weights=mag)
        total = h.sum()
        if total <= 0.0:
            return np.full(bins, 1.0 / bins)
        return h / total

    return float(0.5 * np.abs(hist(a) - hist(b)).sum())
