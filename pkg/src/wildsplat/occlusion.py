"""Occluder handling: statistics-matched noise fill and dual-branch inpainting.

Masked pixels are treated as missing data.  Before initialization they are
replaced with Gaussian noise matched to the unmasked statistics; during
training they are regenerated by denoising a fused latent (render structure
inside the mask, ground truth outside) with masked attention fusion.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegeneracyError, ShapeError
from .rng import stream
from .tensor import F32, Tensor
from .enhance import adain
from .diffusion.ddim import (
    ddim_invert,
    ddim_sample_dual,
    downsample_mask_nearest,
    mask_to_tokens,
)
from .diffusion.schedule import NoiseSchedule

MASK_DILATION_PX = 2


def _as_mask2d(mask, shape_hw=None):
    m = np.asarray(mask, dtype=F32)
    if m.ndim == 3:
        if m.shape[0] != 1:
            raise ShapeError(f"mask must be single-channel, got {m.shape}")
        m = m[0]
    if m.ndim != 2:
        raise ShapeError(f"mask must be [H,W] or [1,H,W], got {m.shape}")
    if shape_hw is not None and m.shape != tuple(shape_hw):
        raise ShapeError(f"mask shape {m.shape} does not match image {tuple(shape_hw)}")
    return m


def mask_noise_fill(img, mask, seed=0):
    """Replace masked pixels with noise matched to unmasked channel statistics.

    Unmasked pixels are returned bit-identical.  Raises DegeneracyError when
    the mask covers everything (no statistics source).
    """
    img = np.asarray(img, dtype=F32)
    if img.ndim != 3:
        raise ShapeError(f"image must be [C,H,W], got {img.shape}")
    m = _as_mask2d(mask, img.shape[1:])
    hole = m > 0.5
    keep = ~hole
    if not keep.any():
        raise DegeneracyError("mask covers every pixel; no unmasked statistics source")
    if not hole.any():
        return img.copy()
    rng = stream(seed, "mask-noise-fill")
    out = img.copy()
    n_hole = int(hole.sum())
    for c in range(img.shape[0]):
        src = img[c][keep].astype(np.float64)
        mu, sd = src.mean(), src.std()
        noise = rng.normal(mu, sd, size=n_hole)
        out[c][hole] = np.clip(noise, 0.0, 1.0).astype(F32)
    return out


def dilate_mask(mask, radius=MASK_DILATION_PX):
    """Binary dilation by ``radius`` pixels (8-connected square growth)."""
    m = _as_mask2d(mask) > 0.5
    for _ in range(int(radius)):
        grown = m.copy()
        grown[1:, :] |= m[:-1, :]
        grown[:-1, :] |= m[1:, :]
        grown[:, 1:] |= m[:, :-1]
        grown[:, :-1] |= m[:, 1:]
        grown[1:, 1:] |= m[:-1, :-1]
        grown[1:, :-1] |= m[:-1, 1:]
        grown[:-1, 1:] |= m[1:, :-1]
        grown[:-1, :-1] |= m[1:, 1:]
        m = grown
    return m.astype(F32)


def fuse_latents(x_render, x_gt, mask):
    """M*x_render + (1-M)*x_gt with the mask downsampled to the latent grid."""
    a = x_render.data if isinstance(x_render, Tensor) else np.asarray(x_render, dtype=F32)
    b = x_gt.data if isinstance(x_gt, Tensor) else np.asarray(x_gt, dtype=F32)
    if a.shape != b.shape:
        raise ShapeError(f"latent shapes differ: {a.shape} vs {b.shape}")
    if a.ndim != 4:
        raise ShapeError(f"latents must be [B,C,h,w], got {a.shape}")
    if a.shape[-2] != a.shape[-1]:
        raise ShapeError(f"latent grid must be square, got {a.shape}")
    m = downsample_mask_nearest(mask, a.shape[-1])[None, None]
    fused = m * a + (F32(1.0) - m) * b
    return Tensor(fused) if isinstance(x_render, Tensor) else fused


@dataclass
class OcclusionContext:
    """One training view's inpainting inputs.

    ``render`` is the current model's render of the view, ``gt`` the
    captured (occluded) image, ``mask`` the occluder footprint.  The
    inverted latents are filled in lazily when absent.
    """

    mask: np.ndarray
    render: np.ndarray
    gt: np.ndarray
    latent_render: object = None
    latent_gt: object = None

    def __post_init__(self):
        self.render = np.asarray(self.render, dtype=F32)
        self.gt = np.asarray(self.gt, dtype=F32)
        if self.render.shape != self.gt.shape:
            raise ShapeError(
                f"render {self.render.shape} and gt {self.gt.shape} differ")
        self.mask = _as_mask2d(self.mask, self.render.shape[1:])


def inpaint_occlusion(ctx: OcclusionContext, codec, base, constrained,
                      reference=None, schedule=None, dilation_px=MASK_DILATION_PX):
    """Regenerate the masked region of a training view; returns a pseudo GT.

    Both inverted latents are fused (render structure inside the mask, the
    captured view outside), then denoised by two lockstep branches with
    masked attention fusion.  The decoded result is appearance-matched and
    composited: generated content inside the dilated mask, the captured
    pixels outside it.
    """
    schedule = schedule or NoiseSchedule()
    if reference is None:
        reference = ctx.gt
    z0_render = codec.encode(Tensor(ctx.render[None]))
    z0_gt = codec.encode(Tensor(ctx.gt[None]))
    if ctx.latent_render is None:
        ctx.latent_render = ddim_invert(base, z0_render, schedule)
    if ctx.latent_gt is None:
        ctx.latent_gt = ddim_invert(base, z0_gt, schedule)
    fused = fuse_latents(ctx.latent_render, ctx.latent_gt, ctx.mask)
    # bottleneck attention runs two 2x downsamplings below the latent grid
    tokens = mask_to_tokens(ctx.mask, grid=int(fused.shape[-1]) // 4)
    z_rec, z_out = ddim_sample_dual(base, constrained, fused, fused, schedule,
                                    injection="masked", token_mask=tokens)
    # Both branches share the sampler's round-trip drift; re-basing on the
    # clean fused latent keeps only the constrained model's correction.
    fused_x0 = fuse_latents(z0_render, z0_gt, ctx.mask)
    z_out = fused_x0 + (z_out - z_rec)
    generated = codec.decode(z_out).data[0]
    generated = adain(generated, np.asarray(reference, dtype=F32), clamp=True)
    region = dilate_mask(ctx.mask, radius=dilation_px)[None]
    out = region * generated + (F32(1.0) - region) * ctx.gt
    return np.clip(out, 0.0, 1.0).astype(F32)
