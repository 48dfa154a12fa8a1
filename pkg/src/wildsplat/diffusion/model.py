"""Denoiser network and the image-to-latent codec.

The denoiser is a small three-level U-Net over [B,4,32,32] latents:
residual conv blocks at each level, one self-attention block at the 8x8
bottleneck (64 tokens, small enough to check against brute force), and a
sinusoidal timestep embedding injected per block as a channel bias.

The codec maps [3,128,128] images to [4,32,32] latents through fixed
resampling (average pool + 2x2 space-to-depth) and a learned 1x1 linear
pair.
"""

from __future__ import annotations

import numpy as np

from ..errors import ContractError, ShapeError
from ..nnops import (
    avgpool2,
    bilinear_up2,
    conv2d,
    depth_to_space2,
    space_to_depth2,
    upsample_nearest2,
)
from ..rng import stream
from ..tensor import F32, Tensor, concat, matmul, relu, reshape, transpose
from ..tensor_io import load_checkpoint, save_checkpoint
from .ddim import self_attention

NORM_EPS = 1e-5


class Module:
    """Minimal parameter container.

    Any attribute that is a Tensor counts as a learnable parameter; Module
    attributes (and lists of them) are walked recursively with dotted names.
    Buffers that must not be trained are stored as plain numpy arrays.
    """

    def named_params(self):
        out = []
        for key, val in vars(self).items():
            if isinstance(val, Tensor):
                out.append((key, val))
            elif isinstance(val, Module):
                out.extend((f"{key}.{n}", p) for n, p in val.named_params())
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        out.extend((f"{key}.{i}.{n}", p) for n, p in item.named_params())
                    elif isinstance(item, Tensor):
                        out.append((f"{key}.{i}", item))
        return out

    def params(self):
        return [p for _, p in self.named_params()]

    def load_params(self, arrays):
        """Copy arrays into parameters by name; shapes must match exactly."""
        for name, p in self.named_params():
            if name not in arrays:
                raise ContractError(f"checkpoint missing parameter {name!r}")
            arr = np.asarray(arrays[name], dtype=F32)
            if arr.shape != p.data.shape:
                raise ShapeError(
                    f"parameter {name!r}: checkpoint shape {arr.shape} != model shape {p.data.shape}")
            p.data[...] = arr

    def param_arrays(self):
        return {name: p.data for name, p in self.named_params()}


def _param(gen, shape, scale):
    return Tensor((gen.standard_normal(shape) * scale).astype(F32), requires_grad=True)


def _zeros(shape):
    return Tensor(np.zeros(shape, dtype=F32), requires_grad=True)


class Conv2d(Module):
    def __init__(self, gen, cin, cout, k, pad=0, zero_init=False):
        self.pad = pad
        fan_in = cin * k * k
        if zero_init:
            self.w = _zeros((cout, cin, k, k))
        else:
            self.w = _param(gen, (cout, cin, k, k), np.sqrt(2.0 / fan_in))
        self.b = _zeros((cout,))

    def __call__(self, x):
        return conv2d(x, self.w, self.b, pad=self.pad)


class Linear(Module):
    def __init__(self, gen, cin, cout):
        self.w = _param(gen, (cin, cout), np.sqrt(1.0 / cin))
        self.b = _zeros((cout,))

    def __call__(self, x):
        return matmul(x, self.w) + self.b


class RMSNorm(Module):
    """Root-mean-square normalization over (C,H,W) with per-channel affine."""

    def __init__(self, channels):
        self.gamma = Tensor(np.ones((channels, 1, 1), dtype=F32), requires_grad=True)
        self.beta = _zeros((channels, 1, 1))

    def __call__(self, x):
        ms = (x * x).mean(axis=(1, 2, 3), keepdims=True)
        y = x / (ms + NORM_EPS).sqrt()
        return y * self.gamma + self.beta


def timestep_embedding(t, dim):
    """Sinusoidal embedding of integer noise levels; returns [B,dim] Tensor."""
    tv = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / half)
    ang = tv[:, None] * freqs[None, :]
    emb = np.concatenate([np.sin(ang), np.cos(ang)], axis=1).astype(F32)
    return Tensor(emb)


class ResBlock(Module):
    """norm-relu-conv x2 with a timestep bias between, plus identity/1x1 skip."""

    def __init__(self, gen, cin, cout, t_dim):
        self.norm1 = RMSNorm(cin)
        self.conv1 = Conv2d(gen, cin, cout, 3, pad=1)
        self.temb = Linear(gen, t_dim, cout)
        self.norm2 = RMSNorm(cout)
        # zero-init second conv: block starts as (skip of) identity
        self.conv2 = Conv2d(gen, cout, cout, 3, pad=1, zero_init=True)
        self.skip = Conv2d(gen, cin, cout, 1) if cin != cout else None
        self._cout = cout

    def __call__(self, x, emb):
        h = self.conv1(relu(self.norm1(x)))
        tb = self.temb(emb)
        h = h + reshape(tb, (tb.shape[0], self._cout, 1, 1))
        h = self.conv2(relu(self.norm2(h)))
        s = self.skip(x) if self.skip is not None else x
        return s + h


class AttentionBlock(Module):
    """Single-head self-attention over flattened spatial tokens.

    ``ctl`` is an optional hook called with the per-token (Q, K, V) tensors;
    returning a replacement tensor substitutes the attention output, while
    returning None leaves the default path untouched (record-only hooks are
    therefore bit-noninvasive).
    """

    def __init__(self, gen, channels):
        self.norm = RMSNorm(channels)
        s = np.sqrt(1.0 / channels)
        self.wq = _param(gen, (channels, channels), s)
        self.bq = _zeros((channels,))
        self.wk = _param(gen, (channels, channels), s)
        self.bk = _zeros((channels,))
        self.wv = _param(gen, (channels, channels), s)
        self.bv = _zeros((channels,))
        self.wo = _zeros((channels, channels))
        self.bo = _zeros((channels,))
        self._channels = channels

    def __call__(self, x, ctl=None):
        b, c, h, w = x.shape
        tok = transpose(reshape(self.norm(x), (b, c, h * w)), (0, 2, 1))
        q = matmul(tok, self.wq) + self.bq
        k = matmul(tok, self.wk) + self.bk
        v = matmul(tok, self.wv) + self.bv
        repl = ctl(q, k, v) if ctl is not None else None
        attn = repl if repl is not None else self_attention(q, k, v)
        out = matmul(attn, self.wo) + self.bo
        out = reshape(transpose(out, (0, 2, 1)), (b, c, h, w))
        return x + out


class DenoiserModel(Module):
    """Noise predictor over 4-channel latents; tagged base or constrained."""

    VARIANTS = ("base", "constrained")

    def __init__(self, seed=0, channels=(16, 24, 32), t_dim=32, variant="base"):
        if variant not in self.VARIANTS:
            raise ContractError(f"variant must be one of {self.VARIANTS}, got {variant!r}")
        self.seed = int(seed)
        self.channels = tuple(int(c) for c in channels)
        self.t_dim = int(t_dim)
        self.variant = variant
        c1, c2, c3 = self.channels
        gen = stream(self.seed, "denoiser-init")
        self.conv_in = Conv2d(gen, 4, c1, 3, pad=1)
        self.enc1 = ResBlock(gen, c1, c1, t_dim)
        self.down1 = Conv2d(gen, c1, c2, 1)
        self.enc2 = ResBlock(gen, c2, c2, t_dim)
        self.down2 = Conv2d(gen, c2, c3, 1)
        self.mid1 = ResBlock(gen, c3, c3, t_dim)
        self.attn = AttentionBlock(gen, c3)
        self.mid2 = ResBlock(gen, c3, c3, t_dim)
        self.up2 = Conv2d(gen, c3, c2, 1)
        self.dec2 = ResBlock(gen, c2 * 2, c2, t_dim)
        self.up1 = Conv2d(gen, c2, c1, 1)
        self.dec1 = ResBlock(gen, c1 * 2, c1, t_dim)
        self.out_norm = RMSNorm(c1)
        self.out_conv = Conv2d(gen, c1, 4, 3, pad=1, zero_init=True)

    def __call__(self, x, t, attn_ctl=None):
        if x.ndim != 4 or x.shape[1] != 4:
            raise ShapeError(f"denoiser expects [B,4,H,W] latents, got {tuple(x.shape)}")
        if x.shape[2] % 4 or x.shape[3] % 4:
            raise ShapeError(f"latent spatial dims must be divisible by 4, got {tuple(x.shape)}")
        tv = np.broadcast_to(np.atleast_1d(np.asarray(t)), (x.shape[0],))
        emb = timestep_embedding(tv, self.t_dim)
        h0 = self.conv_in(x)
        e1 = self.enc1(h0, emb)
        h = self.down1(avgpool2(e1))
        e2 = self.enc2(h, emb)
        h = self.down2(avgpool2(e2))
        h = self.mid1(h, emb)
        h = self.attn(h, ctl=attn_ctl)
        h = self.mid2(h, emb)
        h = upsample_nearest2(self.up2(h))
        h = self.dec2(concat([h, e2], axis=1), emb)
        h = upsample_nearest2(self.up1(h))
        h = self.dec1(concat([h, e1], axis=1), emb)
        return self.out_conv(self.out_norm(h))

    def copy(self, variant=None):
        """Fresh model with identical weights; optionally retagged."""
        m = DenoiserModel(seed=self.seed, channels=self.channels, t_dim=self.t_dim,
                          variant=variant or self.variant)
        for (_, src), (_, dst) in zip(self.named_params(), m.named_params()):
            dst.data[...] = src.data
        return m

    def save(self, dirpath, extra_meta=None):
        meta = {
            "kind": "denoiser",
            "variant": self.variant,
            "channels": ",".join(str(c) for c in self.channels),
            "t_dim": str(self.t_dim),
            "seed": str(self.seed),
        }
        if extra_meta:
            meta.update(extra_meta)
        save_checkpoint(dirpath, self.param_arrays(), meta)

    @classmethod
    def load(cls, dirpath):
        arrays, meta = load_checkpoint(dirpath)
        if meta.get("kind") != "denoiser":
            raise ContractError(f"{dirpath}: not a denoiser checkpoint")
        m = cls(
            seed=int(meta.get("seed", "0")),
            channels=tuple(int(c) for c in meta["channels"].split(",")),
            t_dim=int(meta["t_dim"]),
            variant=meta.get("variant", "base"),
        )
        m.load_params(arrays)
        return m


class LatentCodec(Module):
    """[3,128,128] image <-> [4,32,32] latent via fixed resampling + 1x1 pair.

    encode: avgpool2 -> space_to_depth2 (12 channels at quarter res) -> 1x1.
    decode: 1x1 back to 12 channels -> depth_to_space2 -> bilinear 2x up,
    then a zero-initialized 3x3 residual refinement, so a freshly
    constructed decoder is exactly the linear path.
    """

    def __init__(self, seed=0):
        gen = stream(int(seed), "codec-init")
        self.enc_w = _param(gen, (4, 12, 1, 1), np.sqrt(1.0 / 12.0))
        self.enc_b = _zeros((4,))
        self.dec_w = _param(gen, (12, 4, 1, 1), np.sqrt(1.0 / 4.0))
        self.dec_b = _zeros((12,))
        self.refine = Conv2d(gen, 3, 3, 3, pad=1, zero_init=True)

    def encode(self, img):
        if img.ndim != 4 or img.shape[1] != 3:
            raise ShapeError(f"encode expects [B,3,H,W], got {tuple(img.shape)}")
        if img.shape[2] % 4 or img.shape[3] % 4:
            raise ShapeError(f"image dims must be divisible by 4, got {tuple(img.shape)}")
        h = space_to_depth2(avgpool2(img))
        return conv2d(h, self.enc_w, self.enc_b)

    def decode(self, z):
        if z.ndim != 4 or z.shape[1] != 4:
            raise ShapeError(f"decode expects [B,4,h,w], got {tuple(z.shape)}")
        h = conv2d(z, self.dec_w, self.dec_b)
        img = bilinear_up2(depth_to_space2(h))
        return img + self.refine(img)

    @classmethod
    def from_pca(cls, mean, basis, variances):
        """Closed-form codec from patch statistics.

        mean: [12]; basis: [12,k<=4] orthonormal columns (descending
        variance); variances: matching eigenvalues.  Latents are whitened to
        unit variance; decode folds the scale back in, so the linear pair is
        exactly rank-k reconstruction around the mean.
        """
        mean = np.asarray(mean, dtype=np.float64)
        basis = np.asarray(basis, dtype=np.float64)
        variances = np.asarray(variances, dtype=np.float64)
        k = basis.shape[1]
        if mean.shape != (12,) or basis.shape != (12, k) or variances.shape != (k,) or k > 4:
            raise ShapeError("from_pca expects mean[12], basis[12,k<=4], variances[k]")
        if np.any(variances <= 0):
            raise ContractError("PCA variances must be positive")
        s = np.sqrt(variances)
        enc = basis.T / s[:, None]          # [k,12]
        dec = basis * s[None, :]            # [12,k]
        m = cls()
        m.enc_w.data[...] = 0.0
        m.enc_b.data[...] = 0.0
        m.dec_w.data[...] = 0.0
        m.enc_w.data[:k] = enc[:, :, None, None].astype(F32)
        m.enc_b.data[:k] = (-enc @ mean).astype(F32)
        m.dec_w.data[:, :k] = dec[:, :, None, None].astype(F32)
        m.dec_b.data[...] = mean.astype(F32)
        return m

    def save(self, dirpath, extra_meta=None):
        meta = {"kind": "codec"}
        if extra_meta:
            meta.update(extra_meta)
        save_checkpoint(dirpath, self.param_arrays(), meta)

    @classmethod
    def load(cls, dirpath):
        arrays, meta = load_checkpoint(dirpath)
        if meta.get("kind") != "codec":
            raise ContractError(f"{dirpath}: not a codec checkpoint")
        m = cls()
        m.load_params(arrays)
        return m
