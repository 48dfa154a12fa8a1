"""Pre-training for the codec and denoiser, and constrained fine-tuning.

The codec's linear pair is solved in closed form (principal components of
the 12-dim patch features), then polished end-to-end with Adam on the
actual reconstruction objective, and finally rescaled so latent channels
have unit variance over the training distribution.

The denoiser trains with the standard noise-prediction objective: sample a
level t, noise a clean latent, regress the injected noise.
"""

from __future__ import annotations

import numpy as np

from ..errors import ContractError, DegeneracyError
from ..optim import Adam
from ..rng import stream
from ..tensor import F32, Tensor, backward, clear_graph, no_grad
from .model import DenoiserModel, LatentCodec
from .schedule import NoiseSchedule


def _patch_features(images):
    # numpy mirror of encode's fixed resampling: avgpool2 then space_to_depth2
    n, c, h, w = images.shape
    pooled = images.reshape(n, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))
    hp, wp = h // 2, w // 2
    r = pooled.reshape(n, c, hp // 2, 2, wp // 2, 2)
    return r.transpose(0, 1, 3, 5, 2, 4).reshape(n, c * 4, hp // 2, wp // 2)


def fit_codec_pca(images):
    """Closed-form codec from the top principal patch components."""
    if len(images) == 0:
        raise ContractError("cannot fit a codec on an empty image set")
    feats = _patch_features(np.asarray(images, dtype=np.float64))
    samples = feats.reshape(feats.shape[0], 12, -1).transpose(0, 2, 1).reshape(-1, 12)
    mean = samples.mean(axis=0)
    centered = samples - mean
    cov = centered.T @ centered / samples.shape[0]
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals)[::-1][:4]
    top = evals[order]
    if np.any(top <= 1e-12):
        raise DegeneracyError("patch covariance is rank-deficient; need more varied images")
    return LatentCodec.from_pca(mean, evecs[:, order], top)


def _recon_psnr(codec, images, batch=16):
    errs = []
    with no_grad():
        for i in range(0, len(images), batch):
            x = Tensor(images[i : i + batch])
            rec = codec.decode(codec.encode(x))
            errs.append(((rec.data - x.data) ** 2).mean(dtype=np.float64))
    mse = float(np.mean(errs))
    if mse <= 0:
        return 99.0
    return min(10.0 * np.log10(1.0 / mse), 99.0)


def train_codec(images, seed=0, polish_steps=400, batch=8, lr=2e-3):
    """PCA-initialized codec polished end-to-end, latents scaled to unit variance.

    Returns (codec, reconstruction_psnr_db) over the provided image set.
    """
    images = np.asarray(images, dtype=F32)
    codec = fit_codec_pca(images)
    if polish_steps > 0:
        rng = stream(seed, "codec-train")
        opt = Adam(codec.params(), lr=lr)
        for _ in range(polish_steps):
            idx = rng.integers(0, len(images), size=min(batch, len(images)))
            x = Tensor(images[idx])
            rec = codec.decode(codec.encode(x))
            loss = ((rec - x) * (rec - x)).mean()
            opt.zero_grad()
            backward(loss)
            opt.step()
    _normalize_latents(codec, images)
    clear_graph()
    return codec, _recon_psnr(codec, images)


def _normalize_latents(codec, images, batch=16):
    # rescale so each latent channel is zero-mean unit-variance over the set;
    # the decoder folds the inverse back in, leaving reconstructions unchanged
    zs = []
    with no_grad():
        for i in range(0, len(images), batch):
            zs.append(codec.encode(Tensor(images[i : i + batch])).data)
    z = np.concatenate(zs, axis=0).astype(np.float64)
    m = z.mean(axis=(0, 2, 3))
    s = z.std(axis=(0, 2, 3))
    s = np.maximum(s, 1e-6)
    w_dec = codec.dec_w.data.astype(np.float64)  # [12,4,1,1]
    codec.dec_b.data[...] = (codec.dec_b.data.astype(np.float64)
                             + (w_dec[:, :, 0, 0] @ m)).astype(F32)
    codec.dec_w.data[...] = (w_dec * s[None, :, None, None]).astype(F32)
    codec.enc_w.data[...] = (codec.enc_w.data.astype(np.float64)
                             / s[:, None, None, None]).astype(F32)
    codec.enc_b.data[...] = ((codec.enc_b.data.astype(np.float64) - m) / s).astype(F32)


def encode_dataset(codec, images, batch=16):
    """Encode a stack of images to latents as a plain [N,4,h,w] array."""
    out = []
    with no_grad():
        for i in range(0, len(images), batch):
            out.append(codec.encode(Tensor(np.asarray(images[i : i + batch], dtype=F32))).data)
    return np.concatenate(out, axis=0)


def _noise_batch(latents, idx, t, eps, schedule):
    ab = schedule.alpha_bar[t]
    s = np.sqrt(ab).astype(F32)[:, None, None, None]
    n = np.sqrt(1.0 - ab).astype(F32)[:, None, None, None]
    return s * latents[idx] + n * eps


def train_base(model, latents, steps=800, lr=2e-3, batch=8, seed=0, schedule=None):
    """Noise-prediction training; returns (model, per-step loss list)."""
    latents = np.asarray(latents, dtype=F32)
    if latents.shape[0] == 0:
        raise ContractError("cannot train the denoiser on an empty latent set")
    schedule = schedule or NoiseSchedule()
    rng = stream(seed, f"denoiser-train-{model.variant}")
    opt = Adam(model.params(), lr=lr)
    losses = []
    for _ in range(steps):
        idx = rng.integers(0, latents.shape[0], size=min(batch, latents.shape[0]))
        t = rng.integers(1, schedule.t_train + 1, size=idx.shape[0])
        eps = rng.standard_normal((idx.shape[0],) + latents.shape[1:]).astype(F32)
        x_t = _noise_batch(latents, idx, t, eps, schedule)
        pred = model(Tensor(x_t), t)
        diff = pred - Tensor(eps)
        loss = (diff * diff).mean()
        losses.append(loss.item())
        opt.zero_grad()
        backward(loss)
        opt.step()
    return model, losses


def eval_eps_loss(model, latents, schedule=None, seed=0, n=64):
    """Mean noise-prediction MSE on a fixed, seeded evaluation batch."""
    latents = np.asarray(latents, dtype=F32)
    schedule = schedule or NoiseSchedule()
    rng = stream(seed, "denoiser-eval")
    idx = rng.integers(0, latents.shape[0], size=n)
    t = rng.integers(1, schedule.t_train + 1, size=n)
    eps = rng.standard_normal((n,) + latents.shape[1:]).astype(F32)
    x_t = _noise_batch(latents, idx, t, eps, schedule)
    total = 0.0
    with no_grad():
        for i in range(0, n, 16):
            pred = model(Tensor(x_t[i : i + 16]), t[i : i + 16])
            total += float(((pred.data - eps[i : i + 16]) ** 2).sum(dtype=np.float64))
    return total / x_t.size


def latent_loss_weights(masks, latent_hw):
    """Per-cell fine-tune weights from image-space occluder masks.

    A latent cell is dropped when any pixel it covers is masked, so occluder
    texture never leaks into the constrained model.  Returns [N,1,h,w] float32.
    """
    masks = np.asarray(masks, dtype=bool)
    n, ih, iw = masks.shape
    h, w = latent_hw
    if ih % h or iw % w:
        raise ContractError(f"mask {ih}x{iw} does not tile the {h}x{w} latent grid")
    blocks = masks.reshape(n, h, ih // h, w, iw // w).any(axis=(2, 4))
    return (~blocks).astype(F32)[:, None, :, :]


def finetune_constrained(base, anchor_latents, iters=400, lr=1e-4, batch=1, seed=0,
                         schedule=None, masks=None):
    """Fine-tune a copy of the base model on the sparse training-view latents.

    ``masks`` (optional [N,H,W] image-space occluder masks) exclude the
    covered latent cells from the noise-prediction loss.  The returned model
    carries the "constrained" tag; the base model is left untouched.  Zero
    iterations returns a bit-identical copy.
    """
    anchor_latents = np.asarray(anchor_latents, dtype=F32)
    if anchor_latents.shape[0] == 0:
        raise ContractError("constrained fine-tune needs at least one anchor view")
    model = base.copy(variant="constrained")
    if iters <= 0:
        return model
    if masks is None:
        train_base(model, anchor_latents, steps=iters, lr=lr, batch=batch,
                   seed=seed, schedule=schedule)
        return model
    weights = latent_loss_weights(masks, anchor_latents.shape[2:])
    if weights.shape[0] != anchor_latents.shape[0]:
        raise ContractError("one mask per anchor view required")
    if not weights.any():
        raise DegeneracyError("every latent cell is masked; nothing to fine-tune on")
    schedule = schedule or NoiseSchedule()
    rng = stream(seed, f"denoiser-train-{model.variant}")
    opt = Adam(model.params(), lr=lr)
    channels = anchor_latents.shape[1]
    for _ in range(iters):
        idx = rng.integers(0, anchor_latents.shape[0], size=min(batch, anchor_latents.shape[0]))
        t = rng.integers(1, schedule.t_train + 1, size=idx.shape[0])
        eps = rng.standard_normal((idx.shape[0],) + anchor_latents.shape[1:]).astype(F32)
        x_t = _noise_batch(anchor_latents, idx, t, eps, schedule)
        w = weights[idx]
        denom = max(float(w.sum()) * channels, 1.0)
        pred = model(Tensor(x_t), t)
        diff = pred - Tensor(eps)
        loss = (diff * diff * Tensor(w)).sum() * (1.0 / denom)
        opt.zero_grad()
        backward(loss)
        opt.step()
    return model
