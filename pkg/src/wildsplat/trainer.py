"""Staged optimization of a Gaussian cloud from sparse, occluded captures.

One view supervises each iteration.  Training views use the occlusion-masked
photometric loss until ``tau_o``, after which their supervision switches to
inpainted pseudo ground truth.  Once the warm-up ends at ``tau_c``, pool
views (interpolated or perturbed cameras) are mixed in with probability
``beta`` and supervised by enhanced pseudo ground truth.  Pseudo ground
truths are cached per view and refreshed at a fixed cadence so the diffusion
stack runs far less often than the rasterizer.

The view sequence is a pure function of (seed, iteration): every iteration
draws from its own counter-indexed stream, so a resumed run picks the same
views the uninterrupted run would have.
"""

from __future__ import annotations

import math

import numpy as np

from .diffusion.schedule import NoiseSchedule
from .enhance import EnhancementRequest, enhance
from .errors import ContractError, DegeneracyError, NumericError
from .losses import LossWeights, loss_c, masked_region_error, psnr, ssim
from .occlusion import OcclusionContext, inpaint_occlusion, mask_noise_fill
from .optim import Adam
from .rasterizer import render
from .rng import stream
from .scene import GaussianCloud
from .tensor import F32, backward, no_grad
from . import tensor_io
from .views import TrainSchedule, build_view_pool, next_view

# Per-attribute learning rates.  Positions scale with scene extent and decay
# exponentially to 1% of the initial rate over the run; the rest are fixed.
POSITION_LR = 1.6e-4
POSITION_LR_FINAL_FRAC = 0.01
COLOR_LR = 2.5e-3
OPACITY_LR = 5e-2
SCALE_LR = 5e-3
ROTATION_LR = 1e-3
ADAM_EPS = 1e-15

REFRESH_EVERY = 500


class DiffusionModels:
    """The trained generative stack shared by enhancement and inpainting."""

    def __init__(self, codec, base, constrained, schedule=None):
        self.codec = codec
        self.base = base
        self.constrained = constrained
        self.schedule = schedule if schedule is not None else NoiseSchedule()


class TrainLog:
    """Per-iteration loss rows plus diffusion call counters.

    ``n_enhance`` and ``n_inpaint`` count actual diffusion invocations, not
    cache hits, so caching behavior is observable from the outside.
    """

    COLUMNS = ("iteration", "kind", "loss")

    def __init__(self):
        self.rows = []
        self.n_enhance = 0
        self.n_inpaint = 0

    def append(self, iteration, kind, loss):
        self.rows.append((int(iteration), str(kind), float(loss)))

    def losses(self):
        return [row[2] for row in self.rows]

    def write_csv(self, path):
        lines = [",".join(self.COLUMNS)]
        for iteration, kind, loss in self.rows:
            lines.append(f"{iteration},{kind},{loss!r}")
        with open(path, "w") as fh:
            fh.write("\n".join(lines) + "\n")

    @classmethod
    def read_csv(cls, path):
        log = cls()
        with open(path) as fh:
            lines = fh.read().splitlines()
        if not lines or tuple(lines[0].split(",")) != cls.COLUMNS:
            raise ContractError(f"not a loss log: {path}")
        for line in lines[1:]:
            iteration, kind, loss = line.split(",")
            log.append(int(iteration), kind, float(loss))
        return log


def scene_extent(cloud):
    """Bounding-box diagonal of the cloud's centers, in world units."""
    c = cloud.centers.data.astype(np.float64)
    return float(np.linalg.norm(c.max(axis=0) - c.min(axis=0)))


def make_optimizer(cloud, extent):
    """Adam over the five attribute groups with their rate conventions."""
    return Adam(
        [
            {"params": [cloud.centers], "lr": POSITION_LR * extent, "name": "centers"},
            {"params": [cloud.rotations], "lr": ROTATION_LR, "name": "rotations"},
            {"params": [cloud.log_scales], "lr": SCALE_LR, "name": "log_scales"},
            {"params": [cloud.opacity_logits], "lr": OPACITY_LR, "name": "opacity_logits"},
            {"params": [cloud.colors], "lr": COLOR_LR, "name": "colors"},
        ],
        eps=ADAM_EPS,
    )


def _position_lr_scale(iteration, total_iters):
    return float(POSITION_LR_FINAL_FRAC ** ((iteration + 1) / total_iters))


def train_gaussians(cloud, dataset, sched: TrainSchedule, models=None, *,
                    weights=None, seed=0, pool=None, pool_size=60, delta=None,
                    refresh_every=REFRESH_EVERY, optimizer=None, extent=None,
                    start_iteration=0, log=None, progress=None):
    """Run the staged loop over ``cloud`` in place; returns (cloud, log).

    ``models`` (a DiffusionModels) is required whenever the schedule can
    reach a pseudo-ground-truth branch: ``beta > 0`` or finite ``tau_o``.
    Passing ``optimizer``/``extent``/``start_iteration``/``log`` lets a
    caller resume from checkpointed state.
    """
    weights = weights if weights is not None else LossWeights()
    if not dataset.train:
        raise ContractError("dataset has no training views")
    if models is None and (sched.beta > 0.0 or math.isfinite(sched.tau_o)):
        raise ContractError(
            "schedule draws pseudo ground truth (beta > 0 or finite tau_o) "
            "but no diffusion models were given")
    if pool is None:
        if sched.beta > 0.0:
            pool = build_view_pool([r.camera for r in dataset.train],
                                   pool_size=pool_size, delta=delta, seed=seed)
        else:
            pool = []
    if extent is None:
        extent = scene_extent(cloud)
    opt = optimizer if optimizer is not None else make_optimizer(cloud, extent)
    log = log if log is not None else TrainLog()
    background = np.asarray(dataset.background, dtype=F32)
    n_train = len(dataset.train)
    cache = {}  # view key -> (iteration computed, pseudo-GT image)

    def cached_pgt(key, iteration, compute):
        hit = cache.get(key)
        if hit is not None and iteration - hit[0] < refresh_every:
            return hit[1]
        value = compute()
        cache[key] = (iteration, value)
        return value

    for iteration in range(start_iteration, sched.total_iters):
        rng = stream(seed, "train-view", index=iteration)
        kind, pick = next_view(sched, iteration, n_train, pool, rng)
        opt.zero_grad()
        if kind == "train":
            rec = dataset.train[pick]
            img, _ = render(cloud, rec.camera, background)
            if iteration < sched.tau_o:
                loss = loss_c(img, rec.image, weights, mask=rec.mask)
                row_kind = "train"
            else:
                def make_train_pgt(rec=rec, render_np=img.data):
                    if not rec.mask.any():
                        return rec.image
                    # Appearance reference: the capture with occluded pixels
                    # noise-filled, so occluder colors never reach the stats.
                    ref = mask_noise_fill(rec.image, rec.mask, seed=seed)
                    ctx = OcclusionContext(mask=rec.mask, render=render_np,
                                           gt=rec.image)
                    with no_grad():
                        out = inpaint_occlusion(
                            ctx, models.codec, models.base, models.constrained,
                            reference=ref, schedule=models.schedule)
                    log.n_inpaint += 1
                    return out

                pgt = cached_pgt(("train", pick), iteration, make_train_pgt)
                loss = loss_c(img, pgt, weights)
                row_kind = "train-pgt"
        else:
            view = pick
            img, _ = render(cloud, view.camera, background)

            def make_pool_pgt(render_np=img.data):
                # Appearance reference: the render itself, anchoring the
                # pseudo-GT to the scene consensus rather than any one view.
                req = EnhancementRequest(render=render_np, reference=render_np,
                                         codec=models.codec, base=models.base,
                                         constrained=models.constrained,
                                         schedule=models.schedule)
                with no_grad():
                    out = enhance(req)
                log.n_enhance += 1
                return out

            pgt = cached_pgt(("pool", id(view)), iteration, make_pool_pgt)
            loss = loss_c(img, pgt, weights) * float(weights.lambda3)
            row_kind = "pool"

        loss_value = float(loss.item())
        if not math.isfinite(loss_value):
            raise NumericError("training loss is not finite", step=iteration)
        backward(loss)
        opt.step(lr_scale={"centers": _position_lr_scale(iteration, sched.total_iters)})
        cloud.renormalize_rotations()
        log.append(iteration, row_kind, loss_value)
        if progress is not None:
            progress(iteration, sched.total_iters, loss_value)
    return cloud, log


def evaluate_cloud(cloud, records, background):
    """Render each view and score against its clean reference.

    Falls back to the captured image when no clean reference exists.
    Returns a list of (cam_id, psnr, ssim) rows.
    """
    background = np.asarray(background, dtype=F32)
    rows = []
    with no_grad():
        for rec in records:
            img, _ = render(cloud, rec.camera, background)
            ref = rec.clean if rec.clean is not None else rec.image
            rows.append((rec.camera.cam_id,
                         psnr(img.data, ref),
                         float(ssim(img.data, ref).item())))
    return rows


def occluded_region_error(cloud, records, background):
    """Mean photometric error inside occluder masks, against clean refs."""
    background = np.asarray(background, dtype=F32)
    vals = []
    with no_grad():
        for rec in records:
            if rec.clean is None or not rec.mask.any():
                continue
            img, _ = render(cloud, rec.camera, background)
            vals.append(masked_region_error(img.data, rec.clean, rec.mask))
    if not vals:
        raise DegeneracyError("no view has both a mask and a clean reference")
    return float(np.mean(vals))


BLUR_KERNELS = ((1.0, 2.0, 1.0), (1.0, 4.0, 6.0, 4.0, 1.0))


def _lowpass(img, kernel):
    """Separable blur with edge padding; models the renderer's softness."""
    k = np.asarray(kernel, dtype=np.float64)
    k = k / k.sum()
    pad = len(k) // 2
    x = np.pad(img, ((0, 0), (pad, pad), (0, 0)), mode="edge")
    y = sum(w * x[:, i:i + img.shape[1], :] for i, w in enumerate(k))
    x = np.pad(y, ((0, 0), (0, 0), (pad, pad)), mode="edge")
    y = sum(w * x[:, :, i:i + img.shape[2]] for i, w in enumerate(k))
    return np.clip(y, 0.0, 1.0).astype(F32)


def _curated_view(rec, seed=0):
    # best available undegraded version of a training view
    if rec.clean is not None:
        return rec.clean
    if rec.mask.any():
        return mask_noise_fill(rec.image, rec.mask, seed=seed)
    return rec.image


def prior_corpus(dataset, seed=0, jitters=3):
    """Images that pretrain the generative stack.

    Clean training renders (noise-filled captures when no clean reference
    exists) plus degraded variants: mirror images, mild appearance jitters,
    and low-pass filtered copies.  The spread matters - fine-tuning later
    concentrates the constrained model on the undegraded views, so the gap
    between the two models points from render-like defects toward clean
    content.  Held-out cameras contribute nothing.
    """
    from .synth import apply_appearance

    rng = stream(seed, "prior-augment")
    out = []
    for rec in dataset.train:
        img = _curated_view(rec, seed=seed)
        out.append(img)
        out.append(img[:, :, ::-1].copy())
        for _ in range(jitters):
            params = {
                "gain": float(rng.uniform(0.85, 1.15)),
                "gamma": float(rng.uniform(0.90, 1.10)),
                "wb": rng.uniform(0.95, 1.05, 3).tolist(),
            }
            out.append(apply_appearance(img, params))
        for kernel in BLUR_KERNELS:
            out.append(_lowpass(img, kernel))
    return out


def anchor_images(dataset):
    """Curated training views the constrained model is tuned toward:
    the clean reference when present, otherwise the capture with occluders
    noise-filled."""
    return [_curated_view(rec) for rec in dataset.train]


def anchor_masks(dataset):
    """Loss masks aligned with anchor_images.

    A clean reference carries no occluder texture, so nothing is dropped.
    A noise-filled capture keeps its occluder footprint masked: the fill is
    a statistics patch, not scene content, and fine-tuning must not learn
    it."""
    masks = []
    for rec in dataset.train:
        if rec.clean is not None:
            masks.append(np.zeros(rec.mask.shape[1:], dtype=bool))
        else:
            masks.append(rec.mask[0] > 0.5)
    return np.stack(masks, axis=0)


def ablation_schedules(total_iters, beta=0.3):
    """The four training variants used in the comparison suite.

    base: masked training only.  cnve: pool views with enhanced pseudo-GT,
    all tiers unlocked at once.  cnve_oh: additionally switches training
    views to inpainted pseudo-GT after tau_o.  full: the staged curriculum.
    """
    return {
        "base": TrainSchedule.from_total(total_iters, beta=0.0,
                                         tau_o_disabled=True),
        "cnve": TrainSchedule.from_total(total_iters, beta=beta,
                                         tau_o_disabled=True,
                                         collapse_stages=True),
        "cnve_oh": TrainSchedule.from_total(total_iters, beta=beta,
                                            collapse_stages=True),
        "full": TrainSchedule.from_total(total_iters, beta=beta),
    }


def save_training_state(dirpath, cloud, optimizer, iteration, seed, extent):
    """Checkpoint the cloud, optimizer moments, and loop position."""
    arrays = {name: getattr(cloud, name).data for name in GaussianCloud.ATTRS}
    arrays.update(optimizer.state_arrays())
    meta = {
        "kind": "training-state",
        "iteration": str(int(iteration)),
        "seed": str(int(seed)),
        "extent": repr(float(extent)),
        "points": str(len(cloud)),
    }
    tensor_io.save_checkpoint(dirpath, arrays, meta)


def load_training_state(dirpath):
    """Inverse of save_training_state: (cloud, optimizer, iteration, meta)."""
    arrays, meta = tensor_io.load_checkpoint(dirpath)
    if meta.get("kind") != "training-state":
        raise ContractError(f"not a training checkpoint: {dirpath}")
    cloud = GaussianCloud(*[arrays[name] for name in GaussianCloud.ATTRS])
    optimizer = make_optimizer(cloud, float(meta["extent"]))
    optimizer.load_state_arrays(arrays)
    return cloud, optimizer, int(meta["iteration"]), meta
