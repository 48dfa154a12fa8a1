"""Command-line entry points wiring the library into reproducible runs.

Subcommands: synth, train, render, eval, enhance, inpaint.  Exit codes:
0 success, 2 usage or input problem, 3 numeric failure during training.
All progress goes to standard error; files are the only stdout-level
product.  Every command takes --seed; training resolves a RunConfig
(flags > config file > defaults) and echoes it next to its outputs.
"""

from __future__ import annotations

import argparse
import math
import sys
from pathlib import Path

import numpy as np

from .config import resolve_config, write_config
from .errors import (ContractError, DegeneracyError, DomainError, NumericError,
                     ShapeError, StateError)
from .scene import GaussianCloud

_INPUT_ERRORS = (ContractError, DegeneracyError, DomainError, ShapeError,
                 StateError, FileNotFoundError, NotADirectoryError)


def _log(msg):
    print(msg, file=sys.stderr, flush=True)


def _require_dir(path, what):
    p = Path(path)
    if not p.is_dir():
        raise ContractError(f"{what} not found: {path}")
    return p


def _require_file(path, what):
    p = Path(path)
    if not p.is_file():
        raise ContractError(f"{what} not found: {path}")
    return p


def cmd_synth(args):
    from .synth import SceneSpec, generate

    spec = SceneSpec(
        seed=args.seed,
        n_points=args.n_points,
        n_train=args.n_train,
        n_test=args.n_test,
        width=args.size,
        height=args.size,
        gain_range=0.22 * args.appearance,
        gamma_range=0.20 * args.appearance,
        wb_range=0.10 * args.appearance,
        occluder_count=args.occluders,
    )
    out = generate(spec, args.out)
    _log(f"wrote dataset {out} ({spec.n_train} train / {spec.n_test} test views)")
    return 0


def _load_models(out_dir, schedule):
    from .diffusion import DenoiserModel, LatentCodec
    from .trainer import DiffusionModels

    mdir = Path(out_dir) / "models"
    codec = LatentCodec.load(_require_dir(mdir / "codec", "codec checkpoint"))
    base = DenoiserModel.load(_require_dir(mdir / "base", "base checkpoint"))
    con = DenoiserModel.load(_require_dir(mdir / "constrained",
                                          "constrained checkpoint"))
    return DiffusionModels(codec, base, con, schedule)


def _train_models(dataset, cfg, out_dir, schedule):
    from .diffusion import (DenoiserModel, encode_dataset, finetune_constrained,
                            train_base, train_codec)
    from .trainer import DiffusionModels, anchor_images, anchor_masks, prior_corpus

    mdir = Path(out_dir) / "models"
    corpus = prior_corpus(dataset, seed=cfg.seed)
    _log(f"training codec on {len(corpus)} images ...")
    codec, recon = train_codec(corpus, seed=cfg.seed, polish_steps=cfg.codec_steps)
    _log(f"codec reconstruction {recon:.2f} dB")
    codec.save(mdir / "codec")
    latents = encode_dataset(codec, corpus)
    _log(f"training denoiser for {cfg.denoiser_steps} steps ...")
    base, losses = train_base(DenoiserModel(seed=cfg.seed), latents,
                              steps=cfg.denoiser_steps, seed=cfg.seed,
                              schedule=schedule)
    _log(f"denoiser loss {losses[0]:.4f} -> {float(np.mean(losses[-20:])):.4f}")
    base.save(mdir / "base")
    anchors = encode_dataset(codec, anchor_images(dataset))
    con = finetune_constrained(base, anchors, iters=cfg.finetune_steps,
                               seed=cfg.seed, schedule=schedule,
                               masks=anchor_masks(dataset))
    con.save(mdir / "constrained")
    return DiffusionModels(codec, base, con, schedule)


def cmd_train(args):
    from .diffusion import NoiseSchedule
    from .report import write_report
    from .synth import dense_init, load_dataset
    from .trainer import (TrainLog, load_training_state, make_optimizer,
                          save_training_state, scene_extent, train_gaussians)

    data_dir = _require_dir(args.data, "dataset")
    overrides = {
        "seed": args.seed, "total_iters": args.iters, "tau_c": args.tau_c,
        "tau_o": args.tau_o, "beta": args.beta, "pool_size": args.pool_size,
        "refresh_every": args.refresh_every, "ddim_steps": args.ddim_steps,
        "codec_steps": args.codec_steps, "denoiser_steps": args.denoiser_steps,
        "finetune_steps": args.finetune_steps,
    }
    cfg = resolve_config(args.config, overrides)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_config(out / "config.txt", cfg)
    dataset = load_dataset(data_dir)
    sched = cfg.schedule()
    dschedule = NoiseSchedule(t_sample=cfg.ddim_steps)

    if args.resume:
        cloud, optimizer, start, meta = load_training_state(
            _require_dir(out / "state", "training state"))
        extent = float(meta["extent"])
        log = TrainLog.read_csv(_require_file(out / "loss.csv", "loss log"))
        models = _load_models(out, dschedule) if cfg.needs_diffusion() else None
        _log(f"resuming at iteration {start}/{sched.total_iters}")
    else:
        cloud = dense_init(dataset, seed=cfg.seed)
        extent = scene_extent(cloud)
        optimizer = make_optimizer(cloud, extent)
        start = 0
        log = TrainLog()
        models = _train_models(dataset, cfg, out, dschedule) \
            if cfg.needs_diffusion() else None

    if start >= sched.total_iters:
        _log("checkpoint already at schedule end; nothing to train")
    every = max(1, sched.total_iters // 30)

    def progress(iteration, total, loss):
        if (iteration + 1) % every == 0 or iteration + 1 == total:
            _log(f"iter {iteration + 1}/{total}  loss {loss:.4f}")

    cloud, log = train_gaussians(
        cloud, dataset, sched, models, weights=cfg.weights(), seed=cfg.seed,
        pool_size=cfg.pool_size, refresh_every=cfg.refresh_every,
        optimizer=optimizer, extent=extent, start_iteration=start, log=log,
        progress=progress)

    cloud.save(out / "cloud", meta={"seed": str(cfg.seed)})
    save_training_state(out / "state", cloud, optimizer, sched.total_iters,
                        cfg.seed, extent)
    log.write_csv(out / "loss.csv")
    if log.n_enhance or log.n_inpaint:
        _log(f"diffusion calls: {log.n_enhance} enhance, {log.n_inpaint} inpaint")
    write_report(out, data_dir.name, cloud, dataset, log=log)
    _log(f"wrote {out / 'cloud'}, loss.csv, eval.csv and figures")
    return 0


def _load_cloud(path):
    return GaussianCloud.load(_require_dir(path, "cloud checkpoint"))


def cmd_render(args):
    from .rasterizer import render
    from .synth import load_dataset, save_png
    from .tensor import F32, no_grad

    cloud = _load_cloud(args.checkpoint)
    dataset = load_dataset(_require_dir(args.data, "dataset"))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    splits = {"train": dataset.train, "test": dataset.test,
              "both": dataset.train + dataset.test}[args.split]
    background = np.asarray(dataset.background, dtype=F32)
    with no_grad():
        for rec in splits:
            img, _ = render(cloud, rec.camera, background)
            save_png(out / f"{rec.camera.cam_id}.png", img.data)
    _log(f"rendered {len(splits)} views to {out}")
    return 0


def cmd_eval(args):
    from .report import write_report
    from .synth import load_dataset

    cloud = _load_cloud(args.checkpoint)
    data_dir = _require_dir(args.data, "dataset")
    dataset = load_dataset(data_dir)
    paths = write_report(args.out, data_dir.name, cloud, dataset)
    _log(f"wrote {paths['eval_csv']} and figures")
    return 0


def _load_stack(args):
    from .diffusion import DenoiserModel, LatentCodec, NoiseSchedule

    base = DenoiserModel.load(_require_dir(args.base, "base checkpoint"))
    con = DenoiserModel.load(_require_dir(args.constrained,
                                          "constrained checkpoint"))
    codec_dir = args.codec if args.codec else Path(args.base).parent / "codec"
    codec = LatentCodec.load(_require_dir(codec_dir, "codec checkpoint"))
    return codec, base, con, NoiseSchedule(t_sample=args.ddim_steps)


def cmd_enhance(args):
    from .enhance import EnhancementRequest, enhance
    from .synth import load_png, save_png

    codec, base, con, schedule = _load_stack(args)
    render_img = load_png(_require_file(args.in_path, "input image"))
    ref_img = load_png(_require_file(args.ref, "reference image"))
    out = enhance(EnhancementRequest(render=render_img, reference=ref_img,
                                     codec=codec, base=base, constrained=con,
                                     schedule=schedule))
    save_png(args.out, out)
    _log(f"wrote {args.out}")
    return 0


def cmd_inpaint(args):
    from .occlusion import OcclusionContext, inpaint_occlusion, mask_noise_fill
    from .synth import load_png, save_png
    from .tensor import F32

    codec, base, con, schedule = _load_stack(args)
    render_img = load_png(_require_file(args.render, "render image"))
    gt_img = load_png(_require_file(args.gt, "captured image"))
    mask = (load_png(_require_file(args.mask, "mask")) > 0.5).astype(F32)
    if mask.shape[0] != 1:
        mask = mask[:1]
    ctx = OcclusionContext(mask=mask, render=render_img, gt=gt_img)
    reference = mask_noise_fill(gt_img, mask, seed=args.seed) if mask.any() else gt_img
    out = inpaint_occlusion(ctx, codec, base, con, reference=reference,
                            schedule=schedule)
    save_png(args.out, out)
    _log(f"wrote {args.out}")
    return 0


def _add_model_flags(sub):
    sub.add_argument("--base", required=True, help="base denoiser checkpoint dir")
    sub.add_argument("--constrained", required=True,
                     help="constrained denoiser checkpoint dir")
    sub.add_argument("--codec", default=None,
                     help="codec checkpoint dir (default: sibling of --base)")
    sub.add_argument("--ddim-steps", type=int, default=50)


def build_parser():
    parser = argparse.ArgumentParser(
        prog="wildsplat",
        description="few-shot Gaussian splatting with diffusion-based "
                    "view enhancement and occlusion handling")
    subs = parser.add_subparsers(dest="command", required=True)

    p = subs.add_parser("synth", help="generate a synthetic posed dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n-points", type=int, default=520)
    p.add_argument("--n-train", type=int, default=5)
    p.add_argument("--n-test", type=int, default=10)
    p.add_argument("--size", type=int, default=128)
    p.add_argument("--occluders", type=int, default=2)
    p.add_argument("--appearance", type=float, default=1.0,
                   help="scale on the per-view appearance variation ranges")
    p.set_defaults(func=cmd_synth)

    p = subs.add_parser("train", help="run the staged training pipeline")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--iters", type=int, default=None)
    p.add_argument("--beta", type=float, default=None)
    p.add_argument("--tau-c", type=int, default=None)
    p.add_argument("--tau-o", default=None, help="iteration or 'inf'")
    p.add_argument("--pool-size", type=int, default=None)
    p.add_argument("--refresh-every", type=int, default=None)
    p.add_argument("--ddim-steps", type=int, default=None)
    p.add_argument("--codec-steps", type=int, default=None)
    p.add_argument("--denoiser-steps", type=int, default=None)
    p.add_argument("--finetune-steps", type=int, default=None)
    p.add_argument("--resume", action="store_true",
                   help="continue from the training state in --out")
    p.set_defaults(func=cmd_train)

    p = subs.add_parser("render", help="render dataset views from a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--split", choices=("train", "test", "both"), default="test")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_render)

    p = subs.add_parser("eval", help="score a checkpoint against references")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_eval)

    p = subs.add_parser("enhance", help="enhance a rendered view")
    p.add_argument("--in", dest="in_path", required=True)
    p.add_argument("--ref", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    _add_model_flags(p)
    p.set_defaults(func=cmd_enhance)

    p = subs.add_parser("inpaint", help="regenerate a masked view region")
    p.add_argument("--render", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--mask", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    _add_model_flags(p)
    p.set_defaults(func=cmd_inpaint)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except NumericError as exc:
        _log(f"error: {exc}")
        return 3
    except _INPUT_ERRORS as exc:
        _log(f"error: {exc}")
        return 2


if __name__ == "__main__":
    sys.exit(main())
