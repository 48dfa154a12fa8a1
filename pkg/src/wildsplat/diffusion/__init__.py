"""Latent denoising diffusion: schedule, codec, denoiser, DDIM machinery."""

from .schedule import NoiseSchedule
from .model import DenoiserModel, LatentCodec
from .ddim import (
    AttentionTape,
    ddim_invert,
    ddim_sample,
    ddim_sample_dual,
    downsample_mask_nearest,
    injected_attention,
    mask_to_tokens,
    self_attention,
)
from .training import (
    encode_dataset,
    eval_eps_loss,
    finetune_constrained,
    train_base,
    train_codec,
)

__all__ = [
    "NoiseSchedule",
    "DenoiserModel",
    "LatentCodec",
    "AttentionTape",
    "ddim_invert",
    "ddim_sample",
    "ddim_sample_dual",
    "downsample_mask_nearest",
    "injected_attention",
    "mask_to_tokens",
    "self_attention",
    "encode_dataset",
    "eval_eps_loss",
    "finetune_constrained",
    "train_base",
    "train_codec",
]
