"""Variance schedule for the latent denoiser.

The training chain uses T_train discrete noise levels with a linear beta
ramp.  Cumulative signal coefficients live in an index-shifted table so
that level 0 means "clean": alpha_bar[0] == 1.0 exactly, and
alpha_bar[t] = prod_{j<=t} (1 - beta_j) for t in 1..T_train.  Sampling
walks a coarse, evenly spaced subset of those levels.
"""

from __future__ import annotations

import numpy as np

from ..errors import ContractError, DomainError

T_TRAIN = 1000
BETA_START = 1e-4
BETA_END = 0.02
T_SAMPLE = 50


class NoiseSchedule:
    """Linear-beta diffusion schedule with an exact clean endpoint."""

    def __init__(self, t_train: int = T_TRAIN, beta_start: float = BETA_START,
                 beta_end: float = BETA_END, t_sample: int = T_SAMPLE):
        if t_train < 2:
            raise ContractError("t_train must be at least 2, got %d" % t_train)
        if not (0.0 < beta_start <= beta_end < 1.0):
            raise ContractError(
                "betas must satisfy 0 < beta_start <= beta_end < 1, got "
                "(%g, %g)" % (beta_start, beta_end))
        if t_sample < 1 or t_train % t_sample != 0:
            raise ContractError(
                "t_sample must evenly divide t_train (%d %% %d != 0)"
                % (t_train, t_sample))
        self.t_train = int(t_train)
        self.t_sample = int(t_sample)
        self.betas = np.linspace(beta_start, beta_end, t_train, dtype=np.float64)
        # index shift: alpha_bar[0] = 1.0 is the exact no-noise endpoint
        self.alpha_bar = np.empty(t_train + 1, dtype=np.float64)
        self.alpha_bar[0] = 1.0
        self.alpha_bar[1:] = np.cumprod(1.0 - self.betas)
        if not np.all(np.diff(self.alpha_bar) < 0.0):
            raise ContractError("alpha_bar must be strictly decreasing")
        if self.alpha_bar[-1] <= 0.0:
            raise ContractError("alpha_bar must stay positive")

    def signal_coeff(self, t: int) -> np.float32:
        """sqrt(alpha_bar[t]) as the float32 the samplers multiply by."""
        self._check_t(t)
        return np.float32(np.sqrt(self.alpha_bar[t]))

    def noise_coeff(self, t: int) -> np.float32:
        """sqrt(1 - alpha_bar[t])."""
        self._check_t(t)
        return np.float32(np.sqrt(1.0 - self.alpha_bar[t]))

    def sample_levels(self) -> list[int]:
        """Noise levels visited by the coarse sampler, ascending from 0.

        Levels are i * (t_train / t_sample) for i = 0..t_sample, so the
        list starts at the exact clean endpoint and ends at t_train.
        """
        stride = self.t_train // self.t_sample
        return [i * stride for i in range(self.t_sample + 1)]

    def forward_diffuse(self, x0: np.ndarray, t: int, eps: np.ndarray) -> np.ndarray:
        """Noise a clean latent to level t: sqrt(ab)*x0 + sqrt(1-ab)*eps."""
        self._check_t(t)
        if x0.shape != eps.shape:
            raise ContractError(
                "x0 and eps must share a shape, got %s vs %s"
                % (x0.shape, eps.shape))
        return (self.signal_coeff(t) * x0.astype(np.float32)
                + self.noise_coeff(t) * eps.astype(np.float32))

    def _check_t(self, t: int) -> None:
        if not (0 <= int(t) <= self.t_train):
            raise DomainError("noise level %d outside [0, %d]" % (t, self.t_train))
