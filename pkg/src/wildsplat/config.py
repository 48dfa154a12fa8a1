"""Run configuration: plain-text key = value files with flag overrides.

Precedence is flags > config file > defaults.  Every command that takes a
config writes the fully-resolved result next to its outputs, so a run can
be reproduced from that file alone.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields
from pathlib import Path

from .errors import ContractError
from .losses import LossWeights
from .views import TrainSchedule


@dataclass(frozen=True)
class RunConfig:
    """All tunables of the training pipeline.

    ``tau_c``/``tau_o`` of -1 mean "derive from total_iters at the
    reference 5500:6500:7500 proportions"; ``tau_o`` may be ``inf`` to
    disable inpainted pseudo ground truth.
    """

    seed: int = 0
    total_iters: int = 750
    tau_c: int = -1
    tau_o: float = -1.0
    beta: float = 0.3
    pool_size: int = 60
    delta_frac: float = 0.05
    refresh_every: int = 500
    lambda1: float = 0.8
    lambda2: float = 0.2
    lambda3: float = 1.0
    ddim_steps: int = 50
    codec_steps: int = 400
    denoiser_steps: int = 800
    finetune_steps: int = 400

    def weights(self):
        return LossWeights(self.lambda1, self.lambda2, self.lambda3)

    def schedule(self):
        """Realize the TrainSchedule, deriving unset phase boundaries."""
        ref = TrainSchedule.from_total(self.total_iters, beta=self.beta)
        tau_c = self.tau_c if self.tau_c >= 0 else ref.tau_c
        tau_o = self.tau_o if self.tau_o >= 0 or math.isinf(self.tau_o) else ref.tau_o
        return TrainSchedule(total_iters=self.total_iters, tau_c=tau_c,
                             tau_o=tau_o, beta=self.beta)

    def needs_diffusion(self):
        sched = self.schedule()
        return sched.beta > 0.0 or math.isfinite(sched.tau_o)


_FIELDS = {f.name: f.type for f in fields(RunConfig)}


def _parse_value(key, raw):
    kind = _FIELDS[key]
    raw = raw.strip()
    try:
        if kind == "int":
            return int(raw)
        return float(raw)  # accepts "inf"
    except ValueError:
        raise ContractError(f"config key {key!r}: cannot parse {raw!r} as {kind}")


def read_config_file(path):
    """Parse a key = value file into a dict; unknown keys are errors."""
    out = {}
    text = Path(path).read_text()
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key = key.strip()
        if not sep or not key:
            raise ContractError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
        if key not in _FIELDS:
            raise ContractError(f"{path}:{lineno}: unknown config key {key!r}")
        out[key] = _parse_value(key, value)
    return out


def resolve_config(file_path=None, overrides=None):
    """Merge defaults, an optional config file, and flag overrides."""
    merged = {}
    if file_path is not None:
        merged.update(read_config_file(file_path))
    for key, value in (overrides or {}).items():
        if value is None:
            continue
        if key not in _FIELDS:
            raise ContractError(f"unknown config override {key!r}")
        merged[key] = _parse_value(key, str(value))
    return RunConfig(**merged)


def config_text(cfg: RunConfig):
    """Canonical echo of a resolved config, reusable as a config file."""
    lines = []
    for f in fields(RunConfig):
        value = getattr(cfg, f.name)
        lines.append(f"{f.name} = {value!r}")
    return "\n".join(lines) + "\n"


def write_config(path, cfg: RunConfig):
    Path(path).write_text(config_text(cfg))
