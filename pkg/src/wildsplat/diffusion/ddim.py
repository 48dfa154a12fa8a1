"""Deterministic DDIM sampling/inversion and attention capture/injection.

Two reverse-diffusion branches can run in lockstep: a reconstruction branch
records its bottleneck attention (Q, K, V) onto an AttentionTape, and an
enhancement branch replaces its own attention using those records - either
wholesale (full injection) or fused per token through a binary mask.

Samplers run under no_grad: nothing here is trained through.
"""

from __future__ import annotations

import numpy as np

from ..errors import ContractError, NumericError, ShapeError, StateError
from ..tensor import Tensor, _wrap, matmul, no_grad, softmax, transpose

ROLES = ("reconstruction", "enhancement")
INJECTION_MODES = ("full", "masked")


def self_attention(q, k, v):
    """softmax(Q Kᵀ / sqrt(d)) V over token-major tensors ([T,d] or [B,T,d])."""
    q, k, v = _wrap(q), _wrap(k), _wrap(v)
    if q.ndim not in (2, 3) or k.ndim != q.ndim or v.ndim != q.ndim:
        raise ShapeError(
            f"attention operands must share rank 2 or 3, got {q.ndim}/{k.ndim}/{v.ndim}")
    if q.shape[-1] != k.shape[-1]:
        raise ShapeError(f"query dim {q.shape[-1]} != key dim {k.shape[-1]}")
    if k.shape[-2] != v.shape[-2]:
        raise ShapeError(f"key tokens {k.shape[-2]} != value tokens {v.shape[-2]}")
    axes = (1, 0) if q.ndim == 2 else (0, 2, 1)
    scores = matmul(q, transpose(k, axes)) * float(1.0 / np.sqrt(q.shape[-1]))
    return matmul(softmax(scores, axis=-1), v)


class AttentionTape:
    """Per-(step, role) record of the bottleneck attention's Q, K, V."""

    def __init__(self):
        self._records = {}
        self._shapes = None

    def record(self, step, role, q, k, v=None):
        if role not in ROLES:
            raise ContractError(f"role must be one of {ROLES}, got {role!r}")
        key = (int(step), role)
        if key in self._records:
            raise StateError(f"duplicate attention record for step {step}, role {role}")
        shapes = (tuple(q.shape), tuple(k.shape))
        if self._shapes is None:
            self._shapes = shapes
        elif shapes != self._shapes:
            raise ContractError(
                f"attention shapes changed across steps: {shapes} vs {self._shapes}")
        self._records[key] = (q, k, v)

    def get(self, step, role):
        key = (int(step), role)
        if key not in self._records:
            raise StateError(f"no attention record for step {step}, role {role}")
        return self._records[key]

    def recorder(self, step, role):
        """Record-only hook: stores (Q,K,V) and leaves the output untouched."""

        def ctl(q, k, v):
            self.record(step, role, q, k, v)
            return None

        return ctl

    def __len__(self):
        return len(self._records)


def downsample_mask_nearest(mask, grid):
    """Nearest-neighbor downsample of a binary mask to [grid,grid].

    Sampling at output pixel centers preserves binarity exactly.
    """
    m = np.asarray(mask, dtype=np.float32)
    if m.ndim == 3:
        if m.shape[0] != 1:
            raise ShapeError(f"mask must be single-channel, got {m.shape}")
        m = m[0]
    if m.ndim != 2:
        raise ShapeError(f"mask must be [H,W] or [1,H,W], got {m.shape}")
    h, w = m.shape
    ri = np.minimum((np.arange(grid) + 0.5) * h / grid, h - 1).astype(np.int64)
    ci = np.minimum((np.arange(grid) + 0.5) * w / grid, w - 1).astype(np.int64)
    return m[np.ix_(ri, ci)]


def mask_to_tokens(mask, grid=8):
    """Flattened token-grid mask for the 8x8 bottleneck attention."""
    return downsample_mask_nearest(mask, grid).reshape(-1)


def injected_attention(tape, v_e, mode, mask=None, step=0):
    """Attention output with structure taken from recorded Q, K.

    full: softmax(Q_r K_rᵀ / sqrt(d)) V_e - queries and keys come from the
    reconstruction branch record, values from the enhancement branch.

    masked: per-token fusion Q = M*Q_e + (1-M)*Q_r (K likewise) before the
    softmax, with V_e only; M is the flattened token mask (1 = occluded,
    where the enhancement branch keeps its own structure).
    """
    if mode not in INJECTION_MODES:
        raise ContractError(f"mode must be one of {INJECTION_MODES}, got {mode!r}")
    v_e = _wrap(v_e)
    q_r, k_r, _ = tape.get(step, "reconstruction")
    if mode == "full":
        return self_attention(q_r, k_r, v_e)
    if mask is None:
        raise ContractError("masked injection requires a token mask")
    q_e, k_e, _ = tape.get(step, "enhancement")
    m = np.asarray(mask, dtype=np.float32).reshape(-1)
    if m.shape[0] != q_r.shape[-2]:
        raise ShapeError(f"token mask length {m.shape[0]} != token count {q_r.shape[-2]}")
    mt = Tensor(m[:, None])
    one = Tensor(np.float32(1.0))
    q = mt * q_e + (one - mt) * q_r
    k = mt * k_e + (one - mt) * k_r
    return self_attention(q, k, v_e)


def _check_eps(eps, step, branch=None):
    if not np.all(np.isfinite(eps.data)):
        where = f" in {branch} branch" if branch else ""
        raise NumericError(f"non-finite noise prediction{where}", step=step)


def _descending_pairs(levels):
    rev = levels[::-1]
    return list(zip(rev[:-1], rev[1:]))


def ddim_sample(model, x_t, schedule, hooks=None):
    """Deterministic DDIM from the top noise level down to a clean latent.

    Per step (hi -> lo): x0_hat = (x - sqrt(1-ab_hi)*eps) / sqrt(ab_hi),
    then x = sqrt(ab_lo)*x0_hat + sqrt(1-ab_lo)*eps, with eps predicted at
    the hi endpoint.  ``hooks(level)`` may return an attention control
    callable for that step.
    """
    with no_grad():
        x = _wrap(x_t)
        for hi, lo in _descending_pairs(schedule.sample_levels()):
            ctl = hooks(hi) if hooks is not None else None
            eps = model(x, hi, attn_ctl=ctl)
            _check_eps(eps, hi)
            x0_hat = (x - eps * float(schedule.noise_coeff(hi))) / float(schedule.signal_coeff(hi))
            x = x0_hat * float(schedule.signal_coeff(lo)) + eps * float(schedule.noise_coeff(lo))
        return x


def ddim_invert(model, x_0, schedule, hooks=None):
    """First-order DDIM inversion: clean latent up to the top noise level.

    The reversed recursion evaluates eps at the known lo endpoint of each
    step, making invert the mirror image of sample's update rule.
    """
    with no_grad():
        x = _wrap(x_0)
        levels = schedule.sample_levels()
        for lo, hi in zip(levels[:-1], levels[1:]):
            ctl = hooks(lo) if hooks is not None else None
            eps = model(x, lo, attn_ctl=ctl)
            _check_eps(eps, lo)
            x0_hat = (x - eps * float(schedule.noise_coeff(lo))) / float(schedule.signal_coeff(lo))
            x = x0_hat * float(schedule.signal_coeff(hi)) + eps * float(schedule.noise_coeff(hi))
        return x


def ddim_sample_dual(base, constrained, x_t_recon, x_t_enh, schedule,
                     injection="full", token_mask=None, tape=None):
    """Two lockstep reverse-diffusion branches with attention injection.

    The reconstruction branch (base model) records Q, K, V each step; the
    enhancement branch (constrained model) replaces its attention using
    those records.  Returns (x0_reconstruction, x0_enhancement).
    """
    if injection not in INJECTION_MODES:
        raise ContractError(f"injection must be one of {INJECTION_MODES}, got {injection!r}")
    if injection == "masked" and token_mask is None:
        raise ContractError("masked injection requires a token mask")
    if tape is None:
        tape = AttentionTape()
    with no_grad():
        x_r = _wrap(x_t_recon)
        x_e = _wrap(x_t_enh)
        for hi, lo in _descending_pairs(schedule.sample_levels()):
            eps_r = base(x_r, hi, attn_ctl=tape.recorder(hi, "reconstruction"))
            _check_eps(eps_r, hi, branch="reconstruction")
            s_hi, n_hi = float(schedule.signal_coeff(hi)), float(schedule.noise_coeff(hi))
            s_lo, n_lo = float(schedule.signal_coeff(lo)), float(schedule.noise_coeff(lo))
            x_r = ((x_r - eps_r * n_hi) / s_hi) * s_lo + eps_r * n_lo

            if injection == "full":
                def ctl_e(q, k, v, _s=hi):
                    return injected_attention(tape, v, "full", step=_s)
            else:
                def ctl_e(q, k, v, _s=hi):
                    tape.record(_s, "enhancement", q, k, v)
                    return injected_attention(tape, v, "masked", mask=token_mask, step=_s)

            eps_e = constrained(x_e, hi, attn_ctl=ctl_e)
            _check_eps(eps_e, hi, branch="enhancement")
            x_e = ((x_e - eps_e * n_hi) / s_hi) * s_lo + eps_e * n_lo
        return x_r, x_e
