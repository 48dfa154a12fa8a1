import numpy as np
import pytest

from _oracles import attention_reference
from wildsplat.diffusion import DenoiserModel, NoiseSchedule
from wildsplat.diffusion.ddim import (AttentionTape, ddim_sample,
                                      ddim_sample_dual,
                                      downsample_mask_nearest,
                                      injected_attention, mask_to_tokens,
                                      self_attention)
from wildsplat.errors import ContractError, ShapeError, StateError
from wildsplat.rng import stream
from wildsplat.tensor import F32, Tensor


def qkv(seed, tokens=8, dim=6, batch=None):
    rng = stream(seed, "attn")
    shape = (tokens, dim) if batch is None else (batch, tokens, dim)
    return tuple(Tensor(rng.standard_normal(shape).astype(F32)) for _ in range(3))


def test_attention_matches_brute_force():
    for seed in range(4):
        q, k, v = qkv(seed)
        got = self_attention(q, k, v).data
        ref = attention_reference(q.data, k.data, v.data)
        assert np.abs(got - ref).max() < 1e-5


def test_attention_batched_matches_per_item():
    q, k, v = qkv(5, batch=3)
    got = self_attention(q, k, v).data
    for b in range(3):
        ref = attention_reference(q.data[b], k.data[b], v.data[b])
        assert np.abs(got[b] - ref).max() < 1e-5


def test_attention_shape_contracts():
    q, k, v = qkv(6)
    with pytest.raises(ShapeError):
        self_attention(q, k, v.data[:4])  # token mismatch between K and V
    with pytest.raises(ShapeError):
        self_attention(q, k.data[:, :3], v)  # dim mismatch
    with pytest.raises(ShapeError):
        self_attention(q.data[0], k, v)  # rank mismatch


def test_full_injection_with_own_records_is_identity():
    q, k, v = qkv(7)
    tape = AttentionTape()
    tape.record(0, "reconstruction", q, k, v)
    injected = injected_attention(tape, v, "full", step=0)
    plain = self_attention(q, k, v)
    assert np.array_equal(injected.data, plain.data)


def test_masked_fusion_boundary_masks():
    tokens = 8
    q_r, k_r, v_r = qkv(8, tokens=tokens)
    q_e, k_e, v_e = qkv(9, tokens=tokens)
    tape = AttentionTape()
    tape.record(2, "reconstruction", q_r, k_r, v_r)
    tape.record(2, "enhancement", q_e, k_e, v_e)

    zeros = np.zeros(tokens, F32)
    fused0 = injected_attention(tape, v_e, "masked", mask=zeros, step=2)
    full = injected_attention(tape, v_e, "full", step=2)
    assert np.array_equal(fused0.data, full.data)  # M=0: injection everywhere

    ones = np.ones(tokens, F32)
    fused1 = injected_attention(tape, v_e, "masked", mask=ones, step=2)
    own = self_attention(q_e, k_e, v_e)
    assert np.array_equal(fused1.data, own.data)  # M=1: no injection at all


def test_masked_fusion_mixes_per_token():
    tokens = 6
    q_r, k_r, v_r = qkv(10, tokens=tokens)
    q_e, k_e, v_e = qkv(11, tokens=tokens)
    tape = AttentionTape()
    tape.record(0, "reconstruction", q_r, k_r, v_r)
    tape.record(0, "enhancement", q_e, k_e, v_e)
    m = np.array([1, 0, 1, 0, 0, 1], F32)
    got = injected_attention(tape, v_e, "masked", mask=m, step=0).data
    qf = np.where(m[:, None] > 0, q_e.data, q_r.data)
    kf = np.where(m[:, None] > 0, k_e.data, k_r.data)
    ref = attention_reference(qf, kf, v_e.data)
    assert np.abs(got - ref).max() < 1e-5


def test_injection_argument_contracts():
    q, k, v = qkv(12)
    tape = AttentionTape()
    tape.record(0, "reconstruction", q, k, v)
    with pytest.raises(ContractError):
        injected_attention(tape, v, "other", step=0)
    with pytest.raises(ContractError):
        injected_attention(tape, v, "masked", step=0)  # no mask given
    tape.record(0, "enhancement", q, k, v)
    with pytest.raises(ShapeError):
        injected_attention(tape, v, "masked", mask=np.zeros(5, F32), step=0)


def test_tape_bookkeeping_errors():
    q, k, v = qkv(13)
    tape = AttentionTape()
    with pytest.raises(ContractError):
        tape.record(0, "other", q, k, v)
    tape.record(0, "reconstruction", q, k, v)
    with pytest.raises(StateError):
        tape.record(0, "reconstruction", q, k, v)
    with pytest.raises(StateError):
        tape.get(1, "reconstruction")
    with pytest.raises(ContractError):
        tape.record(1, "reconstruction", q.data[:4], k.data[:4], v.data[:4])
    assert len(tape) == 1


def test_recorder_hook_records_and_stays_silent():
    q, k, v = qkv(14)
    tape = AttentionTape()
    ctl = tape.recorder(3, "enhancement")
    assert ctl(q, k, v) is None
    got_q, got_k, got_v = tape.get(3, "enhancement")
    assert got_q is q and got_k is k and got_v is v


def test_downsample_mask_nearest_stays_binary():
    mask = np.zeros((128, 128), F32)
    mask[:64, :64] = 1.0
    grid = downsample_mask_nearest(mask, 8)
    assert grid.shape == (8, 8)
    assert set(np.unique(grid)) <= {0.0, 1.0}
    expect = np.zeros((8, 8), F32)
    expect[:4, :4] = 1.0
    assert np.array_equal(grid, expect)


def test_downsample_mask_rectangular_and_channel_forms():
    mask = np.zeros((64, 128), F32)
    mask[:, 64:] = 1.0
    grid = downsample_mask_nearest(mask[None], 4)  # [1,H,W] accepted
    expect = np.zeros((4, 4), F32)
    expect[:, 2:] = 1.0
    assert np.array_equal(grid, expect)
    with pytest.raises(ShapeError):
        downsample_mask_nearest(np.zeros((2, 64, 64), F32), 4)
    with pytest.raises(ShapeError):
        downsample_mask_nearest(np.zeros(64, F32), 4)


def test_mask_to_tokens_flattens_bottleneck_grid():
    mask = np.zeros((128, 128), F32)
    mask[16:32, 32:48] = 1.0  # exactly grid cell (1, 2) at 16px per cell
    tok = mask_to_tokens(mask)
    assert tok.shape == (64,)
    expect = np.zeros(64, F32)
    expect[1 * 8 + 2] = 1.0
    assert np.array_equal(tok, expect)


def test_dual_branch_degenerate_models_stay_identical():
    sched = NoiseSchedule(t_train=100, t_sample=5)
    model = DenoiserModel(seed=20)
    # make attention consequential: nonzero output projection
    model.attn.wo.data[...] = (
        stream(20, "wo").standard_normal(model.attn.wo.shape).astype(F32) * 0.2)
    x_t = Tensor(stream(21, "xt").standard_normal((1, 4, 32, 32)).astype(F32))
    x_r, x_e = ddim_sample_dual(model, model, x_t, x_t, sched, injection="full")
    assert np.array_equal(x_r.data, x_e.data)
    plain = ddim_sample(model, x_t, sched)
    assert np.array_equal(x_r.data, plain.data)


def test_dual_branch_masked_needs_token_mask():
    sched = NoiseSchedule(t_train=100, t_sample=2)
    model = DenoiserModel(seed=22)
    x_t = Tensor(stream(23, "xt").standard_normal((1, 4, 32, 32)).astype(F32))
    with pytest.raises(ContractError):
        ddim_sample_dual(model, model, x_t, x_t, sched, injection="masked")
    with pytest.raises(ContractError):
        ddim_sample_dual(model, model, x_t, x_t, sched, injection="nope")


def test_dual_branch_constrained_deviates_when_weights_differ():
    sched = NoiseSchedule(t_train=100, t_sample=4)
    base = DenoiserModel(seed=24)
    con = base.copy(variant="constrained")
    con.out_conv.w.data[...] += 0.01
    x_t = Tensor(stream(25, "xt").standard_normal((1, 4, 32, 32)).astype(F32))
    x_r, x_e = ddim_sample_dual(base, con, x_t, x_t, sched, injection="full")
    assert not np.array_equal(x_r.data, x_e.data)
