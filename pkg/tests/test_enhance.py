"""Appearance transfer and the render-enhancement pipeline."""
import numpy as np
import pytest

from wildsplat.diffusion import DenoiserModel, LatentCodec, NoiseSchedule
from wildsplat.enhance import EnhancementRequest, adain, enhance
from wildsplat.errors import ContractError, ShapeError
from wildsplat.tensor import Tensor, no_grad


def blocky_image(rng, hw=32, cell=8):
    """Piecewise-constant color blocks plus low noise, values in [0,1]."""
    n = hw // cell
    coarse = rng.random((3, n, n))
    img = np.repeat(np.repeat(coarse, cell, axis=1), cell, axis=2)
    img = img + 0.02 * rng.standard_normal((3, hw, hw))
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def small_stack(seed=0):
    codec = LatentCodec(seed=seed + 7)
    base = DenoiserModel(seed=seed)
    sched = NoiseSchedule(t_sample=10)
    return codec, base, sched


# ---------------------------------------------------------------- adain


def test_adain_output_matches_reference_stats():
    rng = np.random.default_rng(0)
    content = rng.random((3, 12, 14)).astype(np.float32)
    reference = (0.3 + 0.4 * rng.random((3, 12, 14))).astype(np.float32)
    out = adain(content, reference, clamp=False)
    for c in range(3):
        assert abs(out[c].mean() - reference[c].mean()) < 1e-4
        assert abs(out[c].std() - reference[c].std()) < 1e-4


def test_adain_identity():
    rng = np.random.default_rng(1)
    img = rng.random((3, 16, 16)).astype(np.float32)
    out = adain(img, img)
    assert np.max(np.abs(out - img)) < 1e-5


def test_adain_constant_reference_collapses_output():
    rng = np.random.default_rng(2)
    content = rng.random((3, 8, 8)).astype(np.float32)
    reference = np.full((3, 8, 8), 0.5, dtype=np.float32)
    out = adain(content, reference, clamp=False)
    # sigma_ref = 0, so every pixel lands on the reference mean
    assert np.max(np.abs(out - 0.5)) < 1e-6


def test_adain_constant_content_maps_to_reference_mean():
    rng = np.random.default_rng(3)
    content = np.full((3, 8, 8), 0.25, dtype=np.float32)
    reference = rng.random((3, 8, 8)).astype(np.float32)
    out = adain(content, reference, clamp=False)
    for c in range(3):
        assert np.max(np.abs(out[c] - reference[c].mean())) < 1e-5


def test_adain_clamps_to_unit_range():
    content = np.linspace(0, 1, 3 * 64, dtype=np.float32).reshape(3, 8, 8)
    reference = np.zeros((3, 8, 8), dtype=np.float32)
    reference[:, ::2, :] = 4.0  # mean 2, large spread
    out = adain(content, reference, clamp=True)
    assert out.min() >= 0.0 and out.max() <= 1.0


def test_adain_shape_errors():
    good = np.zeros((3, 8, 8), dtype=np.float32)
    with pytest.raises(ShapeError):
        adain(good[0], good)
    with pytest.raises(ShapeError):
        adain(good, np.zeros((1, 8, 8), dtype=np.float32))


# ------------------------------------------------------- request checks


def test_request_rejects_bad_render_shape():
    codec, base, sched = small_stack()
    with pytest.raises(ShapeError):
        EnhancementRequest(render=np.zeros((32, 32), dtype=np.float32),
                           reference=np.zeros((32, 32), dtype=np.float32),
                           codec=codec, base=base, constrained=base,
                           schedule=sched)


def test_request_rejects_reference_mismatch():
    codec, base, sched = small_stack()
    with pytest.raises(ShapeError):
        EnhancementRequest(render=np.zeros((3, 32, 32), dtype=np.float32),
                           reference=np.zeros((3, 16, 16), dtype=np.float32),
                           codec=codec, base=base, constrained=base,
                           schedule=sched)


def test_request_rejects_architecture_mismatch():
    codec, base, sched = small_stack()
    other = DenoiserModel(seed=1, channels=(8, 12, 16), t_dim=16)
    with pytest.raises(ContractError):
        EnhancementRequest(render=np.zeros((3, 32, 32), dtype=np.float32),
                           reference=np.zeros((3, 32, 32), dtype=np.float32),
                           codec=codec, base=base, constrained=other,
                           schedule=sched)


def test_request_fills_default_schedule():
    codec, base, _ = small_stack()
    req = EnhancementRequest(render=np.zeros((3, 32, 32), dtype=np.float32),
                             reference=np.zeros((3, 32, 32), dtype=np.float32),
                             codec=codec, base=base, constrained=base)
    assert req.schedule.t_train == 1000 and req.schedule.t_sample == 50


# ------------------------------------------------------------- enhance


def test_degenerate_enhancement_is_codec_roundtrip():
    """With constrained == base both branches agree step for step, so the
    decoded output must be exactly the codec round trip of the render."""
    rng = np.random.default_rng(10)
    codec, base, sched = small_stack()
    render = blocky_image(rng)
    reference = blocky_image(rng)
    req = EnhancementRequest(render=render, reference=reference, codec=codec,
                             base=base, constrained=base, schedule=sched)
    with no_grad():
        out = enhance(req)
        rt = codec.decode(codec.encode(Tensor(render[None]))).data[0]
    assert np.array_equal(out, adain(rt, reference, clamp=True))


def test_noop_path_reduces_to_codec_roundtrip():
    # fresh models predict zero noise, so inversion + sampling cancel
    rng = np.random.default_rng(11)
    codec, base, sched = small_stack()
    render = blocky_image(rng)
    req = EnhancementRequest(render=render, reference=render, codec=codec,
                             base=base, constrained=base, schedule=sched,
                             injection=False, adain=False)
    with no_grad():
        out = enhance(req)
        rt = codec.decode(codec.encode(Tensor(render[None]))).data[0]
    assert np.max(np.abs(out - np.clip(rt, 0.0, 1.0))) < 1e-5


def test_enhancement_is_deterministic():
    rng = np.random.default_rng(12)
    codec, base, sched = small_stack()
    con = base.copy(variant="constrained")
    for name, p in con.named_params():
        if name.startswith("out_conv"):
            p.data += 0.01
    render = blocky_image(rng)
    req = EnhancementRequest(render=render, reference=render, codec=codec,
                             base=base, constrained=con, schedule=sched)
    with no_grad():
        a = enhance(req)
        b = enhance(req)
    assert np.array_equal(a, b)


def test_constrained_deviation_changes_output():
    rng = np.random.default_rng(13)
    codec, base, sched = small_stack()
    con = base.copy(variant="constrained")
    for name, p in con.named_params():
        if name.startswith("out_conv"):
            p.data += 0.01
    render = blocky_image(rng)
    base_req = EnhancementRequest(render=render, reference=render, codec=codec,
                                  base=base, constrained=base, schedule=sched)
    con_req = EnhancementRequest(render=render, reference=render, codec=codec,
                                 base=base, constrained=con, schedule=sched)
    with no_grad():
        out_base = enhance(base_req)
        out_con = enhance(con_req)
    assert not np.array_equal(out_base, out_con)
    assert out_con.dtype == np.float32
    assert out_con.min() >= 0.0 and out_con.max() <= 1.0


def test_adain_off_returns_clipped_decode():
    rng = np.random.default_rng(14)
    codec, base, sched = small_stack()
    render = blocky_image(rng)
    reference = np.zeros_like(render)
    on = EnhancementRequest(render=render, reference=reference, codec=codec,
                            base=base, constrained=base, schedule=sched)
    off = EnhancementRequest(render=render, reference=reference, codec=codec,
                             base=base, constrained=base, schedule=sched,
                             adain=False)
    with no_grad():
        out_on = enhance(on)
        out_off = enhance(off)
        rt = codec.decode(codec.encode(Tensor(render[None]))).data[0]
    assert np.array_equal(out_off, np.clip(rt, 0.0, 1.0).astype(np.float32))
    assert not np.array_equal(out_on, out_off)
