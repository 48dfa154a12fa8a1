"""Pose interpolation, pool construction, and the sampling curriculum."""
import numpy as np
import pytest

from wildsplat.errors import ContractError
from wildsplat.scene import Camera, quat_normalize, quat_to_rotmat
from wildsplat.views import (DIFFICULTIES, SampledView, TrainSchedule,
                             build_view_pool, next_view, perturb_pose,
                             slerp_pose)


def make_cam(quat, center, cam_id="c"):
    q = quat_normalize(np.asarray(quat, dtype=np.float64))
    rot = quat_to_rotmat(q[None])[0]
    t = -rot @ np.asarray(center, dtype=np.float64)
    return Camera(rotation=q, translation=t, fx=50.0, fy=50.0, cx=16.0,
                  cy=16.0, width=32, height=32, cam_id=cam_id)


def ring_cams(n=3, radius=3.0):
    cams = []
    for k in range(n):
        ang = 0.4 * k
        q = np.array([np.cos(ang / 2), 0.0, np.sin(ang / 2), 0.0])
        c = radius * np.array([np.sin(ang), 0.0, np.cos(ang)])
        cams.append(make_cam(q, c, cam_id=f"train_{k}"))
    return cams


def quat_close(a, b, tol=1e-6):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return min(np.abs(a - b).max(), np.abs(a + b).max()) < tol


# -------------------------------------------------------------- slerp


def test_slerp_endpoints_reproduce_inputs():
    c0, c1 = ring_cams(2)
    lo = slerp_pose(c0, c1, 0.0)
    hi = slerp_pose(c0, c1, 1.0)
    assert quat_close(lo.rotation, c0.rotation)
    assert np.abs(lo.center() - c0.center()).max() < 1e-6
    assert quat_close(hi.rotation, c1.rotation)
    assert np.abs(hi.center() - c1.center()).max() < 1e-6


def test_slerp_midpoint_matches_normalized_mean():
    # geodesic midpoint of two unit quaternions (positive dot) is their
    # normalized sum; camera centers interpolate linearly
    c0, c1 = ring_cams(2)
    mid = slerp_pose(c0, c1, 0.5)
    q = c0.rotation + c1.rotation
    q = q / np.linalg.norm(q)
    assert quat_close(mid.rotation, q)
    expected_center = 0.5 * (c0.center() + c1.center())
    assert np.abs(mid.center() - expected_center).max() < 1e-6


def test_slerp_handles_flipped_quaternion_sign():
    c0, c1 = ring_cams(2)
    flipped = make_cam(-c1.rotation, c1.center())
    a = slerp_pose(c0, c1, 0.3)
    b = slerp_pose(c0, flipped, 0.3)
    ra = quat_to_rotmat(a.rotation[None])[0]
    rb = quat_to_rotmat(b.rotation[None])[0]
    assert np.abs(ra - rb).max() < 1e-9


def test_slerp_preserves_intrinsics():
    c0, c1 = ring_cams(2)
    mid = slerp_pose(c0, c1, 0.25)
    assert (mid.fx, mid.fy, mid.width, mid.height) == (c0.fx, c0.fy, c0.width, c0.height)


def test_slerp_alpha_out_of_range():
    c0, c1 = ring_cams(2)
    with pytest.raises(ContractError):
        slerp_pose(c0, c1, 1.5)
    with pytest.raises(ContractError):
        slerp_pose(c0, c1, -0.1)


# ------------------------------------------------------------- perturb


def test_perturb_faces_mean_of_nearest_pair():
    cams = ring_cams(3)
    rng = np.random.default_rng(0)
    out = perturb_pose(cams[0], 0.05, cams, rng)
    # position noise is small, so the two nearest training cameras are 0, 1
    q = cams[0].rotation + cams[1].rotation
    q = q / np.linalg.norm(q)
    assert quat_close(out.rotation, q)
    assert np.linalg.norm(out.center() - cams[0].center()) < 0.5


def test_perturb_needs_two_cameras():
    cams = ring_cams(1)
    with pytest.raises(ContractError):
        perturb_pose(cams[0], 0.05, cams, np.random.default_rng(0))


def test_perturb_is_rng_driven():
    cams = ring_cams(3)
    a = perturb_pose(cams[0], 0.05, cams, np.random.default_rng(1))
    b = perturb_pose(cams[0], 0.05, cams, np.random.default_rng(1))
    c = perturb_pose(cams[0], 0.05, cams, np.random.default_rng(2))
    assert np.array_equal(a.center(), b.center())
    assert not np.array_equal(a.center(), c.center())


# ---------------------------------------------------------------- pool


def test_pool_size_and_tier_balance():
    cams = ring_cams(3)
    pool = build_view_pool(cams, pool_size=60, seed=0)
    assert len(pool) == 60
    counts = {d: 0 for d in DIFFICULTIES}
    for v in pool:
        counts[v.difficulty] += 1
    assert counts == {"simple": 20, "medium": 20, "difficult": 20}
    pool61 = build_view_pool(cams, pool_size=61, seed=0)
    sizes = sorted(
        sum(1 for v in pool61 if v.difficulty == d) for d in DIFFICULTIES)
    assert max(sizes) - min(sizes) <= 1


def test_pool_mixes_both_generators():
    cams = ring_cams(3)
    pool = build_view_pool(cams, pool_size=60, seed=0)
    kinds = {v.provenance[0] for v in pool}
    assert kinds == {"interpolated", "perturbed"}
    n_interp = sum(1 for v in pool if v.provenance[0] == "interpolated")
    assert n_interp == 42  # ceil(0.7 * 60)


def test_pool_tiers_are_distance_tertiles():
    cams = ring_cams(3)
    pool = build_view_pool(cams, pool_size=30, seed=1)
    by_tier = {d: [v.distance for v in pool if v.difficulty == d]
               for d in DIFFICULTIES}
    assert max(by_tier["simple"]) <= min(by_tier["medium"]) + 1e-12
    assert max(by_tier["medium"]) <= min(by_tier["difficult"]) + 1e-12
    centers = np.stack([c.center() for c in cams])
    for v in pool:
        d = np.linalg.norm(centers - v.camera.center(), axis=1).min()
        assert abs(d - v.distance) < 1e-9


def test_pool_is_seeded():
    cams = ring_cams(3)
    a = build_view_pool(cams, pool_size=12, seed=3)
    b = build_view_pool(cams, pool_size=12, seed=3)
    c = build_view_pool(cams, pool_size=12, seed=4)
    assert all(np.array_equal(x.camera.center(), y.camera.center())
               for x, y in zip(a, b))
    assert any(not np.array_equal(x.camera.center(), y.camera.center())
               for x, y in zip(a, c))


def test_pool_argument_contracts():
    cams = ring_cams(3)
    with pytest.raises(ContractError):
        build_view_pool(cams, pool_size=2)
    with pytest.raises(ContractError):
        build_view_pool(cams[:1], pool_size=10)


# ------------------------------------------------------------ schedule


def test_schedule_from_total_reference_ratios():
    s = TrainSchedule.from_total(750)
    assert s.tau_c == 550 and s.tau_o == 650
    s = TrainSchedule.from_total(7500)
    assert s.tau_c == 5500 and s.tau_o == 6500


def test_schedule_disable_inpainting():
    s = TrainSchedule.from_total(750, tau_o_disabled=True)
    assert np.isinf(s.tau_o)


def test_schedule_validation():
    with pytest.raises(ContractError):
        TrainSchedule(total_iters=100, tau_c=0, tau_o=50, beta=0.3)
    with pytest.raises(ContractError):
        TrainSchedule(total_iters=100, tau_c=80, tau_o=60, beta=0.3)
    with pytest.raises(ContractError):
        TrainSchedule(total_iters=100, tau_c=50, tau_o=150, beta=0.3)
    with pytest.raises(ContractError):
        TrainSchedule(total_iters=100, tau_c=50, tau_o=80, beta=1.5)


def test_schedule_stages_split_postwarmup_in_thirds():
    s = TrainSchedule(total_iters=700, tau_c=400, tau_o=500, beta=0.3)
    assert s.stage(0) == 1 and s.stage(400) == 1
    assert s.stage(500) == 2
    assert s.stage(600) == 3 and s.stage(699) == 3
    assert tuple(s.unlocked(450)) == ("simple",)
    assert tuple(s.unlocked(520)) == ("simple", "medium")
    assert tuple(s.unlocked(650)) == ("simple", "medium", "difficult")


def test_schedule_collapse_unlocks_everything():
    s = TrainSchedule(total_iters=700, tau_c=400, tau_o=500, beta=0.3,
                      collapse_stages=True)
    assert s.stage(400) == 3
    assert tuple(s.unlocked(400)) == DIFFICULTIES


# ----------------------------------------------------------- next_view


def test_next_view_train_only_before_warmup_end():
    cams = ring_cams(3)
    pool = build_view_pool(cams, pool_size=12, seed=0)
    s = TrainSchedule(total_iters=1000, tau_c=600, tau_o=800, beta=0.3)
    rng = np.random.default_rng(0)
    for it in range(0, 600, 7):
        kind, pick = next_view(s, it, 3, pool, rng)
        assert kind == "train" and 0 <= pick < 3


def test_next_view_pool_fraction_matches_beta():
    cams = ring_cams(3)
    pool = build_view_pool(cams, pool_size=12, seed=0)
    s = TrainSchedule(total_iters=10 ** 6, tau_c=1, tau_o=2.0, beta=0.3,
                      collapse_stages=True)
    rng = np.random.default_rng(5)
    n = 100_000
    hits = sum(next_view(s, 10, 3, pool, rng)[0] == "pool" for _ in range(n))
    assert abs(hits / n - 0.3) < 0.01


def test_next_view_never_difficult_before_stage_three():
    cams = ring_cams(3)
    pool = build_view_pool(cams, pool_size=30, seed=0)
    s = TrainSchedule(total_iters=900, tau_c=300, tau_o=400, beta=1.0)
    rng = np.random.default_rng(6)
    b1, b2 = s.stage_boundaries()
    for it in range(300, int(b2), 3):
        kind, pick = next_view(s, it, 3, pool, rng)
        if kind == "pool":
            assert pick.difficulty != "difficult"
            if it < b1:
                assert pick.difficulty == "simple"


def test_next_view_beyond_schedule_end():
    cams = ring_cams(3)
    pool = build_view_pool(cams, pool_size=12, seed=0)
    s = TrainSchedule(total_iters=100, tau_c=50, tau_o=80, beta=0.3)
    with pytest.raises(ContractError):
        next_view(s, 100, 3, pool, np.random.default_rng(0))


def test_next_view_zero_beta_never_pools():
    cams = ring_cams(3)
    pool = build_view_pool(cams, pool_size=12, seed=0)
    s = TrainSchedule(total_iters=1000, tau_c=1, tau_o=2.0, beta=0.0)
    rng = np.random.default_rng(7)
    assert all(next_view(s, 500, 3, pool, rng)[0] == "train" for _ in range(200))
