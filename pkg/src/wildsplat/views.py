"""Camera pose augmentation and the staged sampling curriculum.

New viewpoints come from two generators: spherical interpolation between
pairs of training cameras, and Gaussian position perturbations with the
rotation averaged from the two nearest training views.  Pooled views are
tiered by their distance to the training set (simple / medium / difficult)
and unlocked in three stages after the warm-up phase.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError
from .scene import Camera, quat_normalize, rotmat_to_quat, quat_to_rotmat

DIFFICULTIES = ("simple", "medium", "difficult")


def _slerp_quat(q0, q1, alpha):
    # shortest arc: flip one endpoint when the quaternions disagree in sign
    q0 = quat_normalize(np.asarray(q0, dtype=np.float64))
    q1 = quat_normalize(np.asarray(q1, dtype=np.float64))
    dot = float(np.dot(q0, q1))
    if dot < 0.0:
        q1 = -q1
        dot = -dot
    if alpha == 0.0:
        return q0
    if alpha == 1.0:
        return q1
    dot = min(dot, 1.0)
    theta = np.arccos(dot)
    if theta < 1e-9:
        return quat_normalize(q0 + alpha * (q1 - q0))
    s = np.sin(theta)
    return quat_normalize(
        (np.sin((1.0 - alpha) * theta) / s) * q0 + (np.sin(alpha * theta) / s) * q1)


def _camera_from(center, quat, template, cam_id):
    rot = quat_to_rotmat(quat[None])[0]
    t = -rot @ np.asarray(center, dtype=np.float64)
    return Camera(
        rotation=quat_normalize(quat).astype(np.float64),
        translation=t,
        fx=template.fx, fy=template.fy, cx=template.cx, cy=template.cy,
        width=template.width, height=template.height, cam_id=cam_id,
    )


def slerp_pose(cam_i: Camera, cam_j: Camera, alpha: float) -> Camera:
    """Geodesic rotation blend with linear camera-center interpolation."""
    if not (0.0 <= alpha <= 1.0):
        raise ContractError(f"alpha must be in [0,1], got {alpha}")
    q = _slerp_quat(cam_i.rotation, cam_j.rotation, float(alpha))
    c = (1.0 - alpha) * cam_i.center() + alpha * cam_j.center()
    return _camera_from(c, q, cam_i, f"interp_{cam_i.cam_id}_{cam_j.cam_id}_{alpha:.4f}")


def _mean_quat(q0, q1):
    q0 = quat_normalize(np.asarray(q0, dtype=np.float64))
    q1 = quat_normalize(np.asarray(q1, dtype=np.float64))
    if np.dot(q0, q1) < 0.0:
        q1 = -q1
    return quat_normalize(q0 + q1)


def perturb_pose(cam: Camera, delta, train_cams, rng) -> Camera:
    """Jitter the camera position; face the average of the two nearest views.

    delta is the per-axis standard deviation of the position noise.  The
    rotation is the sign-aligned normalized quaternion mean of the two
    training cameras nearest (by center distance) to the perturbed position.
    """
    if len(train_cams) < 2:
        raise ContractError("perturb_pose needs at least 2 training cameras")
    delta = np.broadcast_to(np.asarray(delta, dtype=np.float64), (3,))
    eps = rng.standard_normal(3) * delta
    c = cam.center() + eps
    centers = np.stack([t.center() for t in train_cams])
    dists = np.linalg.norm(centers - c, axis=1)
    nearest = np.argsort(dists, kind="stable")[:2]
    q = _mean_quat(train_cams[nearest[0]].rotation, train_cams[nearest[1]].rotation)
    return _camera_from(c, q, cam, f"perturb_{cam.cam_id}")


@dataclass
class SampledView:
    """A pool camera with its generation recipe and curriculum tier."""

    camera: Camera
    provenance: tuple
    difficulty: str
    distance: float


def build_view_pool(train_cams, pool_size=60, delta=None, seed=0, rng=None):
    """Interpolate all camera pairs and perturb each camera; tier by distance.

    Returns ``pool_size`` SampledViews.  Difficulty tiers are tertiles of
    the distance from each pooled camera center to its nearest training
    camera center (tier counts differ by at most one).
    """
    if pool_size < 3:
        raise ContractError(f"pool_size must be at least 3, got {pool_size}")
    if len(train_cams) < 2:
        raise ContractError("the pool needs at least 2 training cameras")
    if rng is None:
        rng = np.random.default_rng(seed)
    centers = np.stack([c.center() for c in train_cams])
    if delta is None:
        # default position noise: 5% of the training-camera bounding box diagonal
        diag = np.linalg.norm(centers.max(axis=0) - centers.min(axis=0))
        delta = np.full(3, 0.05 * max(diag, 1e-6))

    pairs = [(i, j) for i in range(len(train_cams)) for j in range(i + 1, len(train_cams))]
    n_interp = int(np.ceil(pool_size * 0.7))
    n_perturb = pool_size - n_interp
    entries = []
    for n in range(n_interp):
        i, j = pairs[n % len(pairs)]
        alpha = float(rng.random())
        cam = slerp_pose(train_cams[i], train_cams[j], alpha)
        entries.append((cam, ("interpolated", i, j, alpha)))
    for n in range(max(n_perturb, 0)):
        k = n % len(train_cams)
        cam = perturb_pose(train_cams[k], delta, train_cams, rng)
        eps = cam.center() - train_cams[k].center()
        entries.append((cam, ("perturbed", k, tuple(float(e) for e in eps))))
    entries = entries[:pool_size]

    dists = np.array(
        [np.linalg.norm(centers - cam.center(), axis=1).min() for cam, _ in entries])
    order = np.argsort(dists, kind="stable")
    tiers = np.array_split(order, 3)
    difficulty = {}
    for tier_idx, members in enumerate(tiers):
        for m in members:
            difficulty[int(m)] = DIFFICULTIES[tier_idx]
    return [
        SampledView(camera=cam, provenance=prov, difficulty=difficulty[n],
                    distance=float(dists[n]))
        for n, (cam, prov) in enumerate(entries)
    ]


@dataclass
class TrainSchedule:
    """Iteration plan: warm-up end, inpainting start, pool mix-in rate.

    ``tau_o`` may be infinity to disable inpainted pseudo ground truth
    entirely.  Difficulty stages split the post-warm-up window into equal
    thirds; ``collapse_stages`` unlocks every tier immediately at tau_c.
    """

    total_iters: int
    tau_c: int
    tau_o: float
    beta: float
    collapse_stages: bool = False

    def __post_init__(self):
        if not (0 < self.tau_c <= self.total_iters):
            raise ContractError(
                f"need 0 < tau_c <= total_iters, got {self.tau_c}/{self.total_iters}")
        if not (self.tau_c <= self.tau_o):
            raise ContractError(f"need tau_c <= tau_o, got {self.tau_c} > {self.tau_o}")
        if np.isfinite(self.tau_o) and self.tau_o > self.total_iters:
            raise ContractError(
                f"finite tau_o must not exceed total_iters, got {self.tau_o}")
        if not (0.0 <= self.beta <= 1.0):
            raise ContractError(f"beta must be in [0,1], got {self.beta}")

    @classmethod
    def from_total(cls, total_iters, beta=0.3, tau_o_disabled=False,
                   collapse_stages=False):
        """Scale the reference 5500/6500/7500 phase proportions to any length."""
        tau_c = max(1, round(total_iters * 5500 / 7500))
        tau_o = float("inf") if tau_o_disabled else max(tau_c, round(total_iters * 6500 / 7500))
        return cls(total_iters=total_iters, tau_c=tau_c, tau_o=tau_o, beta=beta,
                   collapse_stages=collapse_stages)

    def stage_boundaries(self):
        span = self.total_iters - self.tau_c
        return (self.tau_c + span / 3.0, self.tau_c + 2.0 * span / 3.0)

    def stage(self, iteration):
        """1, 2 or 3: how many difficulty tiers are unlocked."""
        if self.collapse_stages:
            return 3
        b1, b2 = self.stage_boundaries()
        if iteration < b1:
            return 1
        if iteration < b2:
            return 2
        return 3

    def unlocked(self, iteration):
        return DIFFICULTIES[: self.stage(iteration)]


def next_view(sched: TrainSchedule, iteration, n_train, pool, rng):
    """Pick the supervision view for one iteration.

    Returns ("train", index) or ("pool", SampledView).  Before tau_c only
    training views are used; afterwards a pool view is drawn with
    probability beta from the tiers unlocked at the current stage.
    """
    if iteration >= sched.total_iters:
        raise ContractError(f"iteration {iteration} beyond schedule end {sched.total_iters}")
    if iteration >= sched.tau_c and sched.beta > 0.0 and rng.random() < sched.beta:
        allowed = sched.unlocked(iteration)
        candidates = [v for v in pool if v.difficulty in allowed]
        if candidates:
            return ("pool", candidates[int(rng.integers(len(candidates)))])
    return ("train", int(rng.integers(n_train)))
