"""Explicit scene representation: anisotropic 3D Gaussians and pinhole cameras.

Conventions fixed here and relied on everywhere else:
  - quaternions are (w, x, y, z) with the Hamilton product;
  - camera pose maps world to camera: p_cam = R @ p + t, +z forward;
  - a camera's center in world coordinates is -R^T @ t.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .errors import ContractError, DegeneracyError
from .tensor import F32, Tensor
from . import tensor_io


def quat_normalize(q):
    q = np.asarray(q, dtype=np.float64)
    n = np.linalg.norm(q, axis=-1, keepdims=True)
    return q / n


def quat_to_rotmat(q):
    """Unit quaternion(s) (w,x,y,z) -> rotation matrix/matrices [..., 3, 3]."""
    q = np.asarray(q, dtype=np.float64)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    r = np.empty(q.shape[:-1] + (3, 3), dtype=np.float64)
    r[..., 0, 0] = 1 - 2 * (y * y + z * z)
    r[..., 0, 1] = 2 * (x * y - w * z)
    r[..., 0, 2] = 2 * (x * z + w * y)
    r[..., 1, 0] = 2 * (x * y + w * z)
    r[..., 1, 1] = 1 - 2 * (x * x + z * z)
    r[..., 1, 2] = 2 * (y * z - w * x)
    r[..., 2, 0] = 2 * (x * z - w * y)
    r[..., 2, 1] = 2 * (y * z + w * x)
    r[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return r


def rotmat_to_quat(r):
    """Rotation matrix -> unit quaternion (w,x,y,z), w >= 0."""
    r = np.asarray(r, dtype=np.float64)
    tr = np.trace(r)
    if tr > 0:
        s = np.sqrt(tr + 1.0) * 2.0
        q = np.array(
            [0.25 * s, (r[2, 1] - r[1, 2]) / s, (r[0, 2] - r[2, 0]) / s, (r[1, 0] - r[0, 1]) / s]
        )
    else:
        i = int(np.argmax(np.diag(r)))
        j, k = (i + 1) % 3, (i + 2) % 3
        s = np.sqrt(max(1.0 + r[i, i] - r[j, j] - r[k, k], 1e-12)) * 2.0
        q = np.empty(4)
        q[0] = (r[k, j] - r[j, k]) / s
        q[1 + i] = 0.25 * s
        q[1 + j] = (r[j, i] + r[i, j]) / s
        q[1 + k] = (r[k, i] + r[i, k]) / s
    if q[0] < 0:
        q = -q
    return quat_normalize(q)


def quat_multiply(a, b):
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ],
        dtype=np.float64,
    )


@dataclass
class Gaussian:
    """One anisotropic Gaussian primitive (world units)."""

    center: np.ndarray        # [3]
    rotation: np.ndarray      # unit quaternion [4], (w,x,y,z)
    log_scale: np.ndarray     # [3], realized scale = exp(log_scale)
    opacity_logit: float
    color: np.ndarray         # RGB [3] in [0,1]


class GaussianCloud:
    """Ordered Gaussian collection with the five attribute groups as tensors."""

    ATTRS = ("centers", "rotations", "log_scales", "opacity_logits", "colors")

    def __init__(self, centers, rotations, log_scales, opacity_logits, colors):
        n = len(centers)
        if n == 0:
            raise ContractError("GaussianCloud must be non-empty")
        self.centers = Tensor(centers, requires_grad=True)
        self.rotations = Tensor(rotations, requires_grad=True)
        self.log_scales = Tensor(log_scales, requires_grad=True)
        self.opacity_logits = Tensor(np.reshape(opacity_logits, (n,)), requires_grad=True)
        self.colors = Tensor(colors, requires_grad=True)
        for name in self.ATTRS:
            if len(getattr(self, name).data) != n:
                raise ContractError(f"attribute {name} length mismatch")

    def __len__(self):
        return len(self.centers.data)

    def params(self):
        return [getattr(self, name) for name in self.ATTRS]

    def gaussian(self, i):
        return Gaussian(
            center=self.centers.data[i].copy(),
            rotation=self.rotations.data[i].copy(),
            log_scale=self.log_scales.data[i].copy(),
            opacity_logit=float(self.opacity_logits.data[i]),
            color=self.colors.data[i].copy(),
        )

    def renormalize_rotations(self):
        q = self.rotations.data.astype(np.float64)
        n = np.linalg.norm(q, axis=1, keepdims=True)
        self.rotations.data[...] = (q / np.maximum(n, 1e-12)).astype(F32)

    def copy(self):
        return GaussianCloud(
            self.centers.data.copy(),
            self.rotations.data.copy(),
            self.log_scales.data.copy(),
            self.opacity_logits.data.copy(),
            self.colors.data.copy(),
        )

    def save(self, dirpath, meta=None):
        arrays = {name: getattr(self, name).data for name in self.ATTRS}
        info = {"points": len(self), "kind": "gaussian_cloud"}
        if meta:
            info.update(meta)
        tensor_io.save_checkpoint(dirpath, arrays, info)

    @classmethod
    def load(cls, dirpath):
        arrays, _ = tensor_io.load_checkpoint(dirpath)
        return cls(
            arrays["centers"],
            arrays["rotations"],
            arrays["log_scales"],
            arrays["opacity_logits"],
            arrays["colors"],
        )


def build_covariance(rotation, log_scale):
    """3x3 covariance R S S^T R^T from quaternion and log scales (numpy path)."""
    r = quat_to_rotmat(quat_normalize(rotation))
    s2 = np.exp(2.0 * np.asarray(log_scale, dtype=np.float64))
    return (r * s2[None, :]) @ r.T


def build_covariances(rotations, log_scales):
    """Vectorized covariance for [N,4] quaternions and [N,3] log scales."""
    r = quat_to_rotmat(quat_normalize(rotations))
    s2 = np.exp(2.0 * np.asarray(log_scales, dtype=np.float64))
    return np.einsum("nij,nj,nkj->nik", r, s2, r, optimize=True)


def gaussian_influence(g: Gaussian, x):
    """Normalized density of the Gaussian at world point x."""
    cov = build_covariance(g.rotation, g.log_scale)
    det = np.linalg.det(cov)
    if not np.isfinite(det) or det < 1e-30:
        raise DegeneracyError(f"singular covariance (det={det:.3e})")
    d = np.asarray(x, dtype=np.float64) - np.asarray(g.center, dtype=np.float64)
    q = d @ np.linalg.solve(cov, d)
    return float((2.0 * np.pi) ** -1.5 * det ** -0.5 * np.exp(-0.5 * q))


@dataclass(frozen=True)
class Camera:
    """Pinhole camera; rotation/translation map world to camera space."""

    rotation: np.ndarray      # unit quaternion [4]
    translation: np.ndarray   # [3]
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    cam_id: str = "0"

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ContractError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ContractError("principal point outside image")

    def rotmat(self):
        return quat_to_rotmat(quat_normalize(self.rotation))

    def center(self):
        """Camera position in world coordinates."""
        return -self.rotmat().T @ np.asarray(self.translation, dtype=np.float64)

    def with_pose(self, rotation, translation):
        return replace(
            self,
            rotation=np.asarray(rotation, dtype=np.float64),
            translation=np.asarray(translation, dtype=np.float64),
        )


def world_to_camera(cam: Camera, p):
    return cam.rotmat() @ np.asarray(p, dtype=np.float64) + np.asarray(
        cam.translation, dtype=np.float64
    )


def inverse_pose(cam: Camera) -> Camera:
    """Camera whose pose is the inverse rigid transform of ``cam``."""
    q = quat_normalize(cam.rotation)
    q_inv = np.array([q[0], -q[1], -q[2], -q[3]])
    t_inv = -(quat_to_rotmat(q_inv) @ np.asarray(cam.translation, dtype=np.float64))
    return cam.with_pose(q_inv, t_inv)


def look_at_camera(position, target, fx, fy, cx, cy, width, height, cam_id="0", up=(0.0, 1.0, 0.0)):
    """Camera at ``position`` looking toward ``target``; +z forward, image y down."""
    position = np.asarray(position, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - position
    forward = forward / np.linalg.norm(forward)
    x_cam = np.cross(forward, np.asarray(up, dtype=np.float64))
    x_cam = x_cam / np.linalg.norm(x_cam)
    y_cam = np.cross(forward, x_cam)
    y_cam = y_cam / np.linalg.norm(y_cam)
    r = np.stack([x_cam, y_cam, forward])
    return Camera(
        rotation=rotmat_to_quat(r),
        translation=-(r @ position),
        fx=fx,
        fy=fy,
        cx=cx,
        cy=cy,
        width=width,
        height=height,
        cam_id=cam_id,
    )


def save_cameras(path, cams):
    lines = []
    for c in cams:
        q = quat_normalize(c.rotation)
        t = np.asarray(c.translation, dtype=np.float64)
        fields = [c.cam_id] + [repr(float(v)) for v in (*q, *t, c.fx, c.fy, c.cx, c.cy)]
        fields += [str(c.width), str(c.height)]
        lines.append(" ".join(fields))
    Path(path).write_text("\n".join(lines) + "\n")


def load_cameras(path):
    cams = []
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        f = line.split()
        if len(f) != 14:
            raise ContractError(f"camera line needs 14 fields, got {len(f)}: {line!r}")
        cams.append(
            Camera(
                rotation=np.array([float(v) for v in f[1:5]]),
                translation=np.array([float(v) for v in f[5:8]]),
                fx=float(f[8]),
                fy=float(f[9]),
                cx=float(f[10]),
                cy=float(f[11]),
                width=int(f[12]),
                height=int(f[13]),
                cam_id=f[0],
            )
        )
    return cams
