"""Synthetic sparse-capture datasets with known ground truth.

A scene is a procedurally textured Gaussian cloud (box + sphere + ground
disk) photographed by a ring of cameras.  Training views receive a per-view
appearance transform (gain / gamma / white balance, recentered so the set of
training views is neutral on average) and opaque elliptical occluders with
exact footprint masks.  Clean appearance-neutral renders of every view are
kept as evaluation references.

Dataset layout on disk:
  scene/images/{train,test}_NN.png   observed views (train ones corrupted)
  scene/masks/train_NN.png           occluder footprints, 0/255
  scene/clean/{train,test}_NN.png    clean reference renders
  scene/cameras.txt                  one camera per line
  scene/manifest.txt                 seed and full spec echo
  scene/gt_cloud/                    generating cloud checkpoint
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ContractError
from .rasterizer import rasterize, project, render
from .rng import stream
from .scene import Camera, GaussianCloud, load_cameras, look_at_camera, save_cameras
from .tensor import F32


@dataclass
class SceneSpec:
    seed: int = 0
    n_points: int = 520
    n_train: int = 5
    n_test: int = 10
    width: int = 128
    height: int = 128
    ring_radius: float = 4.2
    ring_height: float = 1.9
    focal: float = 140.0
    background: tuple = (0.10, 0.10, 0.13)
    gain_range: float = 0.22
    gamma_range: float = 0.20
    wb_range: float = 0.10
    occluder_count: int = 2
    occluder_min_frac: float = 0.10
    occluder_max_frac: float = 0.17
    occluder_drift: float = 0.04

    def __post_init__(self):
        if not (200 <= self.n_points <= 2000):
            raise ContractError("n_points must be in [200, 2000]")
        if self.n_train < 2 or self.n_test < 1:
            raise ContractError("need at least 2 train and 1 test cameras")


def build_ground_truth_cloud(spec: SceneSpec) -> GaussianCloud:
    """Procedural textured cloud: ground disk, box, sphere."""
    rng = stream(spec.seed, "gt-cloud")
    n_ground = int(spec.n_points * 0.40)
    n_box = int(spec.n_points * 0.34)
    n_sphere = spec.n_points - n_ground - n_box

    pts, cols = [], []

    # ground disk, checkerboard
    r = 2.6 * np.sqrt(rng.uniform(0.0, 1.0, n_ground))
    th = rng.uniform(0, 2 * np.pi, n_ground)
    gx, gz = r * np.cos(th), r * np.sin(th)
    gp = np.stack([gx, np.zeros(n_ground), gz], axis=1)
    check = ((np.floor(gx / 0.65) + np.floor(gz / 0.65)) % 2).astype(np.float64)
    gc = np.stack(
        [0.30 + 0.45 * check, 0.42 + 0.30 * check, 0.28 + 0.18 * check], axis=1
    )
    pts.append(gp)
    cols.append(gc)

    # box with striped faces
    face = rng.integers(0, 6, n_box)
    uv = rng.uniform(-0.5, 0.5, (n_box, 2))
    half = np.array([0.55, 0.55, 0.55])
    bp = np.zeros((n_box, 3))
    axis = face // 2
    sign = np.where(face % 2 == 0, 1.0, -1.0)
    others = np.array([[1, 2], [0, 2], [0, 1]])
    for k in range(3):
        sel = axis == k
        bp[sel, k] = sign[sel] * half[k]
        bp[sel, others[k, 0]] = uv[sel, 0] * 2 * half[others[k, 0]]
        bp[sel, others[k, 1]] = uv[sel, 1] * 2 * half[others[k, 1]]
    bp += np.array([-0.75, 0.56, 0.15])
    stripe = ((np.floor((bp[:, 0] + bp[:, 1]) / 0.28)) % 2).astype(np.float64)
    bc = np.stack(
        [0.75 - 0.35 * stripe, 0.25 + 0.20 * stripe, 0.20 + 0.55 * stripe], axis=1
    )
    pts.append(bp)
    cols.append(bc)

    # sphere with latitude bands
    u = rng.uniform(-1.0, 1.0, n_sphere)
    phi = rng.uniform(0, 2 * np.pi, n_sphere)
    sr = 0.62
    sp = np.stack(
        [
            sr * np.sqrt(1 - u * u) * np.cos(phi),
            sr * u,
            sr * np.sqrt(1 - u * u) * np.sin(phi),
        ],
        axis=1,
    ) + np.array([0.85, 0.62, -0.35])
    band = ((np.floor((u + 1.0) / 0.32)) % 2).astype(np.float64)
    sc = np.stack(
        [0.85 - 0.15 * band, 0.70 - 0.40 * band, 0.25 + 0.50 * band], axis=1
    )
    pts.append(sp)
    cols.append(sc)

    centers = np.concatenate(pts).astype(F32)
    colors = np.clip(np.concatenate(cols), 0.0, 1.0).astype(F32)

    spacing = _mean_nn_distance(centers)
    log_scales = np.log(
        rng.uniform(0.85, 1.25, (len(centers), 3)) * spacing * 0.80
    ).astype(F32)
    quats = np.zeros((len(centers), 4), dtype=F32)
    quats[:, 0] = 1.0
    opacity = np.full(len(centers), _logit(0.82), dtype=F32)
    return GaussianCloud(centers, quats, log_scales, opacity, colors)


def _logit(p):
    return float(np.log(p / (1.0 - p)))


def _mean_nn_distance(points, sample=400):
    pts = points[:: max(1, len(points) // sample)].astype(np.float64)
    d2 = ((pts[:, None, :] - pts[None, :, :]) ** 2).sum(-1)
    np.fill_diagonal(d2, np.inf)
    return float(np.sqrt(d2.min(axis=1)).mean())


def ring_cameras(spec: SceneSpec):
    """Disjoint train/test cameras on a ring looking at the scene center."""
    target = np.array([0.0, 0.45, 0.0])
    cams_train, cams_test = [], []
    for i in range(spec.n_train):
        ang = 2 * np.pi * i / spec.n_train
        pos = np.array(
            [spec.ring_radius * np.cos(ang), spec.ring_height, spec.ring_radius * np.sin(ang)]
        )
        cams_train.append(_ring_cam(spec, pos, target, f"train_{i:02d}"))
    for j in range(spec.n_test):
        ang = 2 * np.pi * (j + 0.5) / spec.n_test
        pos = np.array(
            [spec.ring_radius * np.cos(ang), spec.ring_height, spec.ring_radius * np.sin(ang)]
        )
        cams_test.append(_ring_cam(spec, pos, target, f"test_{j:02d}"))
    return cams_train, cams_test


def _ring_cam(spec, pos, target, cam_id):
    return look_at_camera(
        pos,
        target,
        fx=spec.focal,
        fy=spec.focal,
        cx=spec.width / 2.0,
        cy=spec.height / 2.0,
        width=spec.width,
        height=spec.height,
        cam_id=cam_id,
    )


def render_clean(cloud, cam, background):
    """Occluder-free, appearance-neutral render as a plain [3,H,W] array."""
    splats = project(cloud, cam)
    img, _, _ = rasterize(splats, cam, background)
    return np.clip(img, 0.0, 1.0).astype(F32)


def apply_appearance(img, params):
    """gain/gamma/white-balance transform; exact identity at neutral params."""
    out = img
    gamma = params["gamma"]
    if gamma != 1.0:
        out = np.power(np.clip(out, 0.0, 1.0), F32(gamma))
    scale = np.array(params["wb"], dtype=F32) * F32(params["gain"])
    if not np.all(scale == 1.0):
        out = out * scale[:, None, None]
    return np.clip(out, 0.0, 1.0).astype(F32)


def draw_appearance_params(spec: SceneSpec, n_views, rng):
    """Per-view parameters whose deviations average to zero across views."""
    def centered(width, size):
        d = rng.uniform(-width, width, size=size)
        return d - d.mean(axis=0)

    gains = 1.0 + centered(spec.gain_range, n_views)
    gammas = 1.0 + centered(spec.gamma_range, n_views)
    wbs = 1.0 + centered(spec.wb_range, (n_views, 3))
    return [
        {"gain": float(gains[i]), "gamma": float(gammas[i]), "wb": wbs[i].tolist()}
        for i in range(n_views)
    ]


def draw_occluders(spec: SceneSpec, rng):
    """Scene-level transient ellipses: centers, radii, angle, base color.

    Drawn once per scene; each capture sees a slightly drifted copy (see
    drift_occluders), the way a parked object blocks roughly the same
    content in every nearby photo.
    """
    occs = []
    res = min(spec.width, spec.height)
    for _ in range(spec.occluder_count):
        occs.append(
            {
                "cx": float(rng.uniform(0.30, 0.70) * spec.width),
                "cy": float(rng.uniform(0.30, 0.70) * spec.height),
                "rx": float(rng.uniform(spec.occluder_min_frac, spec.occluder_max_frac) * res),
                "ry": float(rng.uniform(spec.occluder_min_frac, spec.occluder_max_frac) * res),
                "angle": float(rng.uniform(0, np.pi)),
                "color": rng.uniform(0.15, 0.95, 3).tolist(),
            }
        )
    return occs


def drift_occluders(anchors, spec: SceneSpec, rng):
    """Per-view copies of the anchor ellipses with a small positional drift."""
    res = min(spec.width, spec.height)
    sigma = spec.occluder_drift * res
    out = []
    for occ in anchors:
        moved = dict(occ)
        moved["cx"] = float(np.clip(occ["cx"] + rng.normal(0.0, sigma), 0.1 * spec.width, 0.9 * spec.width))
        moved["cy"] = float(np.clip(occ["cy"] + rng.normal(0.0, sigma), 0.1 * spec.height, 0.9 * spec.height))
        moved["angle"] = float(occ["angle"] + rng.normal(0.0, 0.15))
        out.append(moved)
    return out


def composite_occluders(img, occluders):
    """Paint striped opaque ellipses; returns (image, exact footprint mask)."""
    h, w = img.shape[1:]
    ys, xs = np.mgrid[0:h, 0:w]
    mask = np.zeros((h, w), dtype=bool)
    out = img.copy()
    for occ in occluders:
        dx = xs + 0.5 - occ["cx"]
        dy = ys + 0.5 - occ["cy"]
        ca, sa = np.cos(occ["angle"]), np.sin(occ["angle"])
        u = (ca * dx + sa * dy) / occ["rx"]
        v = (-sa * dx + ca * dy) / occ["ry"]
        inside = u * u + v * v <= 1.0
        stripes = ((np.floor((u * 3.0 + v * 1.5))) % 2).astype(F32) * 0.25
        color = np.asarray(occ["color"], dtype=F32)
        for ch in range(3):
            out[ch][inside] = np.clip(color[ch] - stripes[inside] + 0.1, 0.0, 1.0)
        mask |= inside
    return out.astype(F32), mask


def save_png(path, img):
    arr = np.clip(np.asarray(img), 0.0, 1.0)
    u8 = np.round(arr * 255.0).astype(np.uint8)
    if u8.ndim == 3:
        u8 = u8.transpose(1, 2, 0)
    Image.fromarray(u8).save(path)


def load_png(path):
    arr = np.asarray(Image.open(path), dtype=np.float32) / 255.0
    if arr.ndim == 3:
        return np.ascontiguousarray(arr.transpose(2, 0, 1)).astype(F32)
    return arr[None, :, :].astype(F32)


def generate(spec: SceneSpec, out_dir):
    """Write a full dataset; byte-identical for identical specs."""
    out = Path(out_dir)
    for sub in ("images", "masks", "clean"):
        (out / sub).mkdir(parents=True, exist_ok=True)

    cloud = build_ground_truth_cloud(spec)
    cams_train, cams_test = ring_cameras(spec)
    rng_app = stream(spec.seed, "appearance")
    rng_occ = stream(spec.seed, "occluders")
    app_params = draw_appearance_params(spec, spec.n_train, rng_app)

    bg = spec.background
    anchors = draw_occluders(spec, rng_occ)
    for i, cam in enumerate(cams_train):
        clean = render_clean(cloud, cam, bg)
        save_png(out / "clean" / f"{cam.cam_id}.png", clean)
        img = apply_appearance(clean, app_params[i])
        occluders = drift_occluders(anchors, spec, rng_occ)
        img, mask = composite_occluders(img, occluders)
        save_png(out / "images" / f"{cam.cam_id}.png", img)
        save_png(out / "masks" / f"{cam.cam_id}.png", mask.astype(F32))
    for cam in cams_test:
        clean = render_clean(cloud, cam, bg)
        save_png(out / "clean" / f"{cam.cam_id}.png", clean)
        save_png(out / "images" / f"{cam.cam_id}.png", clean)

    save_cameras(out / "cameras.txt", cams_train + cams_test)
    cloud.save(out / "gt_cloud", meta={"seed": spec.seed})

    manifest = {"seed": spec.seed}
    for k, v in asdict(spec).items():
        manifest[f"spec.{k}"] = v
    for i, p in enumerate(app_params):
        manifest[f"appearance.train_{i:02d}"] = (
            f"gain={p['gain']:.6f} gamma={p['gamma']:.6f} "
            f"wb={p['wb'][0]:.6f},{p['wb'][1]:.6f},{p['wb'][2]:.6f}"
        )
    lines = [f"{k} = {v}" for k, v in manifest.items()]
    (out / "manifest.txt").write_text("\n".join(lines) + "\n")
    return out


@dataclass
class ViewRecord:
    camera: Camera
    image: np.ndarray            # observed [3,H,W]
    mask: np.ndarray             # [1,H,W] in {0,1}
    clean: np.ndarray | None     # reference render, if available


@dataclass
class Dataset:
    root: Path
    train: list
    test: list
    background: tuple
    manifest: dict
    gt_cloud_dir: Path | None


def load_dataset(path):
    """Load a generated scene, or any posed folder with the same layout.

    Missing masks load as all-zero; missing clean references load as None.
    """
    root = Path(path)
    cams = load_cameras(root / "cameras.txt")
    manifest = {}
    mpath = root / "manifest.txt"
    if mpath.exists():
        for line in mpath.read_text().splitlines():
            key, _, value = line.partition("=")
            if key.strip():
                manifest[key.strip()] = value.strip()
    bg = manifest.get("spec.background")
    background = _parse_tuple(bg) if bg else (0.0, 0.0, 0.0)

    train, test = [], []
    for cam in cams:
        img_path = root / "images" / f"{cam.cam_id}.png"
        if not img_path.exists():
            raise ContractError(f"missing image for camera {cam.cam_id}")
        image = load_png(img_path)
        mask_path = root / "masks" / f"{cam.cam_id}.png"
        if mask_path.exists():
            mask = (load_png(mask_path) > 0.5).astype(F32)
        else:
            mask = np.zeros((1, cam.height, cam.width), dtype=F32)
        clean_path = root / "clean" / f"{cam.cam_id}.png"
        clean = load_png(clean_path) if clean_path.exists() else None
        rec = ViewRecord(camera=cam, image=image, mask=mask, clean=clean)
        (train if cam.cam_id.startswith("train") else test).append(rec)

    gt_dir = root / "gt_cloud"
    return Dataset(
        root=root,
        train=train,
        test=test,
        background=background,
        manifest=manifest,
        gt_cloud_dir=gt_dir if gt_dir.exists() else None,
    )


def _parse_tuple(text):
    vals = [float(v) for v in text.strip("() ").split(",") if v.strip()]
    return tuple(vals)


def dense_init(dataset: Dataset, jitter=0.02, spurious_frac=0.15, seed=0, noise_fill=True):
    """Initial training cloud: jittered true centers plus spurious points.

    Point colors are sampled by projecting into a randomly chosen training
    view whose occluded pixels were noise-filled first, so raw occluder
    texture never colors the initialization.
    """
    from .occlusion import mask_noise_fill

    if dataset.gt_cloud_dir is None:
        raise ContractError("dataset has no ground-truth cloud to initialize from")
    gt = GaussianCloud.load(dataset.gt_cloud_dir)
    rng = stream(seed, "dense-init")

    centers = gt.centers.data.astype(np.float64)
    extent = centers.max(axis=0) - centers.min(axis=0)
    scale = float(np.linalg.norm(extent))
    pts = centers + rng.normal(0.0, jitter * scale, centers.shape)

    n_spur = int(round(len(centers) * spurious_frac))
    lo = centers.min(axis=0) - 0.05 * extent
    hi = centers.max(axis=0) + 0.05 * extent
    spur = rng.uniform(lo, hi, (n_spur, 3))
    pts = np.concatenate([pts, spur]).astype(F32)

    sources = []
    for rec in dataset.train:
        img = rec.image
        if noise_fill and rec.mask.any():
            img = mask_noise_fill(img, rec.mask, seed=seed)
        sources.append(img)
    colors = _sample_point_colors(pts, dataset.train, sources, rng)

    spacing = _mean_nn_distance(pts)
    log_scales = np.log(
        rng.uniform(0.85, 1.25, (len(pts), 3)) * spacing * 0.80
    ).astype(F32)
    quats = np.zeros((len(pts), 4), dtype=F32)
    quats[:, 0] = 1.0
    opacity = np.full(len(pts), _logit(0.10), dtype=F32)
    return GaussianCloud(pts, quats, log_scales, opacity, colors)


def _sample_point_colors(points, train_records, source_images, rng):
    n = len(points)
    colors = np.full((n, 3), 0.5, dtype=F32)
    pick = rng.integers(0, len(train_records), n)
    for vi, rec in enumerate(train_records):
        sel = np.nonzero(pick == vi)[0]
        if len(sel) == 0:
            continue
        cam = rec.camera
        wr = cam.rotmat()
        p = points[sel].astype(np.float64) @ wr.T + np.asarray(cam.translation)
        z = p[:, 2]
        ok = z > 0.05
        u = np.clip(cam.fx * p[:, 0] / np.maximum(z, 1e-9) + cam.cx, 0, cam.width - 1)
        v = np.clip(cam.fy * p[:, 1] / np.maximum(z, 1e-9) + cam.cy, 0, cam.height - 1)
        img = source_images[vi]
        sampled = img[:, v.astype(int), u.astype(int)].T
        colors[sel[ok]] = sampled[ok].astype(F32)
    return colors
