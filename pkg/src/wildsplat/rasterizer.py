"""Differentiable Gaussian splatting: projection, tiled rasterization, backward.

The forward pass is pinned to an exact float32 arithmetic sequence so that a
whole-image sequential reference renderer reproduces it bit for bit:

  per splat (in stable depth order), per pixel:
    det   = a*c - b*b                       (skip splat if det <= 0)
    inv   = 1/det;  A0, A1, A2 = c*inv, -b*inv, a*inv
    dx    = (x + 0.5) - mean_x;  dy likewise
    power = -0.5*(A0*dx*dx + A2*dy*dy) - A1*dx*dy   (skip pixel if power > 0)
    alpha = min(0.99, opacity * exp(power))          (skip if alpha < 1/255)
    test  = T * (1 - alpha); if test < 1e-4 the pixel terminates and the
            splat is NOT blended; otherwise C += color*(alpha*T); T = test
  finally C += T * background.

The tiled implementation vectorizes this with an exclusive cumulative product
over (1 - alpha), multiplying by exactly 1.0 for skipped splats; IEEE-754
multiplication by 1.0 and addition of +0.0 are bit-exact identities, so the
pinned sequence is preserved.  Candidate selection per 16x16 tile uses a
conservative influence radius: any excluded splat satisfies alpha < 1/255 at
every pixel of the tile, which the pinned sequence skips anyway.

The backward pass is hand-written (the blend is a scan, not a composition of
tape primitives) and registers into the autodiff tape via ``render``.
"""

from __future__ import annotations

import numpy as np

from .errors import NumericError, StateError
from .scene import quat_normalize, quat_to_rotmat
from .tensor import F32, make_op, sigmoid_np
from . import tensor_io

TILE = 16
NEAR_PLANE = 0.01
DILATION = 0.3          # px^2 added to the 2D covariance diagonal
ALPHA_CAP = F32(0.99)
ALPHA_MIN = F32(1.0 / 255.0)
T_TERMINATE = F32(1e-4)
RADIUS_MARGIN = 1.05    # multiplicative slack on the conservative cull radius
RADIUS_PAD = 1.0        # additive slack, px


class Splat2D:
    """Per-splat projected quantities (element view into a batch)."""

    __slots__ = ("mean2d", "cov2d", "depth", "opacity", "color")

    def __init__(self, mean2d, cov2d, depth, opacity, color):
        self.mean2d = mean2d
        self.cov2d = cov2d
        self.depth = depth
        self.opacity = opacity
        self.color = color


class Splats2D:
    """Batch of projected splats plus the intermediates the backward needs."""

    def __init__(self, mean2d, cov_abc, depth, opacity, color, orig_index, chain):
        self.mean2d = mean2d          # [M,2] f32
        self.cov_abc = cov_abc        # [M,3] f32  (a, b, c) of the 2x2 cov
        self.depth = depth            # [M]   f32
        self.opacity = opacity        # [M]   f32  (post-sigmoid)
        self.color = color            # [M,3] f32
        self.orig_index = orig_index  # [M]   int  index into the cloud
        self.chain = chain            # dict of f64 projection intermediates

    def __len__(self):
        return len(self.depth)

    def __getitem__(self, i):
        a, b, c = self.cov_abc[i]
        return Splat2D(
            mean2d=self.mean2d[i].copy(),
            cov2d=np.array([[a, b], [b, c]], dtype=F32),
            depth=float(self.depth[i]),
            opacity=float(self.opacity[i]),
            color=self.color[i].copy(),
        )


def project(cloud, cam):
    """Project a cloud through a camera; culls splats behind the near plane."""
    centers = cloud.centers.data.astype(np.float64)
    rotations = cloud.rotations.data.astype(np.float64)
    log_scales = cloud.log_scales.data.astype(np.float64)
    logits = cloud.opacity_logits.data
    colors = cloud.colors.data

    wr = cam.rotmat()
    t_cam = np.asarray(cam.translation, dtype=np.float64)
    p_cam = centers @ wr.T + t_cam
    valid = p_cam[:, 2] >= NEAR_PLANE
    idx = np.nonzero(valid)[0]
    p = p_cam[idx]
    tx, ty, tz = p[:, 0], p[:, 1], p[:, 2]

    qn = quat_normalize(rotations[idx])
    rot = quat_to_rotmat(qn)
    s2 = np.exp(2.0 * log_scales[idx])
    cov3 = np.einsum("nij,nj,nkj->nik", rot, s2, rot, optimize=True)

    m = len(idx)
    jac = np.zeros((m, 2, 3), dtype=np.float64)
    jac[:, 0, 0] = cam.fx / tz
    jac[:, 0, 2] = -cam.fx * tx / (tz * tz)
    jac[:, 1, 1] = cam.fy / tz
    jac[:, 1, 2] = -cam.fy * ty / (tz * tz)
    mw = jac @ wr
    cov2 = np.einsum("nij,njk,nlk->nil", mw, cov3, mw, optimize=True)
    cov2[:, 0, 0] += DILATION
    cov2[:, 1, 1] += DILATION

    mean2d = np.stack([cam.fx * tx / tz + cam.cx, cam.fy * ty / tz + cam.cy], axis=1)
    cov_abc = np.stack([cov2[:, 0, 0], cov2[:, 0, 1], cov2[:, 1, 1]], axis=1).astype(F32)
    chain = {
        "wr": wr,
        "t": p,
        "jac": jac,
        "mw": mw,
        "cov3": cov3,
        "rot": rot,
        "s2": s2,
        "qn": qn,
        "q_raw": rotations[idx],
        "fx": cam.fx,
        "fy": cam.fy,
        "n_cloud": len(centers),
    }
    return Splats2D(
        mean2d=mean2d.astype(F32),
        cov_abc=cov_abc,
        depth=tz.astype(F32),
        opacity=sigmoid_np(logits[idx]),
        color=colors[idx].astype(F32),
        orig_index=idx,
        chain=chain,
    )


def _conic_and_radius(cov_abc, opacity):
    """Pinned f32 conic plus a conservative f64 influence radius per splat."""
    a = cov_abc[:, 0]
    b = cov_abc[:, 1]
    c = cov_abc[:, 2]
    det = a * c - b * b                      # f32, pinned
    ok = det > 0
    inv = np.where(ok, F32(1.0) / np.where(ok, det, F32(1)), F32(0))
    conic = np.stack([c * inv, -b * inv, a * inv], axis=1)

    a64, b64, c64 = a.astype(np.float64), b.astype(np.float64), c.astype(np.float64)
    mid = 0.5 * (a64 + c64)
    disc = np.sqrt(np.maximum(0.25 * (a64 - c64) ** 2 + b64 * b64, 0.0))
    lam_max = mid + disc
    o = np.maximum(opacity.astype(np.float64), 1e-12)
    r2 = 2.0 * lam_max * np.log(np.maximum(255.0 * o, 1e-12))
    # keep the f32 comparison aligned with the kernel's alpha >= 1/255 skip:
    # a splat whose peak alpha equals the threshold exactly must stay included
    radius = np.where(
        (opacity >= ALPHA_MIN) & ok,
        RADIUS_MARGIN * np.sqrt(np.maximum(r2, 0.0)) + RADIUS_PAD,
        -1.0,
    )
    return conic, radius


class RenderState:
    """Forward-pass record consumed exactly once by the backward pass."""

    def __init__(self, splats, cam, background, order, conic, tiles, t_final):
        self.splats = splats
        self.cam = cam
        self.background = background
        self.order = order          # sorted-splat permutation (into splats arrays)
        self.conic = conic          # [M,3] f32, pinned conic per unsorted splat
        self.tiles = tiles          # list of (y0, x0, th, tw, cand) with cand into sorted order
        self.t_final = t_final      # [H,W] f32
        self.consumed = False


def rasterize(splats, cam, background, keep_state=False, transmittance_out=None):
    """Tiled front-to-back alpha blending of projected splats.

    Returns (image [3,H,W] f32, aux dict, state-or-None).  ``aux`` carries
    per-pixel blending diagnostics: weight_sum, t_final, n_contrib.
    """
    h, w = cam.height, cam.width
    bg = np.asarray(background, dtype=F32).reshape(3)
    img = np.zeros((3, h, w), dtype=F32)
    weight_sum = np.zeros((h, w), dtype=F32)
    t_final = np.ones((h, w), dtype=F32)
    n_contrib = np.zeros((h, w), dtype=np.int32)

    m = len(splats)
    conic, radius = (np.zeros((0, 3), F32), np.zeros(0)) if m == 0 else _conic_and_radius(
        splats.cov_abc, splats.opacity
    )
    order = np.argsort(splats.depth, kind="stable") if m else np.zeros(0, dtype=int)

    # sorted-domain views
    s_mean = splats.mean2d[order]
    s_conic = conic[order]
    s_op = splats.opacity[order]
    s_col = splats.color[order]
    s_rad = radius[order]
    live_splats = s_rad > 0

    tiles = []
    px_all = (np.arange(w, dtype=F32) + F32(0.5))
    py_all = (np.arange(h, dtype=F32) + F32(0.5))
    mx64 = s_mean[:, 0].astype(np.float64)
    my64 = s_mean[:, 1].astype(np.float64)

    for y0 in range(0, h, TILE):
        th = min(TILE, h - y0)
        for x0 in range(0, w, TILE):
            tw = min(TILE, w - x0)
            if m:
                ddx = np.maximum(np.maximum((x0 + 0.5) - mx64, mx64 - (x0 + tw - 0.5)), 0.0)
                ddy = np.maximum(np.maximum((y0 + 0.5) - my64, my64 - (y0 + th - 0.5)), 0.0)
                cand = np.nonzero(live_splats & (ddx * ddx + ddy * ddy <= s_rad * s_rad))[0]
            else:
                cand = np.zeros(0, dtype=int)
            tiles.append((y0, x0, th, tw, cand))
            if len(cand) == 0:
                img[:, y0 : y0 + th, x0 : x0 + tw] += t_final[y0 : y0 + th, x0 : x0 + tw] * bg[:, None, None]
                continue

            px = px_all[x0 : x0 + tw]
            py = py_all[y0 : y0 + th]
            dx = px[None, None, :] - s_mean[cand, 0][:, None, None]
            dy = py[None, :, None] - s_mean[cand, 1][:, None, None]
            k = len(cand)
            p = th * tw
            dx = np.broadcast_to(dx, (k, th, tw)).reshape(k, p)
            dy = np.broadcast_to(dy, (k, th, tw)).reshape(k, p)
            a0 = s_conic[cand, 0][:, None]
            a1 = s_conic[cand, 1][:, None]
            a2 = s_conic[cand, 2][:, None]
            power = F32(-0.5) * (a0 * dx * dx + a2 * dy * dy) - a1 * dx * dy
            alpha_pre = s_op[cand][:, None] * np.exp(power)
            alpha = np.minimum(ALPHA_CAP, alpha_pre)
            contrib = (power <= 0) & (alpha >= ALPHA_MIN)
            om = np.where(contrib, F32(1) - alpha, F32(1))
            u = np.empty((k + 1, p), dtype=F32)
            u[0] = F32(1)
            np.cumprod(om, axis=0, out=u[1:])
            blended = contrib & (u[1:] >= T_TERMINATE)
            wgt = np.where(blended, alpha * u[:-1], F32(0))

            ctile = np.zeros((3, p), dtype=F32)
            any_blend = blended.any(axis=1)
            for i in np.nonzero(any_blend)[0]:
                ctile += s_col[cand[i]][:, None] * wgt[i]

            viol = contrib & (u[1:] < T_TERMINATE)
            anyv = viol.any(axis=0)
            first = viol.argmax(axis=0)
            tf = np.where(anyv, np.take_along_axis(u, first[None, :], axis=0)[0], u[k])
            ctile += tf[None, :] * bg[:, None]

            img[:, y0 : y0 + th, x0 : x0 + tw] = ctile.reshape(3, th, tw)
            weight_sum[y0 : y0 + th, x0 : x0 + tw] = wgt.sum(axis=0, dtype=np.float64).reshape(th, tw).astype(F32)
            t_final[y0 : y0 + th, x0 : x0 + tw] = tf.reshape(th, tw)
            n_contrib[y0 : y0 + th, x0 : x0 + tw] = blended.sum(axis=0).reshape(th, tw)

    aux = {"weight_sum": weight_sum, "t_final": t_final, "n_contrib": n_contrib}
    if transmittance_out is not None:
        tensor_io.write_tensor(transmittance_out, t_final)
    state = RenderState(splats, cam, bg, order, conic, tiles, t_final) if keep_state else None
    return img, aux, state


def rasterize_backward(state, grad_image):
    """Exact gradients of the pinned blend w.r.t. all five attribute groups.

    Consumes ``state``; a second call (or a call on a released state) raises
    StateError.
    """
    if state is None or state.consumed:
        raise StateError("rasterize_backward requires an unconsumed forward state")
    state.consumed = True

    splats, cam = state.splats, state.cam
    order = state.order
    m = len(splats)
    g = np.asarray(grad_image, dtype=np.float64).reshape(3, cam.height, cam.width)

    # sorted-domain accumulators for the screen-space quantities
    d_col = np.zeros((m, 3))
    d_op = np.zeros(m)
    d_mean = np.zeros((m, 2))
    d_amat = np.zeros((m, 2, 2))  # gradient w.r.t. the full conic matrix

    s_mean = splats.mean2d[order]
    s_conic = state.conic[order]
    s_op = splats.opacity[order]
    s_col = splats.color[order]
    bg = state.background.astype(np.float64)

    px_all = (np.arange(cam.width, dtype=F32) + F32(0.5))
    py_all = (np.arange(cam.height, dtype=F32) + F32(0.5))

    for (y0, x0, th, tw, cand) in state.tiles:
        if len(cand) == 0:
            continue
        k = len(cand)
        p = th * tw
        px = px_all[x0 : x0 + tw]
        py = py_all[y0 : y0 + th]
        dx = np.broadcast_to(px[None, None, :] - s_mean[cand, 0][:, None, None], (k, th, tw)).reshape(k, p)
        dy = np.broadcast_to(py[None, :, None] - s_mean[cand, 1][:, None, None], (k, th, tw)).reshape(k, p)
        a0 = s_conic[cand, 0][:, None]
        a1 = s_conic[cand, 1][:, None]
        a2 = s_conic[cand, 2][:, None]
        power = F32(-0.5) * (a0 * dx * dx + a2 * dy * dy) - a1 * dx * dy
        alpha_pre = s_op[cand][:, None] * np.exp(power)
        alpha = np.minimum(ALPHA_CAP, alpha_pre)
        contrib = (power <= 0) & (alpha >= ALPHA_MIN)
        om = np.where(contrib, F32(1) - alpha, F32(1))
        u = np.empty((k + 1, p), dtype=F32)
        u[0] = F32(1)
        np.cumprod(om, axis=0, out=u[1:])
        blended = contrib & (u[1:] >= T_TERMINATE)
        t_exc = u[:-1].astype(np.float64)
        alpha64 = alpha.astype(np.float64)
        om64 = np.where(blended, 1.0 - alpha64, 1.0)
        t_fin = state.t_final[y0 : y0 + th, x0 : x0 + tw].reshape(p).astype(np.float64)

        gt = g[:, y0 : y0 + th, x0 : x0 + tw].reshape(3, p)
        col = s_col[cand].astype(np.float64)

        # dL/dw_i and dL/dcolor_i from C = sum_i color_i * w_i + T_fin * bg
        dwgt = col @ gt  # [K,P]
        wgt = np.where(blended, alpha64 * t_exc, 0.0)
        d_col_tile = wgt @ gt.T  # [K,3]

        d_alpha = np.where(blended, dwgt * t_exc, 0.0)
        # transmittance products: T_i = prod_{j<i} om_j, T_fin = prod om_j
        d_t = np.where(blended, dwgt * alpha64, 0.0)
        d_tfin = bg @ gt  # [P]
        # suffix sum over i > j of d_t_i * T_i, plus the final-T term
        s_tail = np.cumsum((d_t * t_exc)[::-1], axis=0)[::-1]
        tail = np.concatenate([s_tail[1:], np.zeros((1, p))], axis=0) + (d_tfin * t_fin)[None, :]
        d_alpha -= np.where(blended, tail / om64, 0.0)

        capped = alpha_pre > ALPHA_CAP
        d_alpha_pre = np.where(capped, 0.0, d_alpha)
        gexp = np.exp(power).astype(np.float64)
        d_op_tile = (d_alpha_pre * gexp).sum(axis=1)
        d_power = d_alpha_pre * alpha_pre.astype(np.float64)

        dx64 = dx.astype(np.float64)
        dy64 = dy.astype(np.float64)
        a0_64 = a0.astype(np.float64)
        a1_64 = a1.astype(np.float64)
        a2_64 = a2.astype(np.float64)
        d_a00 = (d_power * (-0.5 * dx64 * dx64)).sum(axis=1)
        d_a01 = (d_power * (-0.5 * dx64 * dy64)).sum(axis=1)
        d_a11 = (d_power * (-0.5 * dy64 * dy64)).sum(axis=1)
        d_mx = (d_power * (a0_64 * dx64 + a1_64 * dy64)).sum(axis=1)
        d_my = (d_power * (a2_64 * dy64 + a1_64 * dx64)).sum(axis=1)

        np.add.at(d_col, cand, d_col_tile)
        np.add.at(d_op, cand, d_op_tile)
        np.add.at(d_mean, cand, np.stack([d_mx, d_my], axis=1))
        damat = np.zeros((k, 2, 2))
        damat[:, 0, 0] = d_a00
        damat[:, 0, 1] = d_a01
        damat[:, 1, 0] = d_a01
        damat[:, 1, 1] = d_a11
        np.add.at(d_amat, cand, damat)

    # un-sort back to projection order
    inv = np.empty(m, dtype=int)
    inv[order] = np.arange(m)
    d_col = d_col[inv]
    d_op = d_op[inv]
    d_mean = d_mean[inv]
    d_amat = d_amat[inv]

    return _chain_to_attributes(state, d_col, d_op, d_mean, d_amat)


def _chain_to_attributes(state, d_col, d_op, d_mean, d_amat):
    """Chain screen-space gradients to the five cloud attribute groups."""
    splats = state.splats
    ch = splats.chain
    m = len(splats)
    n = ch["n_cloud"]
    wr, t, jac, mw = ch["wr"], ch["t"], ch["jac"], ch["mw"]
    cov3, rot, s2, qn, q_raw = ch["cov3"], ch["rot"], ch["s2"], ch["qn"], ch["q_raw"]
    fx, fy = ch["fx"], ch["fy"]

    # conic -> 2D covariance: A = V^-1  =>  dV = -A dA A (A symmetric)
    a = splats.cov_abc[:, 0].astype(np.float64)
    b = splats.cov_abc[:, 1].astype(np.float64)
    c = splats.cov_abc[:, 2].astype(np.float64)
    det = a * c - b * b
    amat = np.zeros((m, 2, 2))
    amat[:, 0, 0] = c / det
    amat[:, 0, 1] = -b / det
    amat[:, 1, 0] = -b / det
    amat[:, 1, 1] = a / det
    gv2 = -np.einsum("mij,mjk,mkl->mil", amat, d_amat, amat, optimize=True)

    # V2 = Mw Cov3 Mw^T (+ const dilation)
    gv3 = np.einsum("mai,mab,mbj->mij", mw, gv2, mw, optimize=True)
    gmw = 2.0 * np.einsum("mab,mbi,mij->maj", gv2, mw, cov3, optimize=True)
    gjac = gmw @ wr.T

    tx, ty, tz = t[:, 0], t[:, 1], t[:, 2]
    inv_z = 1.0 / tz
    inv_z2 = inv_z * inv_z
    d_t = np.zeros((m, 3))
    d_t[:, 0] = gjac[:, 0, 2] * (-fx * inv_z2) + d_mean[:, 0] * fx * inv_z
    d_t[:, 1] = gjac[:, 1, 2] * (-fy * inv_z2) + d_mean[:, 1] * fy * inv_z
    d_t[:, 2] = (
        gjac[:, 0, 0] * (-fx * inv_z2)
        + gjac[:, 1, 1] * (-fy * inv_z2)
        + gjac[:, 0, 2] * (2.0 * fx * tx * inv_z2 * inv_z)
        + gjac[:, 1, 2] * (2.0 * fy * ty * inv_z2 * inv_z)
        + d_mean[:, 0] * (-fx * tx * inv_z2)
        + d_mean[:, 1] * (-fy * ty * inv_z2)
    )
    d_center = d_t @ wr

    # Cov3 = R diag(s2) R^T
    grot = 2.0 * np.einsum("mij,mjk->mik", gv3, rot, optimize=True) * s2[:, None, :]
    gdiag = np.einsum("mji,mjk,mki->mi", rot, gv3, rot, optimize=True)
    d_log_scale = gdiag * 2.0 * s2

    d_qn = _rotmat_grad_to_quat(grot, qn)
    # through normalization q_n = q / |q|
    norm = np.linalg.norm(q_raw, axis=1, keepdims=True)
    d_q = (d_qn - qn * np.sum(d_qn * qn, axis=1, keepdims=True)) / norm

    o = splats.opacity.astype(np.float64)
    d_logit = d_op * o * (1.0 - o)

    idx = splats.orig_index
    grads = {
        "centers": np.zeros((n, 3), dtype=F32),
        "rotations": np.zeros((n, 4), dtype=F32),
        "log_scales": np.zeros((n, 3), dtype=F32),
        "opacity_logits": np.zeros(n, dtype=F32),
        "colors": np.zeros((n, 3), dtype=F32),
    }
    grads["centers"][idx] = d_center.astype(F32)
    grads["rotations"][idx] = d_q.astype(F32)
    grads["log_scales"][idx] = d_log_scale.astype(F32)
    grads["opacity_logits"][idx] = d_logit.astype(F32)
    grads["colors"][idx] = d_col.astype(F32)
    return grads


def _rotmat_grad_to_quat(grot, qn):
    """Contract dL/dR with dR/dq for unit quaternions (w,x,y,z)."""
    w, x, y, z = qn[:, 0], qn[:, 1], qn[:, 2], qn[:, 3]
    zeros = np.zeros_like(w)

    def mat(rows):
        return 2.0 * np.stack([np.stack(r, axis=-1) for r in rows], axis=-2)

    dr_dw = mat([[zeros, -z, y], [z, zeros, -x], [-y, x, zeros]])
    dr_dx = mat([[zeros, y, z], [y, -2 * x, -w], [z, w, -2 * x]])
    dr_dy = mat([[-2 * y, x, w], [x, zeros, z], [-w, z, -2 * y]])
    dr_dz = mat([[-2 * z, -w, x], [w, -2 * z, y], [x, y, zeros]])
    return np.stack(
        [
            np.einsum("mij,mij->m", grot, dr_dw, optimize=True),
            np.einsum("mij,mij->m", grot, dr_dx, optimize=True),
            np.einsum("mij,mij->m", grot, dr_dy, optimize=True),
            np.einsum("mij,mij->m", grot, dr_dz, optimize=True),
        ],
        axis=1,
    )


def render(cloud, cam, background, transmittance_out=None):
    """Tape-recorded differentiable render.  Returns (image Tensor, aux)."""
    splats = project(cloud, cam)
    for arr in (splats.mean2d, splats.cov_abc, splats.opacity, splats.color):
        if not np.isfinite(arr).all():
            raise NumericError("non-finite values in projected splats")
    img, aux, state = rasterize(
        splats, cam, background, keep_state=True, transmittance_out=transmittance_out
    )
    inputs = tuple(cloud.params())

    def bwd(g):
        grads = rasterize_backward(state, g)
        return tuple(grads[name] for name in type(cloud).ATTRS)

    out = make_op(img, inputs, bwd, "render")
    return out, aux
