"""The combined objective: photometric + silhouette-Chamfer + inverse-depth.

All three terms are differentiated analytically w.r.t. the target pose, the
per-source relative poses, and the style vector. Visibility (which points
are visible and which output pixel each one owns) is recomputed per
evaluation by the caller but treated as constant under differentiation;
gradients flow only through projection, bilinear sampling, and the
per-point inverse depths.

Parameter vector layout: [omega0 (3) | t0 (3) | domega_l, dt_l per source
frame (6 each) | s (S)].
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .errors import DegenerateObjectiveError
from .geometry import (
    MIN_DEPTH,
    exp_rotation,
    invdepth_jacobian,
    left_jacobian,
    pixel_jacobian,
)
from .renderer import MapSampler, mask_pixels, render_view, sample


@dataclass
class ObjectiveConfig:
    """Term weights and Huber knees (RGB values are unnormalized, [0, 255]).

    ``photometric_mask_erosion``: photometric samples whose bilinear stencil
    leaves the input mask eroded by this many pixels are dropped (in either
    frame), like out-of-bounds samples. Object/background blends otherwise
    dominate the term on small objects. 0 disables the trim.
    """

    lambda1: float = 0.1
    lambda2: float = 1000.0
    delta1: float = 100.0
    delta2: float = 10.0
    chamfer_empty_penalty: float = 1e6
    mask_pixel_cap: int = 4096
    photometric_mask_erosion: int = 1

    def __post_init__(self):
        for name in ("lambda1", "lambda2", "delta1", "delta2"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")


@dataclass
class LossBreakdown:
    l_ph: float
    l_cd: float
    l_invd: float
    total: float
    residual_counts: dict = field(default_factory=dict)
    flags: list = field(default_factory=list)
    alpha: float = None  # scale in effect when the row was recorded


def huber(r, delta: float):
    """Robust penalty: r^2/2 below the knee, linear above. r must be >= 0."""
    if delta <= 0:
        raise ValueError("Huber knee must be positive")
    r = np.asarray(r, dtype=float)
    out = np.where(r <= delta, 0.5 * r * r, delta * (r - 0.5 * delta))
    return float(out) if out.ndim == 0 else out


def huber_weight(r, delta: float):
    """d huber / dr divided by r: 1 in the quadratic branch, delta/r above."""
    r = np.asarray(r, dtype=float)
    return np.where(r > delta, delta / np.maximum(r, 1e-300), 1.0)


def chamfer_term(u1: np.ndarray, u2: np.ndarray):
    """Symmetric squared-NN sum between two 2-D point sets.

    Returns (value, grad_u2): gradients flow only to ``u2`` (``u1`` is data).
    """
    u1 = np.asarray(u1, dtype=float).reshape(-1, 2)
    u2 = np.asarray(u2, dtype=float).reshape(-1, 2)
    if u1.shape[0] == 0 or u2.shape[0] == 0:
        raise ValueError("Chamfer needs both sets nonempty")
    tree2 = cKDTree(u2)
    d12, nn12 = tree2.query(u1)
    tree1 = cKDTree(u1)
    d21, nn21 = tree1.query(u2)
    value = float(np.sum(d12 * d12) + np.sum(d21 * d21))
    grad = 2.0 * (u2 - u1[nn21])
    np.add.at(grad, nn12, 2.0 * (u2[nn12] - u1))
    return value, grad


class _GradAccum:
    """Accumulates y-space (camera-frame) gradients into parameter blocks."""

    def __init__(self, geom):
        self.geom = geom
        L, S, N = geom.num_frames, geom.num_modes, geom.num_points
        self.g_omega0 = np.zeros(3)
        self.g_t0 = np.zeros(3)
        self.g_domega = np.zeros((L - 1, 3))
        self.g_dt = np.zeros((L - 1, 3))
        self.gx = np.zeros((N, 3))

    def add(self, frame: int, idx: np.ndarray, gys: np.ndarray, scale: float = 1.0):
        """Add scale * d(term)/d(y) for camera points y of cloud[idx] in ``frame``."""
        if idx.size == 0:
            return
        g = gys * scale
        gsum = g.sum(axis=0)
        geom = self.geom
        self.g_t0 += gsum
        if frame == 0:
            self.g_omega0 += geom.J0.T @ np.cross(geom.rot[0][idx], g).sum(axis=0)
            self.gx[idx] += g @ geom.R[0]
        else:
            self.g_dt[frame - 1] += gsum
            self.g_domega[frame - 1] += geom.JD[frame].T @ np.cross(
                geom.rot[frame][idx], g
            ).sum(axis=0)
            g0 = g @ geom.D[frame]  # pull back through the relative rotation
            self.g_omega0 += geom.J0.T @ np.cross(geom.rot[0][idx], g0).sum(axis=0)
            self.gx[idx] += g @ geom.R[frame]

    def to_vector(self) -> np.ndarray:
        geom = self.geom
        g_s = np.einsum("knc,nc->k", geom.scaled_modes, self.gx)
        parts = [self.g_omega0, self.g_t0]
        for l in range(geom.num_frames - 1):
            parts.append(self.g_domega[l])
            parts.append(self.g_dt[l])
        parts.append(g_s)
        return np.concatenate(parts)


class _SceneGeom:
    """Per-evaluation geometry shared by the loss terms."""

    def __init__(self, cloud, omega0, t0, domegas, dts, scaled_modes):
        L = domegas.shape[0] + 1
        self.num_frames = L
        self.num_points = cloud.shape[0]
        self.num_modes = scaled_modes.shape[0]
        self.cloud = cloud
        self.scaled_modes = scaled_modes
        self.J0 = left_jacobian(omega0)
        R0 = exp_rotation(omega0)
        self.R = [R0]
        self.D = [np.eye(3)]
        self.JD = [np.eye(3)]
        self.t = [t0]
        rot0 = cloud @ R0.T
        self.rot = [rot0]
        for l in range(1, L):
            Dl = exp_rotation(domegas[l - 1])
            self.D.append(Dl)
            self.JD.append(left_jacobian(domegas[l - 1]))
            self.R.append(Dl @ R0)
            self.t.append(dts[l - 1] + t0)
            self.rot.append(rot0 @ Dl.T)

    def cam(self, frame: int, idx=None) -> np.ndarray:
        r = self.rot[frame] if idx is None else self.rot[frame][idx]
        return r + self.t[frame]


class Objective:
    """Binds one sequence (images, masks, external depth) to the loss model."""

    def __init__(self, seq, basis, config: ObjectiveConfig = None, upsample: int = 4):
        self.seq = seq
        self.basis = basis
        self.config = config or ObjectiveConfig()
        self.upsample = upsample
        self.K = seq.intrinsics
        self.images = [fr.image for fr in seq.frames]
        self.mask_pts = []
        self.mask_trees = []
        self.supports = []
        erosion = self.config.photometric_mask_erosion
        for fr in seq.frames:
            if fr.mask is None or not np.any(fr.mask):
                self.mask_pts.append(None)
                self.mask_trees.append(None)
                self.supports.append(None)
            else:
                pts = mask_pixels(fr.mask, cap=self.config.mask_pixel_cap)
                self.mask_pts.append(pts)
                self.mask_trees.append(cKDTree(pts))
                if erosion > 0:
                    from scipy import ndimage

                    self.supports.append(
                        ndimage.binary_erosion(fr.mask, iterations=erosion)
                    )
                else:
                    self.supports.append(None)
        ext = seq.external
        self.ext_maps = None
        self.ext_samplers = None
        if ext is not None and ext.invdepth_maps is not None:
            self.ext_maps = [
                np.asarray(m, dtype=float) if m is not None else None
                for m in ext.invdepth_maps
            ]
            self.ext_samplers = [
                MapSampler(m) if m is not None else None for m in self.ext_maps
            ]
        self.num_frames = len(seq)
        self.num_modes = basis.num_modes
        self.num_params = 6 * self.num_frames + self.num_modes
        self._scaled_modes = basis.scaled_modes()

    # -- parameter packing ---------------------------------------------------

    def pack(self, p0, deltas, style) -> np.ndarray:
        parts = [p0.omega, p0.t]
        for d in deltas:
            parts.append(d.omega)
            parts.append(d.t)
        s = style.s if hasattr(style, "s") else np.asarray(style, float)
        parts.append(s)
        return np.concatenate(parts)

    def unpack(self, params: np.ndarray):
        L = self.num_frames
        omega0 = params[0:3]
        t0 = params[3:6]
        blocks = params[6 : 6 * L].reshape(L - 1, 6)
        domegas = blocks[:, :3]
        dts = blocks[:, 3:]
        s = params[6 * L :]
        return omega0, t0, domegas, dts, s

    def generate_cloud(self, s: np.ndarray) -> np.ndarray:
        return self.basis.mean + np.tensordot(s, self._scaled_modes, axes=1)

    def _geom(self, params) -> _SceneGeom:
        omega0, t0, domegas, dts, s = self.unpack(params)
        cloud = self.generate_cloud(s)
        return _SceneGeom(cloud, omega0, t0, domegas, dts, self._scaled_modes)

    def compute_views(self, params) -> list:
        """Raytrace every frame at the given parameters (the visibility
        structure that gradients treat as constant)."""
        geom = self._geom(params)
        return [
            render_view(geom.cloud, geom.R[l], geom.t[l], self.K, self.upsample)
            for l in range(self.num_frames)
        ]

    # -- loss terms ------------------------------------------------------------

    def photometric(self, geom: _SceneGeom, views):
        value = 0.0
        count_total = 0
        accum = _GradAccum(geom)
        d1 = self.config.delta1
        # Per-frame visibility lookup; a sample must be visible in both
        # frames of a pair or it reads content from an occluding surface.
        vis = []
        for v in views:
            mask = np.zeros(geom.num_points, dtype=bool)
            mask[v.visible_idx] = True
            vis.append(mask)
        for l in range(1, self.num_frames):
            for src_frame, dst_frame in ((0, l), (l, 0)):
                idx = views[src_frame].visible_idx
                if idx.size == 0:
                    continue
                cam_a = geom.cam(src_frame, idx)
                cam_b = geom.cam(dst_frame, idx)
                za = cam_a[:, 2] > MIN_DEPTH
                zb = cam_b[:, 2] > MIN_DEPTH
                ua = self._pixels(cam_a, za)
                ub = self._pixels(cam_b, zb)
                ca, ja, ia = sample(self.images[src_frame], ua)
                cb, jb, ib = sample(self.images[dst_frame], ub)
                usable = za & zb & ia & ib & vis[dst_frame][idx]
                usable &= self._support_ok(src_frame, ua) & self._support_ok(dst_frame, ub)
                n_use = int(np.count_nonzero(usable))
                if n_use == 0:
                    continue
                r = ca[usable] - cb[usable]
                norms = np.linalg.norm(r, axis=1)
                value += float(np.sum(huber(norms, d1))) / n_use
                count_total += n_use
                w = huber_weight(norms, d1) / n_use
                dr = r * w[:, None]  # dL/dr per residual
                iu = idx[usable]
                ga = np.einsum("mc,mcp->mp", dr, ja[usable])
                gb = -np.einsum("mc,mcp->mp", dr, jb[usable])
                gya = np.einsum("mp,mpc->mc", ga, pixel_jacobian(cam_a[usable], self.K))
                gyb = np.einsum("mp,mpc->mc", gb, pixel_jacobian(cam_b[usable], self.K))
                accum.add(src_frame, iu, gya)
                accum.add(dst_frame, iu, gyb)
        if count_total == 0:
            raise DegenerateObjectiveError(
                "no usable photometric residual in any frame pair"
            )
        return value, accum.to_vector(), count_total

    def _pixels(self, cam: np.ndarray, zvalid: np.ndarray) -> np.ndarray:
        z = np.where(zvalid, cam[:, 2], 1.0)
        u = np.empty((cam.shape[0], 2))
        u[:, 0] = self.K.fx * cam[:, 0] / z + self.K.cx
        u[:, 1] = self.K.fy * cam[:, 1] / z + self.K.cy
        # Park invalid rows far outside so they sample out of bounds.
        u[~zvalid] = -1e6
        return u

    def _support_ok(self, frame: int, uv: np.ndarray) -> np.ndarray:
        """True where the full bilinear stencil lies inside the frame's
        eroded mask (all-true when the frame carries no mask)."""
        support = self.supports[frame]
        if support is None:
            return np.ones(uv.shape[0], dtype=bool)
        H, W = support.shape
        x0 = np.clip(np.floor(uv[:, 0]), 0, W - 2).astype(np.int64)
        y0 = np.clip(np.floor(uv[:, 1]), 0, H - 2).astype(np.int64)
        return (
            support[y0, x0]
            & support[y0, x0 + 1]
            & support[y0 + 1, x0]
            & support[y0 + 1, x0 + 1]
        )

    def chamfer(self, geom: _SceneGeom, views):
        value = 0.0
        count_total = 0
        flags = []
        accum = _GradAccum(geom)
        L = self.num_frames
        inv_l = 1.0 / L
        for l in range(L):
            pts1 = self.mask_pts[l]
            if pts1 is None:
                continue
            idx = views[l].visible_idx
            if idx.size == 0:
                value += self.config.chamfer_empty_penalty * inv_l
                flags.append(f"chamfer-empty-frame-{l}")
                continue
            cam = geom.cam(l, idx)
            zvalid = cam[:, 2] > MIN_DEPTH
            idx = idx[zvalid]
            cam = cam[zvalid]
            if idx.size == 0:
                value += self.config.chamfer_empty_penalty * inv_l
                flags.append(f"chamfer-empty-frame-{l}")
                continue
            u2 = self._pixels(cam, np.ones(len(cam), dtype=bool))
            frame_value, grad_u2 = self._chamfer_frame(l, pts1, u2)
            value += frame_value * inv_l
            count_total += pts1.shape[0] + u2.shape[0]
            gy = np.einsum("mp,mpc->mc", grad_u2, pixel_jacobian(cam, self.K))
            accum.add(l, idx, gy, scale=inv_l)
        return value, accum.to_vector(), count_total, flags

    def _chamfer_frame(self, l: int, pts1, u2):
        tree2 = cKDTree(u2)
        d12, nn12 = tree2.query(pts1)
        d21, nn21 = self.mask_trees[l].query(u2)
        value = float(np.sum(d12 * d12) + np.sum(d21 * d21))
        grad = 2.0 * (u2 - pts1[nn21])
        np.add.at(grad, nn12, 2.0 * (u2[nn12] - pts1))
        return value, grad

    def invdepth(self, geom: _SceneGeom, views, alpha: float):
        """External-depth consistency at the visible points.

        The external map is sampled bilinearly at each visible point's
        continuous projection (full stencil valid), which keeps the term C1
        in the pose and shape variables; gradients flow both through the
        sampled map position and through the point's inverse depth.
        """
        value = 0.0
        count_total = 0
        flags = []
        accum = _GradAccum(geom)
        if self.ext_samplers is None:
            return 0.0, accum.to_vector(), 0, ["invdepth-no-external"]
        L = self.num_frames
        inv_l = 1.0 / L
        d2 = self.config.delta2
        for l in range(L):
            ext = self.ext_samplers[l]
            if ext is None:
                continue
            idx = views[l].visible_idx
            if idx.size == 0:
                continue
            cam = geom.cam(l, idx)
            zvalid = cam[:, 2] > MIN_DEPTH
            u = self._pixels(cam, zvalid)
            d_ext, d_grad, ok = ext.sample(u)
            overlap = zvalid & ok
            n_over = int(np.count_nonzero(overlap))
            if n_over == 0:
                flags.append(f"invdepth-no-overlap-frame-{l}")
                continue
            cam_o = cam[overlap]
            d_model = 1.0 / cam_o[:, 2]
            r = d_ext[overlap] - alpha * d_model
            absr = np.abs(r)
            value += float(np.sum(huber(absr, d2))) / n_over * inv_l
            count_total += n_over
            # d huber(|r|) / dr = min(|r|, delta2) * sign(r)
            w = np.minimum(absr, d2) * np.sign(r)
            # through the sampled map position
            gu = w[:, None] * d_grad[overlap]
            gy = np.einsum("mp,mpc->mc", gu, pixel_jacobian(cam_o, self.K))
            # through the point's own inverse depth
            gy += (w * (-alpha))[:, None] * invdepth_jacobian(cam_o)
            accum.add(l, idx[overlap], gy, scale=inv_l / n_over)
        return value, accum.to_vector(), count_total, flags

    # -- combined ----------------------------------------------------------------

    def evaluate(self, params, alpha: float = 1.0, views=None):
        """Loss breakdown and gradient at ``params``.

        Pass ``views`` to freeze visibility (finite-difference validation);
        otherwise visibility is recomputed here, at these parameters.
        """
        params = np.asarray(params, dtype=float)
        if params.shape != (self.num_params,):
            raise ValueError(
                f"expected {self.num_params} parameters, got shape {params.shape}"
            )
        if views is None:
            views = self.compute_views(params)
        geom = self._geom(params)
        l_ph, g_ph, n_ph = self.photometric(geom, views)
        l_cd, g_cd, n_cd, flags_cd = self.chamfer(geom, views)
        l_invd, g_invd, n_invd, flags_invd = self.invdepth(geom, views, alpha)
        cfg = self.config
        total = l_ph + cfg.lambda1 * l_cd + cfg.lambda2 * l_invd
        grad = g_ph + cfg.lambda1 * g_cd + cfg.lambda2 * g_invd
        breakdown = LossBreakdown(
            l_ph=l_ph,
            l_cd=l_cd,
            l_invd=l_invd,
            total=total,
            residual_counts={
                "photometric": n_ph,
                "chamfer": n_cd,
                "invdepth": n_invd,
            },
            flags=flags_cd + flags_invd,
        )
        return breakdown, grad
