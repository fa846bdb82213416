"""Pseudo-raytracing reprojection of point clouds.

Points are splatted to the nearest cell of an inverse-depth buffer enlarged
by a factor ``upsample``; U x U max-pooling then keeps, per output pixel,
the point with the largest inverse depth. With nearest-cell splatting the
pooled argmax equals a per-output-pixel argmax over the points that land in
that pixel's footprint, so the pass is computed directly at output
resolution. Ties go to the lowest point index.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import Intrinsics, Twist, exp_rotation, project_points


@dataclass
class RenderedView:
    """Visibility result of one render.

    ``visible_idx[k]`` owns output pixel ``owner_pixels[k]`` (col, row) and
    projects to the continuous coordinate ``pixels[k]``. ``invdepth_map`` is
    zero outside the silhouette.
    """

    visible_idx: np.ndarray
    pixels: np.ndarray
    invdepth: np.ndarray
    owner_pixels: np.ndarray
    invdepth_map: np.ndarray
    silhouette: np.ndarray

    @property
    def empty(self) -> bool:
        return self.visible_idx.size == 0


@dataclass
class SampledImage:
    """RGB image (values in [0, 255]) with a precomputed gradient field.

    ``grad[..., 0]`` holds forward differences along x (columns),
    ``grad[..., 1]`` along y (rows); together they give the exact derivative
    of the bilinear interpolant, so sampling Jacobians agree with finite
    differences of :func:`sample` to machine precision inside each cell.
    """

    data: np.ndarray
    grad: np.ndarray = field(default=None)

    def __post_init__(self):
        data = np.asarray(self.data, dtype=float)
        if data.ndim != 3 or data.shape[2] != 3:
            raise ValueError(f"expected HxWx3 image, got shape {data.shape}")
        if not np.all(np.isfinite(data)):
            raise ValueError("image values must be finite")
        object.__setattr__(self, "data", data)
        if self.grad is None:
            gx = np.empty_like(data)
            gx[:, :-1] = data[:, 1:] - data[:, :-1]
            gx[:, -1] = gx[:, -2]
            gy = np.empty_like(data)
            gy[:-1] = data[1:] - data[:-1]
            gy[-1] = gy[-2]
            object.__setattr__(self, "grad", np.stack([gx, gy], axis=-1))

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]


def splat_pixels(pixels: np.ndarray, width: int, height: int):
    """Output pixel of each continuous coordinate; (cols, rows, inbounds)."""
    cols = np.floor(pixels[:, 0] + 0.5).astype(np.int64)
    rows = np.floor(pixels[:, 1] + 0.5).astype(np.int64)
    inbounds = (cols >= 0) & (cols < width) & (rows >= 0) & (rows < height)
    return cols, rows, inbounds


def raytrace(
    points: np.ndarray, pose: Twist, K: Intrinsics, upsample: int = 4
) -> RenderedView:
    """Render visibility and an inverse-depth map for a point cloud.

    ``upsample`` (U >= 1) is the splat-buffer enlargement factor; see the
    module docstring for why the result does not depend on it.
    """
    return render_view(points, exp_rotation(pose.omega), pose.t, K, upsample)


def render_view(
    points: np.ndarray, R: np.ndarray, t: np.ndarray, K: Intrinsics, upsample: int = 4
) -> RenderedView:
    """:func:`raytrace` with the extrinsic given as (R, t) directly."""
    if upsample < 1 or int(upsample) != upsample:
        raise ValueError("upsample factor must be a positive integer")
    if hasattr(points, "points"):
        points = points.points
    points = np.asarray(points, dtype=float)
    if points.ndim != 2 or points.shape[1] != 3 or points.shape[0] == 0:
        raise ValueError(f"expected nonempty Nx3 cloud, got shape {points.shape}")

    pixels, invdepth, valid = project_points(points, R, t, K)
    cols, rows, inbounds = splat_pixels(pixels, K.width, K.height)
    candidate = valid & inbounds

    H, W = K.height, K.width
    invdepth_map = np.zeros((H, W))
    silhouette = np.zeros((H, W), dtype=bool)

    idx = np.flatnonzero(candidate)
    if idx.size == 0:
        return RenderedView(
            visible_idx=np.zeros(0, dtype=np.int64),
            pixels=np.zeros((0, 2)),
            invdepth=np.zeros(0),
            owner_pixels=np.zeros((0, 2), dtype=np.int64),
            invdepth_map=invdepth_map,
            silhouette=silhouette,
        )

    pid = rows[idx] * W + cols[idx]
    # Sort by pixel, then inverse depth descending, then index ascending;
    # the first entry per pixel is the visible owner.
    order = np.lexsort((idx, -invdepth[idx], pid))
    pid_sorted = pid[order]
    first = np.ones(order.size, dtype=bool)
    first[1:] = pid_sorted[1:] != pid_sorted[:-1]
    winners = idx[order[first]]

    owner_cols = cols[winners]
    owner_rows = rows[winners]
    invdepth_map[owner_rows, owner_cols] = invdepth[winners]
    silhouette[owner_rows, owner_cols] = True

    # Report owners in ascending point-index order.
    reorder = np.argsort(winners, kind="stable")
    winners = winners[reorder]
    return RenderedView(
        visible_idx=winners,
        pixels=pixels[winners],
        invdepth=invdepth[winners],
        owner_pixels=np.stack([owner_cols[reorder], owner_rows[reorder]], axis=1),
        invdepth_map=invdepth_map,
        silhouette=silhouette,
    )


def sample(image: SampledImage, uv: np.ndarray):
    """Bilinearly sample colors and color Jacobians at continuous pixels.

    Returns (colors (M,3), jac (M,3,2), inbounds (M,)). A sample is in
    bounds when all four bilinear neighbors exist; out-of-bounds rows are
    flagged (and computed from clamped neighbors) so callers can drop them.
    """
    uv = np.atleast_2d(np.asarray(uv, dtype=float))
    H, W = image.height, image.width
    x, y = uv[:, 0], uv[:, 1]
    inbounds = (x >= 0.0) & (x <= W - 1.0) & (y >= 0.0) & (y <= H - 1.0)

    x0 = np.clip(np.floor(x), 0, W - 2).astype(np.int64)
    y0 = np.clip(np.floor(y), 0, H - 2).astype(np.int64)
    fx = np.clip(x - x0, 0.0, 1.0)[:, None]
    fy = np.clip(y - y0, 0.0, 1.0)[:, None]

    d = image.data
    c00 = d[y0, x0]
    c01 = d[y0, x0 + 1]
    c10 = d[y0 + 1, x0]
    c11 = d[y0 + 1, x0 + 1]
    top = c00 + (c01 - c00) * fx
    bot = c10 + (c11 - c10) * fx
    colors = top + (bot - top) * fy

    g = image.grad
    jac = np.empty((uv.shape[0], 3, 2))
    # d/dx interpolates the x forward differences along y (and vice versa);
    # this is the exact in-cell derivative of the bilinear interpolant.
    jac[:, :, 0] = g[y0, x0, :, 0] + (g[y0 + 1, x0, :, 0] - g[y0, x0, :, 0]) * fy
    jac[:, :, 1] = g[y0, x0, :, 1] + (g[y0, x0 + 1, :, 1] - g[y0, x0, :, 1]) * fx

    return colors, jac, inbounds


class MapSampler:
    """Bilinear sampler over a single-channel map with zero-as-invalid holes.

    A sample is valid only when its full 2x2 stencil is valid and in bounds.
    ``sample`` returns (values, gradients (M,2), valid) with the exact
    in-cell derivative of the interpolant, as in :func:`sample`.
    """

    def __init__(self, data: np.ndarray):
        data = np.asarray(data, dtype=float)
        if data.ndim != 2:
            raise ValueError("MapSampler expects a 2-D map")
        self.data = data
        self.valid = data != 0
        gx = np.zeros_like(data)
        gx[:, :-1] = data[:, 1:] - data[:, :-1]
        gx[:, -1] = gx[:, -2]
        gy = np.zeros_like(data)
        gy[:-1] = data[1:] - data[:-1]
        gy[-1] = gy[-2]
        self.gx = gx
        self.gy = gy

    def sample(self, uv: np.ndarray):
        uv = np.atleast_2d(np.asarray(uv, dtype=float))
        H, W = self.data.shape
        x, y = uv[:, 0], uv[:, 1]
        inb = (x >= 0.0) & (x <= W - 1.0) & (y >= 0.0) & (y <= H - 1.0)
        x0 = np.clip(np.floor(x), 0, W - 2).astype(np.int64)
        y0 = np.clip(np.floor(y), 0, H - 2).astype(np.int64)
        fx = np.clip(x - x0, 0.0, 1.0)
        fy = np.clip(y - y0, 0.0, 1.0)
        d = self.data
        top = d[y0, x0] + (d[y0, x0 + 1] - d[y0, x0]) * fx
        bot = d[y0 + 1, x0] + (d[y0 + 1, x0 + 1] - d[y0 + 1, x0]) * fx
        values = top + (bot - top) * fy
        grad = np.empty((uv.shape[0], 2))
        grad[:, 0] = self.gx[y0, x0] + (self.gx[y0 + 1, x0] - self.gx[y0, x0]) * fy
        grad[:, 1] = self.gy[y0, x0] + (self.gy[y0, x0 + 1] - self.gy[y0, x0]) * fx
        ok = (
            inb
            & self.valid[y0, x0]
            & self.valid[y0, x0 + 1]
            & self.valid[y0 + 1, x0]
            & self.valid[y0 + 1, x0 + 1]
        )
        return values, grad, ok


def silhouette_pixels(view: RenderedView) -> np.ndarray:
    """(K,2) array of (x, y) pixel centers where the silhouette is true."""
    rows, cols = np.nonzero(view.silhouette)
    return np.stack([cols.astype(float), rows.astype(float)], axis=1)


def mask_pixels(mask: np.ndarray, cap: int = 4096) -> np.ndarray:
    """(K,2) pixel centers of a boolean mask, subsampled by uniform stride.

    Keeps the result under ``cap`` points so Chamfer evaluation stays
    tractable at large resolutions.
    """
    rows, cols = np.nonzero(np.asarray(mask, dtype=bool))
    pts = np.stack([cols.astype(float), rows.astype(float)], axis=1)
    if cap and pts.shape[0] > cap:
        stride = int(np.ceil(pts.shape[0] / cap))
        pts = pts[::stride]
    return pts
