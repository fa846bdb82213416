"""Synthetic small-motion sequences with full ground truth.

The scene is a procedurally deformed blob family (corresponded by
construction) colored by a smooth 3-D value-noise field. Frames orbit the
object over a configurable total rotation. Ground-truth images are drawn
from a densified version of the true cloud, supersampled and noise-dosed,
so the optimizer never exactly inverts its own forward model; ground-truth
inverse-depth maps come from the renderer on the true generated cloud.

A fabricated external-PBA result (ground-truth poses pushed through a
planted similarity, with optional rotational noise, plus scaled depth maps
with planted holes) exercises the alignment and initialization paths.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .alignment import ExternalPBAResult
from .dataio import (
    write_external,
    write_image_png,
    write_intrinsics,
    write_json,
    write_mask_png,
    write_pfm,
    write_poses,
)
from .errors import InvalidSpecError
from .geometry import Intrinsics, Twist, compose, exp_rotation, log_rotation, look_at_pose
from .renderer import SampledImage, render_view
from .shapespace import PointCloud, ShapeBasis, StyleVector, fit_basis, generate


# ---------------------------------------------------------------------------
# Procedural shape family
# ---------------------------------------------------------------------------


def _fibonacci_directions(n: int) -> np.ndarray:
    """Deterministic, roughly uniform unit directions."""
    i = np.arange(n, dtype=float)
    phi = (1.0 + np.sqrt(5.0)) / 2.0
    z = 1.0 - (2.0 * i + 1.0) / n
    theta = 2.0 * np.pi * i / phi
    r = np.sqrt(np.maximum(0.0, 1.0 - z * z))
    return np.stack([r * np.cos(theta), r * np.sin(theta), z], axis=1)


_BUMP_FUNCS = (
    lambda d: d[:, 0] ** 2,
    lambda d: d[:, 1] ** 2,
    lambda d: d[:, 2] ** 2,
    lambda d: d[:, 0] * d[:, 1],
    lambda d: d[:, 0] * d[:, 2],
    lambda d: d[:, 1] * d[:, 2],
    lambda d: d[:, 0] ** 3,
    lambda d: d[:, 2],
)


def exemplar_cloud(num_points: int, psi: np.ndarray, diameter: float = 1.0) -> PointCloud:
    """One member of the corresponded blob family.

    ``psi`` holds up to 8 smooth radial-modulation coefficients; points are a
    fixed direction sampling scaled by an elongated base shape.
    """
    dirs = _fibonacci_directions(num_points)
    modulation = np.ones(num_points)
    for coeff, f in zip(psi, _BUMP_FUNCS):
        modulation += coeff * f(dirs)
    modulation = np.clip(modulation, 0.35, 2.0)
    axes = np.array([0.5, 0.26, 0.18]) * diameter
    return PointCloud(points=dirs * axes * modulation[:, None])


def sample_exemplar_clouds(
    num_points: int, count: int, seed: int = 0, diameter: float = 1.0, spread: float = 0.18
):
    rng = np.random.default_rng([seed, 7])
    return [
        exemplar_cloud(num_points, rng.normal(0.0, spread, len(_BUMP_FUNCS)), diameter)
        for _ in range(count)
    ]


def default_basis(
    num_points: int = 2000, num_modes: int = 8, seed: int = 0, diameter: float = 1.0,
    exemplar_count: int = 40,
) -> ShapeBasis:
    clouds = sample_exemplar_clouds(num_points, exemplar_count, seed=seed, diameter=diameter)
    return fit_basis(clouds, num_modes)


# ---------------------------------------------------------------------------
# Smooth 3-D color field (value noise, smoothstep interpolation)
# ---------------------------------------------------------------------------


class ColorField:
    """Periodic trilinear value noise over a seeded RGB lattice."""

    def __init__(self, seed: int = 0, frequency: float = 3.0, scale: float = 1.0,
                 lattice: int = 8, base: float = 128.0, amplitude: float = 95.0,
                 octaves: int = 2):
        rng = np.random.default_rng([seed, 11])
        self.lattice = lattice
        self.values = rng.uniform(-1.0, 1.0, (octaves, lattice, lattice, lattice, 3))
        self.frequency = frequency
        self.scale = scale
        self.base = base
        self.amplitude = amplitude
        self.octaves = octaves

    def __call__(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points, dtype=float)
        total = np.zeros((points.shape[0], 3))
        weight = 1.0
        wsum = 0.0
        for o in range(self.octaves):
            q = points * (self.frequency * (2.0**o) / self.scale)
            total += weight * self._interp(self.values[o], q)
            wsum += weight
            weight *= 0.5
        return np.clip(self.base + self.amplitude * total / wsum, 0.0, 255.0)

    def _interp(self, lattice: np.ndarray, q: np.ndarray) -> np.ndarray:
        n = self.lattice
        q0 = np.floor(q).astype(np.int64)
        f = q - q0
        f = f * f * (3.0 - 2.0 * f)  # smoothstep keeps the field C1
        out = np.zeros((q.shape[0], 3))
        for corner in range(8):
            ox, oy, oz = corner & 1, (corner >> 1) & 1, (corner >> 2) & 1
            idx = (
                (q0[:, 0] + ox) % n,
                (q0[:, 1] + oy) % n,
                (q0[:, 2] + oz) % n,
            )
            w = (
                (f[:, 0] if ox else 1.0 - f[:, 0])
                * (f[:, 1] if oy else 1.0 - f[:, 1])
                * (f[:, 2] if oz else 1.0 - f[:, 2])
            )
            out += w[:, None] * lattice[idx]
        return out


# ---------------------------------------------------------------------------
# Cloud densification for ground-truth imaging
# ---------------------------------------------------------------------------


def build_densifier(reference: np.ndarray, per_point: int = 2, samples: int = 12,
                    neighbors: int = 5, seed: int = 0):
    """Fixed barycentric interpolation plan over near-neighbor triangles.

    Returns (tri_idx (T,3), weights (T*samples, 3), owner (T*samples,)) so
    the densified cloud is a fixed affine function of any corresponded cloud.
    """
    from scipy.spatial import cKDTree

    rng = np.random.default_rng([seed, 23])
    n = reference.shape[0]
    _, knn = cKDTree(reference).query(reference, k=neighbors + 1)
    tris = []
    for i in range(n):
        for _ in range(per_point):
            j, k = rng.choice(knn[i, 1:], size=2, replace=False)
            tris.append((i, int(j), int(k)))
    tri_idx = np.array(tris, dtype=np.int64)
    raw = rng.random((tri_idx.shape[0] * samples, 3))
    weights = raw / raw.sum(axis=1, keepdims=True)
    owner = np.repeat(np.arange(tri_idx.shape[0]), samples)
    return tri_idx, weights, owner


def densify(points: np.ndarray, plan) -> np.ndarray:
    """Barycentric samples re-projected to the interpolated radius.

    Plain chord interpolation sags inside a convex shell by O(spacing^2 /
    curvature); for the star-shaped family, interpolating the radius about
    the centroid instead keeps densified points on the surface, which keeps
    the color field consistent across views.
    """
    tri_idx, weights, owner = plan
    centroid = points.mean(axis=0)
    centered = points - centroid
    corners = centered[tri_idx[owner]]  # (M, 3, 3)
    chord = np.einsum("mk,mkc->mc", weights, corners)
    norms = np.linalg.norm(chord, axis=1)
    norms = np.where(norms < 1e-12, 1.0, norms)
    radii = np.einsum("mk,mk->m", weights, np.linalg.norm(corners, axis=2))
    return centroid + chord * (radii / norms)[:, None]


# ---------------------------------------------------------------------------
# Ground-truth image rendering (supersampled splat of the dense cloud)
# ---------------------------------------------------------------------------


def _fine_intrinsics(K: Intrinsics, ss: int) -> Intrinsics:
    return Intrinsics(
        fx=K.fx * ss,
        fy=K.fy * ss,
        cx=K.cx * ss + (ss - 1) / 2.0,
        cy=K.cy * ss + (ss - 1) / 2.0,
        width=K.width * ss,
        height=K.height * ss,
    )


def render_image(points, colors, R, t, K: Intrinsics, supersample: int = 2,
                 background: float = 16.0):
    """Color image + coverage mask from a dense colored cloud.

    The cloud is splatted at ``supersample`` x resolution with nearest-point
    visibility; interior gaps are closed by nearest-lit-cell fill before
    averaging down. Returns (image (H,W,3), mask (H,W) bool).
    """
    ss = int(supersample)
    fine = render_view(points, R, t, _fine_intrinsics(K, ss), upsample=1)
    Hf, Wf = K.height * ss, K.width * ss
    lit = fine.silhouette
    color_buf = np.full((Hf, Wf, 3), background)
    if fine.visible_idx.size:
        color_buf[fine.owner_pixels[:, 1], fine.owner_pixels[:, 0]] = colors[fine.visible_idx]
    # Close pinholes inside the object, fill them from the nearest lit cell.
    region = ndimage.binary_closing(lit, structure=np.ones((3, 3)), iterations=2)
    holes = region & ~lit
    if np.any(holes):
        _, (ir, ic) = ndimage.distance_transform_edt(~lit, return_indices=True)
        color_buf[holes] = color_buf[ir[holes], ic[holes]]
        lit = lit | holes
    image = color_buf.reshape(K.height, ss, K.width, ss, 3).mean(axis=(1, 3))
    coverage = lit.reshape(K.height, ss, K.width, ss).mean(axis=(1, 3))
    return image, coverage >= 0.5


# ---------------------------------------------------------------------------
# Sequence generation
# ---------------------------------------------------------------------------


@dataclass
class SyntheticSpec:
    basis: ShapeBasis
    style: np.ndarray = None  # drawn from ``seed`` when None
    frames: int = 9
    rotation_deg: float = 30.0
    translation: float = 0.0
    image_size: int = 128
    noise_sigma: float = 2.0
    seed: int = 0
    texture_frequency: float = 3.0
    fill_fraction: float = 0.45
    azimuth_deg: float = 25.0
    elevation_deg: float = 15.0
    distance_factor: float = 2.4
    upsample: int = 4
    gt_upsample: int = None  # defaults to 2 * upsample
    image_supersample: int = 2
    background: float = 16.0
    ext_alpha: float = 1.7
    ext_pose_noise_deg: float = 0.0
    ext_hole_fraction: float = 0.0
    densify_per_point: int = 2
    densify_samples: int = 12

    def __post_init__(self):
        if self.frames < 2:
            raise ValueError("a sequence needs at least two frames")
        if self.gt_upsample is None:
            self.gt_upsample = 2 * self.upsample


@dataclass
class GroundTruth:
    poses: list
    deltas: list
    style: np.ndarray
    cloud: PointCloud
    invdepth_maps: list
    silhouettes: list
    alpha: float
    diameter: float
    color_field: ColorField = None


def _orbit_poses(spec: SyntheticSpec, centroid: np.ndarray, diameter: float):
    az0 = np.deg2rad(spec.azimuth_deg)
    el = np.deg2rad(spec.elevation_deg)
    dist = spec.distance_factor * diameter
    sweep = np.deg2rad(spec.rotation_deg)
    poses = []
    for l in range(spec.frames):
        frac = l / (spec.frames - 1)
        az = az0 + sweep * frac
        pos = centroid + dist * np.array(
            [np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), np.sin(el)]
        )
        pos = pos + np.array([0.0, 0.0, spec.translation * frac])
        poses.append(look_at_pose(pos, target=centroid))
    return poses


def _intrinsics_for(spec: SyntheticSpec, diameter: float) -> Intrinsics:
    size = spec.image_size
    dist = spec.distance_factor * diameter
    # Focal so the object diameter covers fill_fraction of the image width.
    focal = spec.fill_fraction * size * dist / diameter
    c = (size - 1) / 2.0
    return Intrinsics(fx=focal, fy=focal, cx=c, cy=c, width=size, height=size)


def fabricate_external(gt_poses, invdepth_maps, alpha: float, seed: int = 0,
                       pose_noise_deg: float = 0.0, hole_fraction: float = 0.0,
                       offset_scale: float = 0.5) -> ExternalPBAResult:
    """External-PBA stand-in: ground truth mapped through a planted similarity.

    Our camera point y and the external one y' satisfy y = alpha * y', i.e.
    R'_l = R_l Q and t'_l = (R_l b + t_l) / alpha for a planted rigid offset
    (Q, b). Depth maps scale as d' = alpha * d, with a planted hole fraction.
    """
    rng = np.random.default_rng([seed, 31])
    axis = rng.standard_normal(3)
    axis /= np.linalg.norm(axis)
    Q = exp_rotation(axis * rng.uniform(0.3, 1.2))
    b = rng.normal(0.0, offset_scale, 3)
    poses = []
    for pose in gt_poses:
        R = exp_rotation(pose.omega)
        Re = R @ Q
        te = (R @ b + pose.t) / alpha
        if pose_noise_deg > 0:
            naxis = rng.standard_normal(3)
            naxis /= np.linalg.norm(naxis)
            Re = exp_rotation(naxis * np.deg2rad(pose_noise_deg)) @ Re
        poses.append((Re, te))
    maps = None
    if invdepth_maps is not None:
        maps = []
        for m in invdepth_maps:
            ext = alpha * np.asarray(m, dtype=float)
            if hole_fraction > 0:
                # Spatially coherent holes (semi-dense estimators drop
                # regions, not iid pixels); exact fraction of the valid area.
                field = ndimage.gaussian_filter(rng.standard_normal(ext.shape), 3.0)
                valid = ext != 0
                if np.any(valid):
                    cut = np.quantile(field[valid], hole_fraction)
                    ext = np.where(valid & (field < cut), 0.0, ext)
            maps.append(ext)
    return ExternalPBAResult(poses=poses, invdepth_maps=maps)


def generate_sequence(spec: SyntheticSpec):
    """Build the sequence and its ground-truth bundle in memory."""
    from .dataio import Frame, Sequence

    basis = spec.basis
    rng_style = np.random.default_rng([spec.seed, 41])
    if spec.style is None:
        style = StyleVector(rng_style.normal(0.0, 0.8, basis.num_modes))
    else:
        style = StyleVector(np.asarray(spec.style, dtype=float))
    cloud = generate(basis, style)
    centroid = cloud.centroid()
    diameter = cloud.diameter()
    K = _intrinsics_for(spec, diameter)
    poses = _orbit_poses(spec, centroid, diameter)

    field3d = ColorField(seed=spec.seed, frequency=spec.texture_frequency, scale=diameter)
    plan = build_densifier(
        basis.mean, per_point=spec.densify_per_point, samples=spec.densify_samples,
        seed=spec.seed,
    )
    dense_pts = densify(cloud.points, plan)
    dense_colors = field3d(dense_pts)

    noise_rng = np.random.default_rng([spec.seed, 53])
    frames = []
    gt_maps = []
    gt_sils = []
    for pose in poses:
        R = exp_rotation(pose.omega)
        gt_view = render_view(cloud.points, R, pose.t, K, upsample=spec.gt_upsample)
        if gt_view.empty:
            raise InvalidSpecError("the object is outside the camera frustum")
        gt_maps.append(gt_view.invdepth_map)
        gt_sils.append(gt_view.silhouette)
        image, mask = render_image(
            dense_pts, dense_colors, R, pose.t, K,
            supersample=spec.image_supersample, background=spec.background,
        )
        if spec.noise_sigma > 0:
            image = image + noise_rng.normal(0.0, spec.noise_sigma, image.shape)
            image = np.clip(image, 0.0, 255.0)
        frames.append(Frame(image=SampledImage(data=image), mask=mask))

    external = fabricate_external(
        poses, gt_maps, spec.ext_alpha, seed=spec.seed,
        pose_noise_deg=spec.ext_pose_noise_deg, hole_fraction=spec.ext_hole_fraction,
        offset_scale=0.5 * diameter,
    )
    seq = Sequence(frames=frames, intrinsics=K, external=external)
    deltas = [
        Twist(
            log_rotation(exp_rotation(p.omega) @ exp_rotation(poses[0].omega).T),
            p.t - poses[0].t,
        )
        for p in poses[1:]
    ]
    gt = GroundTruth(
        poses=poses,
        deltas=deltas,
        style=style.s,
        cloud=cloud,
        invdepth_maps=gt_maps,
        silhouettes=gt_sils,
        alpha=spec.ext_alpha,
        diameter=diameter,
        color_field=field3d,
    )
    return seq, gt


def write_sequence_dir(out_dir, seq, gt: GroundTruth, meta: dict = None) -> None:
    """Standard sequence directory layout (frames, masks, gt, external, meta)."""
    out_dir = os.fspath(out_dir)
    for l, frame in enumerate(seq.frames):
        write_image_png(os.path.join(out_dir, "frames", f"{l:04d}.png"), frame.image)
        write_mask_png(os.path.join(out_dir, "masks", f"{l:04d}.png"), frame.mask)
    for l, m in enumerate(gt.invdepth_maps):
        write_pfm(os.path.join(out_dir, "gt", "invdepth", f"{l:04d}.pfm"), m)
    write_poses(os.path.join(out_dir, "gt", "poses.json"), gt.poses)
    write_json(
        os.path.join(out_dir, "gt", "style.json"),
        {"s": gt.style.tolist(), "alpha": gt.alpha, "diameter": gt.diameter},
    )
    write_intrinsics(os.path.join(out_dir, "intrinsics.json"), seq.intrinsics)
    relpaths = []
    for l, m in enumerate(seq.external.invdepth_maps):
        rel = os.path.join("invdepth", f"{l:04d}.pfm")
        write_pfm(os.path.join(out_dir, "external", rel), m)
        relpaths.append(rel)
    write_external(os.path.join(out_dir, "external", "poses.json"), seq.external, relpaths)
    write_json(os.path.join(out_dir, "meta.json"), meta or {})


def load_ground_truth(seq_dir):
    """Read back the ground-truth bundle written by :func:`write_sequence_dir`."""
    from .dataio import read_json, read_pfm, read_poses

    seq_dir = os.fspath(seq_dir)
    poses = read_poses(os.path.join(seq_dir, "gt", "poses.json"))
    style_doc = read_json(os.path.join(seq_dir, "gt", "style.json"))
    maps = []
    l = 0
    while True:
        path = os.path.join(seq_dir, "gt", "invdepth", f"{l:04d}.pfm")
        if not os.path.exists(path):
            break
        maps.append(read_pfm(path).astype(float))
        l += 1
    deltas = [
        Twist(
            log_rotation(exp_rotation(p.omega) @ exp_rotation(poses[0].omega).T),
            p.t - poses[0].t,
        )
        for p in poses[1:]
    ]
    return GroundTruth(
        poses=poses,
        deltas=deltas,
        style=np.array(style_doc["s"]),
        cloud=None,
        invdepth_maps=maps,
        silhouettes=[m > 0 for m in maps],
        alpha=style_doc.get("alpha", 1.0),
        diameter=style_doc.get("diameter", 1.0),
    )
