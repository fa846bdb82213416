"""Coarse pose retrieval by template-silhouette IoU, plus style initialization.

Templates are silhouettes of the mean shape rendered over a grid of
azimuth / elevation / distance; the best match (after shifting the
template to align silhouette centroids, a 2-DoF refinement folded back
into the returned translation) initializes the target-frame pose.
"""

from __future__ import annotations

import hashlib
import struct
import warnings
from dataclasses import dataclass

import numpy as np

from .errors import NoOverlapError, InconsistentDepthError, RetrievalFailureWarning
from .geometry import Intrinsics, Twist, look_at_pose
from .renderer import raytrace
from .shapespace import PointCloud, ShapeBasis, StyleVector, generate

_GRID_MAGIC = b"SPBG"
_GRID_VERSION = 1


@dataclass
class TemplateGrid:
    poses: list
    silhouettes: np.ndarray  # (T, H, W) bool
    azimuths: np.ndarray
    elevations: np.ndarray
    distances: np.ndarray
    intrinsics: Intrinsics

    def __len__(self) -> int:
        return len(self.poses)


def grid_camera_positions(azimuths, elevations, distances):
    """Camera positions in grid-index order: distance-major, then elevation,
    then azimuth (ties in retrieval break toward the lowest index)."""
    out = []
    for dist in distances:
        for el in elevations:
            for az in azimuths:
                out.append(
                    dist
                    * np.array(
                        [np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), np.sin(el)]
                    )
                )
    return out


def build_template_grid(
    basis: ShapeBasis,
    K: Intrinsics,
    azimuth_samples: int = 36,
    elevation_samples: int = 5,
    elevation_range=(-np.pi / 6, np.pi / 3),
    distance_samples: int = 5,
    distance_factors=(0.5, 4.0),
    upsample: int = 4,
) -> TemplateGrid:
    if min(azimuth_samples, elevation_samples, distance_samples) < 1:
        raise ValueError("every grid axis needs at least one sample")
    mean_cloud = PointCloud(points=basis.mean)
    diameter = mean_cloud.diameter()
    azimuths = np.linspace(0.0, 2.0 * np.pi, azimuth_samples, endpoint=False)
    elevations = np.linspace(elevation_range[0], elevation_range[1], elevation_samples)
    distances = np.geomspace(
        distance_factors[0] * diameter, distance_factors[1] * diameter, distance_samples
    )
    centroid = mean_cloud.centroid()
    poses = []
    sils = []
    for pos in grid_camera_positions(azimuths, elevations, distances):
        pose = look_at_pose(centroid + pos, target=centroid)
        poses.append(pose)
        sils.append(raytrace(basis.mean, pose, K, upsample).silhouette)
    return TemplateGrid(
        poses=poses,
        silhouettes=np.stack(sils),
        azimuths=azimuths,
        elevations=elevations,
        distances=distances,
        intrinsics=K,
    )


def _shift_mask(mask: np.ndarray, dx: int, dy: int) -> np.ndarray:
    """Integer-shift a boolean mask with zero fill (no wraparound)."""
    out = np.zeros_like(mask)
    H, W = mask.shape
    src_r = slice(max(0, -dy), min(H, H - dy))
    dst_r = slice(max(0, dy), min(H, H + dy))
    src_c = slice(max(0, -dx), min(W, W - dx))
    dst_c = slice(max(0, dx), min(W, W + dx))
    out[dst_r, dst_c] = mask[src_r, src_c]
    return out


def _centroid(mask: np.ndarray):
    rows, cols = np.nonzero(mask)
    return float(cols.mean()), float(rows.mean())


def score_templates(target_mask: np.ndarray, grid: TemplateGrid):
    """IoU per template after centroid alignment; returns (ious, shifts)."""
    target_mask = np.asarray(target_mask, dtype=bool)
    if not np.any(target_mask):
        raise ValueError("target mask is empty")
    tx, ty = _centroid(target_mask)
    target_area = int(np.count_nonzero(target_mask))
    ious = np.zeros(len(grid))
    shifts = np.zeros((len(grid), 2), dtype=int)
    for i, sil in enumerate(grid.silhouettes):
        if not sil.any():
            continue
        sx, sy = _centroid(sil)
        dx = int(round(tx - sx))
        dy = int(round(ty - sy))
        shifted = _shift_mask(sil, dx, dy)
        inter = int(np.count_nonzero(shifted & target_mask))
        union = target_area + int(np.count_nonzero(shifted)) - inter
        ious[i] = inter / union if union else 0.0
        shifts[i] = (dx, dy)
    return ious, shifts


def retrieve_pose(
    target_mask: np.ndarray, grid: TemplateGrid, iou_warn_threshold: float = 0.05
):
    """Best-IoU template pose with the centroid shift folded into the
    translation. Returns (pose, best_iou)."""
    ious, shifts = score_templates(target_mask, grid)
    best = int(np.argmax(ious))  # argmax returns the lowest index on ties
    if ious[best] < iou_warn_threshold:
        warnings.warn(
            f"best template IoU is only {ious[best]:.3f}", RetrievalFailureWarning
        )
    pose = grid.poses[best]
    dx, dy = shifts[best]
    K = grid.intrinsics
    # A pixel shift (dx, dy) of the silhouette corresponds to a camera-frame
    # translation at the template's object depth (look-at distance).
    z = grid.distances[best // (len(grid.elevations) * len(grid.azimuths))]
    dt = np.array([dx * z / K.fx, dy * z / K.fy, 0.0])
    return Twist(pose.omega, pose.t + dt), float(ious[best])


def _mask_iou(a: np.ndarray, b: np.ndarray) -> float:
    inter = int(np.count_nonzero(a & b))
    union = int(np.count_nonzero(a | b))
    return inter / union if union else 0.0


def init_style(
    masks,
    basis: ShapeBasis,
    mode: str = "mean",
    pose: Twist = None,
    K: Intrinsics = None,
    samples: int = 32,
    seed: int = 0,
    s_max: float = 4.0,
    upsample: int = 4,
) -> StyleVector:
    """Style initialization: the mean shape, or the best of ``samples``
    seeded candidates by silhouette IoU against the target mask at ``pose``."""
    if mode == "mean":
        return StyleVector(np.zeros(basis.num_modes), s_max=s_max)
    if mode != "retrieval":
        raise ValueError(f"unknown style init mode {mode!r}")
    if pose is None or K is None:
        raise ValueError("retrieval mode needs the retrieved pose and intrinsics")
    target = np.asarray(masks[0], dtype=bool)
    rng = np.random.default_rng(seed)
    candidates = rng.standard_normal((samples, basis.num_modes))
    best_s = np.zeros(basis.num_modes)
    best_iou = -1.0
    for cand in candidates:
        style = StyleVector(cand, s_max=s_max)
        sil = raytrace(generate(basis, style).points, pose, K, upsample).silhouette
        iou = _mask_iou(sil, target)
        if iou > best_iou:
            best_iou = iou
            best_s = style.s
    return StyleVector(best_s, s_max=s_max)


def init_alpha(seq, basis, style, p0: Twist, upsample: int = 4, fallback: float = 1.0):
    """Initial scale from aligning the external target-frame inverse depth
    to a render of the current shape at ``p0``; ``fallback`` when the
    external map is missing or inconsistent."""
    from .alignment import solve_alpha_invdepth

    ext = seq.external
    if ext is None or ext.invdepth_maps is None or ext.invdepth_maps[0] is None:
        return float(fallback)
    points = generate(basis, style).points if style is not None else basis.mean
    view = raytrace(points, p0, seq.intrinsics, upsample)
    if view.empty:
        return float(fallback)
    try:
        return solve_alpha_invdepth(ext.invdepth_maps[0], view.invdepth_map).alpha
    except (NoOverlapError, InconsistentDepthError):
        return float(fallback)


# ---------------------------------------------------------------------------
# Grid disk cache (same container style as the shape basis)
# ---------------------------------------------------------------------------


def grid_cache_key(basis: ShapeBasis, K: Intrinsics, **grid_params) -> str:
    h = hashlib.sha256()
    h.update(basis.mean.tobytes())
    h.update(basis.mode_scales.tobytes())
    h.update(repr(sorted(grid_params.items())).encode())
    h.update(repr((K.fx, K.fy, K.cx, K.cy, K.width, K.height)).encode())
    return h.hexdigest()[:16]


def save_grid(path, grid: TemplateGrid) -> None:
    K = grid.intrinsics
    with open(path, "wb") as f:
        f.write(_GRID_MAGIC)
        T = len(grid)
        H, W = grid.silhouettes.shape[1:]
        f.write(
            struct.pack(
                "<IIIIIII",
                _GRID_VERSION,
                T,
                H,
                W,
                len(grid.azimuths),
                len(grid.elevations),
                len(grid.distances),
            )
        )
        f.write(struct.pack("<dddd", K.fx, K.fy, K.cx, K.cy))
        twists = np.stack([p.as_vector() for p in grid.poses])
        f.write(twists.astype("<f8").tobytes())
        f.write(grid.azimuths.astype("<f8").tobytes())
        f.write(grid.elevations.astype("<f8").tobytes())
        f.write(grid.distances.astype("<f8").tobytes())
        f.write(np.packbits(grid.silhouettes).tobytes())


def load_grid(path) -> TemplateGrid:
    with open(path, "rb") as f:
        if f.read(4) != _GRID_MAGIC:
            raise ValueError("not a template-grid file")
        version, T, H, W, A, E, D = struct.unpack("<IIIIIII", f.read(28))
        if version != _GRID_VERSION:
            raise ValueError(f"unsupported grid version {version}")
        fx, fy, cx, cy = struct.unpack("<dddd", f.read(32))
        twists = np.frombuffer(f.read(T * 6 * 8), dtype="<f8").reshape(T, 6)
        azimuths = np.frombuffer(f.read(A * 8), dtype="<f8")
        elevations = np.frombuffer(f.read(E * 8), dtype="<f8")
        distances = np.frombuffer(f.read(D * 8), dtype="<f8")
        nbits = T * H * W
        packed = np.frombuffer(f.read((nbits + 7) // 8), dtype=np.uint8)
        sils = np.unpackbits(packed, count=nbits).reshape(T, H, W).astype(bool)
    return TemplateGrid(
        poses=[Twist.from_vector(v) for v in twists],
        silhouettes=sils,
        azimuths=azimuths.copy(),
        elevations=elevations.copy(),
        distances=distances.copy(),
        intrinsics=Intrinsics(fx=fx, fy=fy, cx=cx, cy=cy, width=W, height=H),
    )
