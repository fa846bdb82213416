"""Linear point-cloud shape prior: mean cloud plus orthonormal deformation modes.

Stands in for a learned category-level generator while keeping the same
interface: the instance cloud is a differentiable function of a low-dim
style vector, with a constant Jacobian.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import InsufficientDataError

S_MAX_DEFAULT = 4.0

_MAGIC = b"SPBA"
_VERSION = 1


@dataclass(frozen=True)
class StyleVector:
    """Basis coefficients, clamped by projection to norm <= ``s_max``."""

    s: np.ndarray
    s_max: float = S_MAX_DEFAULT

    def __post_init__(self):
        s = np.asarray(self.s, dtype=float).reshape(-1)
        if not np.all(np.isfinite(s)):
            raise ValueError("style coefficients must be finite")
        norm = float(np.linalg.norm(s))
        if norm > self.s_max:
            s = s * (self.s_max / norm)
        object.__setattr__(self, "s", s)

    def __len__(self) -> int:
        return self.s.size


@dataclass(frozen=True)
class PointCloud:
    points: np.ndarray
    colors: np.ndarray = None

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise ValueError(f"expected Nx3 points, got shape {pts.shape}")
        if not np.all(np.isfinite(pts)):
            raise ValueError("point coordinates must be finite")
        object.__setattr__(self, "points", pts)
        if self.colors is not None:
            col = np.asarray(self.colors, dtype=float)
            if col.shape != pts.shape:
                raise ValueError("colors must match points in shape")
            object.__setattr__(self, "colors", col)

    def __len__(self) -> int:
        return self.points.shape[0]

    def diameter(self) -> float:
        """Bounding-box diagonal; a cheap, deterministic size proxy."""
        ext = self.points.max(axis=0) - self.points.min(axis=0)
        return float(np.linalg.norm(ext))

    def centroid(self) -> np.ndarray:
        return self.points.mean(axis=0)


@dataclass(frozen=True)
class ShapeBasis:
    """mean (N,3), modes (S,N,3) orthonormal as 3N-vectors, mode_scales (S,)."""

    mean: np.ndarray
    modes: np.ndarray
    mode_scales: np.ndarray

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=float)
        modes = np.asarray(self.modes, dtype=float)
        scales = np.asarray(self.mode_scales, dtype=float).reshape(-1)
        if mean.ndim != 2 or mean.shape[1] != 3:
            raise ValueError("mean must be Nx3")
        if modes.ndim != 3 or modes.shape[1:] != mean.shape:
            raise ValueError("modes must be SxNx3 matching the mean")
        if scales.shape[0] != modes.shape[0]:
            raise ValueError("mode_scales must have one entry per mode")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "modes", modes)
        object.__setattr__(self, "mode_scales", scales)

    @property
    def num_points(self) -> int:
        return self.mean.shape[0]

    @property
    def num_modes(self) -> int:
        return self.modes.shape[0]

    def scaled_modes(self) -> np.ndarray:
        """(S,N,3) modes premultiplied by their scales: d(generate)/ds."""
        return self.modes * self.mode_scales[:, None, None]


def fit_basis(exemplars: list, num_modes: int) -> ShapeBasis:
    """PCA of corresponded exemplar clouds flattened to 3N vectors.

    mode_scales are singular values / sqrt(count - 1), i.e. per-mode
    standard deviations of the exemplar population.
    """
    if num_modes < 1:
        raise ValueError("num_modes must be >= 1")
    clouds = [e.points if isinstance(e, PointCloud) else np.asarray(e, float) for e in exemplars]
    if len(clouds) < num_modes + 1:
        raise InsufficientDataError(
            f"need at least {num_modes + 1} exemplars for {num_modes} modes, got {len(clouds)}"
        )
    n = clouds[0].shape[0]
    for c in clouds:
        if c.shape != (n, 3):
            raise ValueError("all exemplars must share N and point correspondence")

    stack = np.stack([c.reshape(-1) for c in clouds])  # (count, 3N)
    mean = stack.mean(axis=0)
    resid = stack - mean
    # Economy SVD of the residuals; right singular vectors are the modes.
    _, sv, vt = np.linalg.svd(resid, full_matrices=False)
    modes = vt[:num_modes]
    scales = sv[:num_modes] / np.sqrt(len(clouds) - 1)
    # Canonical sign: largest-magnitude component positive.
    for k in range(num_modes):
        j = int(np.argmax(np.abs(modes[k])))
        if modes[k, j] < 0:
            modes[k] = -modes[k]
    return ShapeBasis(
        mean=mean.reshape(n, 3),
        modes=modes.reshape(num_modes, n, 3),
        mode_scales=scales,
    )


def generate(basis: ShapeBasis, style: StyleVector) -> PointCloud:
    """Instance cloud: mean + sum_k s_k * scale_k * mode_k."""
    s = style.s if isinstance(style, StyleVector) else np.asarray(style, float).reshape(-1)
    if s.size != basis.num_modes:
        raise ValueError(f"style has {s.size} coefficients, basis has {basis.num_modes} modes")
    pts = basis.mean + np.tensordot(s * basis.mode_scales, basis.modes, axes=1)
    return PointCloud(points=pts)


def project_coefficients(basis: ShapeBasis, cloud: PointCloud) -> np.ndarray:
    """Least-squares style coefficients of a corresponded cloud."""
    resid = (cloud.points - basis.mean).reshape(-1)
    flat_modes = basis.modes.reshape(basis.num_modes, -1)
    raw = flat_modes @ resid
    safe = np.where(basis.mode_scales > 0, basis.mode_scales, 1.0)
    return np.where(basis.mode_scales > 0, raw / safe, 0.0)


def save_basis(path, basis: ShapeBasis) -> None:
    """Binary container: magic, version, N, S, then float64-LE mean,
    mode_scales, modes (C order)."""
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<III", _VERSION, basis.num_points, basis.num_modes))
        f.write(basis.mean.astype("<f8").tobytes())
        f.write(basis.mode_scales.astype("<f8").tobytes())
        f.write(basis.modes.astype("<f8").tobytes())


def load_basis(path) -> ShapeBasis:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != _MAGIC:
            raise ValueError(f"not a shape-basis file (magic {magic!r})")
        version, n, s = struct.unpack("<III", f.read(12))
        if version != _VERSION:
            raise ValueError(f"unsupported basis version {version}")
        mean = np.frombuffer(f.read(n * 3 * 8), dtype="<f8").reshape(n, 3)
        scales = np.frombuffer(f.read(s * 8), dtype="<f8")
        modes = np.frombuffer(f.read(s * n * 3 * 8), dtype="<f8").reshape(s, n, 3)
    return ShapeBasis(mean=mean.copy(), modes=modes.copy(), mode_scales=scales.copy())
