"""Scale and pose alignment against external PBA output.

The external estimator lives in its own world frame and scale; a single
positive factor ``alpha`` converts external units into ours. Relative
external motion, transported through that factor, initializes (and at
evaluation time anchors) our per-frame poses.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InconsistentDepthError, NoOverlapError, StationaryCameraError
from .geometry import Twist, check_rotation, compose, exp_rotation, log_rotation


@dataclass
class ExternalPBAResult:
    """Per-frame (R, t) pairs plus optional inverse-depth maps (0 = invalid)."""

    poses: list
    invdepth_maps: list = None

    def __post_init__(self):
        for R, _ in self.poses:
            check_rotation(R)

    def __len__(self) -> int:
        return len(self.poses)


@dataclass(frozen=True)
class ScaleFactor:
    alpha: float

    def __post_init__(self):
        if not (np.isfinite(self.alpha) and self.alpha > 0):
            raise ValueError(f"scale must be finite and positive, got {self.alpha}")


def solve_alpha_invdepth(d_ext: np.ndarray, d_ours: np.ndarray) -> ScaleFactor:
    """Closed-form least-squares scale aligning d_ext ~ alpha * d_ours.

    Only pixels valid (nonzero) in both maps contribute; zero encodes a hole.
    """
    d_ext = np.asarray(d_ext, dtype=float)
    d_ours = np.asarray(d_ours, dtype=float)
    if d_ext.shape != d_ours.shape:
        raise ValueError("inverse-depth maps must share a shape")
    overlap = (d_ext != 0) & (d_ours != 0)
    if not np.any(overlap):
        raise NoOverlapError("no pixel is valid in both inverse-depth maps")
    num = float(np.sum(d_ext[overlap] * d_ours[overlap]))
    den = float(np.sum(d_ours[overlap] * d_ours[overlap]))
    if den == 0.0:
        raise NoOverlapError("our inverse depth is zero over the whole overlap")
    alpha = num / den
    if alpha <= 0:
        raise InconsistentDepthError(f"depth alignment produced alpha = {alpha:.3g}")
    return ScaleFactor(alpha=alpha)


def relative_external_rotation(ext: ExternalPBAResult, l: int) -> np.ndarray:
    """R'_l R'_0^T: external relative rotation of frame l w.r.t. frame 0."""
    R0 = ext.poses[0][0]
    Rl = ext.poses[l][0]
    return Rl @ R0.T


def init_motion(p0: Twist, ext: ExternalPBAResult, alpha: ScaleFactor) -> list:
    """Relative twists consistent with the external relative motion.

    For each source frame l the rotation is the external relative rotation;
    the translation is chosen so the composed global pose reproduces the
    externally implied camera, anchored at ``p0``:

        dt_l = dR_l t0 - t0 + alpha (t'_l - dR_l t'_0)

    (The -t0 term keeps compose(delta_l, p0) algebraically consistent with
    the additive translation composition rule.)
    """
    if len(ext) < 2:
        raise ValueError("need at least two external frames")
    a = alpha.alpha
    t0 = p0.t
    t0_ext = ext.poses[0][1]
    deltas = []
    for l in range(1, len(ext)):
        dR = relative_external_rotation(ext, l)
        dt = dR @ t0 - t0 + a * (ext.poses[l][1] - dR @ t0_ext)
        deltas.append(Twist(log_rotation(dR), dt))
    return deltas


def solve_alpha_poses(
    p0: Twist, deltas: list, ext: ExternalPBAResult, x_eval: np.ndarray
) -> ScaleFactor:
    """Per-frame closed-form scale from pose agreement, averaged over frames.

    Each source frame contributes the scalar minimizer of

        || R_l x + t_l - dR_l (R_0 x + t_0) - alpha (t'_l - dR_l t'_0) ||^2

    evaluated at ``x_eval`` (the current shape centroid; under consistent
    rotations the x-dependence cancels exactly).
    """
    if len(ext) != len(deltas) + 1:
        raise ValueError("external result must cover the target and every source frame")
    x_eval = np.asarray(x_eval, dtype=float).reshape(3)
    R0 = exp_rotation(p0.omega)
    base = R0 @ x_eval + p0.t
    t0_ext = ext.poses[0][1]
    alphas = []
    degenerate = True
    for l in range(1, len(ext)):
        pose_l = compose(deltas[l - 1], p0)
        y_l = exp_rotation(pose_l.omega) @ x_eval + pose_l.t
        dR = relative_external_rotation(ext, l)
        a_vec = y_l - dR @ base
        b_vec = ext.poses[l][1] - dR @ t0_ext
        b_norm2 = float(b_vec @ b_vec)
        if b_norm2 < 1e-24:
            continue
        degenerate = False
        alphas.append(float(a_vec @ b_vec) / b_norm2)
    if degenerate:
        raise StationaryCameraError("external translations are degenerate in every frame")
    return ScaleFactor(alpha=float(np.mean(alphas)))


def align_external_for_eval(
    ext: ExternalPBAResult, gt_first_pose: Twist, alpha: ScaleFactor
) -> list:
    """World-frame poses for the external frames, anchored at the ground-truth
    first pose with relative motion transported through ``alpha``."""
    poses = [gt_first_pose]
    for l in range(1, len(ext)):
        dR = relative_external_rotation(ext, l)
        dt = (
            dR @ gt_first_pose.t
            - gt_first_pose.t
            + alpha.alpha * (ext.poses[l][1] - dR @ ext.poses[0][1])
        )
        poses.append(compose(Twist(log_rotation(dR), dt), gt_first_pose))
    return poses
