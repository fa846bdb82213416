"""Evaluation metrics: inverse-depth error and density, camera errors,
and histogram / threshold-curve reports."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import Twist, camera_center, exp_rotation


@dataclass
class EvalReport:
    depth_error: float
    density: float
    cam_location_error: float
    cam_orientation_error_deg: float
    cam_geodesic_error_deg: float
    per_frame: dict = field(default_factory=dict)
    histogram: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "depth_error": self.depth_error,
            "density": self.density,
            "cam_location_error": self.cam_location_error,
            "cam_orientation_error_deg": self.cam_orientation_error_deg,
            "cam_geodesic_error_deg": self.cam_geodesic_error_deg,
            "per_frame": self.per_frame,
            "histogram": self.histogram,
        }


def depth_metrics(pred_maps, gt_maps):
    """Normalized inverse-depth error and coverage density.

    Per frame: mean |d_pred - d_gt| over pixels valid (> 0) in both maps,
    divided by the mean ground-truth inverse depth over its valid pixels;
    density is the fraction of valid ground-truth pixels covered by the
    prediction. Returns a dict with per-frame lists, means, and the pooled
    per-pixel normalized errors.
    """
    if len(pred_maps) != len(gt_maps):
        raise ValueError("prediction and ground truth must have equal frame counts")
    frame_errors = []
    densities = []
    pixel_errors = []
    for pred, gt in zip(pred_maps, gt_maps):
        pred = np.asarray(pred, dtype=float)
        gt = np.asarray(gt, dtype=float)
        if pred.shape != gt.shape:
            raise ValueError("map resolutions differ")
        gt_valid = gt > 0
        n_gt = int(np.count_nonzero(gt_valid))
        if n_gt == 0:
            raise ValueError("a frame has no valid ground-truth pixel")
        both = gt_valid & (pred > 0)
        n_both = int(np.count_nonzero(both))
        densities.append(n_both / n_gt)
        if n_both == 0:
            continue
        scale = float(np.mean(gt[gt_valid]))
        err = np.abs(pred[both] - gt[both]) / scale
        frame_errors.append(float(np.mean(err)))
        pixel_errors.append(err)
    depth_error = float(np.mean(frame_errors)) if frame_errors else float("inf")
    return {
        "depth_error": depth_error,
        "density": float(np.mean(densities)),
        "frame_depth_errors": frame_errors,
        "frame_densities": densities,
        "pixel_errors": np.concatenate(pixel_errors) if pixel_errors else np.zeros(0),
    }


def camera_metrics(pred_poses, gt_poses):
    """Camera center distances plus viewing-axis and geodesic angles (deg)."""
    if len(pred_poses) != len(gt_poses):
        raise ValueError("pose lists must have equal length")
    loc = []
    axis_deg = []
    geo_deg = []
    for p, g in zip(pred_poses, gt_poses):
        loc.append(float(np.linalg.norm(camera_center(p) - camera_center(g))))
        Rp = exp_rotation(p.omega)
        Rg = exp_rotation(g.omega)
        cosang = float(np.clip(Rp[2] @ Rg[2], -1.0, 1.0))
        axis_deg.append(float(np.degrees(np.arccos(cosang))))
        cosgeo = np.clip((np.trace(Rp @ Rg.T) - 1.0) / 2.0, -1.0, 1.0)
        geo_deg.append(float(np.degrees(np.arccos(cosgeo))))
    return {
        "location_error": loc,
        "orientation_error_deg": axis_deg,
        "geodesic_error_deg": geo_deg,
        "location_error_mean": float(np.mean(loc)),
        "orientation_error_deg_mean": float(np.mean(axis_deg)),
        "geodesic_error_deg_mean": float(np.mean(geo_deg)),
    }


def threshold_curve(errors, num_bins: int = 50, max_error: float = None):
    """Histogram plus cumulative fraction-under-threshold curve.

    Errors beyond ``max_error`` are clipped into the last bin, so the
    cumulative curve always reaches 1 at the final edge.
    """
    errors = np.asarray(errors, dtype=float).reshape(-1)
    if errors.size == 0:
        raise ValueError("threshold_curve needs at least one error value")
    if max_error is None:
        max_error = float(errors.max())
    if max_error <= 0:
        max_error = 1.0
    clipped = np.minimum(errors, max_error)
    counts, edges = np.histogram(clipped, bins=num_bins, range=(0.0, max_error))
    cumulative = np.cumsum(counts) / errors.size
    return {
        "bin_edges": edges,
        "counts": counts,
        "cumulative": cumulative,
    }


def evaluate_run(pred_poses, gt_poses, pred_maps, gt_maps, num_bins: int = 50,
                 max_error: float = None) -> EvalReport:
    depth = depth_metrics(pred_maps, gt_maps)
    cam = camera_metrics(pred_poses, gt_poses)
    if depth["pixel_errors"].size:
        curve = threshold_curve(depth["pixel_errors"], num_bins=num_bins, max_error=max_error)
        histogram = {
            "bin_edges": curve["bin_edges"].tolist(),
            "counts": curve["counts"].tolist(),
            "cumulative": curve["cumulative"].tolist(),
        }
    else:
        histogram = {}
    return EvalReport(
        depth_error=depth["depth_error"],
        density=depth["density"],
        cam_location_error=cam["location_error_mean"],
        cam_orientation_error_deg=cam["orientation_error_deg_mean"],
        cam_geodesic_error_deg=cam["geodesic_error_deg_mean"],
        per_frame={
            "depth_errors": depth["frame_depth_errors"],
            "densities": depth["frame_densities"],
            "location_error": cam["location_error"],
            "orientation_error_deg": cam["orientation_error_deg"],
            "geodesic_error_deg": cam["geodesic_error_deg"],
        },
        histogram=histogram,
    )
