"""Object-centric semantic photometric bundle adjustment.

Recovers a full 3-D object point cloud, global 6-DoF camera poses, and
metric scale from a short small-motion image sequence by minimizing a
combined photometric / silhouette / inverse-depth objective with an
alternating quasi-Newton solver.
"""

from .alignment import (
    ExternalPBAResult,
    ScaleFactor,
    align_external_for_eval,
    init_motion,
    solve_alpha_invdepth,
    solve_alpha_poses,
)
from .geometry import Intrinsics, Twist, compose, exp_rotation, log_rotation, project
from .objective import LossBreakdown, Objective, ObjectiveConfig, huber
from .renderer import RenderedView, SampledImage, raytrace, sample, silhouette_pixels
from .shapespace import (
    PointCloud,
    ShapeBasis,
    StyleVector,
    fit_basis,
    generate,
    load_basis,
    save_basis,
)
from .solver import SolverConfig, SolverState, basin_sweep, optimize

__version__ = "0.1.0"

__all__ = [
    "ExternalPBAResult",
    "Intrinsics",
    "LossBreakdown",
    "Objective",
    "ObjectiveConfig",
    "PointCloud",
    "RenderedView",
    "SampledImage",
    "ScaleFactor",
    "ShapeBasis",
    "SolverConfig",
    "SolverState",
    "StyleVector",
    "Twist",
    "align_external_for_eval",
    "basin_sweep",
    "compose",
    "exp_rotation",
    "fit_basis",
    "generate",
    "huber",
    "init_motion",
    "load_basis",
    "log_rotation",
    "optimize",
    "project",
    "raytrace",
    "sample",
    "save_basis",
    "silhouette_pixels",
    "solve_alpha_invdepth",
    "solve_alpha_poses",
]
