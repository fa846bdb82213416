"""Flat dotted-key run configuration with strict key checking."""

from __future__ import annotations

import hashlib
import json
import os

from .objective import ObjectiveConfig
from .solver import SolverConfig

DEFAULTS = {
    "seed": 0,
    "threads": 1,
    "renderer.upsample": 4,
    "objective.lambda1": 0.1,
    "objective.lambda2": 1000.0,
    "objective.delta1": 100.0,
    "objective.delta2": 10.0,
    "objective.chamfer_empty_penalty": 1e6,
    "objective.mask_pixel_cap": 4096,
    "solver.max_outer_iters": 200,
    "solver.inner_lbfgs_steps": 10,
    "solver.lbfgs_memory": 10,
    "solver.rel_tol": 1e-6,
    "solver.rel_tol_patience": 3,
    "solver.wolfe_c1": 1e-4,
    "solver.wolfe_c2": 0.9,
    "solver.checkpoint_every": 10,
    "grid.azimuth_samples": 36,
    "grid.elevation_samples": 5,
    "grid.elevation_min_deg": -30.0,
    "grid.elevation_max_deg": 60.0,
    "grid.distance_samples": 5,
    "grid.distance_min_factor": 0.5,
    "grid.distance_max_factor": 4.0,
    "init.style_mode": "mean",
    "init.style_samples": 32,
    "init.fallback_alpha": 1.0,
    "synth.frames": 9,
    "synth.rotation_deg": 30.0,
    "synth.translation": 0.0,
    "synth.image_size": 128,
    "synth.noise_sigma": 2.0,
    "synth.texture_frequency": 3.0,
    "synth.fill_fraction": 0.45,
    "synth.azimuth_deg": 25.0,
    "synth.elevation_deg": 15.0,
    "synth.distance_factor": 2.4,
    "synth.image_supersample": 2,
    "synth.background": 16.0,
    "synth.ext_alpha": 1.7,
    "synth.ext_pose_noise_deg": 0.0,
    "synth.ext_hole_fraction": 0.0,
    "basis.num_points": 2000,
    "basis.num_modes": 8,
    "basis.exemplar_count": 40,
    "basis.diameter": 1.0,
    "style.s_max": 4.0,
    "sweep.seeds": 20,
    "sweep.magnitudes": [0.0, 2.0, 5.0],
}


class RunConfig:
    """Effective configuration: defaults overlaid with user values.

    Unknown keys are rejected so typos fail loudly. ``SPBA_SEED`` in the
    environment overrides the configured seed.
    """

    def __init__(self, overrides: dict = None):
        self.values = dict(DEFAULTS)
        for key, value in (overrides or {}).items():
            if key not in DEFAULTS:
                raise ValueError(f"unknown config key {key!r}")
            default = DEFAULTS[key]
            if isinstance(default, (int, float)) and not isinstance(default, bool):
                if not isinstance(value, (int, float)):
                    raise ValueError(f"config key {key!r} expects a number")
            elif not isinstance(value, type(default)):
                raise ValueError(
                    f"config key {key!r} expects {type(default).__name__}"
                )
            self.values[key] = value
        env_seed = os.environ.get("SPBA_SEED")
        if env_seed is not None:
            self.values["seed"] = int(env_seed)

    @staticmethod
    def from_file(path) -> "RunConfig":
        with open(path, "r", encoding="utf-8") as f:
            return RunConfig(json.load(f))

    def __getitem__(self, key: str):
        return self.values[key]

    def section(self, prefix: str) -> dict:
        plen = len(prefix) + 1
        return {
            k[plen:]: v for k, v in self.values.items() if k.startswith(prefix + ".")
        }

    def hash(self) -> str:
        canonical = json.dumps(self.values, sort_keys=True)
        return hashlib.sha256(canonical.encode()).hexdigest()[:16]

    def objective_config(self) -> ObjectiveConfig:
        sec = self.section("objective")
        return ObjectiveConfig(
            lambda1=sec["lambda1"],
            lambda2=sec["lambda2"],
            delta1=sec["delta1"],
            delta2=sec["delta2"],
            chamfer_empty_penalty=sec["chamfer_empty_penalty"],
            mask_pixel_cap=int(sec["mask_pixel_cap"]),
        )

    def solver_config(self) -> SolverConfig:
        sec = self.section("solver")
        return SolverConfig(
            max_outer_iters=int(sec["max_outer_iters"]),
            inner_lbfgs_steps=int(sec["inner_lbfgs_steps"]),
            lbfgs_memory=int(sec["lbfgs_memory"]),
            rel_tol=sec["rel_tol"],
            rel_tol_patience=int(sec["rel_tol_patience"]),
            wolfe_c1=sec["wolfe_c1"],
            wolfe_c2=sec["wolfe_c2"],
            checkpoint_every=int(sec["checkpoint_every"]),
        )

    def meta(self, command: str, extra: dict = None) -> dict:
        doc = {
            "command": command,
            "config": self.values,
            "config_hash": self.hash(),
            "seed": self.values["seed"],
            "substitutions": {
                "shape_prior": "linear-point-basis",
                "style_init": "mean-or-sampled-silhouette-retrieval",
                "motion_init_translation": "anchor-consistent-form",
                "photometric_normalization": "per-direction-residual-count",
            },
        }
        if extra:
            doc.update(extra)
        return doc


DEVIATION_FLAGS = RunConfig().meta("")["substitutions"]
