import warnings

import numpy as np
import pytest

from spba import synth
from spba.errors import RetrievalFailureWarning
from spba.geometry import Intrinsics, Twist, exp_rotation
from spba.initpose import (
    build_template_grid,
    grid_cache_key,
    init_alpha,
    init_style,
    load_grid,
    retrieve_pose,
    save_grid,
)
from spba.renderer import raytrace
from spba.shapespace import StyleVector, generate


@pytest.fixture(scope="module")
def grid_setup():
    basis = synth.default_basis(num_points=600, num_modes=4, seed=4)
    K = Intrinsics(fx=120.0, fy=120.0, cx=31.5, cy=31.5, width=64, height=64)
    grid = build_template_grid(
        basis, K, azimuth_samples=12, elevation_samples=3, distance_samples=3
    )
    return basis, K, grid


def test_grid_shape_and_poses(grid_setup):
    basis, K, grid = grid_setup
    assert len(grid) == 12 * 3 * 3
    assert grid.silhouettes.shape == (len(grid), 64, 64)


def test_self_retrieval(grid_setup):
    basis, K, grid = grid_setup
    target = grid.silhouettes[40]
    pose, iou = retrieve_pose(target, grid)
    assert iou == pytest.approx(1.0)
    assert np.allclose(pose.omega, grid.poses[40].omega)
    assert np.allclose(pose.t, grid.poses[40].t)


def test_midway_pose_within_one_cell(grid_setup):
    basis, K, grid = grid_setup
    az = grid.azimuths[3] + 0.5 * (grid.azimuths[1] - grid.azimuths[0])
    el = grid.elevations[1]
    dist = grid.distances[1]
    centroid = basis.mean.mean(axis=0)
    pos = centroid + dist * np.array(
        [np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), np.sin(el)]
    )
    from spba.geometry import look_at_pose

    true_pose = look_at_pose(pos, target=centroid)
    mask = raytrace(basis.mean, true_pose, K, 4).silhouette
    pose, iou = retrieve_pose(mask, grid)
    assert iou > 0.5
    # returned azimuth within one grid cell of truth
    Rp = exp_rotation(pose.omega)
    Rt = exp_rotation(true_pose.omega)
    angle = np.degrees(
        np.arccos(np.clip((np.trace(Rp @ Rt.T) - 1) / 2, -1, 1))
    )
    cell_deg = np.degrees(grid.azimuths[1] - grid.azimuths[0])
    assert angle <= cell_deg


def test_retrieval_centroid_shift_folds_into_translation(grid_setup):
    basis, K, grid = grid_setup
    base = grid.silhouettes[40]
    shifted = np.zeros_like(base)
    shifted[:, 5:] = base[:, :-5]  # shift 5 px right
    pose, iou = retrieve_pose(shifted, grid)
    assert iou == pytest.approx(1.0)
    base_pose = grid.poses[40]
    dt = pose.t - base_pose.t
    z = (exp_rotation(base_pose.omega) @ basis.mean.mean(axis=0) + base_pose.t)[2]
    assert dt[0] == pytest.approx(5 * z / K.fx, rel=1e-6)
    assert abs(dt[1]) < 1e-9


def test_empty_mask_rejected(grid_setup):
    _, _, grid = grid_setup
    with pytest.raises(ValueError):
        retrieve_pose(np.zeros((64, 64), dtype=bool), grid)


def test_all_ones_mask_warning_contract(grid_setup):
    _, _, grid = grid_setup
    target = np.ones((64, 64), dtype=bool)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        pose, iou = retrieve_pose(target, grid)
    warned = any(issubclass(w.category, RetrievalFailureWarning) for w in caught)
    assert warned == (iou < 0.05)
    assert pose is not None


def test_init_style_mean_mode(grid_setup):
    basis, _, _ = grid_setup
    s = init_style([np.ones((8, 8), bool)], basis, mode="mean")
    assert np.array_equal(s.s, np.zeros(basis.num_modes))


def test_init_style_retrieval_recovers_member(grid_setup):
    basis, K, grid = grid_setup
    rng = np.random.default_rng(7)
    candidates = rng.standard_normal((16, basis.num_modes))
    target_s = StyleVector(candidates[5])
    pose = grid.poses[40]
    mask = raytrace(generate(basis, target_s).points, pose, K, 4).silhouette
    s = init_style([mask], basis, mode="retrieval", pose=pose, K=K, samples=16, seed=7)
    assert np.allclose(s.s, target_s.s)


def test_init_style_respects_clamp(grid_setup):
    basis, K, grid = grid_setup
    mask = grid.silhouettes[0]
    s = init_style(
        [mask], basis, mode="retrieval", pose=grid.poses[0], K=K,
        samples=8, seed=1, s_max=0.5,
    )
    assert np.linalg.norm(s.s) <= 0.5 + 1e-12


def test_init_style_deterministic(grid_setup):
    basis, K, grid = grid_setup
    mask = grid.silhouettes[10]
    a = init_style([mask], basis, mode="retrieval", pose=grid.poses[10], K=K, seed=3)
    b = init_style([mask], basis, mode="retrieval", pose=grid.poses[10], K=K, seed=3)
    assert np.array_equal(a.s, b.s)


def test_grid_cache_round_trip(tmp_path, grid_setup):
    basis, K, grid = grid_setup
    path = tmp_path / "grid.bin"
    save_grid(path, grid)
    back = load_grid(path)
    assert len(back) == len(grid)
    assert np.array_equal(back.silhouettes, grid.silhouettes)
    assert np.array_equal(back.azimuths, grid.azimuths)
    for a, b in zip(back.poses, grid.poses):
        assert np.array_equal(a.as_vector(), b.as_vector())
    assert back.intrinsics == K


def test_grid_cache_key_changes_with_params(grid_setup):
    basis, K, _ = grid_setup
    k1 = grid_cache_key(basis, K, azimuth_samples=12)
    k2 = grid_cache_key(basis, K, azimuth_samples=36)
    assert k1 != k2


def test_init_alpha_from_synthetic_external():
    basis = synth.default_basis(num_points=600, num_modes=4, seed=4)
    spec = synth.SyntheticSpec(
        basis=basis, frames=3, image_size=64, seed=11, noise_sigma=0.0,
        ext_alpha=2.5, ext_pose_noise_deg=0.0, ext_hole_fraction=0.0,
    )
    seq, gt = synth.generate_sequence(spec)
    a = init_alpha(seq, basis, StyleVector(gt.style), gt.poses[0], fallback=1.0)
    assert a == pytest.approx(2.5, rel=1e-6)
