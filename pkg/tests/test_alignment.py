import numpy as np
import pytest

from spba.alignment import (
    ExternalPBAResult,
    ScaleFactor,
    align_external_for_eval,
    init_motion,
    solve_alpha_invdepth,
    solve_alpha_poses,
)
from spba.errors import InconsistentDepthError, NoOverlapError, StationaryCameraError
from spba.geometry import Twist, compose, exp_rotation, log_rotation


def random_pose_set(rng, count=5):
    poses = []
    for _ in range(count):
        axis = rng.standard_normal(3)
        axis /= np.linalg.norm(axis)
        poses.append(Twist(axis * rng.uniform(0.1, 1.2), rng.normal(0, 1.0, 3)))
    return poses


def fabricate(gt_poses, alpha, rng, offset_scale=0.7):
    """Map true poses through a planted similarity: R' = R Q, t' = (R b + t)/alpha."""
    axis = rng.standard_normal(3)
    axis /= np.linalg.norm(axis)
    Q = exp_rotation(axis * rng.uniform(0.2, 1.0))
    b = rng.normal(0, offset_scale, 3)
    poses = [
        (exp_rotation(p.omega) @ Q, (exp_rotation(p.omega) @ b + p.t) / alpha)
        for p in gt_poses
    ]
    return ExternalPBAResult(poses=poses)


def eq12_residual(p0, delta, ext, l, alpha, x):
    """Residual of the global-pose consistency relation at a probe point."""
    pose_l = compose(delta, p0)
    lhs = exp_rotation(pose_l.omega) @ x + pose_l.t
    Rl, tl = ext.poses[l]
    rhs = alpha * (Rl @ x + tl)
    return np.linalg.norm(lhs - rhs)


def test_alpha_invdepth_factor_two():
    d = np.full((8, 8), 0.25)
    assert solve_alpha_invdepth(2.0 * d, d).alpha == pytest.approx(2.0)


def test_alpha_invdepth_identity():
    rng = np.random.default_rng(0)
    d = rng.uniform(0.1, 1.0, (16, 16))
    assert solve_alpha_invdepth(d, d).alpha == pytest.approx(1.0)


def test_alpha_invdepth_matches_golden_section_oracle():
    rng = np.random.default_rng(1)
    d_ours = rng.uniform(0.1, 1.0, (20, 20))
    d_ext = 1.7 * d_ours + rng.normal(0, 0.02, d_ours.shape)
    d_ext = np.abs(d_ext) + 1e-3
    alpha = solve_alpha_invdepth(d_ext, d_ours).alpha

    def loss(a):
        return np.sum((d_ext - a * d_ours) ** 2)

    lo, hi = 0.01, 10.0
    phi = (np.sqrt(5.0) - 1) / 2
    for _ in range(200):
        m1 = hi - phi * (hi - lo)
        m2 = lo + phi * (hi - lo)
        if loss(m1) < loss(m2):
            hi = m2
        else:
            lo = m1
    assert alpha == pytest.approx((lo + hi) / 2, abs=1e-8)


def test_alpha_invdepth_respects_validity_and_permutation():
    rng = np.random.default_rng(2)
    d_ours = rng.uniform(0.1, 1.0, (10, 10))
    d_ext = 3.0 * d_ours
    d_ext[0, :5] = 0.0  # invalid external pixels
    d_ours[5, :3] = 0.0  # invalid our pixels
    a = solve_alpha_invdepth(d_ext, d_ours).alpha
    perm = rng.permutation(100)
    a_perm = solve_alpha_invdepth(
        d_ext.reshape(-1)[perm].reshape(10, 10),
        d_ours.reshape(-1)[perm].reshape(10, 10),
    ).alpha
    assert a == pytest.approx(3.0)
    assert a_perm == pytest.approx(a)


def test_alpha_invdepth_errors():
    with pytest.raises(NoOverlapError):
        solve_alpha_invdepth(np.zeros((4, 4)), np.ones((4, 4)))
    with pytest.raises(InconsistentDepthError):
        solve_alpha_invdepth(-np.ones((4, 4)), np.ones((4, 4)))


def test_init_motion_consistent_identity():
    rng = np.random.default_rng(3)
    gt = random_pose_set(rng, count=4)
    gt[0] = Twist(gt[0].omega, np.zeros(3))
    ext = ExternalPBAResult(poses=[(exp_rotation(p.omega), p.t) for p in gt])
    deltas = init_motion(gt[0], ext, ScaleFactor(1.0))
    for l, d in enumerate(deltas, start=1):
        assert eq12_residual(gt[0], d, ext, l, 1.0, np.array([0.3, -0.2, 0.5])) < 1e-9
        true_rel = exp_rotation(gt[l].omega) @ exp_rotation(gt[0].omega).T
        assert np.max(np.abs(exp_rotation(d.omega) - true_rel)) < 1e-9


def test_init_motion_recovers_through_similarity():
    rng = np.random.default_rng(4)
    for alpha_star in (0.3, 1.0, 1.7, 5.0):
        gt = random_pose_set(rng, count=5)
        ext = fabricate(gt, alpha_star, rng)
        deltas = init_motion(gt[0], ext, ScaleFactor(alpha_star))
        for l, d in enumerate(deltas, start=1):
            # reconstruction: the composed pose reproduces the true one
            pose_l = compose(d, gt[0])
            assert np.max(np.abs(pose_l.t - gt[l].t)) < 1e-9
            assert (
                np.max(np.abs(exp_rotation(pose_l.omega) - exp_rotation(gt[l].omega)))
                < 1e-9
            )


def test_init_motion_zero_motion():
    rng = np.random.default_rng(5)
    p0 = random_pose_set(rng, count=1)[0]
    R = exp_rotation(np.array([0.3, -0.1, 0.2]))
    ext = ExternalPBAResult(poses=[(R, np.array([1.0, 2.0, 3.0]))] * 2)
    deltas = init_motion(p0, ext, ScaleFactor(2.0))
    assert np.allclose(deltas[0].omega, 0.0, atol=1e-12)
    assert np.allclose(deltas[0].t, 0.0, atol=1e-12)


def test_solve_alpha_poses_recovers_planted_scale():
    rng = np.random.default_rng(6)
    for alpha_star in (0.3, 1.0, 1.7, 5.0):
        gt = random_pose_set(rng, count=6)
        ext = fabricate(gt, alpha_star, rng)
        deltas = [
            Twist(
                log_rotation(exp_rotation(p.omega) @ exp_rotation(gt[0].omega).T),
                p.t - gt[0].t,
            )
            for p in gt[1:]
        ]
        x_eval = rng.normal(0, 0.5, 3)
        a = solve_alpha_poses(gt[0], deltas, ext, x_eval)
        assert a.alpha == pytest.approx(alpha_star, abs=1e-8)


def test_solve_alpha_poses_identical_frames_error():
    rng = np.random.default_rng(7)
    p0 = random_pose_set(rng, count=1)[0]
    R = exp_rotation(np.array([0.1, 0.2, 0.0]))
    ext = ExternalPBAResult(poses=[(R, np.array([1.0, 0.0, 0.5]))] * 3)
    deltas = [Twist.identity(), Twist.identity()]
    with pytest.raises(StationaryCameraError):
        solve_alpha_poses(p0, deltas, ext, np.zeros(3))


def test_solve_alpha_poses_per_frame_consistency():
    rng = np.random.default_rng(8)
    gt = random_pose_set(rng, count=4)
    ext = fabricate(gt, 1.7, rng)
    deltas = [
        Twist(
            log_rotation(exp_rotation(p.omega) @ exp_rotation(gt[0].omega).T),
            p.t - gt[0].t,
        )
        for p in gt[1:]
    ]
    # every per-frame alpha equals the mean when construction is consistent
    a_all = solve_alpha_poses(gt[0], deltas, ext, np.zeros(3)).alpha
    for l in range(1, 4):
        sub_ext = ExternalPBAResult(poses=[ext.poses[0], ext.poses[l]])
        a_l = solve_alpha_poses(gt[0], [deltas[l - 1]], sub_ext, np.zeros(3)).alpha
        assert a_l == pytest.approx(a_all, abs=1e-9)


def test_align_external_identity():
    rng = np.random.default_rng(9)
    gt = random_pose_set(rng, count=4)
    ext = ExternalPBAResult(poses=[(exp_rotation(p.omega), p.t) for p in gt])
    out = align_external_for_eval(ext, gt[0], ScaleFactor(1.0))
    for pose, true in zip(out, gt):
        assert np.max(np.abs(exp_rotation(pose.omega) - exp_rotation(true.omega))) < 1e-9
        assert np.max(np.abs(pose.t - true.t)) < 1e-9


def test_align_external_through_similarity():
    rng = np.random.default_rng(10)
    gt = random_pose_set(rng, count=5)
    ext = fabricate(gt, 2.4, rng)
    out = align_external_for_eval(ext, gt[0], ScaleFactor(2.4))
    for pose, true in zip(out, gt):
        assert np.max(np.abs(pose.t - true.t)) < 1e-8
        assert np.max(np.abs(exp_rotation(pose.omega) - exp_rotation(true.omega))) < 1e-8


def test_align_external_single_frame():
    p0 = Twist(np.array([0.1, 0.0, 0.0]), np.array([0.0, 0.0, 2.0]))
    ext = ExternalPBAResult(poses=[(np.eye(3), np.zeros(3))])
    out = align_external_for_eval(ext, p0, ScaleFactor(1.0))
    assert len(out) == 1
    assert np.allclose(out[0].omega, p0.omega)
    assert np.allclose(out[0].t, p0.t)


def test_alpha_noise_monotonicity():
    # |alpha - alpha*| shrinks as the overlap count grows, under iid noise
    rng = np.random.default_rng(11)
    alpha_star = 1.7
    errors = []
    for n in (30, 300, 3000):
        trials = []
        for _ in range(30):
            d_ours = rng.uniform(0.2, 1.0, n)
            d_ext = alpha_star * d_ours + rng.normal(0, 0.05, n)
            d_ext = np.abs(d_ext) + 1e-6
            a = solve_alpha_invdepth(d_ext.reshape(1, -1), d_ours.reshape(1, -1)).alpha
            trials.append(abs(a - alpha_star))
        errors.append(np.mean(trials))
    assert errors[0] > errors[1] > errors[2]
