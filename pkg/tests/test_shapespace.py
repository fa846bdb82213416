import numpy as np
import pytest

from spba.errors import InsufficientDataError
from spba.shapespace import (
    PointCloud,
    ShapeBasis,
    StyleVector,
    fit_basis,
    generate,
    load_basis,
    project_coefficients,
    save_basis,
)


def make_exemplars(rng, count=12, n=50):
    base = rng.normal(0, 1.0, (n, 3))
    return [PointCloud(points=base + rng.normal(0, 0.1, (n, 3))) for _ in range(count)]


def test_translated_exemplars_single_mode():
    # Oracle: dense eigendecomposition of the 3N covariance.
    rng = np.random.default_rng(0)
    base = rng.normal(0, 1.0, (40, 3))
    direction = np.array([1.0, 2.0, -0.5])
    direction /= np.linalg.norm(direction)
    shifts = [-0.3, 0.1, 0.4]
    clouds = [PointCloud(points=base + s * direction) for s in shifts]
    basis = fit_basis(clouds, num_modes=1)

    stack = np.stack([c.points.reshape(-1) for c in clouds])
    resid = stack - stack.mean(axis=0)
    cov = resid.T @ resid / (len(clouds) - 1)
    evals, evecs = np.linalg.eigh(cov)
    top = evecs[:, -1]

    flat = basis.modes[0].reshape(-1)
    assert abs(abs(flat @ top) - 1.0) < 1e-8
    # the translation direction replicated per point, normalized
    expected = np.tile(direction, 40) / np.sqrt(40)
    assert abs(abs(flat @ expected) - 1.0) < 1e-8
    assert basis.mode_scales[0] == pytest.approx(np.sqrt(evals[-1]), rel=1e-8)


def test_identical_exemplars_zero_scales():
    rng = np.random.default_rng(1)
    base = rng.normal(0, 1.0, (30, 3))
    clouds = [PointCloud(points=base.copy()) for _ in range(5)]
    basis = fit_basis(clouds, num_modes=2)
    assert np.allclose(basis.mode_scales, 0.0, atol=1e-10)


def test_projection_beats_mean_reconstruction():
    rng = np.random.default_rng(2)
    clouds = make_exemplars(rng)
    basis = fit_basis(clouds, num_modes=4)
    for cloud in clouds[:4]:
        coeffs = project_coefficients(basis, cloud)
        recon = basis.mean + np.tensordot(
            coeffs * basis.mode_scales, basis.modes, axes=1
        )
        rms_proj = np.sqrt(np.mean((recon - cloud.points) ** 2))
        rms_mean = np.sqrt(np.mean((basis.mean - cloud.points) ** 2))
        assert rms_proj <= rms_mean + 1e-12


def test_fit_basis_insufficient_data():
    rng = np.random.default_rng(3)
    clouds = make_exemplars(rng, count=3)
    with pytest.raises(InsufficientDataError):
        fit_basis(clouds, num_modes=3)


def test_modes_orthonormal():
    rng = np.random.default_rng(4)
    basis = fit_basis(make_exemplars(rng), num_modes=5)
    flat = basis.modes.reshape(5, -1)
    assert np.max(np.abs(flat @ flat.T - np.eye(5))) < 1e-8


def test_generate_zero_style_is_mean():
    rng = np.random.default_rng(5)
    basis = fit_basis(make_exemplars(rng), num_modes=3)
    cloud = generate(basis, StyleVector(np.zeros(3)))
    assert np.array_equal(cloud.points, basis.mean)


def test_generate_single_mode():
    rng = np.random.default_rng(6)
    basis = fit_basis(make_exemplars(rng), num_modes=3)
    e1 = np.array([1.0, 0.0, 0.0])
    cloud = generate(basis, StyleVector(e1))
    expected = basis.mean + basis.mode_scales[0] * basis.modes[0]
    assert np.allclose(cloud.points, expected)


def test_generate_is_affine():
    rng = np.random.default_rng(7)
    basis = fit_basis(make_exemplars(rng), num_modes=3)
    s1 = rng.normal(0, 1, 3)
    s2 = rng.normal(0, 1, 3)
    a = 0.3
    mix = generate(basis, StyleVector(a * s1 + (1 - a) * s2)).points
    blend = a * generate(basis, StyleVector(s1)).points + (1 - a) * generate(
        basis, StyleVector(s2)
    ).points
    assert np.allclose(mix, blend, atol=1e-12)


def test_generate_dimension_mismatch():
    rng = np.random.default_rng(8)
    basis = fit_basis(make_exemplars(rng), num_modes=3)
    with pytest.raises(ValueError):
        generate(basis, StyleVector(np.zeros(5)))


def test_generate_jacobian_is_scaled_modes():
    rng = np.random.default_rng(9)
    basis = fit_basis(make_exemplars(rng), num_modes=3)
    s = rng.normal(0, 1, 3)
    h = 1e-7
    for k in range(3):
        d = np.zeros(3)
        d[k] = h
        fd = (
            generate(basis, StyleVector(s + d)).points
            - generate(basis, StyleVector(s - d)).points
        ) / (2 * h)
        assert np.max(np.abs(fd - basis.mode_scales[k] * basis.modes[k])) < 1e-6


def test_style_clamped_by_projection():
    s = StyleVector(np.full(4, 10.0), s_max=4.0)
    assert np.linalg.norm(s.s) == pytest.approx(4.0)
    small = StyleVector(np.array([0.1, 0.2]))
    assert np.allclose(small.s, [0.1, 0.2])


def test_basis_serialization_round_trip(tmp_path):
    rng = np.random.default_rng(10)
    basis = fit_basis(make_exemplars(rng), num_modes=4)
    path = tmp_path / "basis.bin"
    save_basis(path, basis)
    loaded = load_basis(path)
    assert np.array_equal(loaded.mean, basis.mean)
    assert np.array_equal(loaded.modes, basis.modes)
    assert np.array_equal(loaded.mode_scales, basis.mode_scales)
    with open(path, "rb") as f:
        assert f.read(4) == b"SPBA"
