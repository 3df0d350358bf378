"""Resampler tests: kernel-sum oracle, finite-difference gradients, clamping."""

import numpy as np
import pytest

from tsalign import cpab
from tsalign.warping import Signal, make_grid, resample, resample_backward, warp_signal


def kernel_sum_oracle(u_values, positions):
    """Direct evaluation of v_m = sum u_{m'} max(0, 1 - |p_m - m'|),
    with positions clamped to [0, M-1] first (edge rule)."""
    c, m_in = u_values.shape
    p = np.clip(positions, 0.0, m_in - 1.0)
    idx = np.arange(m_in)
    weights = np.maximum(0.0, 1.0 - np.abs(p[:, None] - idx[None, :]))
    return u_values @ weights.T


def test_make_grid():
    np.testing.assert_array_equal(make_grid(2), [0.0, 1.0])
    np.testing.assert_allclose(make_grid(5), [0.0, 0.25, 0.5, 0.75, 1.0])
    g = make_grid(33)
    np.testing.assert_allclose(np.diff(g), 1.0 / 32.0)
    with pytest.raises(ValueError):
        make_grid(1)


def test_identity_grid_is_exact():
    rng = np.random.default_rng(0)
    u = Signal(rng.standard_normal((3, 17)))
    out = resample(u, make_grid(17))
    np.testing.assert_array_equal(out.values, u.values)


def test_matches_kernel_sum_oracle():
    rng = np.random.default_rng(1)
    for _ in range(20):
        m_in, m_out = rng.integers(2, 12), rng.integers(2, 12)
        u = Signal(rng.standard_normal((2, m_in)))
        grid = np.sort(rng.uniform(-0.3, 1.3, size=m_out))
        out = resample(u, grid)
        want = kernel_sum_oracle(u.values, grid * (m_in - 1))
        np.testing.assert_allclose(out.values, want, atol=1e-12)


def test_examples_from_kernel_definition():
    u = Signal(np.array([[0.0, 1.0, 2.0, 3.0]]))
    # Query index 1.5 -> 1.5; index coordinates are x * (M - 1), M = 4.
    out = resample(u, np.array([1.5 / 3.0]))
    np.testing.assert_allclose(out.values, [[1.5]])
    # Query index -0.7 clamps to the left edge value 0.
    out = resample(u, np.array([-0.7 / 3.0]))
    np.testing.assert_allclose(out.values, [[0.0]])


def test_affine_signals_interpolate_exactly():
    alpha, beta = 0.7, -0.4
    m = 9
    u = Signal((alpha * np.arange(m) + beta)[None, :])
    grid = np.array([0.0, 0.11, 0.37, 0.5, 0.93, 1.0])
    out = resample(u, grid)
    np.testing.assert_allclose(out.values[0], alpha * grid * (m - 1) + beta,
                               atol=1e-12)


def test_resampling_preserves_bounds():
    rng = np.random.default_rng(2)
    u = Signal(rng.standard_normal((2, 30)))
    grid = np.sort(rng.uniform(-0.5, 1.5, size=50))
    out = resample(u, grid)
    for c in range(2):
        assert out.values[c].min() >= u.values[c].min() - 1e-12
        assert out.values[c].max() <= u.values[c].max() + 1e-12


def test_backward_identity_grid():
    rng = np.random.default_rng(3)
    u = Signal(rng.standard_normal((2, 11)))
    g = rng.standard_normal((2, 11))
    grad_u, grad_p = resample_backward(u, make_grid(11), g)
    np.testing.assert_array_equal(grad_u, g)


def test_backward_position_case_split():
    u = Signal(np.array([[0.0, 1.0, 2.0, 3.0]]))
    # At index 1.5: dv/dp = u_2 - u_1 = 1.
    _, gp = resample_backward(u, np.array([1.5 / 3.0]), np.array([[1.0]]))
    np.testing.assert_allclose(gp, [1.0])
    # At an integer position the left branch is taken: dv/dp = u_2 - u_1.
    u2 = Signal(np.array([[0.0, 1.0, 5.0, 6.0]]))
    _, gp = resample_backward(u2, np.array([2.0 / 3.0]), np.array([[1.0]]))
    np.testing.assert_allclose(gp, [4.0])
    # Strictly outside the domain the clamp makes the derivative zero.
    _, gp = resample_backward(u2, np.array([-0.2, 1.2]), np.array([[1.0, 1.0]]))
    np.testing.assert_array_equal(gp, [0.0, 0.0])


def test_backward_matches_finite_differences():
    rng = np.random.default_rng(4)
    h = 1e-6
    for _ in range(100):
        m_in = int(rng.integers(3, 14))
        m_out = int(rng.integers(2, 14))
        u = Signal(rng.standard_normal((2, m_in)))
        # Keep positions away from kernel kinks (integers) by at least 10h.
        pos = rng.uniform(0.05, m_in - 1 - 0.05, size=m_out)
        pos = np.where(np.abs(pos - np.round(pos)) < 1e-3,
                       pos + 2e-3, pos)
        grid = pos / (m_in - 1)
        upstream = rng.standard_normal((2, m_out))
        grad_u, grad_p = resample_backward(u, grid, upstream)

        def loss(values, positions):
            out = kernel_sum_oracle(values, positions)
            return np.sum(out * upstream)

        for m in range(m_out):
            e = np.zeros(m_out)
            e[m] = h
            fd = (loss(u.values, pos + e) - loss(u.values, pos - e)) / (2 * h)
            assert abs(fd - grad_p[m]) < 1e-6
        flat = u.values.ravel()
        for j in rng.choice(flat.size, size=min(6, flat.size), replace=False):
            e = np.zeros(flat.size)
            e[j] = h
            fd = (loss((flat + e).reshape(u.values.shape), pos)
                  - loss((flat - e).reshape(u.values.shape), pos)) / (2 * h)
            assert abs(fd - grad_u.ravel()[j]) < 1e-6


def test_mask_resampling():
    u = Signal(np.arange(8.0)[None, :], mask=np.array([1, 1, 1, 1, 1, 0, 0, 0], bool))
    out = resample(u, make_grid(8))
    np.testing.assert_array_equal(out.mask, u.mask)
    # A fully valid mask stays fully valid under any in-range monotone grid.
    full = Signal(np.arange(8.0)[None, :], mask=np.ones(8, bool))
    basis = cpab.build_basis(cpab.build_tessellation(4, "zero_boundary"))
    theta = np.full(basis.d, 0.8)
    warped = warp_signal(basis, theta, full)
    assert warped.mask.all()


def test_warp_signal_roundtrip():
    basis = cpab.build_basis(cpab.build_tessellation(8, "zero_boundary"))
    m = 128
    x = np.linspace(0, 1, m)
    u = Signal(np.sin(2 * np.pi * x)[None, :] + 0.3 * np.cos(6 * np.pi * x)[None, :])
    prior = cpab.build_prior(basis.tess)
    rng = np.random.default_rng(5)
    for _ in range(5):
        theta = cpab.sample_prior(prior, rng)
        there = warp_signal(basis, theta, u)
        back = warp_signal(basis, -theta, there)
        assert np.max(np.abs(back.values - u.values)) < 1e-2


def test_warp_signal_identity_and_constant():
    basis = cpab.build_basis(cpab.build_tessellation(4, "zero_boundary"))
    u = Signal(np.random.default_rng(6).standard_normal((1, 32)))
    out = warp_signal(basis, np.zeros(basis.d), u)
    np.testing.assert_array_equal(out.values, u.values)
    const = Signal(np.full((2, 32), 3.25))
    out = warp_signal(basis, np.ones(basis.d), const)
    np.testing.assert_allclose(out.values, 3.25, atol=1e-12)


def test_shape_validation():
    u = Signal(np.zeros((1, 5)))
    with pytest.raises(ValueError):
        resample(u, np.array([0.0, np.nan]))
    with pytest.raises(ValueError):
        resample_backward(u, np.zeros(3), np.zeros((1, 4)))
    with pytest.raises(ValueError):
        Signal(np.zeros((1, 5)), mask=np.ones(4, bool))
