from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mfgtomo import _kernels_py, kernels

MODES = [True, False]


def _rand(seed, shape=(9, 11)):
    rng = np.random.default_rng(seed)
    return rng.standard_normal(shape), np.abs(rng.standard_normal(shape)), rng.standard_normal(shape)


@pytest.mark.skipif(kernels.BACKEND != "cython", reason="compiled kernels not built")
@pytest.mark.parametrize("periodic", MODES)
def test_compiled_matches_numpy(periodic):
    from mfgtomo import _kernels

    u, m, g = _rand(1)
    args = (0.3, 0.2, periodic)
    assert np.allclose(_kernels.eo_hamiltonian(u, *args), _kernels_py.eo_hamiltonian(u, *args), atol=1e-12)
    assert np.allclose(_kernels.eo_hamiltonian_vjp(u, g, *args), _kernels_py.eo_hamiltonian_vjp(u, g, *args), atol=1e-12)
    assert np.allclose(_kernels.upwind_divergence(m, u, *args), _kernels_py.upwind_divergence(m, u, *args), atol=1e-12)
    for a, b in zip(_kernels.upwind_divergence_vjp(g, m, u, *args), _kernels_py.upwind_divergence_vjp(g, m, u, *args)):
        assert np.allclose(a, b, atol=1e-12)
    assert _kernels.max_outflow_rate(u, *args) == pytest.approx(_kernels_py.max_outflow_rate(u, *args), rel=1e-12)


@pytest.mark.parametrize("periodic", MODES)
def test_hamiltonian_consistent_on_smooth_field(periodic):
    n = 64
    h = 1.0 / n
    x = (np.arange(n) + 0.5) * h
    X, Y = np.meshgrid(x, x)
    u = np.sin(2 * np.pi * X) * np.cos(2 * np.pi * Y) / (2 * np.pi)
    H = kernels.eo_hamiltonian(u, h, h, periodic)
    ux = np.cos(2 * np.pi * X) * np.cos(2 * np.pi * Y)
    uy = -np.sin(2 * np.pi * X) * np.sin(2 * np.pi * Y)
    exact = 0.5 * (ux**2 + uy**2)
    inner = (slice(2, -2), slice(2, -2))
    assert np.max(np.abs(H - exact)[inner]) < 0.15


@pytest.mark.parametrize("periodic", MODES)
def test_divergence_conserves_mass(periodic):
    u, m, _ = _rand(2)
    assert abs(kernels.upwind_divergence(m, u, 0.3, 0.2, periodic).sum()) < 1e-12


@pytest.mark.parametrize("periodic", MODES)
def test_divergence_is_transpose_of_linearised_hamiltonian(periodic):
    # <H'(u) d, m> = <d, D(m, u)>: the FPK advection operator is the adjoint of the linearised Hamiltonian
    u, m, d = _rand(3)
    eps = 1e-6
    dH = (kernels.eo_hamiltonian(u + eps * d, 0.3, 0.2, periodic) - kernels.eo_hamiltonian(u - eps * d, 0.3, 0.2, periodic)) / (2 * eps)
    lhs = np.sum(dH * m)
    rhs = np.sum(d * kernels.upwind_divergence(m, u, 0.3, 0.2, periodic))
    assert lhs == pytest.approx(rhs, rel=1e-7)


@pytest.mark.parametrize("periodic", MODES)
@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_vjps_match_finite_differences(periodic, seed):
    u, m, g = _rand(seed, (7, 8))
    d = np.random.default_rng(seed + 1).standard_normal(u.shape)
    eps = 1e-6
    args = (0.25, 0.4, periodic)
    fd = np.sum(g * (kernels.eo_hamiltonian(u + eps * d, *args) - kernels.eo_hamiltonian(u - eps * d, *args))) / (2 * eps)
    assert np.sum(kernels.eo_hamiltonian_vjp(u, g, *args) * d) == pytest.approx(fd, rel=1e-5, abs=1e-8)
    mbar, ubar = kernels.upwind_divergence_vjp(g, m, u, *args)
    fd_m = np.sum(g * (kernels.upwind_divergence(m + eps * d, u, *args) - kernels.upwind_divergence(m - eps * d, u, *args))) / (2 * eps)
    fd_u = np.sum(g * (kernels.upwind_divergence(m, u + eps * d, *args) - kernels.upwind_divergence(m, u - eps * d, *args))) / (2 * eps)
    assert np.sum(mbar * d) == pytest.approx(fd_m, rel=1e-6, abs=1e-8)
    assert np.sum(ubar * d) == pytest.approx(fd_u, rel=1e-5, abs=1e-8)


def test_outflow_rate_of_flat_field_is_zero():
    assert kernels.max_outflow_rate(np.ones((5, 6)), 1.0, 1.0, True) == 0.0
