from __future__ import annotations

import numpy as np
import pytest

from mfgtomo.grid import build_grid
from mfgtomo.mechanism import (
    WeightFields,
    annulus_mask,
    compute_local_weights,
    corridor_mask,
    default_regions,
    region_average_weights,
    weights_to_csv,
)
from mfgtomo.scene import CongestionSpec, canonical_scene
from mfgtomo.forward import solve_mfg


@pytest.fixture(scope="module")
def canonical_weights(canonical_solution, canonical):
    return compute_local_weights(canonical_solution, canonical.phi, canonical.congestion)


def _uniform(nt1, shape, value=1 / 3):
    w = np.full((nt1, *shape), value)
    return WeightFields(w, w.copy(), w.copy(), np.ones((nt1, *shape), dtype=bool))


def test_sum_to_one_and_range(canonical_weights):
    w = canonical_weights
    d = w.defined
    total = w.w_kin + w.w_crowd + w.w_env
    assert np.all(np.abs(total[d] - 1) <= 1e-10)
    for f in (w.w_kin, w.w_crowd, w.w_env):
        assert np.all((f[d] >= 0) & (f[d] <= 1))
        assert np.all(np.isnan(f[~d]))


def test_pointwise_scalar_oracle(canonical_solution, canonical, canonical_weights):
    sol, g = canonical_solution, canonical.grid
    kappa = canonical.congestion.kappa
    rng = np.random.default_rng(0)
    picked = 0
    while picked < 20:
        k = int(rng.integers(0, g.nt + 1))
        i = int(rng.integers(1, g.ny - 1))
        j = int(rng.integers(1, g.nx - 1))
        if not canonical_weights.defined[k, i, j]:
            continue
        u = sol.u[k]
        ux = (u[i, j + 1] - u[i, j - 1]) / (2 * g.dx)
        uy = (u[i + 1, j] - u[i - 1, j]) / (2 * g.dy)
        K = 0.5 * (ux * ux + uy * uy)
        F = kappa * max(sol.m[k, i, j], 0.0)
        P = canonical.phi[i, j]
        S = K + F + P
        assert canonical_weights.w_kin[k, i, j] == pytest.approx(K / S, abs=1e-12)
        assert canonical_weights.w_crowd[k, i, j] == pytest.approx(F / S, abs=1e-12)
        assert canonical_weights.w_env[k, i, j] == pytest.approx(P / S, abs=1e-12)
        picked += 1


def test_kinetic_only_without_environment_or_crowd():
    scene = canonical_scene(kappa=0.0).with_obstacles(())
    sol = solve_mfg(scene)
    w = compute_local_weights(sol, np.zeros(scene.grid.shape), CongestionSpec(0.0))
    assert np.allclose(w.w_kin[w.defined], 1.0)


def test_eps_den_must_be_positive(canonical_solution, canonical):
    with pytest.raises(ValueError):
        compute_local_weights(canonical_solution, canonical.phi, canonical.congestion, eps_den=0.0)


def test_uniform_weights_average_to_third():
    g = build_grid(nt=4)
    w = _uniform(5, g.shape)
    mask = np.zeros(g.shape, dtype=bool)
    mask[3:6, 3:6] = True
    out = region_average_weights(w, mask, mass_weighting=False)
    assert out.shape == (3, 5) and np.allclose(out, 1 / 3)


def test_single_cell_region(canonical_weights):
    mask = np.zeros(canonical_weights.defined.shape[1:], dtype=bool)
    mask[20, 20] = True
    out = region_average_weights(canonical_weights, mask, mass_weighting=False)
    assert np.allclose(out, canonical_weights.stacked()[:, :, 20, 20], equal_nan=True)


def test_all_undefined_gives_gap():
    g = build_grid(nt=2)
    w = _uniform(3, g.shape)
    w.defined[1] = False
    out = region_average_weights(w, np.ones(g.shape, dtype=bool), mass_weighting=False)
    assert np.all(np.isnan(out[:, 1])) and np.allclose(out[:, [0, 2]], 1 / 3)


def test_empty_region_rejected(canonical_weights):
    with pytest.raises(ValueError):
        region_average_weights(canonical_weights, np.zeros(canonical_weights.defined.shape[1:], bool), False)


def test_mass_weighting_needs_density(canonical_weights):
    with pytest.raises(ValueError, match="density"):
        region_average_weights(canonical_weights, np.ones(canonical_weights.defined.shape[1:], bool), True)


def test_regions_disjoint_from_obstacles(canonical):
    g = canonical.grid
    ob = canonical.obstacles[0]
    X, Y = g.mesh()
    corridor = corridor_mask(g, canonical.m0_center, canonical.goal.center, 2 * g.dx, canonical.obstacles)
    assert corridor.any()
    assert not np.any(corridor & (np.hypot(X - ob.center[0], Y - ob.center[1]) <= ob.radius + 2 * g.dx))
    ring = annulus_mask(g, canonical.obstacles)
    d = np.hypot(X - ob.center[0], Y - ob.center[1])
    assert np.all(np.abs(d[ring] - ob.radius) <= g.dx + 1e-12)


def test_environment_weight_peaks_near_obstacle(canonical, canonical_solution, canonical_weights):
    regions = default_regions(canonical)
    avg = {k: region_average_weights(canonical_weights, v, True, canonical_solution.m) for k, v in regions.items()}
    assert np.nanmax(avg["near_obstacle"][2]) > np.nanmax(avg["corridor"][2])


def test_corridor_is_kinetic_dominated(canonical, canonical_solution, canonical_weights):
    corridor = default_regions(canonical)["corridor"]
    avg = region_average_weights(canonical_weights, corridor, True, canonical_solution.m)
    ok = ~np.isnan(avg).any(axis=0)
    assert np.mean(np.argmax(avg[:, ok], axis=0) == 0) > 0.5


def test_bottleneck_is_more_crowded(mixed_scene, mixed_solution):
    w = compute_local_weights(mixed_solution, mixed_scene.phi, mixed_scene.congestion)
    regions = default_regions(mixed_scene)
    assert "bottleneck" in regions
    m = mixed_solution.m
    k_peak = int(np.argmax([m[k][regions["bottleneck"]].max() for k in range(m.shape[0])]))
    bott = region_average_weights(w, regions["bottleneck"], True, m)[1, k_peak]
    corr = region_average_weights(w, regions["corridor"], True, m)[1, k_peak]
    assert bott > corr


def test_weights_csv_layout():
    series = {"a": np.array([[0.5, np.nan], [0.25, np.nan], [0.25, np.nan]])}
    text = weights_to_csv(series, [0.0, 0.5])
    assert text.splitlines() == ["region,t,w_kin,w_crowd,w_env", "a,0,0.5,0.25,0.25", "a,0.5,nan,nan,nan"]
