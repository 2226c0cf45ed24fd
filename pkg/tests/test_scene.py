from __future__ import annotations

import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mfgtomo.grid import build_grid, integrate
from mfgtomo.scene import (
    CANONICAL,
    FAMILIES,
    MIXED_CONFLICT,
    ObstacleSpec,
    Scene,
    build_initial_density,
    build_scene,
    build_terminal_cost,
    canonical_scene,
    indicator,
    render_phi,
)


def test_canonical_values():
    s = canonical_scene()
    assert s.nu == 0.15
    assert s.grid.nx == s.grid.ny == 35 and s.grid.nt == 50 and s.grid.T == 2.0
    (ob,) = s.obstacles
    assert ob.center == (1.5, 1.5) and ob.radius == 0.8 and ob.strength == 5.0


def test_logistic_indicator_half_maximum_at_radius():
    g = build_grid(nx=35, ny=35)
    ob = ObstacleSpec((2.0, 2.0), 0.8, 1.0, 0.1)
    X, Y = g.mesh()
    d = np.hypot(X - 2.0, Y - 2.0)
    chi = indicator(g, ob)
    # analytic level set: chi = 1/2 exactly where d = r
    assert np.allclose(chi, 1 / (1 + np.exp((d - 0.8) / 0.1)))
    assert np.all(chi[d < 0.8] > 0.5) and np.all(chi[d > 0.8] < 0.5)


def test_sharp_indicator():
    g = build_grid()
    chi = indicator(g, ObstacleSpec((1.0, 1.0), 1.0, 1.0, 0.0))
    assert set(np.unique(chi)) == {0.0, 1.0}


@pytest.mark.parametrize("bad", [dict(radius=0.0), dict(strength=-1.0), dict(smoothness=-0.1)])
def test_obstacle_validation(bad):
    kw = dict(center=(0, 0), radius=1.0, strength=1.0, smoothness=0.1) | bad
    with pytest.raises(ValueError):
        ObstacleSpec(**kw)


def test_render_phi_is_sum_of_bumps():
    g = build_grid()
    a = ObstacleSpec((0.0, 0.0), 0.5, 2.0)
    b = ObstacleSpec((3.0, 1.0), 0.7, 4.0)
    assert np.allclose(render_phi(g, [a, b]), 2.0 * indicator(g, a) + 4.0 * indicator(g, b))
    assert render_phi(g, []).max() == 0.0


@settings(max_examples=30, deadline=None)
@given(cx=st.floats(-1, 5), cy=st.floats(-1, 5), sigma=st.floats(0.3, 2.0))
def test_initial_density_unit_mass(cx, cy, sigma):
    g = build_grid()
    m0 = build_initial_density((cx, cy), sigma, g)
    assert integrate(m0, g) == pytest.approx(1.0, abs=1e-12)
    assert m0.min() >= 0


def test_tiny_sigma_warns_single_cell():
    g = build_grid()
    with pytest.warns(RuntimeWarning):
        build_initial_density((0.0, 0.0), 1e-3, g)


def test_terminal_cost_is_truncated_distance():
    g = build_grid()
    gc = build_terminal_cost((6.0, 6.0), 2.0, g)
    X, Y = g.mesh()
    assert np.allclose(gc, 2.0 * np.hypot(X - 6, Y - 6))
    with pytest.raises(ValueError):
        build_terminal_cost((6.0, 6.0), -1.0, g)


@pytest.mark.parametrize("family", FAMILIES)
def test_build_scene_deterministic(family):
    a, b = build_scene(family, 11), build_scene(family, 11)
    assert a.to_json() == b.to_json()
    assert build_scene(family, 12).to_json() != a.to_json()


def test_mixed_family_has_two_disjoint_obstacles():
    for seed in range(5):
        s = build_scene(MIXED_CONFLICT, seed)
        a, b = s.obstacles
        gap = np.hypot(a.center[0] - b.center[0], a.center[1] - b.center[1]) - a.radius - b.radius
        assert 0.8 - 1e-9 <= gap <= 1.5 + 1e-9


def test_unknown_family_rejected():
    with pytest.raises(ValueError, match="family"):
        build_scene("forest", 0)


def test_scene_json_round_trip():
    s = build_scene(MIXED_CONFLICT, 4)
    back = Scene.from_json(s.to_json())
    assert back.to_json() == s.to_json()
    assert np.array_equal(back.phi, s.phi)
    assert json.loads(s.to_json())["g"]["beta"] == CANONICAL["beta"]


def test_negative_nu_rejected():
    with pytest.raises(ValueError, match="nu"):
        canonical_scene(nu=-0.1)
