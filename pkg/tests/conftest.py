from __future__ import annotations

import pytest

from mfgtomo.forward import solve_mfg
from mfgtomo.invert import experiment_solver_params
from mfgtomo.scene import MIXED_CONFLICT, build_scene, canonical_scene


@pytest.fixture(scope="session")
def fast_params():
    return experiment_solver_params()


@pytest.fixture(scope="session")
def canonical():
    return canonical_scene()


@pytest.fixture(scope="session")
def canonical_solution(canonical, fast_params):
    return solve_mfg(canonical, params=fast_params)


@pytest.fixture(scope="session")
def mixed_scene():
    return build_scene(MIXED_CONFLICT, 1)


@pytest.fixture(scope="session")
def mixed_solution(mixed_scene, fast_params):
    return solve_mfg(mixed_scene, params=fast_params)
