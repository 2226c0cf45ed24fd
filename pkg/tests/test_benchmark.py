from __future__ import annotations

import math

import pytest

from mfgtomo.benchmark import BenchmarkSpec, benchmark, channel_omegas, run_job, scene_seeds
from mfgtomo.forward import solve_mfg
from mfgtomo.grid import build_grid
from mfgtomo.invert import InversionParams, estimate_metrics, stage1_init, stage2_refine
from mfgtomo.observe import calibrate_channels, observe
from mfgtomo.scene import build_scene


@pytest.fixture(scope="module")
def small_spec():
    return BenchmarkSpec(
        "obstacle_dominated",
        n_scenes=1,
        channel_subsets=(("f1",),),
        methods=("mfg_multi", "trad_global", "trad_oracle"),
        n_calib=3,
        simplex_n=1,
        inversion=InversionParams(max_outer=30, n_starts=1),
        grid=build_grid(nx=20, ny=20, nt=25),
    )


@pytest.fixture(scope="module")
def small_report(small_spec):
    return benchmark(small_spec)


def test_single_row_matches_direct_pipeline(small_spec, small_report):
    (row,) = [r for r in small_report.rows if r["method"] == "mfg_multi"]
    seed = scene_seeds(small_spec.family, 1, small_spec.seed)[0]
    scene = build_scene(small_spec.family, seed, small_spec.grid)
    p = small_spec.inversion
    obs = observe(solve_mfg(scene, params=p.solver), scene.goal)
    known = scene.with_obstacles(())
    stats = calibrate_channels(small_spec.family, 3, small_spec.seed, small_spec.grid, p.solver)
    init = stage1_init(known, obs, None, 1, params=p.solver)
    est = stage2_refine(init, known, obs, InversionParams(max_outer=30, n_starts=1, loss="multi"), stats)
    assert (row["center_error"], row["iou"], row["radius_mae"]) == estimate_metrics(est, scene).as_tuple()


def test_report_is_deterministic(small_spec, small_report):
    assert benchmark(small_spec).to_csv() == small_report.to_csv()


def test_oracle_not_worse_than_global(small_report):
    by = {r["method"]: r for r in small_report.rows}
    assert by["trad_oracle"]["center_error"] <= by["trad_global"]["center_error"]


def test_report_columns(small_report):
    header = small_report.to_csv().splitlines()[0].split(",")
    assert header[:3] == ["seed", "family", "scene_index"] and "wall_time" not in header
    assert "wall_time" in small_report.timings_csv().splitlines()[0]
    assert small_report.summary["failures"] == 0


def test_channel_omegas():
    uniform, pts = channel_omegas(("f1", "f3"), 2)
    assert uniform == (0.5, 0.0, 0.5)
    assert all(w[1] == 0 for w in pts) and uniform in pts
    uniform, pts = channel_omegas(("f1", "f2", "f3"), 4)
    assert len(pts) == 16 and math.isclose(sum(pts[-1]), 1.0)


def test_scene_seeds_stable():
    assert scene_seeds("obstacle_dominated", 3, 0) == scene_seeds("obstacle_dominated", 5, 0)[:3]
    assert scene_seeds("obstacle_dominated", 3, 0) != scene_seeds("congestion_dominated", 3, 0)


def test_failed_solve_is_recorded(small_spec):
    from dataclasses import replace

    from mfgtomo.forward import SolverParams

    bad = replace(small_spec, methods=("trad_global",), inversion=InversionParams(solver=SolverParams(max_substeps=1)))
    rows, _ = run_job(bad, None, 0, 0)
    assert rows and all(r["status"].startswith("failed") for r in rows)


@pytest.mark.parametrize(
    "kw",
    [dict(family="forest"), dict(n_scenes=0), dict(methods=("mfg",)), dict(channel_subsets=((),)), dict(noise_grid=((-1, 0),))],
)
def test_spec_validation(kw):
    with pytest.raises(ValueError):
        BenchmarkSpec(**({"family": "obstacle_dominated"} | kw))
