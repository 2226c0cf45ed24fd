"""Seeded benchmark over scene families, channel subsets, methods and noise levels.

Every (scene, noise level) pair is one job: truth solve, observation, Stage I
(shared by all methods of the job), then one Stage II run per method and
channel subset. Jobs may run in a process pool; rows are merged by key, so the
report does not depend on completion order. Wall-clock times are kept out of
the report CSV (they go to a separate timings file) so that identical seeds
give byte-identical reports.
"""

from __future__ import annotations

import csv
import io
import json
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .forward import SolverError, solve_mfg
from .grid import Grid
from .invert import (
    GLOBAL_OMEGA,
    InversionParams,
    estimate_metrics,
    simplex_grid,
    stage1_init,
    stage2_refine,
)
from .observe import CHANNELS, add_noise, calibrate_channels, observe
from .scene import FAMILIES, build_scene

METHODS = ("mfg_multi", "trad_global", "trad_oracle")
REPORT_COLUMNS = (
    "seed", "family", "scene_index", "scene_seed", "channels", "method", "eps_add", "eps_mult",
    "center_error", "iou", "radius_mae", "iterations", "omega", "status",
)


@dataclass(frozen=True)
class BenchmarkSpec:
    family: str
    n_scenes: int = 12
    channel_subsets: tuple[tuple[str, ...], ...] = (("f1",), ("f1", "f2"), ("f1", "f2", "f3"))
    methods: tuple[str, ...] = ("mfg_multi", "trad_global")
    noise_grid: tuple[tuple[float, float], ...] = ((0.0, 0.0),)
    seed: int = 0
    n_calib: int = 16
    simplex_n: int = 4
    inversion: InversionParams = field(default_factory=InversionParams)
    grid: Grid | None = None

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown family {self.family!r}")
        if self.n_scenes < 1:
            raise ValueError("n_scenes must be >= 1")
        subsets = tuple(tuple(s) for s in self.channel_subsets)
        for s in subsets:
            if not s or any(c not in CHANNELS for c in s):
                raise ValueError(f"bad channel subset {s}")
        object.__setattr__(self, "channel_subsets", subsets)
        if not self.methods or any(m not in METHODS for m in self.methods):
            raise ValueError(f"methods must be a non-empty subset of {METHODS}")
        object.__setattr__(self, "methods", tuple(self.methods))
        noise = tuple((float(a), float(b)) for a, b in self.noise_grid)
        if not noise or any(a < 0 or b < 0 for a, b in noise):
            raise ValueError("noise levels must be nonnegative")
        object.__setattr__(self, "noise_grid", noise)


@dataclass
class BenchmarkReport:
    rows: list[dict]
    summary: dict
    timings: list[dict]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(REPORT_COLUMNS)
        for r in self.rows:
            w.writerow([_fmt(r[c]) for c in REPORT_COLUMNS])
        return buf.getvalue()

    def timings_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(("scene_index", "eps_add", "eps_mult", "wall_time"))
        for t in self.timings:
            w.writerow([_fmt(t[c]) for c in ("scene_index", "eps_add", "eps_mult", "wall_time")])
        return buf.getvalue()

    def summary_json(self) -> str:
        return json.dumps(self.summary, indent=2, sort_keys=True)


def _fmt(v) -> str:
    if isinstance(v, float):
        return "nan" if math.isnan(v) else repr(v)
    return str(v)


def scene_seeds(family: str, n: int, seed: int) -> list[int]:
    rng = np.random.default_rng([int(seed), FAMILIES.index(family)])
    return [int(s) for s in rng.integers(0, 2**31 - 1, size=n)]


def channel_omegas(subset, simplex_n: int) -> tuple[tuple[float, float, float], list[tuple[float, float, float]]]:
    """Uniform weights on ``subset`` and the simplex grid restricted to it (uniform vector included)."""
    on = np.array([c in subset for c in CHANNELS], dtype=float)
    uniform = tuple(float(x) for x in on / on.sum())
    grid_pts = [w for w in simplex_grid(simplex_n) if all(wi == 0 or o for wi, o in zip(w, on))]
    if not any(np.allclose(w, uniform, atol=1e-12) for w in grid_pts):
        grid_pts.append(uniform)
    return uniform, grid_pts


def _noise_seed(seed: int, scene_index: int, noise_index: int) -> int:
    return int(np.random.default_rng([int(seed), scene_index, noise_index, 1]).integers(0, 2**31 - 1))


def _row(spec, scene_index, scene_seed, subset, method, noise, metrics=None, iterations=0, omega=None, status="ok"):
    ce, iou, rm = metrics.as_tuple() if metrics is not None else (math.nan,) * 3
    return {
        "seed": spec.seed, "family": spec.family, "scene_index": scene_index, "scene_seed": scene_seed,
        "channels": "+".join(subset), "method": method, "eps_add": noise[0], "eps_mult": noise[1],
        "center_error": float(ce), "iou": float(iou), "radius_mae": float(rm), "iterations": int(iterations),
        "omega": "" if omega is None else ";".join(repr(float(w)) for w in omega), "status": status,
    }


def run_job(spec: BenchmarkSpec, stats, scene_index: int, noise_index: int):
    """All rows of one (scene, noise level) pair, plus its wall time."""
    t0 = time.perf_counter()
    scene_seed = scene_seeds(spec.family, spec.n_scenes, spec.seed)[scene_index]
    noise = spec.noise_grid[noise_index]
    params = spec.inversion
    rows = []
    try:
        scene = build_scene(spec.family, scene_seed, spec.grid)
        truth = solve_mfg(scene, params=params.solver)
        obs = add_noise(observe(truth, scene.goal), noise[0], noise[1], _noise_seed(spec.seed, scene_index, noise_index))
        known = scene.with_obstacles(())
        n_obs = len(scene.obstacles)
        init = stage1_init(known, obs, None, n_obs, params=params.solver, rescore=params.stage1_rescore)
    except SolverError as exc:
        for subset in spec.channel_subsets:
            for method in spec.methods:
                rows.append(_row(spec, scene_index, scene_seed, subset, method, noise, status=f"failed: {exc}"))
        return rows, time.perf_counter() - t0

    memo = {}

    def attempt(p):
        # the oracle grid contains the global vector; identical runs are shared
        if p not in memo:
            est = stage2_refine(init, known, obs, p, stats)
            memo[p] = (estimate_metrics(est, scene), est.evaluations)
        return memo[p]

    for subset in spec.channel_subsets:
        uniform, oracle_pts = channel_omegas(subset, spec.simplex_n)
        for method in spec.methods:
            try:
                if method == "mfg_multi":
                    met, it = attempt(replace(params, loss="multi", channels=subset))
                    rows.append(_row(spec, scene_index, scene_seed, subset, method, noise, met, it))
                elif method == "trad_global":
                    met, it = attempt(replace(params, loss="weighted", omega=uniform))
                    rows.append(_row(spec, scene_index, scene_seed, subset, method, noise, met, it, uniform))
                else:
                    best = None
                    for w in oracle_pts:
                        met, it = attempt(replace(params, loss="weighted", omega=w))
                        if best is None or met.center_error < best[0].center_error:
                            best = (met, it, w)
                    rows.append(_row(spec, scene_index, scene_seed, subset, method, noise, *best))
            except SolverError as exc:
                rows.append(_row(spec, scene_index, scene_seed, subset, method, noise, status=f"failed: {exc}"))
    return rows, time.perf_counter() - t0


def _summarise(spec: BenchmarkSpec, rows: list[dict]) -> dict:
    groups: dict = {}
    for r in rows:
        if r["status"] != "ok":
            continue
        key = f'{r["method"]}|{r["channels"]}|{r["eps_add"]!r}|{r["eps_mult"]!r}'
        groups.setdefault(key, []).append(r)
    agg = {}
    for key, rs in sorted(groups.items()):
        entry = {"n": len(rs)}
        for m in ("center_error", "iou", "radius_mae"):
            v = np.array([r[m] for r in rs])
            entry[f"{m}_mean"] = float(v.mean())
            entry[f"{m}_std"] = float(v.std())
        agg[key] = entry
    sequences = {}
    for method in spec.methods:
        for a, b in spec.noise_grid:
            seq = []
            for subset in spec.channel_subsets:
                e = agg.get(f'{method}|{"+".join(subset)}|{a!r}|{b!r}')
                seq.append(None if e is None else e["center_error_mean"])
            sequences[f"{method}|{a!r}|{b!r}"] = seq
    return {
        "family": spec.family,
        "seed": spec.seed,
        "n_scenes": spec.n_scenes,
        "channel_subsets": ["+".join(s) for s in spec.channel_subsets],
        "failures": sum(r["status"] != "ok" for r in rows),
        "aggregates": agg,
        "center_error_by_channel_count": sequences,
    }


def _job(args):
    return run_job(*args)


def benchmark(spec: BenchmarkSpec, threads: int = 1) -> BenchmarkReport:
    """Run every job of ``spec``; ``threads > 1`` uses a process pool."""
    stats = None
    if "mfg_multi" in spec.methods:
        stats = calibrate_channels(spec.family, spec.n_calib, spec.seed, spec.grid, spec.inversion.solver)
    jobs = [(spec, stats, i, j) for i in range(spec.n_scenes) for j in range(len(spec.noise_grid))]
    if threads > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(_job, jobs))
    else:
        results = [_job(j) for j in jobs]
    rows, timings = [], []
    for (_, _, i, j), (job_rows, wall) in zip(jobs, results):
        rows.extend(job_rows)
        timings.append({"scene_index": i, "eps_add": spec.noise_grid[j][0], "eps_mult": spec.noise_grid[j][1], "wall_time": wall})
    order = {m: k for k, m in enumerate(METHODS)}
    rows.sort(key=lambda r: (r["scene_index"], r["eps_add"], r["eps_mult"], r["channels"].count("+"), r["channels"], order[r["method"]]))
    return BenchmarkReport(rows, _summarise(spec, rows), timings)
