"""Config-driven experiment runner.

Every run writes ``resolved_config.json`` (all defaults filled in) and
``manifest.json`` (input hash, seed, package versions, output hashes) next to
its results. Exit codes: 0 success, 2 invalid config, 3 forward solve did not
converge and ``--fatal-nonconvergence`` (or the config flag) is set.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import platform
import sys
from pathlib import Path

import numpy as np
import scipy

from . import __version__, kernels
from . import config as cfgmod
from .benchmark import BenchmarkSpec, benchmark
from .forward import SolverError, solve_mfg
from .grid import field_to_csv, time_field_to_csv
from .invert import estimate_metrics, invert
from .mechanism import compute_local_weights, default_regions, region_average_weights, weights_to_csv
from .observe import add_noise, calibrate_channels, load_observations, observe, save_observations
from .scene import FAMILIES

log = logging.getLogger("mfgtomo")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NONCONVERGED = 3


class NonConvergence(RuntimeError):
    pass


def _sha256(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


class RunDir:
    """Output directory that remembers what was written, for the manifest."""

    def __init__(self, path: Path):
        self.path = path
        self.path.mkdir(parents=True, exist_ok=True)
        self.files: dict[str, str] = {}

    def write(self, name: str, text: str) -> None:
        p = self.path / name
        p.parent.mkdir(parents=True, exist_ok=True)
        p.write_text(text)
        self.files[name] = _sha256(text.encode())

    def record_tree(self, sub: str) -> None:
        for p in sorted((self.path / sub).rglob("*")):
            if p.is_file():
                self.files[str(p.relative_to(self.path))] = _sha256(p.read_bytes())


def _check_convergence(sol, cfg, fatal: bool, what: str = "forward solve") -> None:
    if sol.converged:
        return
    msg = f"{what} did not converge in {sol.iterations} Picard iterations (residual {sol.residual_history[-1]:.3g})"
    if fatal or cfg["fatal_nonconvergence"]:
        raise NonConvergence(msg)
    log.warning(msg)


def _json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


# ----------------------------------------------------------------------------
# run kinds

def run_forward(cfg, out: RunDir, fatal: bool) -> None:
    scene = cfgmod.scene_of(cfg)
    sol = solve_mfg(scene, params=cfgmod.solver_of(cfg))
    out.write("u.csv", time_field_to_csv(sol.u, scene.grid))
    out.write("m.csv", time_field_to_csv(sol.m, scene.grid))
    out.write("phi.csv", field_to_csv(scene.phi, scene.grid))
    out.write("scene.json", scene.to_json() + "\n")
    out.write("convergence.json", _json(sol.report()))
    _check_convergence(sol, cfg, fatal)


def _synthetic_observations(cfg, scene, fatal):
    sol = solve_mfg(scene, params=cfgmod.solver_of(cfg))
    _check_convergence(sol, cfg, fatal)
    o = cfg["observation"]
    obs = observe(sol, scene.goal, o["tau"])
    seed = cfg["seed"] if o["noise_seed"] is None else o["noise_seed"]
    return add_noise(obs, o["eps_add"], o["eps_mult"], seed), sol


def run_observe(cfg, out: RunDir, fatal: bool) -> None:
    scene = cfgmod.scene_of(cfg)
    obs, sol = _synthetic_observations(cfg, scene, fatal)
    save_observations(obs, out.path / "observations")
    out.record_tree("observations")
    out.write("convergence.json", _json(sol.report()))


def run_weights(cfg, out: RunDir, fatal: bool) -> None:
    scene = cfgmod.scene_of(cfg)
    sol = solve_mfg(scene, params=cfgmod.solver_of(cfg))
    _check_convergence(sol, cfg, fatal)
    w = cfg["weights"]
    fields = compute_local_weights(sol, scene.phi, scene.congestion, w["eps_den"])
    regions = default_regions(scene)
    series = {name: region_average_weights(fields, mask, w["mass_weighting"], sol.m) for name, mask in regions.items()}
    out.write("weights.csv", weights_to_csv(series, scene.grid.times))
    out.write("regions.json", _json({name: np.argwhere(mask).tolist() for name, mask in regions.items()}))
    out.write("convergence.json", _json(sol.report()))


def run_invert(cfg, out: RunDir, fatal: bool) -> None:
    scene = cfgmod.scene_of(cfg)
    params = cfgmod.inversion_of(cfg)
    obs_dir = cfg["observation"]["observations_dir"]
    if obs_dir:
        obs = load_observations(obs_dir)
    else:
        obs, _ = _synthetic_observations(cfg, scene, fatal)
    stats = None
    if params.loss == "multi":
        family = scene.family or FAMILIES[0]
        stats = calibrate_channels(family, cfg["inversion"]["n_calib"], cfg["seed"], scene.grid, params.solver)
    known = scene.with_obstacles(())
    est = invert(known, obs, params, stats, n_obstacles=max(1, len(scene.obstacles)))
    out.write("phi_est.csv", field_to_csv(est.phi, scene.grid))
    result = {
        "obstacles": [o.to_dict() for o in est.parametric] if est.parametric is not None else None,
        "loss_history": [float(v) for v in est.loss_history],
        "evaluations": est.evaluations,
        "stage": est.stage,
    }
    if scene.obstacles:
        m = estimate_metrics(est, scene)
        result["metrics"] = {"center_error": m.center_error, "iou": m.iou, "radius_mae": m.radius_mae}
    out.write("estimate.json", _json(result))


def run_benchmark(cfg, out: RunDir, fatal: bool, threads: int) -> None:
    b = cfg["benchmark"]
    spec = BenchmarkSpec(
        family=b["family"],
        n_scenes=b["n_scenes"],
        channel_subsets=tuple(tuple(s) for s in b["channel_subsets"]),
        methods=tuple(b["methods"]),
        noise_grid=tuple(tuple(x) for x in b["noise_grid"]),
        seed=cfg["seed"],
        n_calib=b["n_calib"],
        simplex_n=b["simplex_n"],
        inversion=cfgmod.inversion_of(cfg),
        grid=cfgmod.grid_of(cfg),
    )
    report = benchmark(spec, threads)
    out.write("report.csv", report.to_csv())
    out.write("summary.json", report.summary_json() + "\n")
    out.write("timings.csv", report.timings_csv())


RUNNERS = {"forward": run_forward, "observe": run_observe, "weights": run_weights, "invert": run_invert}


# ----------------------------------------------------------------------------
# default configs

def make_default_configs(output_dir) -> list[Path]:
    """Write the canonical config, the noise-grid benchmark and one benchmark per family."""
    d = Path(output_dir)
    d.mkdir(parents=True, exist_ok=True)
    fast_solver = {"damping": 1.0, "anderson_depth": 3, "max_substeps": 64}
    configs = {
        "canonical.json": {"kind": "invert", "seed": 0},
        "noise_grid.json": {
            "kind": "benchmark",
            "seed": 0,
            "solver": fast_solver,
            "benchmark": {
                "family": FAMILIES[0],
                "n_scenes": 8,
                "channel_subsets": [["f1", "f2", "f3"]],
                "methods": ["mfg_multi", "trad_global"],
                "noise_grid": [[a, b] for a in (0.0, 0.02, 0.05) for b in (0.0, 0.10, 0.20)],
            },
        },
    }
    for fam in FAMILIES:
        configs[f"benchmark_{fam}.json"] = {
            "kind": "benchmark",
            "seed": 0,
            "solver": fast_solver,
            "benchmark": {"family": fam, "n_scenes": 12},
        }
    written = []
    for name, raw in configs.items():
        resolved = cfgmod.resolve(raw)
        p = d / name
        p.write_text(cfgmod.dumps(resolved))
        written.append(p)
    return written


# ----------------------------------------------------------------------------
# entry point

def _manifest(cfg_path: Path, raw_bytes: bytes, cfg: dict, threads: int, out: RunDir) -> dict:
    return {
        "kind": cfg["kind"],
        "config": str(cfg_path),
        "config_sha256": _sha256(raw_bytes),
        "resolved_config_sha256": out.files.get("resolved_config.json"),
        "seed": cfg["seed"],
        "threads": threads,
        "versions": {
            "mfgtomo": __version__,
            "python": platform.python_version(),
            "numpy": np.__version__,
            "scipy": scipy.__version__,
            "kernels": kernels.BACKEND,
        },
        "outputs": dict(sorted(out.files.items())),
    }


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mfgtomo", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    for kind in (*RUNNERS, "benchmark"):
        sp = sub.add_parser(kind, help=f"run a {kind} experiment")
        sp.add_argument("--config", required=True, help="JSON experiment config")
        sp.add_argument("--out", help="output directory (overrides output_dir)")
        sp.add_argument("--seed", type=int, help="seed (overrides the config)")
        sp.add_argument("--threads", type=int, default=1, help="worker processes for benchmarks")
        sp.add_argument("--fatal-nonconvergence", action="store_true", help="exit 3 when a forward solve does not converge")
    sp = sub.add_parser("init-configs", help="write the default experiment configs")
    sp.add_argument("--out", required=True, help="directory for the configs")
    return p


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    args = build_parser().parse_args(argv)
    if args.command == "init-configs":
        try:
            for path in make_default_configs(args.out):
                print(path)
        except OSError as exc:
            print(f"error: cannot write to {args.out}: {exc.strerror}", file=sys.stderr)
            return EXIT_CONFIG
        return EXIT_OK

    cfg_path = Path(args.config)
    try:
        raw = cfgmod.read(cfg_path)
        raw_bytes = cfg_path.read_bytes()
        if raw.get("kind") != args.command:
            log.info("running %s with a %s config (the subcommand sets the kind)", args.command, raw.get("kind"))
            raw = {**raw, "kind": args.command}
        if args.seed is not None:
            raw = {**raw, "seed": args.seed}
        if args.out is not None:
            raw = {**raw, "output_dir": args.out}
        if args.threads < 1:
            raise cfgmod.ConfigError("--threads", "must be >= 1", str(cfg_path))
        cfg = cfgmod.resolve(raw, str(cfg_path))
        if cfg["output_dir"] is None:
            raise cfgmod.ConfigError("output_dir", "no output directory (set output_dir or pass --out)", str(cfg_path))
    except cfgmod.ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    out = RunDir(Path(cfg["output_dir"]))
    out.write("resolved_config.json", cfgmod.dumps(cfg))
    code = EXIT_OK
    try:
        if args.command == "benchmark":
            run_benchmark(cfg, out, args.fatal_nonconvergence, args.threads)
        else:
            RUNNERS[args.command](cfg, out, args.fatal_nonconvergence)
    except NonConvergence as exc:
        print(f"error: {exc}", file=sys.stderr)
        code = EXIT_NONCONVERGED
    except SolverError as exc:
        print(f"error: {exc}", file=sys.stderr)
        code = EXIT_NONCONVERGED
    out.path.joinpath("manifest.json").write_text(_json(_manifest(cfg_path, raw_bytes, cfg, args.threads, out)))
    return code


if __name__ == "__main__":
    sys.exit(main())
