from __future__ import annotations

import csv
import json

import pytest

from mfgtomo import config as cfgmod
from mfgtomo.cli import EXIT_CONFIG, EXIT_NONCONVERGED, EXIT_OK, main, make_default_configs

FAST = {"damping": 1.0, "anderson_depth": 3, "max_substeps": 64}


def _write(tmp_path, raw, name="cfg.json"):
    p = tmp_path / name
    p.write_text(json.dumps(raw))
    return p


def test_forward_run(tmp_path):
    cfg = _write(tmp_path, {"kind": "forward", "solver": FAST})
    out = tmp_path / "fwd"
    assert main(["forward", "--config", str(cfg), "--out", str(out)]) == EXIT_OK
    for name in ("u.csv", "m.csv", "phi.csv", "scene.json", "convergence.json", "resolved_config.json", "manifest.json"):
        assert (out / name).exists(), name
    conv = json.loads((out / "convergence.json").read_text())
    assert conv["converged"]
    manifest = json.loads((out / "manifest.json").read_text())
    assert set(manifest["outputs"]) >= {"u.csv", "m.csv", "resolved_config.json"}
    assert manifest["versions"]["kernels"] in ("cython", "numpy")
    resolved = json.loads((out / "resolved_config.json").read_text())
    assert cfgmod.resolve(resolved) == resolved


def test_negative_nu_exit_2(tmp_path, capsys):
    cfg = _write(tmp_path, {"scene": {"nu": -0.1}})
    assert main(["forward", "--config", str(cfg), "--out", str(tmp_path / "o")]) == EXIT_CONFIG
    assert "nu" in capsys.readouterr().err


def test_unknown_key_exit_2(tmp_path, capsys):
    cfg = _write(tmp_path, {"scene": {"nuu": 0.1}})
    assert main(["forward", "--config", str(cfg), "--out", str(tmp_path / "o")]) == EXIT_CONFIG
    assert "scene.nuu: unknown key" in capsys.readouterr().err


def test_missing_output_dir_exit_2(tmp_path, capsys):
    cfg = _write(tmp_path, {})
    assert main(["forward", "--config", str(cfg)]) == EXIT_CONFIG
    assert "output_dir" in capsys.readouterr().err


def test_missing_file_exit_2(tmp_path):
    assert main(["forward", "--config", str(tmp_path / "none.json"), "--out", str(tmp_path)]) == EXIT_CONFIG


def test_nonconvergence_fatal_exit_3(tmp_path):
    cfg = _write(tmp_path, {"solver": {"max_picard": 2}})
    out = tmp_path / "o"
    assert main(["forward", "--config", str(cfg), "--out", str(out), "--fatal-nonconvergence"]) == EXIT_NONCONVERGED
    assert (out / "manifest.json").exists()
    assert main(["forward", "--config", str(cfg), "--out", str(tmp_path / "o2")]) == EXIT_OK


def test_observe_and_invert_from_files(tmp_path):
    cfg = _write(tmp_path, {"solver": FAST})
    obs_out = tmp_path / "obs"
    assert main(["observe", "--config", str(cfg), "--out", str(obs_out)]) == EXIT_OK
    assert (obs_out / "observations" / "obs.json").exists()
    inv_cfg = _write(
        tmp_path,
        {"solver": FAST, "observation": {"observations_dir": str(obs_out / "observations")}},
        "inv.json",
    )
    inv_out = tmp_path / "inv"
    assert main(["invert", "--config", str(inv_cfg), "--out", str(inv_out)]) == EXIT_OK
    est = json.loads((inv_out / "estimate.json").read_text())
    assert est["metrics"]["center_error"] <= 0.25 and est["metrics"]["iou"] >= 0.75
    assert (inv_out / "phi_est.csv").exists()


def test_weights_run(tmp_path):
    cfg = _write(tmp_path, {"solver": FAST})
    out = tmp_path / "w"
    assert main(["weights", "--config", str(cfg), "--out", str(out)]) == EXIT_OK
    rows = list(csv.DictReader((out / "weights.csv").open()))
    assert {r["region"] for r in rows} == {"corridor", "near_obstacle"}
    assert len(rows) == 2 * 51


def test_init_configs(tmp_path):
    paths = make_default_configs(tmp_path)
    names = sorted(p.name for p in paths)
    assert names == sorted(
        ["canonical.json", "noise_grid.json", "benchmark_obstacle_dominated.json",
         "benchmark_congestion_dominated.json", "benchmark_mixed_conflict.json"]
    )
    for p in paths:
        raw, resolved = cfgmod.load(p)
        assert raw == resolved
    canon = json.loads((tmp_path / "canonical.json").read_text())
    assert canon["scene"]["nu"] == 0.15 and canon["grid"]["T"] == 2.0
    assert canon["grid"]["nx"] == canon["grid"]["ny"] == 35 and canon["grid"]["nt"] == 50
    assert canon["inversion"]["lambda"] == 1.0 and canon["inversion"]["eta"] == 0.3
    noise = json.loads((tmp_path / "noise_grid.json").read_text())["benchmark"]["noise_grid"]
    assert sorted(map(tuple, noise)) == [(a, b) for a in (0.0, 0.02, 0.05) for b in (0.0, 0.1, 0.2)]


def test_init_configs_unwritable(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("")
    assert main(["init-configs", "--out", str(blocker / "sub")]) == EXIT_CONFIG


TINY_BENCH = {
    "kind": "benchmark",
    "grid": {"nx": 20, "ny": 20, "nt": 25},
    "solver": FAST,
    "inversion": {"max_outer": 20, "n_starts": 1},
    "benchmark": {
        "family": "obstacle_dominated", "n_scenes": 1, "channel_subsets": [["f1"]],
        "methods": ["mfg_multi", "trad_global"], "n_calib": 2,
    },
}


@pytest.mark.slow
def test_benchmark_cli_byte_identical(tmp_path):
    cfg = _write(tmp_path, TINY_BENCH)
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["benchmark", "--config", str(cfg), "--out", str(a)]) == EXIT_OK
    assert main(["benchmark", "--config", str(cfg), "--out", str(b)]) == EXIT_OK
    assert (a / "report.csv").read_bytes() == (b / "report.csv").read_bytes()
    assert (a / "summary.json").read_bytes() == (b / "summary.json").read_bytes()
    ma = json.loads((a / "manifest.json").read_text())
    assert ma["outputs"]["report.csv"] == json.loads((b / "manifest.json").read_text())["outputs"]["report.csv"]


def test_seed_override_recorded(tmp_path):
    cfg = _write(tmp_path, {"solver": FAST, "seed": 1})
    out = tmp_path / "o"
    assert main(["forward", "--config", str(cfg), "--out", str(out), "--seed", "9"]) == EXIT_OK
    assert json.loads((out / "manifest.json").read_text())["seed"] == 9
