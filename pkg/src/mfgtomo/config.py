"""Experiment configuration: strict JSON schema, defaults and object construction.

A config is validated against ``SCHEMA`` (unknown keys are rejected at every
level), then merged over ``DEFAULTS``. The merged ("resolved") config is what
every run writes back next to its outputs; parsing it again yields the same
resolved config.
"""

from __future__ import annotations

import copy
import json
from dataclasses import replace
from pathlib import Path

import jsonschema

from .forward import SolverParams
from .grid import build_grid
from .invert import InversionParams
from .observe import CHANNELS
from .scene import CANONICAL, FAMILIES, CongestionSpec, ObstacleSpec, build_scene, canonical_scene

KINDS = ("forward", "observe", "weights", "invert", "benchmark")


class ConfigError(ValueError):
    """Schema or value error; the message starts with the offending key path."""

    def __init__(self, key: str, message: str, path: str | None = None):
        self.key = key
        where = f"{path}: " if path else ""
        super().__init__(f"{where}{key}: {message}")


_NUM = {"type": "number"}
_POS = {"type": "number", "exclusiveMinimum": 0}
_NONNEG = {"type": "number", "minimum": 0}
_POSINT = {"type": "integer", "minimum": 1}
_PAIR = {"type": "array", "items": _NUM, "minItems": 2, "maxItems": 2}
_CHANNELS = {"type": "array", "items": {"enum": list(CHANNELS)}, "minItems": 1, "uniqueItems": True}


def _obj(props: dict, required=()) -> dict:
    return {"type": "object", "properties": props, "additionalProperties": False, "required": list(required)}


SCHEMA = _obj(
    {
        "kind": {"enum": list(KINDS)},
        "seed": {"type": "integer", "minimum": 0},
        "output_dir": {"type": ["string", "null"]},
        "fatal_nonconvergence": {"type": "boolean"},
        "grid": _obj(
            {
                "bounds": {"type": "array", "items": _NUM, "minItems": 4, "maxItems": 4},
                "nx": {"type": "integer", "minimum": 8},
                "ny": {"type": "integer", "minimum": 8},
                "nt": {"type": "integer", "minimum": 2},
                "T": _POS,
                "boundary_mode": {"enum": ["periodic", "reflecting"]},
            }
        ),
        "scene": _obj(
            {
                "family": {"enum": [None, *FAMILIES]},
                "family_seed": {"type": "integer", "minimum": 0},
                "nu": _POS,
                "kappa": _NONNEG,
                "beta": _NONNEG,
                "m0_center": _PAIR,
                "m0_sigma": _POS,
                "goal_corner": _PAIR,
                "goal_cells": _POSINT,
                "goal_delta_cells": _NONNEG,
                "phi_bg": _NONNEG,
                "obstacles": {
                    "type": "array",
                    "items": _obj(
                        {"center": _PAIR, "radius": _POS, "strength": _NONNEG, "smoothness": _NONNEG},
                        required=("center", "radius", "strength"),
                    ),
                },
            }
        ),
        "solver": _obj(
            {
                "max_picard": _POSINT,
                "picard_tol": _POS,
                "damping": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
                "hjb_inner_scheme": {"enum": ["semi_implicit_upwind"]},
                "fpk_scheme": {"enum": ["implicit_diffusion_explicit_upwind_advection"]},
                "cfl_safety": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
                "max_substeps": _POSINT,
                "renormalize": {"type": "boolean"},
                "anderson_depth": {"type": "integer", "minimum": 0},
            }
        ),
        "observation": _obj(
            {
                "tau": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
                "eps_add": _NONNEG,
                "eps_mult": _NONNEG,
                "noise_seed": {"type": ["integer", "null"], "minimum": 0},
                "observations_dir": {"type": ["string", "null"]},
            }
        ),
        "weights": _obj({"eps_den": _POS, "mass_weighting": {"type": "boolean"}}),
        "inversion": _obj(
            {
                "lambda": _NONNEG,
                "alpha_mc": {"type": ["number", "null"], "minimum": 0},
                "eta": _POS,
                "max_outer": _POSINT,
                "grad_tol": _POS,
                "mode": {"enum": ["parametric", "grid"]},
                "channels": _CHANNELS,
                "loss": {"enum": ["single", "multi", "weighted"]},
                "omega": {"type": "array", "items": _NONNEG, "minItems": 3, "maxItems": 3},
                "param_lambda": _NONNEG,
                "optimizer": {"enum": ["least_squares", "nelder_mead"]},
                "smooth_grad": {"type": "boolean"},
                "max_halvings": {"type": "integer", "minimum": 0},
                "n_calib": {"type": "integer", "minimum": 2},
                "stage1_rescore": {"type": "integer", "minimum": 0},
                "n_starts": {"type": "integer", "minimum": 1},
                "restart_rtol": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
            }
        ),
        "benchmark": _obj(
            {
                "family": {"enum": list(FAMILIES)},
                "n_scenes": _POSINT,
                "channel_subsets": {"type": "array", "items": _CHANNELS, "minItems": 1},
                "methods": {
                    "type": "array",
                    "items": {"enum": ["mfg_multi", "trad_global", "trad_oracle"]},
                    "minItems": 1,
                    "uniqueItems": True,
                },
                "noise_grid": {"type": "array", "items": {"type": "array", "items": _NONNEG, "minItems": 2, "maxItems": 2}, "minItems": 1},
                "n_calib": {"type": "integer", "minimum": 2},
                "simplex_n": _POSINT,
            }
        ),
    },
    required=("kind",),
)

DEFAULTS = {
    "seed": 0,
    "output_dir": None,
    "fatal_nonconvergence": False,
    "grid": {"bounds": [-2.0, 6.0, -2.0, 6.0], "nx": 35, "ny": 35, "nt": 50, "T": 2.0, "boundary_mode": CANONICAL["boundary_mode"]},
    "scene": {
        "family": None,
        "family_seed": 0,
        "nu": CANONICAL["nu"],
        "kappa": CANONICAL["kappa"],
        "beta": CANONICAL["beta"],
        "m0_center": list(CANONICAL["m0_center"]),
        "m0_sigma": CANONICAL["m0_sigma"],
        "goal_corner": list(CANONICAL["goal_corner"]),
        "goal_cells": CANONICAL["goal_cells"],
        "goal_delta_cells": CANONICAL["goal_delta_cells"],
        "phi_bg": 0.0,
        "obstacles": [
            {
                "center": list(CANONICAL["obstacle_center"]),
                "radius": CANONICAL["obstacle_radius"],
                "strength": CANONICAL["obstacle_strength"],
                "smoothness": CANONICAL["obstacle_smoothness"],
            }
        ],
    },
    "solver": SolverParams().to_dict(),
    "observation": {"tau": 0.01, "eps_add": 0.0, "eps_mult": 0.0, "noise_seed": None, "observations_dir": None},
    "weights": {"eps_den": 1e-10, "mass_weighting": True},
    "inversion": {
        "lambda": 1.0,
        "alpha_mc": None,
        "eta": 0.3,
        "max_outer": 200,
        "grad_tol": 1e-6,
        "mode": "parametric",
        "channels": ["f1"],
        "loss": "single",
        "omega": [1 / 3, 1 / 3, 1 / 3],
        "param_lambda": 0.0,
        "optimizer": "least_squares",
        "smooth_grad": True,
        "max_halvings": 8,
        "n_calib": 16,
        "stage1_rescore": 16,
        "n_starts": 3,
        "restart_rtol": 1e-6,
    },
    "benchmark": {
        "family": FAMILIES[0],
        "n_scenes": 12,
        "channel_subsets": [["f1"], ["f1", "f2"], ["f1", "f2", "f3"]],
        "methods": ["mfg_multi", "trad_global", "trad_oracle"],
        "noise_grid": [[0.0, 0.0]],
        "n_calib": 16,
        "simplex_n": 4,
    },
}


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def resolve(raw: dict, path: str | None = None) -> dict:
    """Validate ``raw`` and return the resolved config (all defaults filled).

    Raises:
        ConfigError: naming the offending key.
    """
    validator = jsonschema.Draft202012Validator(SCHEMA)
    errors = sorted(validator.iter_errors(raw), key=lambda e: list(e.absolute_path))
    if errors:
        err = errors[0]
        key = ".".join(str(p) for p in err.absolute_path) or "<root>"
        if err.validator == "additionalProperties":
            extra = sorted(set(err.instance) - set(err.schema.get("properties", {})))
            key = ".".join([*(str(p) for p in err.absolute_path), extra[0]]) if extra else key
            raise ConfigError(key, "unknown key", path)
        raise ConfigError(key, err.message, path)
    cfg = _merge(DEFAULTS, raw)
    if raw.get("scene", {}).get("obstacles") is not None:
        cfg["scene"]["obstacles"] = [
            {"smoothness": CANONICAL["obstacle_smoothness"], **o} for o in raw["scene"]["obstacles"]
        ]
    _check_values(cfg, path)
    return cfg


def _check_values(cfg: dict, path) -> None:
    b = cfg["grid"]["bounds"]
    if not (b[1] > b[0] and b[3] > b[2]):
        raise ConfigError("grid.bounds", "need x_max > x_min and y_max > y_min", path)
    om = cfg["inversion"]["omega"]
    if abs(sum(om) - 1.0) > 1e-12:
        raise ConfigError("inversion.omega", "weights must sum to 1", path)
    # building the objects surfaces any remaining value errors with their key
    for key, fn in (("grid", grid_of), ("scene", scene_of), ("solver", solver_of), ("inversion", inversion_of)):
        try:
            fn(cfg)
        except ConfigError:
            raise
        except (ValueError, TypeError) as exc:
            raise ConfigError(key, str(exc), path) from exc


def load(path) -> tuple[dict, dict]:
    """Read and resolve a config file; returns ``(raw, resolved)``.

    Raises:
        ConfigError: unreadable file, invalid JSON or schema violation.
    """
    raw = read(path)
    return raw, resolve(raw, str(path))


def read(path) -> dict:
    """The raw JSON object of a config file, not yet validated.

    Raises:
        ConfigError: unreadable file or invalid JSON.
    """
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as exc:
        raise ConfigError("<file>", f"cannot read config ({exc.strerror})", str(p)) from exc
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError("<file>", f"invalid JSON: {exc}", str(p)) from exc
    if not isinstance(raw, dict):
        raise ConfigError("<root>", "config must be a JSON object", str(p))
    return raw


def dumps(cfg: dict) -> str:
    return json.dumps(cfg, indent=2, sort_keys=True) + "\n"


# ----------------------------------------------------------------------------
# object construction

def grid_of(cfg: dict):
    g = cfg["grid"]
    return build_grid(tuple(g["bounds"]), g["nx"], g["ny"], g["nt"], g["T"], g["boundary_mode"])


def scene_of(cfg: dict):
    s = cfg["scene"]
    grid = grid_of(cfg)
    if s["family"] is not None:
        return build_scene(s["family"], s["family_seed"], grid)
    scene = canonical_scene(
        grid,
        nu=s["nu"],
        kappa=s["kappa"],
        beta=s["beta"],
        m0_center=tuple(s["m0_center"]),
        m0_sigma=s["m0_sigma"],
        goal_corner=tuple(s["goal_corner"]),
        goal_cells=s["goal_cells"],
        goal_delta_cells=s["goal_delta_cells"],
        obstacle_strength=0.0,
    )
    obstacles = tuple(ObstacleSpec(tuple(o["center"]), o["radius"], o["strength"], o["smoothness"]) for o in s["obstacles"])
    return replace(scene, obstacles=obstacles, congestion=CongestionSpec(s["kappa"]), phi_bg_value=s["phi_bg"])


def solver_of(cfg: dict) -> SolverParams:
    return SolverParams(**cfg["solver"])


def inversion_of(cfg: dict) -> InversionParams:
    i = cfg["inversion"]
    return InversionParams(
        lam=i["lambda"],
        alpha_mc=i["alpha_mc"],
        eta=i["eta"],
        max_outer=i["max_outer"],
        grad_tol=i["grad_tol"],
        mode=i["mode"],
        channels=tuple(i["channels"]),
        loss=i["loss"],
        omega=tuple(i["omega"]),
        param_lambda=i["param_lambda"],
        optimizer=i["optimizer"],
        smooth_grad=i["smooth_grad"],
        max_halvings=i["max_halvings"],
        stage1_rescore=i["stage1_rescore"],
        n_starts=i["n_starts"],
        restart_rtol=i["restart_rtol"],
        solver=solver_of(cfg),
    )
