"""Environment construction: obstacle potentials, densities, terminal costs, scene families."""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from .grid import REFLECTING, Grid, build_grid, check_field, integrate
from .observe import GoalGeometry, build_goal

OBSTACLE_DOMINATED = "obstacle_dominated"
CONGESTION_DOMINATED = "congestion_dominated"
MIXED_CONFLICT = "mixed_conflict"
FAMILIES = (OBSTACLE_DOMINATED, CONGESTION_DOMINATED, MIXED_CONFLICT)

# Canonical scene. Every experiment default lives here.
CANONICAL = {
    "boundary_mode": REFLECTING,
    "nu": 0.15,
    "m0_center": (-1.0, -1.0),
    "m0_sigma": 0.5,
    "obstacle_center": (1.5, 1.5),
    "obstacle_radius": 0.8,
    "obstacle_strength": 5.0,
    "obstacle_smoothness": 0.1,
    "kappa": 1.0,
    "beta": 6.0,
    "goal_corner": (6.0, 6.0),
    "goal_cells": 6,
    "goal_delta_cells": 2.0,
}

# Parameter ranges of the randomised scene families.
FAMILY_RANGES = {
    OBSTACLE_DOMINATED: {"C": (4.0, 8.0), "r": (0.5, 1.0), "center": (0.5, 3.5), "kappa": 0.5, "sigma": 0.5},
    CONGESTION_DOMINATED: {"C": (1.0, 3.0), "r": (0.5, 1.0), "center": (0.5, 3.5), "kappa": (2.0, 5.0), "sigma": 0.3},
    MIXED_CONFLICT: {
        "C": (4.0, 8.0),
        "r": (0.4, 0.7),
        "gap": (0.8, 1.5),
        "along": (0.8, 2.2),
        "kappa": (1.0, 3.0),
        "sigma": 0.5,
    },
}


@dataclass(frozen=True)
class ObstacleSpec:
    center: tuple[float, float]
    radius: float
    strength: float
    smoothness: float = 0.1

    def __post_init__(self):
        if self.radius <= 0:
            raise ValueError(f"obstacle radius must be positive, got {self.radius}")
        if self.strength < 0:
            raise ValueError(f"obstacle strength must be >= 0, got {self.strength}")
        if self.smoothness < 0:
            raise ValueError(f"obstacle smoothness must be >= 0, got {self.smoothness}")
        object.__setattr__(self, "center", (float(self.center[0]), float(self.center[1])))

    def to_dict(self) -> dict:
        return {"center": list(self.center), "radius": self.radius, "strength": self.strength, "smoothness": self.smoothness}

    @classmethod
    def from_dict(cls, d: dict) -> ObstacleSpec:
        return cls(tuple(d["center"]), float(d["radius"]), float(d["strength"]), float(d.get("smoothness", 0.1)))


@dataclass(frozen=True)
class CongestionSpec:
    kappa: float = 1.0
    kind: str = "linear"

    def __post_init__(self):
        if self.kind != "linear":
            raise ValueError(f"unsupported congestion kind {self.kind!r}")
        if self.kappa < 0:
            raise ValueError(f"kappa must be >= 0, got {self.kappa}")


def indicator(grid: Grid, spec: ObstacleSpec) -> np.ndarray:
    """Logistic-mollified disk indicator; ``smoothness == 0`` gives the sharp disk."""
    X, Y = grid.mesh()
    dist = np.hypot(X - spec.center[0], Y - spec.center[1])
    if spec.smoothness == 0:
        return (dist <= spec.radius).astype(float)
    arg = np.clip((dist - spec.radius) / spec.smoothness, -700.0, 700.0)
    return 1.0 / (1.0 + np.exp(arg))


def render_phi(grid: Grid, obstacles, phi_bg=None) -> np.ndarray:
    phi = np.zeros(grid.shape) if phi_bg is None else np.array(phi_bg, dtype=float)
    for ob in obstacles:
        phi = phi + ob.strength * indicator(grid, ob)
    return phi


def build_initial_density(center, sigma: float, grid: Grid) -> np.ndarray:
    """Gaussian bump normalised to unit mass under the grid quadrature."""
    if sigma <= 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    X, Y = grid.mesh()
    r2 = (X - center[0]) ** 2 + (Y - center[1]) ** 2
    m = np.clip(np.exp(-r2 / (2 * sigma**2)), 0.0, None)
    if np.count_nonzero(m > 1e-300) <= 1 or m.max() > 0.999 * m.sum():
        warnings.warn("initial density concentrated in a single cell", RuntimeWarning, stacklevel=2)
    total = integrate(m, grid)
    if total == 0.0:
        m = np.zeros(grid.shape)
        m[grid.cell_of(*center)] = 1.0
        total = integrate(m, grid)
    return m / total


def build_terminal_cost(goal_center, beta: float, grid: Grid) -> np.ndarray:
    """``g(x) = beta * min(|x - goal_center|, diag)`` with ``diag`` the domain diagonal."""
    if beta < 0:
        raise ValueError(f"beta must be >= 0, got {beta}")
    X, Y = grid.mesh()
    cap = np.hypot(grid.x_max - grid.x_min, grid.y_max - grid.y_min)
    return beta * np.minimum(np.hypot(X - goal_center[0], Y - goal_center[1]), cap)


@dataclass(frozen=True)
class Scene:
    grid: Grid
    obstacles: tuple[ObstacleSpec, ...]
    congestion: CongestionSpec
    nu: float
    goal: GoalGeometry
    m0_center: tuple[float, float]
    m0_sigma: float
    beta: float
    phi_bg_value: float = 0.0
    family: str | None = None
    seed: int | None = None
    m0: np.ndarray = field(init=False, repr=False, compare=False)
    g: np.ndarray = field(init=False, repr=False, compare=False)
    phi_bg: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.nu <= 0:
            raise ValueError(f"nu must be positive, got {self.nu}")
        if self.phi_bg_value < 0:
            raise ValueError("background potential must be nonnegative")
        object.__setattr__(self, "obstacles", tuple(self.obstacles))
        object.__setattr__(self, "m0", build_initial_density(self.m0_center, self.m0_sigma, self.grid))
        object.__setattr__(self, "g", build_terminal_cost(self.goal.center, self.beta, self.grid))
        object.__setattr__(self, "phi_bg", np.full(self.grid.shape, float(self.phi_bg_value)))

    @property
    def phi(self) -> np.ndarray:
        return build_phi(self)

    def with_obstacles(self, obstacles) -> Scene:
        return replace(self, obstacles=tuple(obstacles))

    def to_dict(self) -> dict:
        return {
            "grid": self.grid.to_dict(),
            "obstacles": [ob.to_dict() for ob in self.obstacles],
            "congestion": {"kind": self.congestion.kind, "kappa": self.congestion.kappa},
            "nu": self.nu,
            "m0": {"center": list(self.m0_center), "sigma": self.m0_sigma},
            "g": {"kind": "truncated_distance", "beta": self.beta},
            "phi_bg": {"kind": "constant", "value": self.phi_bg_value},
            "goal": self.goal.to_dict(),
            "family": self.family,
            "seed": self.seed,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> Scene:
        grid = Grid.from_dict(d["grid"])
        return cls(
            grid=grid,
            obstacles=tuple(ObstacleSpec.from_dict(o) for o in d["obstacles"]),
            congestion=CongestionSpec(float(d["congestion"]["kappa"]), d["congestion"].get("kind", "linear")),
            nu=float(d["nu"]),
            goal=GoalGeometry.from_dict(d["goal"], grid),
            m0_center=tuple(d["m0"]["center"]),
            m0_sigma=float(d["m0"]["sigma"]),
            beta=float(d["g"]["beta"]),
            phi_bg_value=float(d.get("phi_bg", {}).get("value", 0.0)),
            family=d.get("family"),
            seed=d.get("seed"),
        )

    @classmethod
    def from_json(cls, text: str) -> Scene:
        return cls.from_dict(json.loads(text))


def build_phi(scene: Scene) -> np.ndarray:
    """Total potential: sum of obstacle bumps plus the known background."""
    return check_field(render_phi(scene.grid, scene.obstacles, scene.phi_bg), scene.grid)


def default_grid() -> Grid:
    return build_grid(boundary_mode=CANONICAL["boundary_mode"])


def canonical_scene(grid: Grid | None = None, **overrides) -> Scene:
    """The single-obstacle reference scene; keyword overrides replace CANONICAL entries."""
    p = {**CANONICAL, **overrides}
    grid = grid or build_grid(boundary_mode=p["boundary_mode"])
    goal = build_goal(grid, p["goal_corner"], p["goal_cells"], p["goal_delta_cells"] * grid.dx)
    obstacle = ObstacleSpec(p["obstacle_center"], p["obstacle_radius"], p["obstacle_strength"], p["obstacle_smoothness"])
    return Scene(
        grid=grid,
        obstacles=(obstacle,) if p["obstacle_strength"] > 0 else (),
        congestion=CongestionSpec(p["kappa"]),
        nu=p["nu"],
        goal=goal,
        m0_center=tuple(p["m0_center"]),
        m0_sigma=p["m0_sigma"],
        beta=p["beta"],
    )


def _draw(rng, value):
    if isinstance(value, tuple):
        return float(rng.uniform(*value))
    return float(value)


def build_scene(family: str, seed: int, grid: Grid | None = None) -> Scene:
    """Random scene of one benchmark family; a pure function of ``(family, seed)``."""
    if family not in FAMILIES:
        raise ValueError(f"unknown scene family {family!r}; expected one of {FAMILIES}")
    rng = np.random.default_rng([FAMILIES.index(family), int(seed)])
    rg = FAMILY_RANGES[family]
    base = canonical_scene(grid)
    s = CANONICAL["obstacle_smoothness"]
    if family == MIXED_CONFLICT:
        # two obstacles straddling the m0 -> goal line, leaving a gap between their edges
        start = np.array(CANONICAL["m0_center"])
        axis = np.array(base.goal.center) - start
        axis /= np.linalg.norm(axis)
        normal = np.array([-axis[1], axis[0]])
        mid = start + axis * (np.hypot(2.5, 2.5) + _draw(rng, rg["along"]))
        gap = _draw(rng, rg["gap"])
        obstacles = []
        for sign in (1.0, -1.0):
            r = _draw(rng, rg["r"])
            c = mid + sign * normal * (r + gap / 2)
            obstacles.append(ObstacleSpec((c[0], c[1]), r, _draw(rng, rg["C"]), s))
    else:
        lo, hi = rg["center"]
        c = rng.uniform(lo, hi, size=2)
        obstacles = [ObstacleSpec((c[0], c[1]), _draw(rng, rg["r"]), _draw(rng, rg["C"]), s)]
    return replace(
        base,
        obstacles=tuple(obstacles),
        congestion=CongestionSpec(_draw(rng, rg["kappa"])),
        m0_sigma=float(rg["sigma"]),
        family=family,
        seed=int(seed),
    )
