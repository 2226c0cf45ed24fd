"""Travel-time observation channels, noise injection and channel standardisation.

Three channels are read off one forward solution:

* ``f1`` - arrival trace: density on the goal boundary patch at every time level,
  shape ``(n_goal_cells, nt + 1)``;
* ``f2`` - terminal redistribution: final density on the cells within ``delta``
  of the goal patch, ordered by flat cell index;
* ``f3`` - summary ``(t_first, eta_asym, M_acc)`` of the aggregate arrival profile.
"""

from __future__ import annotations

import io
import json
import math
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .grid import Grid

CHANNELS = ("f1", "f2", "f3")
STD_FLOOR = 1e-8
NO_ARRIVAL = math.inf


@dataclass(frozen=True)
class GoalGeometry:
    """Observation patch on the domain edge plus its thin interior neighbourhood."""

    gamma_goal: tuple[tuple[int, int], ...]
    delta: float
    grid: Grid = field(repr=False, compare=False)
    edge: str = "top"
    omega_obs: tuple[tuple[int, int], ...] = field(init=False)
    center: tuple[float, float] = field(init=False)

    def __post_init__(self):
        g = self.grid
        cells = tuple(sorted((int(r), int(c)) for r, c in self.gamma_goal))
        if not cells:
            raise ValueError("goal patch must contain at least one cell")
        if self.delta < 0:
            raise ValueError("delta must be nonnegative")
        for r, c in cells:
            if not (0 <= r < g.ny and 0 <= c < g.nx):
                raise ValueError(f"goal cell {(r, c)} outside the grid")
            if r not in (0, g.ny - 1) and c not in (0, g.nx - 1):
                raise ValueError(f"goal cell {(r, c)} is not a boundary cell")
        object.__setattr__(self, "gamma_goal", cells)
        X, Y = g.mesh()
        gx = np.array([g.xc[c] for _, c in cells])
        gy = np.array([g.yc[r] for r, _ in cells])
        dist = np.min(np.hypot(X[..., None] - gx, Y[..., None] - gy), axis=-1)
        mask = dist <= self.delta + 1e-9 * max(g.dx, g.dy)
        object.__setattr__(self, "omega_obs", tuple(zip(*np.nonzero(mask))))
        object.__setattr__(self, "center", (float(gx.mean()), float(gy.mean())))

    @property
    def rows(self) -> np.ndarray:
        return np.array([r for r, _ in self.gamma_goal])

    @property
    def cols(self) -> np.ndarray:
        return np.array([c for _, c in self.gamma_goal])

    @property
    def obs_index(self) -> tuple[np.ndarray, np.ndarray]:
        return (np.array([r for r, _ in self.omega_obs]), np.array([c for _, c in self.omega_obs]))

    @property
    def cell_length(self) -> float:
        """Length of one boundary cell along the edge carrying the patch."""
        return self.grid.dx if self.edge in ("top", "bottom") else self.grid.dy

    def to_dict(self) -> dict:
        return {"gamma_goal": [list(c) for c in self.gamma_goal], "delta": self.delta, "edge": self.edge}

    @classmethod
    def from_dict(cls, d: dict, grid: Grid) -> GoalGeometry:
        return cls(tuple(tuple(c) for c in d["gamma_goal"]), float(d["delta"]), grid, d.get("edge", "top"))


def build_goal(grid: Grid, corner=(6.0, 6.0), n_cells: int = 6, delta: float | None = None) -> GoalGeometry:
    """The ``n_cells`` cells of the top (or bottom) edge nearest ``corner``."""
    row = grid.ny - 1 if corner[1] >= 0.5 * (grid.y_min + grid.y_max) else 0
    order = np.argsort(np.abs(grid.xc - corner[0]), kind="stable")[:n_cells]
    cells = tuple((row, int(c)) for c in sorted(order))
    delta = 2 * grid.dx if delta is None else delta
    return GoalGeometry(cells, delta, grid, "top" if row == grid.ny - 1 else "bottom")


@dataclass(frozen=True)
class SummaryVector:
    t_first: float
    eta_asym: float
    M_acc: float

    def as_array(self, grid: Grid) -> np.ndarray:
        """Numeric form; a missing arrival maps to one step past the horizon."""
        t = grid.T + grid.dt if math.isinf(self.t_first) else self.t_first
        return np.array([t, self.eta_asym, self.M_acc])


@dataclass(frozen=True)
class ObservationSet:
    f1: np.ndarray
    f2: np.ndarray
    f3: np.ndarray
    grid: Grid = field(repr=False, compare=False)
    goal: GoalGeometry = field(repr=False, compare=False)
    noise_meta: dict = field(default_factory=lambda: {"eps_add": 0.0, "eps_mult": 0.0, "seed": None})

    def channel(self, name: str) -> np.ndarray:
        return {"f1": self.f1, "f2": self.f2, "f3": self.f3}[name]


def extract_arrival_trace(m_traj, goal: GoalGeometry) -> np.ndarray:
    """Density samples on the goal patch, shape ``(n_cells, nt + 1)``."""
    m_traj = np.asarray(m_traj)
    return m_traj[:, goal.rows, goal.cols].T.copy()


def extract_terminal_density(m_traj, goal: GoalGeometry) -> np.ndarray:
    rows, cols = goal.obs_index
    return np.asarray(m_traj)[-1][rows, cols].copy()


def arrival_profile(trace, goal: GoalGeometry) -> np.ndarray:
    return np.asarray(trace).sum(axis=0) * goal.cell_length


def extract_summary(trace, grid: Grid, goal: GoalGeometry, tau: float = 0.01) -> SummaryVector:
    """First-arrival time, temporal skewness and accumulated mass of the arrival profile."""
    if not 0.0 < tau < 1.0:
        raise ValueError(f"tau must lie in (0, 1), got {tau}")
    a = arrival_profile(trace, goal)
    t = grid.times
    total = a.sum()
    if not np.any(a > 0) or total <= 0:
        return SummaryVector(NO_ARRIVAL, 0.0, 0.0)
    t_first = float(t[np.argmax(a >= tau * a.max())])
    p = a / total
    mu = np.dot(p, t)
    var = np.dot(p, (t - mu) ** 2)
    skew = float(np.dot(p, (t - mu) ** 3) / var**1.5) if var > 0 else 0.0
    return SummaryVector(t_first, skew, float(total * grid.dt))


def observe(sol, goal: GoalGeometry, tau: float = 0.01) -> ObservationSet:
    """All three channels from one forward solution."""
    trace = extract_arrival_trace(sol.m, goal)
    f2 = extract_terminal_density(sol.m, goal)
    f3 = extract_summary(trace, sol.grid, goal, tau).as_array(sol.grid)
    return ObservationSet(trace, f2, f3, sol.grid, goal)


def add_noise(obs: ObservationSet, eps_add: float, eps_mult: float, seed: int) -> ObservationSet:
    """``y' = y (1 + eps_mult xi1) + eps_add sigma_ch xi2`` per sample, channel-wise."""
    if eps_add < 0 or eps_mult < 0:
        raise ValueError("noise levels must be nonnegative")
    rng = np.random.default_rng(seed)
    noisy = {}
    for name in CHANNELS:
        y = obs.channel(name)
        xi1 = rng.standard_normal(y.shape)
        xi2 = rng.standard_normal(y.shape)
        sigma = float(np.std(y))
        noisy[name] = y * (1.0 + eps_mult * xi1) + eps_add * sigma * xi2
    meta = {"eps_add": float(eps_add), "eps_mult": float(eps_mult), "seed": int(seed)}
    return replace(obs, noise_meta=meta, **noisy)


@dataclass(frozen=True)
class ChannelStats:
    mean: dict
    std: dict

    def shapes(self) -> dict:
        return {k: np.shape(v) for k, v in self.mean.items()}


def channel_stats(observations, rel_floor: float = 1e-2) -> ChannelStats:
    """Element-wise mean and standard deviation over an ensemble of observation sets.

    Each std entry is floored at ``max(1e-8, rel_floor * mean std of its channel)``
    so elements that never vary in the ensemble cannot dominate a z-score.
    """
    observations = list(observations)
    if len(observations) < 2:
        raise ValueError("need at least two observation sets for channel statistics")
    mean, std = {}, {}
    for name in CHANNELS:
        stack = np.stack([o.channel(name) for o in observations])
        mu = stack.mean(axis=0)
        sd = stack.std(axis=0)
        floor = max(STD_FLOOR, rel_floor * float(sd.mean()))
        if np.any(sd < STD_FLOOR):
            warnings.warn(f"channel {name}: degenerate std floored", RuntimeWarning, stacklevel=2)
        mean[name] = mu
        std[name] = np.maximum(sd, floor)
    return ChannelStats(mean, std)


def calibrate_channels(
    scene_family: str,
    n_calib: int = 16,
    seed: int = 0,
    grid: Grid | None = None,
    params=None,
    rel_floor: float = 1e-2,
) -> ChannelStats:
    """Channel statistics from forward solves of ``n_calib`` random scenes of a family."""
    from .forward import solve_mfg
    from .scene import build_scene

    if n_calib < 2:
        raise ValueError("n_calib must be >= 2")
    seeds = np.random.default_rng([7919, int(seed)]).integers(0, 2**31 - 1, size=n_calib)
    obs = []
    for s in seeds:
        scene = build_scene(scene_family, int(s), grid)
        obs.append(observe(solve_mfg(scene, params=params), scene.goal))
    return channel_stats(obs, rel_floor)


def normalize_and_stack(obs: ObservationSet, stats: ChannelStats, channels=CHANNELS) -> np.ndarray:
    """z-score the selected channels and concatenate them (f1 row-major, f2, f3)."""
    parts = []
    for name in channels:
        y = np.asarray(obs.channel(name), dtype=float)
        if y.shape != np.shape(stats.mean[name]):
            raise ValueError(f"channel {name} has shape {y.shape}, stats expect {np.shape(stats.mean[name])}")
        parts.append(((y - stats.mean[name]) / stats.std[name]).ravel())
    return np.concatenate(parts)


def unstack(vec, stats: ChannelStats, channels=CHANNELS) -> dict:
    """Inverse of ``normalize_and_stack``: channel arrays in physical units."""
    out, pos = {}, 0
    for name in channels:
        shape = np.shape(stats.mean[name])
        n = int(np.prod(shape))
        z = np.asarray(vec[pos : pos + n]).reshape(shape)
        out[name] = z * stats.std[name] + stats.mean[name]
        pos += n
    if pos != len(vec):
        raise ValueError("vector length does not match channel shapes")
    return out


# ----------------------------------------------------------------------------
# file format: obs.json + f1.csv + f2.csv

def save_observations(obs: ObservationSet, directory) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    meta = {
        "grid": obs.grid.to_dict(),
        "goal": obs.goal.to_dict(),
        "f3": {"t_first": obs.f3[0], "eta_asym": obs.f3[1], "M_acc": obs.f3[2]},
        "noise_meta": obs.noise_meta,
        "f1_csv": "f1.csv",
        "f2_csv": "f2.csv",
    }
    (d / "obs.json").write_text(json.dumps(meta, indent=2, sort_keys=True))
    buf = io.StringIO()
    buf.write("# rows=goal cells (row-major order of gamma_goal), cols=time index 0..nt\n")
    np.savetxt(buf, obs.f1, delimiter=",", fmt="%.17g")
    (d / "f1.csv").write_text(buf.getvalue())
    buf = io.StringIO()
    buf.write("# row,col,value\n")
    for (r, c), v in zip(obs.goal.omega_obs, obs.f2):
        buf.write(f"{r},{c},{v:.17g}\n")
    (d / "f2.csv").write_text(buf.getvalue())


def load_observations(directory) -> ObservationSet:
    d = Path(directory)
    meta = json.loads((d / "obs.json").read_text())
    grid = Grid.from_dict(meta["grid"])
    goal = GoalGeometry.from_dict(meta["goal"], grid)
    f1 = np.atleast_2d(np.loadtxt(d / meta["f1_csv"], delimiter=",", comments="#"))
    f2_rows = np.atleast_2d(np.loadtxt(d / meta["f2_csv"], delimiter=",", comments="#"))
    f2 = f2_rows[:, 2].copy()
    f3 = np.array([meta["f3"]["t_first"], meta["f3"]["eta_asym"], meta["f3"]["M_acc"]])
    return ObservationSet(f1, f2, f3, grid, goal, meta["noise_meta"])
