"""Endogenous cost-share diagnostics of a solved equilibrium.

At every point the running cost splits into a kinetic part ``K = |grad u|^2 / 2``,
a congestion part ``F = f(m)`` and an environment part ``Phi = phi``. The local
weights are the shares ``K / S``, ``F / S``, ``Phi / S`` with ``S = K + F + Phi``;
points with ``S <= eps_den`` are undefined and excluded from averages.
"""

from __future__ import annotations

import io
import math
from dataclasses import dataclass

import numpy as np

from .forward import congestion_cost
from .grid import Grid, check_field, gradient

WEIGHT_NAMES = ("w_kin", "w_crowd", "w_env")


@dataclass(frozen=True)
class WeightFields:
    w_kin: np.ndarray
    w_crowd: np.ndarray
    w_env: np.ndarray
    defined: np.ndarray

    def stacked(self) -> np.ndarray:
        return np.stack([self.w_kin, self.w_crowd, self.w_env])


def compute_local_weights(sol, phi, congestion, eps_den: float = 1e-10) -> WeightFields:
    """Pointwise cost shares of a solved equilibrium; undefined points hold NaN."""
    if eps_den <= 0:
        raise ValueError("eps_den must be positive")
    grid = sol.grid
    phi = check_field(phi, grid)
    K = np.empty_like(sol.u)
    for k, frame in enumerate(sol.u):
        gx, gy = gradient(frame, grid, "central")
        K[k] = 0.5 * (gx**2 + gy**2)
    # spectral diffusion leaves roundoff-level negative densities; they are not mass
    F = congestion_cost(np.clip(sol.m, 0.0, None), congestion)
    P = np.broadcast_to(phi, K.shape)
    S = K + F + P
    defined = S > eps_den
    safe = np.where(defined, S, 1.0)
    out = [np.where(defined, part / safe, np.nan) for part in (K, F, P)]
    return WeightFields(*out, defined)


# ----------------------------------------------------------------------------
# regions

def corridor_mask(grid: Grid, start, goal, half_width: float, obstacles=(), dilation: float | None = None) -> np.ndarray:
    """Straight band from ``start`` to ``goal``, minus dilated obstacle disks."""
    X, Y = grid.mesh()
    a = np.asarray(start, dtype=float)
    b = np.asarray(goal, dtype=float)
    axis = b - a
    length = float(np.hypot(*axis))
    axis = axis / length
    px, py = X - a[0], Y - a[1]
    along = px * axis[0] + py * axis[1]
    across = np.abs(-px * axis[1] + py * axis[0])
    mask = (along >= 0) & (along <= length) & (across <= half_width)
    pad = 2 * grid.dx if dilation is None else dilation
    for ob in obstacles:
        mask &= np.hypot(X - ob.center[0], Y - ob.center[1]) > ob.radius + pad
    return mask


def annulus_mask(grid: Grid, obstacles, width: float | None = None) -> np.ndarray:
    """Band of total ``width`` (default ``2 dx``) centred on each obstacle boundary."""
    X, Y = grid.mesh()
    half = (2 * grid.dx if width is None else width) / 2
    mask = np.zeros(grid.shape, dtype=bool)
    for ob in obstacles:
        d = np.hypot(X - ob.center[0], Y - ob.center[1])
        mask |= np.abs(d - ob.radius) <= half
    return mask


def bottleneck_mask(grid: Grid, first, second) -> np.ndarray:
    """Gap between two disks: the part of the joining strip lying outside both disks."""
    X, Y = grid.mesh()
    a = np.asarray(first.center)
    b = np.asarray(second.center)
    axis = b - a
    length = float(np.hypot(*axis))
    axis = axis / length
    px, py = X - a[0], Y - a[1]
    along = px * axis[0] + py * axis[1]
    across = np.abs(-px * axis[1] + py * axis[0])
    mask = (along >= first.radius) & (along <= length - second.radius) & (across <= min(first.radius, second.radius))
    return mask


def default_regions(scene) -> dict:
    """Open corridor, near-obstacle annulus and (two obstacles only) bottleneck."""
    grid = scene.grid
    regions = {
        "corridor": corridor_mask(grid, scene.m0_center, scene.goal.center, 2 * grid.dx, scene.obstacles),
    }
    if scene.obstacles:
        regions["near_obstacle"] = annulus_mask(grid, scene.obstacles)
    if len(scene.obstacles) == 2:
        regions["bottleneck"] = bottleneck_mask(grid, *scene.obstacles)
        regions["corridor"] &= ~regions["bottleneck"]
    return {k: v for k, v in regions.items() if v.any()}


def region_average_weights(weights: WeightFields, region_mask, mass_weighting: bool = True, m=None) -> np.ndarray:
    """Per-time region averages, shape ``(3, nt + 1)``; NaN where nothing is defined.

    With ``mass_weighting`` each cell counts in proportion to ``m(x, t)``.
    """
    region_mask = np.asarray(region_mask, dtype=bool)
    if not region_mask.any():
        raise ValueError("region mask is empty")
    if mass_weighting and m is None:
        raise ValueError("mass weighting needs the density trajectory m")
    W = weights.stacked()
    nt1 = W.shape[1]
    out = np.full((3, nt1), np.nan)
    for k in range(nt1):
        sel = region_mask & weights.defined[k]
        if not sel.any():
            continue
        if mass_weighting:
            wts = np.clip(m[k][sel], 0.0, None)
            total = wts.sum()
            if total <= 0:
                continue
        else:
            wts = np.ones(int(sel.sum()))
            total = float(wts.size)
        for c in range(3):
            out[c, k] = float(np.dot(W[c, k][sel], wts) / total)
    return out


def weights_to_csv(series: dict, times) -> str:
    """Long-format CSV: ``region,t,w_kin,w_crowd,w_env``; gaps are written as ``nan``."""
    buf = io.StringIO()
    buf.write("region,t,w_kin,w_crowd,w_env\n")
    for name, s in series.items():
        for k, t in enumerate(times):
            vals = ",".join("nan" if math.isnan(v) else f"{v:.17g}" for v in s[:, k])
            buf.write(f"{name},{t:.17g},{vals}\n")
    return buf.getvalue()
