"""
Cell-centred space-time grids, discrete differential operators and quadrature.

Layout convention used throughout the package: a scalar field is an ndarray of
shape ``(ny, nx)`` with row index = y and column index = x; a time field is an
ndarray of shape ``(nt + 1, ny, nx)`` with frame ``k`` at ``t_k = k * dt``.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field
from typing import TYPE_CHECKING

import numpy as np
from scipy import fft

if TYPE_CHECKING:
    from collections.abc import Iterable

    from numpy.typing import NDArray

PERIODIC = "periodic"
REFLECTING = "reflecting"
BOUNDARY_MODES = (PERIODIC, REFLECTING)

DEFAULT_BOUNDS = (-2.0, 6.0, -2.0, 6.0)
DEFAULT_NX = 35
DEFAULT_NY = 35
DEFAULT_NT = 50
DEFAULT_T = 2.0


@dataclass(frozen=True)
class Grid:
    """Uniform cell-centred discretisation of a rectangle times ``[0, T]``."""

    x_min: float
    x_max: float
    y_min: float
    y_max: float
    nx: int
    ny: int
    nt: int
    T: float
    boundary_mode: str = PERIODIC
    dx: float = field(init=False)
    dy: float = field(init=False)
    dt: float = field(init=False)

    def __post_init__(self):
        if self.boundary_mode not in BOUNDARY_MODES:
            raise ValueError(f"boundary_mode must be one of {BOUNDARY_MODES}, got {self.boundary_mode!r}")
        if not (self.x_max > self.x_min and self.y_max > self.y_min):
            raise ValueError("domain extents must be strictly positive")
        if self.T <= 0:
            raise ValueError(f"horizon T must be positive, got {self.T}")
        if self.nx < 8 or self.ny < 8:
            raise ValueError(f"nx and ny must be >= 8, got nx={self.nx}, ny={self.ny}")
        if self.nt < 2:
            raise ValueError(f"nt must be >= 2, got {self.nt}")
        object.__setattr__(self, "dx", (self.x_max - self.x_min) / self.nx)
        object.__setattr__(self, "dy", (self.y_max - self.y_min) / self.ny)
        object.__setattr__(self, "dt", self.T / self.nt)

    @property
    def shape(self) -> tuple[int, int]:
        return (self.ny, self.nx)

    @property
    def periodic(self) -> bool:
        return self.boundary_mode == PERIODIC

    @property
    def cell_area(self) -> float:
        return self.dx * self.dy

    @property
    def area(self) -> float:
        return (self.x_max - self.x_min) * (self.y_max - self.y_min)

    @property
    def xc(self) -> NDArray:
        return self.x_min + (np.arange(self.nx) + 0.5) * self.dx

    @property
    def yc(self) -> NDArray:
        return self.y_min + (np.arange(self.ny) + 0.5) * self.dy

    @property
    def times(self) -> NDArray:
        return np.arange(self.nt + 1) * self.dt

    def mesh(self) -> tuple[NDArray, NDArray]:
        """Cell-centre coordinates ``(X, Y)``, each of shape ``(ny, nx)``."""
        return np.meshgrid(self.xc, self.yc)

    def cell_of(self, x: float, y: float) -> tuple[int, int]:
        """(row, col) of the cell containing the point, clipped to the grid."""
        col = int(np.clip(np.floor((x - self.x_min) / self.dx), 0, self.nx - 1))
        row = int(np.clip(np.floor((y - self.y_min) / self.dy), 0, self.ny - 1))
        return row, col

    def to_dict(self) -> dict:
        return {
            "x_min": self.x_min,
            "x_max": self.x_max,
            "y_min": self.y_min,
            "y_max": self.y_max,
            "nx": self.nx,
            "ny": self.ny,
            "nt": self.nt,
            "T": self.T,
            "boundary_mode": self.boundary_mode,
        }

    @classmethod
    def from_dict(cls, d: dict) -> Grid:
        return cls(
            float(d["x_min"]),
            float(d["x_max"]),
            float(d["y_min"]),
            float(d["y_max"]),
            int(d["nx"]),
            int(d["ny"]),
            int(d["nt"]),
            float(d["T"]),
            d.get("boundary_mode", PERIODIC),
        )


def build_grid(
    bounds: tuple[float, float, float, float] = DEFAULT_BOUNDS,
    nx: int = DEFAULT_NX,
    ny: int = DEFAULT_NY,
    nt: int = DEFAULT_NT,
    T: float = DEFAULT_T,
    boundary_mode: str = PERIODIC,
) -> Grid:
    """Build a grid on ``[x_min, x_max] x [y_min, y_max] x [0, T]``.

    The defaults are the shared 2D setting: ``[-2, 6]^2``, 35 x 35 cells,
    50 time steps, ``T = 2``, periodic topology.
    """
    x_min, x_max, y_min, y_max = bounds
    if nx <= 0 or ny <= 0 or nt <= 0:
        raise ValueError(f"cell and step counts must be positive, got nx={nx}, ny={ny}, nt={nt}")
    return Grid(x_min, x_max, y_min, y_max, nx, ny, nt, T, boundary_mode)


def check_field(f: NDArray, grid: Grid) -> NDArray:
    f = np.asarray(f, dtype=float)
    if f.shape != grid.shape:
        raise ValueError(f"field shape {f.shape} does not match grid {grid.shape}")
    if not np.all(np.isfinite(f)):
        raise ValueError("field contains non-finite values")
    return f


def check_time_field(f: NDArray, grid: Grid) -> NDArray:
    f = np.asarray(f, dtype=float)
    if f.shape != (grid.nt + 1, *grid.shape):
        raise ValueError(f"time field shape {f.shape} does not match grid {(grid.nt + 1, *grid.shape)}")
    if not np.all(np.isfinite(f)):
        raise ValueError("time field contains non-finite values")
    return f


def integrate(f: NDArray, grid: Grid) -> float | NDArray:
    """Midpoint-rule integral over the domain.

    Accepts a single field or a stack of fields (leading axes are kept).
    """
    f = np.asarray(f, dtype=float)
    return f.sum(axis=(-2, -1)) * grid.cell_area


def l2_norm_sq(f: NDArray, grid: Grid) -> float:
    f = np.asarray(f, dtype=float)
    return float(np.sum(f * f) * grid.cell_area)


# ----------------------------------------------------------------------------
# one-sided differences

def _shift(f: NDArray, offset: int, axis: int, periodic: bool) -> NDArray:
    """Neighbour values ``f[i + offset]`` along ``axis``.

    Reflecting mode mirrors the edge cell (homogeneous Neumann ghost).
    """
    if periodic:
        return np.roll(f, -offset, axis=axis)
    n = f.shape[axis]
    idx = np.clip(np.arange(n) + offset, 0, n - 1)
    return np.take(f, idx, axis=axis)


def forward_diff(f: NDArray, h: float, axis: int, periodic: bool) -> NDArray:
    """``(f[i+1] - f[i]) / h``; zero across the outer face in reflecting mode."""
    return (_shift(f, 1, axis, periodic) - f) / h


def backward_diff(f: NDArray, h: float, axis: int, periodic: bool) -> NDArray:
    return (f - _shift(f, -1, axis, periodic)) / h


def gradient(f: NDArray, grid: Grid, scheme: str = "central", direction_source: NDArray | None = None):
    """Discrete gradient ``(df/dx, df/dy)``.

    ``scheme="central"`` uses ``(f[i+1] - f[i-1]) / 2h``. ``scheme="upwind_godunov"``
    picks, per axis, the one-sided difference selected by the Godunov rule for
    the Hamiltonian ``|p|^2 / 2`` evaluated on ``direction_source`` (defaults to
    ``f`` itself), then applies it to ``f``.
    """
    f = np.asarray(f, dtype=float)
    periodic = grid.periodic
    if scheme == "central":
        gx = (_shift(f, 1, -1, periodic) - _shift(f, -1, -1, periodic)) / (2 * grid.dx)
        gy = (_shift(f, 1, -2, periodic) - _shift(f, -1, -2, periodic)) / (2 * grid.dy)
        return gx, gy
    if scheme == "upwind_godunov":
        src = f if direction_source is None else np.asarray(direction_source, dtype=float)
        out = []
        for axis, h in ((-1, grid.dx), (-2, grid.dy)):
            dm_s = backward_diff(src, h, axis, periodic)
            dp_s = forward_diff(src, h, axis, periodic)
            dm = backward_diff(f, h, axis, periodic)
            dp = forward_diff(f, h, axis, periodic)
            use_m = (dm_s > 0) & ((dp_s >= 0) | (dm_s >= -dp_s))
            use_p = (dp_s < 0) & ~use_m
            out.append(np.where(use_m, dm, np.where(use_p, dp, 0.0)))
        return out[0], out[1]
    raise ValueError(f"unknown gradient scheme {scheme!r}")


def laplacian(f: NDArray, grid: Grid) -> NDArray:
    """Five-point Laplacian with the grid's boundary treatment."""
    periodic = grid.periodic
    lx = (_shift(f, 1, -1, periodic) - 2 * f + _shift(f, -1, -1, periodic)) / grid.dx**2
    ly = (_shift(f, 1, -2, periodic) - 2 * f + _shift(f, -1, -2, periodic)) / grid.dy**2
    return lx + ly


class ImplicitDiffusion:
    """Solver for ``(I - nu * tau * Laplacian) x = b`` on a fixed grid.

    The five-point Laplacian is diagonalised exactly by the FFT (periodic) or
    by the type-II DCT (reflecting, cell-centred Neumann), so each solve is a
    direct solve at FFT cost. The operator is symmetric, which the adjoint
    sweeps rely on.
    """

    def __init__(self, grid: Grid, nu: float, tau: float):
        self.grid = grid
        self.nu = nu
        self.tau = tau
        nx, ny = grid.nx, grid.ny
        if grid.periodic:
            kx = np.arange(nx // 2 + 1)
            ky = np.arange(ny)
            lam_x = (2 * np.cos(2 * np.pi * kx / nx) - 2) / grid.dx**2
            lam_y = (2 * np.cos(2 * np.pi * ky / ny) - 2) / grid.dy**2
        else:
            kx = np.arange(nx)
            ky = np.arange(ny)
            lam_x = (2 * np.cos(np.pi * kx / nx) - 2) / grid.dx**2
            lam_y = (2 * np.cos(np.pi * ky / ny) - 2) / grid.dy**2
        self._inv = 1.0 / (1.0 - nu * tau * (lam_y[:, None] + lam_x[None, :]))

    def solve(self, b: NDArray) -> NDArray:
        if self.grid.periodic:
            return fft.irfft2(fft.rfft2(b) * self._inv, s=b.shape)
        return fft.idctn(fft.dctn(b, type=2, norm="ortho") * self._inv, type=2, norm="ortho")

    def apply(self, x: NDArray) -> NDArray:
        """Forward operator, used for residual checks."""
        return x - self.nu * self.tau * laplacian(x, self.grid)


# ----------------------------------------------------------------------------
# CSV serialisation

def _header(grid: Grid) -> str:
    return (
        f"# nx={grid.nx},ny={grid.ny},x_min={grid.x_min!r},x_max={grid.x_max!r},"
        f"y_min={grid.y_min!r},y_max={grid.y_max!r},nt={grid.nt},T={grid.T!r},"
        f"boundary_mode={grid.boundary_mode}"
    )


def _parse_header(line: str) -> Grid:
    items = dict(kv.split("=", 1) for kv in line.lstrip("#").strip().split(","))
    return Grid.from_dict(items)


def field_to_csv(f: NDArray, grid: Grid) -> str:
    buf = io.StringIO()
    buf.write(_header(grid) + "\n")
    np.savetxt(buf, np.asarray(f, dtype=float), delimiter=",", fmt="%.17g")
    return buf.getvalue()


def time_field_to_csv(frames: NDArray, grid: Grid) -> str:
    buf = io.StringIO()
    buf.write(_header(grid) + "\n")
    for k, frame in enumerate(frames):
        buf.write(f"# t={k}\n")
        np.savetxt(buf, frame, delimiter=",", fmt="%.17g")
    return buf.getvalue()


def _data_rows(lines: Iterable[str]) -> list[list[float]]:
    return [[float(v) for v in ln.split(",")] for ln in lines if ln.strip()]


def field_from_csv(text: str) -> tuple[NDArray, Grid]:
    lines = text.splitlines()
    grid = _parse_header(lines[0])
    values = np.array(_data_rows(ln for ln in lines[1:] if not ln.startswith("#")))
    return check_field(values.reshape(grid.shape), grid), grid


def time_field_from_csv(text: str) -> tuple[NDArray, Grid]:
    lines = text.splitlines()
    grid = _parse_header(lines[0])
    frames: list[list[str]] = []
    for ln in lines[1:]:
        if ln.startswith("# t="):
            frames.append([])
        elif ln.strip():
            frames[-1].append(ln)
    values = np.array([np.array(_data_rows(fr)) for fr in frames])
    return check_time_field(values, grid), grid
