"""
Finite-difference solver for the coupled HJB / Fokker-Planck system

    -du/dt - nu Lap u + |grad u|^2 / 2 = f(m) + phi,     u(T) = g
     dm/dt - nu Lap m - div(m grad u)  = 0,              m(0) = m0

HJB steps are semi-implicit (implicit diffusion, explicit Engquist-Osher
upwind Hamiltonian); FPK steps use explicit donor-cell fluxes with the face
velocity ``-grad u`` followed by an implicit diffusion solve. The donor-cell
flux is the exact transpose of the linearised upwind Hamiltonian, so the two
sweeps form an adjoint-consistent pair. The coupling is resolved by damped
Picard iteration.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .grid import Grid, ImplicitDiffusion, check_field, gradient, integrate


class SolverError(RuntimeError):
    """Raised when a sweep cannot be completed (NaN, CFL beyond sub-step budget)."""


class CFLError(SolverError):
    pass


@dataclass(frozen=True)
class SolverParams:
    max_picard: int = 100
    picard_tol: float = 1e-6
    damping: float = 0.5
    hjb_inner_scheme: str = "semi_implicit_upwind"
    fpk_scheme: str = "implicit_diffusion_explicit_upwind_advection"
    cfl_safety: float = 0.9
    max_substeps: int = 16
    renormalize: bool = False
    anderson_depth: int = 0

    def __post_init__(self):
        if self.picard_tol <= 0:
            raise ValueError("picard_tol must be positive")
        if not 0.0 < self.damping <= 1.0:
            raise ValueError(f"damping must lie in (0, 1], got {self.damping}")
        if not 0.0 < self.cfl_safety < 1.0:
            raise ValueError(f"cfl_safety must lie in (0, 1), got {self.cfl_safety}")
        if self.anderson_depth < 0:
            raise ValueError("anderson_depth must be >= 0")
        if self.max_picard < 1 or self.max_substeps < 1:
            raise ValueError("max_picard and max_substeps must be >= 1")
        if self.hjb_inner_scheme != "semi_implicit_upwind":
            raise ValueError(f"unknown hjb_inner_scheme {self.hjb_inner_scheme!r}")
        if self.fpk_scheme != "implicit_diffusion_explicit_upwind_advection":
            raise ValueError(f"unknown fpk_scheme {self.fpk_scheme!r}")

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass
class MfgSolution:
    grid: Grid
    u: np.ndarray
    m: np.ndarray
    residual_history: list[float]
    converged: bool
    iterations: int
    drift: tuple[np.ndarray, np.ndarray] = field(init=False, repr=False)

    def __post_init__(self):
        vx = np.empty_like(self.u)
        vy = np.empty_like(self.u)
        for k, frame in enumerate(self.u):
            gx, gy = gradient(frame, self.grid, "central")
            vx[k], vy[k] = -gx, -gy
        self.drift = (vx, vy)

    @property
    def mass(self) -> np.ndarray:
        return integrate(self.m, self.grid)

    def report(self) -> dict:
        return {
            "iterations": self.iterations,
            "converged": self.converged,
            "residual_history": [float(r) for r in self.residual_history],
            "mass_drift_max": float(np.max(np.abs(self.mass - 1.0))),
            "min_density": float(self.m.min()),
        }


def congestion_cost(m, congestion) -> np.ndarray:
    """Running congestion cost ``f(m)``; only the linear law ``kappa * m`` is defined."""
    if congestion is None:
        return np.zeros_like(m)
    if congestion.kind != "linear":
        raise ValueError(f"unsupported congestion kind {congestion.kind!r}")
    return congestion.kappa * m


def solve_hjb(phi, m_traj, g, grid: Grid, nu: float, congestion, params: SolverParams | None = None, source=None):
    """Backward HJB sweep from ``u(T) = g`` with frozen density trajectory.

    ``source`` (optional, shape ``(nt+1, ny, nx)``) is added to the right-hand
    side; frame ``k`` enters the step that produces ``u^k``.
    """
    params = params or SolverParams()
    phi = check_field(phi, grid)
    g = check_field(g, grid)
    nt = grid.nt
    dt = grid.dt
    solver = ImplicitDiffusion(grid, nu, dt)
    fm = congestion_cost(np.asarray(m_traj, dtype=float), congestion)
    u = np.empty((nt + 1, *grid.shape))
    u[nt] = g
    for k in range(nt - 1, -1, -1):
        forcing = fm[k] + phi
        if source is not None:
            forcing = forcing + source[k]
        u[k] = hjb_step(u[k + 1], forcing, grid, solver, params)
        if not np.all(np.isfinite(u[k])):
            raise SolverError(f"HJB sweep produced non-finite values at step {k}")
    return u


def hjb_step(u_next, forcing, grid: Grid, solver: ImplicitDiffusion, params: SolverParams):
    """One backward step: explicit Hamiltonian sub-steps, then implicit diffusion.

    With a single sub-step this is ``(I - nu dt Lap) u^k = u^{k+1} - dt (H(u^{k+1}) - forcing)``.
    """
    n = _substeps(u_next, grid, params)
    h = grid.dt / n
    z = u_next
    for _ in range(n):
        z = z - h * (kernels.eo_hamiltonian(z, grid.dx, grid.dy, grid.periodic) - forcing)
    return solver.solve(z)


def _substeps(u_frame, grid: Grid, params: SolverParams) -> int:
    rate = kernels.max_outflow_rate(u_frame, grid.dx, grid.dy, grid.periodic)
    n = max(1, math.ceil(grid.dt * rate / params.cfl_safety))
    if n > params.max_substeps:
        raise CFLError(
            f"advection CFL number {grid.dt * rate:.3g} needs {n} sub-steps "
            f"(limit {params.max_substeps}); reduce dt or increase max_substeps"
        )
    return n


def fpk_step(m, u_frame, grid: Grid, solver: ImplicitDiffusion, params: SolverParams):
    """One forward step: donor-cell advection sub-steps, then implicit diffusion."""
    n = _substeps(u_frame, grid, params)
    h = grid.dt / n
    z = m
    for _ in range(n):
        z = z - h * kernels.upwind_divergence(z, u_frame, grid.dx, grid.dy, grid.periodic)
    out = solver.solve(z)
    if params.renormalize:
        out = out / integrate(out, grid)
    return out


def solve_fpk(u_traj, m0, grid: Grid, nu: float, params: SolverParams | None = None):
    """Forward FPK sweep from ``m(0) = m0``; step ``k -> k+1`` uses drift ``-grad u^k``."""
    params = params or SolverParams()
    m0 = check_field(m0, grid)
    solver = ImplicitDiffusion(grid, nu, grid.dt)
    m = np.empty((grid.nt + 1, *grid.shape))
    m[0] = m0
    for k in range(grid.nt):
        m[k + 1] = fpk_step(m[k], u_traj[k], grid, solver, params)
        if not np.all(np.isfinite(m[k + 1])):
            raise SolverError(f"FPK sweep produced non-finite values at step {k + 1}")
    return m


def heat_flow(m0, grid: Grid, nu: float):
    zero = np.zeros((grid.nt + 1, *grid.shape))
    return solve_fpk(zero, m0, grid, nu)


def _rel_change(new, old) -> float:
    den = np.linalg.norm(new)
    diff = np.linalg.norm(new - old)
    if den == 0.0:
        return 0.0 if diff == 0.0 else float("inf")
    return float(diff / den)


class _AndersonMixer:
    """Anderson mixing of the density iterate; ``depth == 0`` is plain damped Picard."""

    def __init__(self, depth: int, damping: float):
        self.depth = depth
        self.theta = damping
        self.xs: list[np.ndarray] = []
        self.rs: list[np.ndarray] = []

    def reset(self):
        self.xs.clear()
        self.rs.clear()

    def __call__(self, x, gx):
        r = gx - x
        if self.depth == 0:
            return x + self.theta * r
        self.xs.append(x.ravel())
        self.rs.append(r.ravel())
        if len(self.xs) > self.depth + 1:
            self.xs.pop(0)
            self.rs.pop(0)
        if len(self.xs) == 1:
            return x + self.theta * r
        dX = np.stack([b - a for a, b in zip(self.xs[:-1], self.xs[1:])], axis=1)
        dR = np.stack([b - a for a, b in zip(self.rs[:-1], self.rs[1:])], axis=1)
        gamma, *_ = np.linalg.lstsq(dR, self.rs[-1], rcond=None)
        out = self.xs[-1] - dX @ gamma + self.theta * (self.rs[-1] - dR @ gamma)
        return out.reshape(x.shape)


def solve_mfg(scene, phi=None, params: SolverParams | None = None, m_init=None, u_init=None) -> MfgSolution:
    """Damped Picard iteration for the coupled system.

    Args:
        scene: supplies grid, ``m0``, ``g``, ``nu`` and the congestion law.
        phi: environment cost field; defaults to the scene's own potential.
        params: solver settings.
        m_init: optional density trajectory to start from (warm start);
            pure heat flow from ``m0`` otherwise.
        u_init: optional value trajectory matching ``m_init``; only used to
            measure the first residual.

    Non-convergence is reported through ``converged=False``, not raised.
    """
    params = params or SolverParams()
    grid = scene.grid
    phi = scene.phi if phi is None else check_field(phi, grid)
    m_j = heat_flow(scene.m0, grid, scene.nu) if m_init is None else np.array(m_init, dtype=float)
    u_prev = np.zeros((grid.nt + 1, *grid.shape)) if u_init is None else np.asarray(u_init, dtype=float)
    mixer = _AndersonMixer(params.anderson_depth, params.damping)
    history: list[float] = []
    converged = False
    u = m_new = None
    for _ in range(params.max_picard):
        u = solve_hjb(phi, m_j, scene.g, grid, scene.nu, scene.congestion, params)
        m_new = solve_fpk(u, scene.m0, grid, scene.nu, params)
        res = max(_rel_change(u, u_prev), _rel_change(m_new, m_j))
        if history and res > 2.0 * history[-1]:
            mixer.reset()
        history.append(res)
        if res <= params.picard_tol:
            converged = True
            break
        u_prev = u
        m_j = mixer(m_j, m_new)
    return MfgSolution(grid, u, m_new, history, converged, len(history))
