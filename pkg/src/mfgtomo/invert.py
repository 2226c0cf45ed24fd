"""Two-stage recovery of the environment potential from travel-time observations.

Stage I searches a coarse lattice of single-disk candidates under a cheap
frozen-crowd surrogate: the background equilibrium density is held fixed, so
each candidate costs one HJB sweep and one FPK sweep instead of a Picard loop.
Stage II refines under the full coupled model, either over obstacle parameters
(``parametric``, the default) or over the cell values of ``phi`` (``grid``),
where the descent direction is the exact adjoint gradient of a one-sweep
surrogate objective.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import ndimage, optimize

from . import kernels
from .forward import SolverError, SolverParams, _substeps, solve_fpk, solve_hjb, solve_mfg
from .grid import Grid, ImplicitDiffusion, check_field
from .observe import (
    CHANNELS,
    ChannelStats,
    ObservationSet,
    arrival_profile,
    extract_arrival_trace,
    extract_summary,
    extract_terminal_density,
    normalize_and_stack,
)
from .scene import ObstacleSpec, render_phi

MODES = ("parametric", "grid")
LOSSES = ("single", "multi", "weighted")
OPTIMIZERS = ("least_squares", "nelder_mead")
GLOBAL_OMEGA = (1 / 3, 1 / 3, 1 / 3)


def experiment_solver_params() -> SolverParams:
    """Forward settings used inside inversions: undamped Picard with Anderson mixing."""
    return SolverParams(damping=1.0, anderson_depth=3, max_substeps=64)


@dataclass(frozen=True)
class InversionParams:
    """Inversion settings.

    ``lam`` and ``alpha_mc`` weight the Tikhonov term of the single/weighted and
    the standardised multichannel loss. In parametric mode the regulariser is
    weighted by ``param_lambda`` instead (see the README for why).
    """

    lam: float = 1.0
    alpha_mc: float | None = None
    eta: float = 0.3
    max_outer: int = 200
    grad_tol: float = 1e-6
    mode: str = "parametric"
    channels: tuple[str, ...] = ("f1",)
    loss: str = "single"
    omega: tuple[float, float, float] = GLOBAL_OMEGA
    param_lambda: float = 0.0
    optimizer: str = "least_squares"
    smooth_grad: bool = True
    max_halvings: int = 8
    stage1_rescore: int = 16
    n_starts: int = 3
    restart_rtol: float = 1e-6
    solver: SolverParams = field(default_factory=experiment_solver_params)

    def __post_init__(self):
        if self.alpha_mc is None:
            object.__setattr__(self, "alpha_mc", self.lam)
        object.__setattr__(self, "channels", tuple(self.channels))
        object.__setattr__(self, "omega", tuple(float(w) for w in self.omega))
        if self.lam < 0 or self.alpha_mc < 0 or self.param_lambda < 0:
            raise ValueError("regularisation weights must be nonnegative")
        if self.eta <= 0:
            raise ValueError("eta must be positive")
        if self.stage1_rescore < 0:
            raise ValueError("stage1_rescore must be >= 0")
        if self.n_starts < 1:
            raise ValueError("n_starts must be >= 1")
        if not 0 <= self.restart_rtol < 1:
            raise ValueError("restart_rtol must lie in [0, 1)")
        if self.max_outer < 1:
            raise ValueError("max_outer must be >= 1")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.loss not in LOSSES:
            raise ValueError(f"loss must be one of {LOSSES}, got {self.loss!r}")
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"optimizer must be one of {OPTIMIZERS}, got {self.optimizer!r}")
        if not self.channels or any(c not in CHANNELS for c in self.channels):
            raise ValueError(f"channels must be a non-empty subset of {CHANNELS}")
        check_simplex(self.omega)

    def to_dict(self) -> dict:
        d = dict(self.__dict__)
        d["channels"] = list(self.channels)
        d["omega"] = list(self.omega)
        d["solver"] = self.solver.to_dict()
        return d


def check_simplex(omega, tol: float = 1e-12) -> tuple[float, ...]:
    w = np.asarray(omega, dtype=float)
    if w.shape != (3,) or np.any(w < 0) or abs(w.sum() - 1.0) > tol:
        raise ValueError(f"omega must be three nonnegative weights summing to 1, got {tuple(w)}")
    return tuple(float(x) for x in w)


@dataclass(frozen=True)
class BaselineWeights:
    omega: tuple[float, float, float]

    def __post_init__(self):
        object.__setattr__(self, "omega", check_simplex(self.omega))


@dataclass
class PhiEstimate:
    phi: np.ndarray
    parametric: list[ObstacleSpec] | None
    loss_history: list[float]
    stage: str
    evaluations: int = 0
    # runner-up Stage I obstacle lists, best first, used as extra Stage II starts
    alternatives: list = field(default_factory=list)

    def __post_init__(self):
        if np.any(self.phi < 0):
            raise ValueError("phi estimate must be nonnegative")
        if not np.all(np.isfinite(self.loss_history)):
            raise ValueError("loss history must be finite")


@dataclass(frozen=True)
class ReconMetrics:
    center_error: float
    iou: float
    radius_mae: float

    def __post_init__(self):
        if self.center_error < 0 or self.radius_mae < 0 or not 0.0 <= self.iou <= 1.0:
            raise ValueError(f"metrics out of range: {self}")

    def as_tuple(self) -> tuple[float, float, float]:
        return (self.center_error, self.iou, self.radius_mae)


# ----------------------------------------------------------------------------
# objectives

class Objective:
    """Sum-of-squares misfit of one observation set plus a Tikhonov term.

    The data term is ``0.5 * |r|^2`` for a residual vector ``r`` whose form
    depends on ``kind``:

    * ``single`` - arrival trace with boundary/time quadrature weights;
    * ``multi`` - standardised stacked channels, ``|Y - Y_obs|^2``;
    * ``weighted`` - ``sum_c omega_c |raw_c - obs_c|^2`` over the three channels.

    The regulariser is ``reg * sum(phi^2) dx dy``.
    """

    def __init__(self, scene, obs: ObservationSet, kind: str = "single", reg: float = 0.0,
                 channels=("f1",), stats: ChannelStats | None = None, omega=GLOBAL_OMEGA, tau: float = 0.01):
        if kind not in LOSSES:
            raise ValueError(f"unknown loss kind {kind!r}")
        if kind == "multi" and stats is None:
            raise ValueError("the multichannel loss needs calibration statistics")
        self.scene = scene
        self.grid: Grid = scene.grid
        self.goal = scene.goal
        self.kind = kind
        self.reg = float(reg)
        self.channels = tuple(channels) if kind == "multi" else CHANNELS if kind == "weighted" else ("f1",)
        self.stats = stats
        self.omega = check_simplex(omega)
        self.tau = tau
        self.obs = obs
        if kind == "multi":
            self._y_obs = normalize_and_stack(obs, stats, self.channels)

    # -- forward map -----------------------------------------------------
    def channels_of(self, m_traj) -> dict:
        trace = extract_arrival_trace(m_traj, self.goal)
        out = {"f1": trace}
        if self.kind != "single":
            out["f2"] = extract_terminal_density(m_traj, self.goal)
            out["f3"] = extract_summary(trace, self.grid, self.goal, self.tau).as_array(self.grid)
        return out

    def residual(self, m_traj) -> np.ndarray:
        ch = self.channels_of(m_traj)
        if self.kind == "single":
            w = math.sqrt(self.goal.cell_length * self.grid.dt)
            return w * (ch["f1"] - self.obs.f1).ravel()
        if self.kind == "multi":
            model = ObservationSet(ch["f1"], ch["f2"], ch["f3"], self.grid, self.goal)
            return math.sqrt(2.0) * (normalize_and_stack(model, self.stats, self.channels) - self._y_obs)
        parts = [math.sqrt(2.0 * w) * (ch[c] - self.obs.channel(c)).ravel() for c, w in zip(CHANNELS, self.omega)]
        return np.concatenate(parts)

    def data_loss(self, m_traj) -> float:
        r = self.residual(m_traj)
        return 0.5 * float(np.dot(r, r))

    def reg_loss(self, phi) -> float:
        return self.reg * float(np.sum(np.asarray(phi) ** 2)) * self.grid.cell_area

    def loss(self, phi, m_traj) -> float:
        return self.data_loss(m_traj) + self.reg_loss(phi)

    def reg_residual(self, phi) -> np.ndarray:
        return math.sqrt(2.0 * self.reg * self.grid.cell_area) * np.asarray(phi).ravel()

    # -- sensitivity of the data term to the density trajectory -------------
    def density_cotangent(self, m_traj) -> np.ndarray:
        """``d(data_loss)/dm`` for every frame and cell (the summary's t_first is piecewise constant)."""
        grid, goal = self.grid, self.goal
        ch = self.channels_of(m_traj)
        mbar = np.zeros_like(np.asarray(m_traj, dtype=float))
        rows, cols = goal.rows, goal.cols
        if self.kind == "single":
            g1 = goal.cell_length * grid.dt * (ch["f1"] - self.obs.f1)
            mbar[:, rows, cols] += g1.T
            return mbar
        if self.kind == "multi":
            coef = {c: 2.0 / self.stats.std[c] ** 2 for c in self.channels}
            diff = {c: (ch[c] - self.stats.mean[c]) - (self.obs.channel(c) - self.stats.mean[c]) for c in self.channels}
            grads = {c: coef[c] * diff[c] for c in self.channels}
        else:
            grads = {c: 2.0 * w * (ch[c] - self.obs.channel(c)) for c, w in zip(CHANNELS, self.omega)}
        if "f1" in grads:
            mbar[:, rows, cols] += grads["f1"].T
        if "f2" in grads:
            orow, ocol = goal.obs_index
            mbar[-1, orow, ocol] += grads["f2"]
        if "f3" in grads:
            abar = summary_vjp(ch["f1"], grid, goal, grads["f3"])
            mbar[:, rows, cols] += (abar * goal.cell_length)[:, None]
        return mbar


def summary_vjp(trace, grid: Grid, goal, gbar) -> np.ndarray:
    """Pull a cotangent of ``(t_first, eta_asym, M_acc)`` back to the arrival profile ``a(t_k)``."""
    a = arrival_profile(trace, goal)
    t = grid.times
    out = gbar[2] * grid.dt * np.ones_like(a)
    S = a.sum()
    if S <= 0:
        return out
    p = a / S
    mu = np.dot(p, t)
    d = t - mu
    var = np.dot(p, d**2)
    if var <= 0:
        return out
    m3 = np.dot(p, d**3)
    dvar = (d**2 - var) / S
    dm3 = (d**3 - m3 - 3.0 * var * d) / S
    dskew = dm3 / var**1.5 - 1.5 * m3 * var**-2.5 * dvar
    return out + gbar[1] * dskew


def _objective_for(scene, obs, params: InversionParams, stats=None, parametric: bool | None = None) -> Objective:
    parametric = params.mode == "parametric" if parametric is None else parametric
    if params.loss == "multi":
        base = params.param_lambda if parametric else params.alpha_mc
        reg = base
    else:
        base = params.param_lambda if parametric else params.lam
        reg = 0.5 * base
    return Objective(scene, obs, params.loss, reg, params.channels, stats, params.omega)


def loss_single(phi, scene, y_obs, lam: float, params: SolverParams | None = None) -> float:
    """``0.5 sum (m - y)^2 dl dt + lam/2 sum phi^2 dx dy`` with ``m`` the full equilibrium at ``phi``."""
    phi = check_field(phi, scene.grid)
    sol = solve_mfg(scene, phi, params or experiment_solver_params())
    obs = ObservationSet(np.asarray(y_obs, dtype=float), np.zeros(0), np.zeros(3), scene.grid, scene.goal)
    return Objective(scene, obs, "single", 0.5 * lam).loss(phi, sol.m)


def loss_multi(phi, scene, obs_set, stats, alpha_mc: float, channels=CHANNELS, params: SolverParams | None = None) -> float:
    """``|Y(phi) - Y_obs|^2 + alpha |phi|^2`` over the standardised selected channels."""
    phi = check_field(phi, scene.grid)
    sol = solve_mfg(scene, phi, params or experiment_solver_params())
    return Objective(scene, obs_set, "multi", alpha_mc, channels, stats).loss(phi, sol.m)


def loss_weighted(phi, scene, obs_set, omega, lam: float = 1.0, params: SolverParams | None = None) -> float:
    """``sum_c omega_c |raw mismatch_c|^2 + lam/2 |phi|^2`` with no standardisation."""
    phi = check_field(phi, scene.grid)
    sol = solve_mfg(scene, phi, params or experiment_solver_params())
    return Objective(scene, obs_set, "weighted", 0.5 * lam, omega=omega).loss(phi, sol.m)


# ----------------------------------------------------------------------------
# one-sweep surrogate and its adjoint

def onesweep(phi, scene, m_bar, params: SolverParams):
    """``u = HJB(phi; m_bar frozen)``, ``m = FPK(u)``."""
    u = solve_hjb(phi, m_bar, scene.g, scene.grid, scene.nu, scene.congestion, params)
    m = solve_fpk(u, scene.m0, scene.grid, scene.nu, params)
    return u, m


def onesweep_loss(phi, scene, objective: Objective, m_bar, params: SolverParams) -> float:
    _, m = onesweep(phi, scene, m_bar, params)
    return objective.loss(phi, m)


def _grad_onesweep(phi, scene, objective: Objective, m_bar, params: SolverParams) -> np.ndarray:
    grid = scene.grid
    dx, dy, per = grid.dx, grid.dy, grid.periodic
    solver = ImplicitDiffusion(grid, scene.nu, grid.dt)
    u, m = onesweep(phi, scene, m_bar, params)
    mbar = objective.density_cotangent(m)
    ubar = np.zeros_like(u)
    # reverse FPK sweep
    for k in range(grid.nt - 1, -1, -1):
        n = _substeps(u[k], grid, params)
        h = grid.dt / n
        zs = [m[k]]
        for _ in range(n - 1):
            zs.append(zs[-1] - h * kernels.upwind_divergence(zs[-1], u[k], dx, dy, per))
        zbar = solver.solve(mbar[k + 1])
        for z in reversed(zs):
            zb, ub = kernels.upwind_divergence_vjp(zbar, z, u[k], dx, dy, per)
            ubar[k] -= h * ub
            zbar = zbar - h * zb
        mbar[k] += zbar
    # reverse HJB sweep; each step k consumed u[k+1] and the forcing f(m_bar[k]) + phi
    phibar = np.zeros(grid.shape)
    forcing0 = objective_forcing(scene, m_bar)
    for k in range(grid.nt):
        u_next = u[k + 1]
        forcing = forcing0[k] + phi
        n = _substeps(u_next, grid, params)
        h = grid.dt / n
        zs = [u_next]
        for _ in range(n - 1):
            z = zs[-1]
            zs.append(z - h * (kernels.eo_hamiltonian(z, dx, dy, per) - forcing))
        zbar = solver.solve(ubar[k])
        for z in reversed(zs):
            phibar += h * zbar
            zbar = zbar - h * kernels.eo_hamiltonian_vjp(z, zbar, dx, dy, per)
        if k + 1 < grid.nt:
            ubar[k + 1] += zbar
    return phibar + 2.0 * objective.reg * grid.cell_area * phi


def objective_forcing(scene, m_bar) -> np.ndarray:
    from .forward import congestion_cost

    return congestion_cost(np.asarray(m_bar, dtype=float), scene.congestion)


def grad_phi_onesweep(phi, scene, y_obs, lam: float = 0.0, sol=None, params: SolverParams | None = None,
                      smooth: bool = False, objective: Objective | None = None) -> np.ndarray:
    """Exact gradient of the one-sweep surrogate objective with respect to ``phi``.

    The surrogate freezes the crowd at the converged equilibrium density of
    ``sol`` (solved here when omitted) and runs one HJB and one FPK sweep;
    the gradient comes from the reverse traversal of both sweeps. ``smooth``
    applies a one-cell Gaussian filter to the result.

    Raises:
        SolverError: if the supplied base solution did not converge.
    """
    params = params or experiment_solver_params()
    phi = check_field(phi, scene.grid)
    if sol is None:
        sol = solve_mfg(scene, phi, params)
    if not sol.converged:
        raise SolverError("gradient needs a converged base solution")
    if objective is None:
        obs = ObservationSet(np.asarray(y_obs, dtype=float), np.zeros(0), np.zeros(3), scene.grid, scene.goal)
        objective = Objective(scene, obs, "single", 0.5 * lam)
    g = _grad_onesweep(phi, scene, objective, sol.m, params)
    if smooth:
        g = ndimage.gaussian_filter(g, 1.0, mode="wrap" if scene.grid.periodic else "reflect")
    return g


# ----------------------------------------------------------------------------
# Stage I

@dataclass(frozen=True)
class Lattice:
    centers_x: tuple[float, ...] = tuple(np.linspace(0.0, 4.0, 6))
    centers_y: tuple[float, ...] = tuple(np.linspace(0.0, 4.0, 6))
    radii: tuple[float, ...] = (0.5, 0.8, 1.1)
    strengths: tuple[float, ...] = (2.0, 5.0, 8.0)

    @property
    def spacing(self) -> float:
        sx = np.diff(self.centers_x).max() if len(self.centers_x) > 1 else 0.0
        sy = np.diff(self.centers_y).max() if len(self.centers_y) > 1 else 0.0
        return float(max(sx, sy))

    def candidates(self, smoothness: float):
        for C in self.strengths:
            if C <= 0:
                continue
            for r in self.radii:
                for cy in self.centers_y:
                    for cx in self.centers_x:
                        yield ObstacleSpec((cx, cy), r, C, smoothness)


def stage1_init(scene_known, obs: ObservationSet, lattice: Lattice | None = None, n_obstacles: int = 1,
                include_null: bool = True, params: SolverParams | None = None, smoothness: float = 0.1,
                rescore: int = 16, n_alternatives: int = 2) -> PhiEstimate:
    """Exhaustive lattice search under the frozen-crowd surrogate, f1 mismatch.

    The background equilibrium (no obstacle) is solved once; every candidate is
    scored by one HJB sweep against that frozen density and one FPK sweep.
    The ``rescore`` best candidates are then re-scored with the full coupled
    model (0 disables this). The no-obstacle candidate comes first, so it wins
    ties. Once an obstacle is placed, further ones are added greedily with the
    earlier ones fixed until ``n_obstacles`` are placed. Up to ``n_alternatives`` runner-up candidates of the last step, each more
    than one lattice spacing from the winner and from each other, are kept
    as ``alternatives``.

    Raises:
        ValueError: if the lattice has no candidates.
    """
    lattice = lattice or Lattice()
    params = params or experiment_solver_params()
    grid = scene_known.grid
    cands = list(lattice.candidates(smoothness))
    if not cands and not include_null:
        raise ValueError("empty candidate lattice")
    bg = scene_known.phi_bg
    base = solve_mfg(scene_known.with_obstacles(()), bg, params)
    objective = Objective(scene_known, obs, "single", 0.0)
    evaluations = 0

    def surrogate(specs) -> float:
        nonlocal evaluations
        evaluations += 1
        try:
            return onesweep_loss(render_phi(grid, specs, bg), scene_known, objective, base.m, params)
        except SolverError:
            return math.inf

    def full(specs) -> float:
        nonlocal evaluations
        evaluations += 1
        try:
            sol = solve_mfg(scene_known, render_phi(grid, specs, bg), params, m_init=base.m, u_init=base.u)
        except SolverError:
            return math.inf
        return objective.data_loss(sol.m)

    chosen: list[ObstacleSpec] = []
    alternatives: list[list[ObstacleSpec]] = []
    best = objective.data_loss(base.m) if include_null else math.inf
    history = [best if math.isfinite(best) else 0.0]
    spacing = lattice.spacing
    for _ in range(n_obstacles):
        sur = np.array([surrogate(chosen + [c]) for c in cands])
        order = np.argsort(sur, kind="stable")
        if rescore > 0:
            scores = sorted((full(chosen + [cands[i]]), int(i)) for i in sorted(order[:rescore]))
        else:
            scores = [(float(sur[i]), int(i)) for i in order]
        value, idx = scores[0]
        # the null candidate may win the first step; later steps fill the known count
        if not chosen and not value < best:
            break
        if not math.isfinite(value):
            break
        picked = [cands[idx]]
        for v, i in scores[1:]:
            if len(picked) > n_alternatives or not math.isfinite(v):
                break
            c = cands[i]
            if all(math.hypot(c.center[0] - q.center[0], c.center[1] - q.center[1]) > spacing for q in picked):
                picked.append(c)
        alternatives = [chosen + [c] for c in picked[1:]]
        best = value
        chosen.append(cands[idx])
        history.append(best)
    phi = render_phi(grid, chosen, bg)
    return PhiEstimate(phi, chosen, history, "stage1", evaluations, alternatives)


# ----------------------------------------------------------------------------
# Stage II

_PARAM_SCALE = np.array([1.0, 1.0, 1.0, 2.5])


class _Evaluator:
    """Full-model evaluations with warm starts and running-minimum bookkeeping."""

    def __init__(self, scene, objective: Objective, params: SolverParams, smoothness: float, n_obstacles: int):
        self.scene = scene
        self.objective = objective
        self.params = params
        self.smoothness = smoothness
        self.n = n_obstacles
        self.warm = None
        self.evaluations = 0
        self.best = math.inf
        self.best_theta = None
        self.history: list[float] = []
        self.fail_value = None

    def specs(self, theta) -> list[ObstacleSpec]:
        th = np.asarray(theta, dtype=float).reshape(self.n, 4)
        return [ObstacleSpec((a, b), max(r, 1e-3), max(C, 0.0), self.smoothness) for a, b, r, C in th]

    def phi(self, theta) -> np.ndarray:
        return render_phi(self.scene.grid, self.specs(theta), self.scene.phi_bg)

    def residual(self, theta) -> np.ndarray:
        self.evaluations += 1
        phi = self.phi(theta)
        try:
            m_init, u_init = self.warm if self.warm is not None else (None, None)
            sol = solve_mfg(self.scene, phi, self.params, m_init=m_init, u_init=u_init)
            if not np.all(np.isfinite(sol.m)):
                raise SolverError("non-finite density")
            self.warm = (sol.m, sol.u)
            r = np.concatenate([self.objective.residual(sol.m), self.objective.reg_residual(phi)])
        except SolverError:
            r = None
        if r is None:
            if self.fail_value is None:
                raise SolverError("forward solve failed at the initial point")
            return self.fail_value
        if self.fail_value is None:
            # a rejected trial scores a hundred times the initial loss
            self.fail_value = np.full(r.size, math.sqrt(200.0 * (0.5 * r @ r + 1e-12) / r.size))
        value = 0.5 * float(r @ r)
        if value < self.best:
            self.best = value
            self.best_theta = np.array(theta, dtype=float)
        self.history.append(self.best)
        return r

    def loss(self, theta) -> float:
        r = self.residual(theta)
        return 0.5 * float(r @ r)


def _theta_of(specs) -> np.ndarray:
    return np.concatenate([[s.center[0], s.center[1], s.radius, s.strength] for s in specs])


def _bounds(grid: Grid, n: int):
    lo = np.tile([grid.x_min, grid.y_min, 0.2, 0.0], n)
    hi = np.tile([grid.x_max, grid.y_max, 3.0, 20.0], n)
    return lo, hi


def _parametric(phi0_est: PhiEstimate, scene, objective: Objective, params: InversionParams) -> PhiEstimate:
    """Fit from the primary start, then from Stage I runner-ups until one succeeds.

    A start succeeds when it cuts the loss to ``restart_rtol`` times its
    starting value. The lowest final loss wins; ties keep the
    earlier start.
    """
    if not phi0_est.parametric:
        return _parametric_start(phi0_est.parametric, phi0_est.phi, scene, objective, params)
    starts = [phi0_est.parametric, *phi0_est.alternatives][: params.n_starts]
    best, history, evaluations = None, [], 0
    for k, specs in enumerate(starts):
        if len(specs) != len(starts[0]):
            continue
        est = _parametric_start(specs, None, scene, objective, params)
        evaluations += est.evaluations
        floor = history[-1] if history else math.inf
        history.extend(min(floor, v) for v in est.loss_history)
        if best is None or est.loss_history[-1] < best.loss_history[-1]:
            best = est
        if est.loss_history[-1] <= params.restart_rtol * est.loss_history[0]:
            break
    return PhiEstimate(best.phi, best.parametric, history, "stage2", evaluations)


def _parametric_start(specs0, phi0, scene, objective: Objective, params: InversionParams) -> PhiEstimate:
    if not specs0:
        # nothing to refine: the null estimate stands
        sol = solve_mfg(scene, phi0, params.solver)
        loss = objective.loss(phi0, sol.m)
        return PhiEstimate(phi0.copy(), [], [loss], "stage2", 1)
    n = len(specs0)
    smoothness = specs0[0].smoothness
    ev = _Evaluator(scene, objective, params.solver, smoothness, n)
    scale = np.tile(_PARAM_SCALE, n)
    lo, hi = _bounds(scene.grid, n)
    theta0 = np.clip(_theta_of(specs0), lo, hi)
    if params.optimizer == "least_squares":
        budget = max(1, params.max_outer // (4 * n + 1))
        optimize.least_squares(
            lambda z: ev.residual(z * scale), theta0 / scale, bounds=(lo / scale, hi / scale),
            method="trf", diff_step=1e-3, max_nfev=budget, xtol=1e-8, ftol=1e-10, gtol=None,
        )
    else:
        def f(z):
            th = z * scale
            if np.any(th < lo) or np.any(th > hi):
                return ev.loss(np.clip(th, lo, hi)) * 10.0 + 1.0
            return ev.loss(th)

        optimize.minimize(
            f, theta0 / scale, method="Nelder-Mead",
            options={"maxfev": params.max_outer, "xatol": 1e-4, "fatol": 1e-14, "adaptive": n > 1},
        )
    theta = ev.best_theta if ev.best_theta is not None else theta0
    specs = ev.specs(theta)
    return PhiEstimate(ev.phi(theta), specs, list(ev.history), "stage2", ev.evaluations)


def _grid_descent(phi0_est: PhiEstimate, scene, objective: Objective, params: InversionParams) -> PhiEstimate:
    bg = scene.phi_bg
    sp = params.solver
    phi = np.maximum(phi0_est.phi, bg)
    sol = solve_mfg(scene, phi, sp)
    loss = objective.loss(phi, sol.m)
    history = [loss]
    evaluations = 1
    eta = params.eta
    for _ in range(params.max_outer):
        if not sol.converged:
            break
        g = _grad_onesweep(phi, scene, objective, sol.m, sp)
        if params.smooth_grad:
            g = ndimage.gaussian_filter(g, 1.0, mode="wrap" if scene.grid.periodic else "reflect")
        if float(np.linalg.norm(g)) <= params.grad_tol:
            break
        step, accepted = eta, False
        for _ in range(params.max_halvings + 1):
            trial = np.maximum(bg, phi - step * g)
            evaluations += 1
            try:
                trial_sol = solve_mfg(scene, trial, sp, m_init=sol.m, u_init=sol.u)
                trial_loss = objective.loss(trial, trial_sol.m)
            except SolverError:
                trial_loss = math.inf
            if trial_loss <= loss:
                accepted = True
                break
            step *= 0.5
        if not accepted:
            break
        phi, sol, loss = trial, trial_sol, trial_loss
        history.append(loss)
    return PhiEstimate(phi, None, history, "stage2", evaluations)


def stage2_refine(phi0: PhiEstimate, scene, obs: ObservationSet, params: InversionParams,
                  stats: ChannelStats | None = None) -> PhiEstimate:
    """Refine an initial estimate under the full equilibrium model.

    ``parametric`` fits ``(cx, cy, r, C)`` per obstacle, starting from
    ``phi0.parametric``, with a bounded trust-region least-squares method
    (finite-difference Jacobian) or Nelder-Mead; failed trial solves are
    scored with a penalty. When the first fit stalls, up to ``n_starts - 1``
    Stage I runner-ups are refined too and the lowest final loss is kept. ``grid`` runs projected gradient descent
    ``phi <- max(phi_bg, phi - eta * grad)`` with step halving, using the
    one-sweep adjoint gradient at each new equilibrium. Loss histories are
    non-increasing in both modes.
    """
    objective = _objective_for(scene, obs, params, stats)
    if params.mode == "parametric":
        return _parametric(phi0, scene, objective, params)
    return _grid_descent(phi0, scene, objective, params)


# ----------------------------------------------------------------------------
# supports and metrics

SENTINEL_ERROR_FACTOR = 1.0


@dataclass(frozen=True)
class Support:
    mask: np.ndarray
    centers: tuple[tuple[float, float], ...]
    radii: tuple[float, ...]

    @property
    def empty(self) -> bool:
        return not self.mask.any()

    @property
    def n_components(self) -> int:
        return int(ndimage.label(self.mask)[1])


def spec_mask(grid: Grid, specs) -> np.ndarray:
    """Cells whose centre lies inside any disk (the half-maximum set of the mollified bump)."""
    X, Y = grid.mesh()
    mask = np.zeros(grid.shape, dtype=bool)
    for s in specs:
        mask |= np.hypot(X - s.center[0], Y - s.center[1]) <= s.radius
    return mask


def support_of_specs(grid: Grid, specs) -> Support:
    specs = [s for s in specs if s.strength > 0]
    return Support(spec_mask(grid, specs), tuple(s.center for s in specs), tuple(s.radius for s in specs))


def recovered_support(phi_est, phi_bg, grid: Grid, threshold_frac: float = 0.5, split: bool = False) -> Support:
    """Threshold the excess ``max(phi - phi_bg, 0)`` at a fraction of its maximum.

    The centre is the excess-weighted centroid over the mask and the radius is
    ``sqrt(area / pi)``; with ``split`` each connected component is reported
    separately. An all-zero excess gives an empty support.
    """
    if not 0.0 < threshold_frac < 1.0:
        raise ValueError("threshold_frac must lie in (0, 1)")
    e = np.maximum(np.asarray(phi_est) - np.asarray(phi_bg), 0.0)
    top = float(e.max())
    if top <= 0:
        return Support(np.zeros(grid.shape, dtype=bool), (), ())
    mask = e >= threshold_frac * top
    X, Y = grid.mesh()
    if split:
        labels, n = ndimage.label(mask)
        parts = [labels == i for i in range(1, n + 1)]
    else:
        parts = [mask]
    centers, radii = [], []
    for part in parts:
        w = e[part]
        centers.append((float(np.dot(w, X[part]) / w.sum()), float(np.dot(w, Y[part]) / w.sum())))
        radii.append(math.sqrt(part.sum() * grid.cell_area / math.pi))
    return Support(mask, tuple(centers), tuple(radii))


def _sentinel(grid: Grid) -> float:
    return SENTINEL_ERROR_FACTOR * math.hypot(grid.x_max - grid.x_min, grid.y_max - grid.y_min)


def compute_metrics(est, true_specs, grid: Grid) -> ReconMetrics:
    """Center error, IoU and radius error of an estimate against the true obstacles.

    ``est`` is a ``Support`` or a list of ``ObstacleSpec``. Each true obstacle
    is matched to the nearest estimated centre; errors are averaged over the
    true obstacles. An empty estimate scores IoU 0 and the domain diagonal as
    centre error.
    """
    if not isinstance(est, Support):
        est = support_of_specs(grid, est)
    truth = support_of_specs(grid, true_specs)
    union = np.count_nonzero(est.mask | truth.mask)
    iou = np.count_nonzero(est.mask & truth.mask) / union if union else 1.0
    if not truth.centers:
        if est.empty:
            return ReconMetrics(0.0, 1.0, 0.0)
        return ReconMetrics(_sentinel(grid), float(iou), float(np.mean(est.radii)))
    if est.empty or not est.centers:
        return ReconMetrics(_sentinel(grid), 0.0, float(np.mean(truth.radii)))
    ec = np.asarray(est.centers)
    cerr, rerr = [], []
    for c, r in zip(truth.centers, truth.radii):
        d = np.hypot(ec[:, 0] - c[0], ec[:, 1] - c[1])
        j = int(np.argmin(d))
        cerr.append(float(d[j]))
        rerr.append(abs(est.radii[j] - r))
    return ReconMetrics(float(np.mean(cerr)), float(iou), float(np.mean(rerr)))


# ----------------------------------------------------------------------------
# pipeline and baselines

def invert(scene_known, obs: ObservationSet, params: InversionParams, stats: ChannelStats | None = None,
           n_obstacles: int = 1, lattice: Lattice | None = None, init: PhiEstimate | None = None) -> PhiEstimate:
    """Stage I (unless ``init`` is given) followed by Stage II."""
    if init is None:
        init = stage1_init(scene_known, obs, lattice, n_obstacles, params=params.solver, rescore=params.stage1_rescore)
    return stage2_refine(init, scene_known, obs, params, stats)


def estimate_metrics(est: PhiEstimate, scene_true, threshold_frac: float = 0.5) -> ReconMetrics:
    grid = scene_true.grid
    if est.parametric is not None:
        return compute_metrics(est.parametric, scene_true.obstacles, grid)
    split = len(scene_true.obstacles) > 1
    return compute_metrics(recovered_support(est.phi, scene_true.phi_bg, grid, threshold_frac, split), scene_true.obstacles, grid)


def simplex_grid(n: int = 4) -> list[tuple[float, float, float]]:
    """All ``(i, j, k) / n`` with ``i + j + k = n``, in lexicographic order."""
    if n < 1:
        raise ValueError("simplex resolution must be >= 1")
    return [(i / n, j / n, (n - i - j) / n) for i in range(n + 1) for j in range(n + 1 - i)]


def oracle_weight_search(scene_known, obs: ObservationSet, scene_true, params: InversionParams,
                         simplex_grid_n: int = 4, init: PhiEstimate | None = None, n_obstacles: int = 1,
                         include_global: bool = True):
    """Best raw-channel weight vector per scene, judged by final centre error.

    Runs the weighted-loss inversion for every simplex grid point (plus the
    uniform vector unless ``include_global`` is off) and returns the first
    vector attaining the smallest centre error, with its metrics.
    """
    grid_pts = simplex_grid(simplex_grid_n)
    if include_global and not any(np.allclose(w, GLOBAL_OMEGA, atol=1e-12) for w in grid_pts):
        grid_pts.append(GLOBAL_OMEGA)
    if init is None:
        init = stage1_init(scene_known, obs, None, n_obstacles, params=params.solver, rescore=params.stage1_rescore)
    best = None
    for w in grid_pts:
        p = replace(params, loss="weighted", omega=w)
        est = stage2_refine(init, scene_known, obs, p)
        met = estimate_metrics(est, scene_true)
        if best is None or met.center_error < best[1].center_error:
            best = (BaselineWeights(w), met)
    return best
