"""Pseudo-spectral integrator for the regularized compressible system

    d_t rho + div m = alpha Delta rho,
    d_t m + div(m (x) u) - D u + grad P(rho) + alpha (grad rho . grad) u = rho f,

with ``u = m / max(rho, rho_floor)`` and ``D`` the (an)isotropic stress of
``stress``.  Each step is an integrating-factor Heun scheme (two-stage SSP
Runge–Kutta): the stiff linear parts, ``alpha Delta`` on ``rho`` and the
constant-coefficient stress acting on ``m / mean(rho)``, are propagated by
exact Fourier exponentials, everything else is explicit.  The explicit
momentum terms are filtered by the 2/3 rule when ``dealias`` is on.

Budgets follow the energy
``E = int rho |u|^2 / 2 + rho e(rho)`` whose rate is
``-(-<u, D u> + alpha int P'(rho)/rho |grad rho|^2) + int rho f . u``.
The first bracket is accumulated in ``diss`` and the forcing work in
``work``, both by the trapezoid rule on the step grid.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterable, Optional, Sequence

import numpy as np
from numpy.typing import NDArray

from .grid import ScalarField, TorusGrid, VectorField, div_hat, grad_hat, inverse_laplacian_symbol
from .io import read_csv, write_csv, write_snapshot
from .pressure import DomainError, PressureLaw, potential_energy_density
from .stress import (
    AnisotropySpec,
    advective_gradient_term,
    divu_relation_residual,
    lame_scalar_symbol,
    momentum_flux_divergence,
    stress_hat,
    velocity,
)

__all__ = [
    "FluidState",
    "SolverConfig",
    "BudgetSeries",
    "Trajectory",
    "BlowUpError",
    "NegativeDensityError",
    "Simulation",
    "step",
    "run",
    "effective_flux",
    "flux_remainder",
    "effective_flux_residual",
    "sinusoidal_forcing",
    "acoustic_state",
    "shear_state",
    "random_state",
    "uniform_state",
]

BUDGET_COLUMNS = ("t", "mass", "ekin", "epot", "diss", "rho_gamma_a", "work")


class BlowUpError(RuntimeError):
    """Velocity or density exceeded the configured caps, or became non-finite."""


class NegativeDensityError(RuntimeError):
    """Density undershoot larger than the clipping tolerance."""


@dataclass(frozen=True, eq=False)
class FluidState:
    t: float
    rho: ScalarField
    m: VectorField

    @property
    def grid(self) -> TorusGrid:
        return self.rho.grid

    def velocity(self, rho_floor: float) -> VectorField:
        return VectorField(self.grid, velocity(self.rho.values, self.m.values, rho_floor))

    def mass(self) -> float:
        return self.rho.integral()

    def momentum(self) -> NDArray:
        return np.array([self.grid.integrate(c) for c in self.m.values])

    @classmethod
    def from_arrays(cls, grid: TorusGrid, t: float, rho: NDArray, m: NDArray) -> "FluidState":
        return cls(float(t), ScalarField(grid, rho), VectorField(grid, m))


Forcing = Callable[[float, TorusGrid], NDArray]


@dataclass(frozen=True)
class SolverConfig:
    law: PressureLaw
    stress: AnisotropySpec
    dt: float
    t_end: float
    alpha: float = 0.0
    forcing: Optional[Forcing] = None
    rho_floor: Optional[float] = None
    dealias: bool = True
    snapshot_every: int = 0
    u_cap: float = 1e3
    rho_cap: float = 1e6
    cfl: float = 0.5
    integrability_a: Optional[float] = None

    def __post_init__(self) -> None:
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if self.t_end < 0:
            raise ValueError("t_end must be nonnegative")
        if self.alpha < 0:
            raise ValueError("alpha must be nonnegative")

    def a_exponent(self, d: int) -> float:
        if self.integrability_a is not None:
            return self.integrability_a
        return max(0.0, 2.0 * self.law.gamma / d - 1.0)


# -- initial data and forcing helpers ---------------------------------------------

def uniform_state(grid: TorusGrid, rho0: float = 1.0) -> FluidState:
    return FluidState.from_arrays(grid, 0.0, np.full(grid.shape, rho0), np.zeros((grid.d,) + grid.shape))


def acoustic_state(grid: TorusGrid, rho_bar: float, amplitude: float, mode: Sequence[int]) -> FluidState:
    """``rho = rho_bar (1 + amplitude cos(2 pi k.x))`` at rest."""
    phase = 2 * np.pi * sum(k * x for k, x in zip(mode, grid.coords))
    rho = rho_bar * (1 + amplitude * np.cos(phase))
    return FluidState.from_arrays(grid, 0.0, rho, np.zeros((grid.d,) + grid.shape))


def shear_state(grid: TorusGrid, rho0: float, amplitude: float, mode: int = 1) -> FluidState:
    """Uniform density with the solenoidal shear ``u = A sin(2 pi k x_2) e_1``."""
    if grid.d < 2:
        raise ValueError("a shear mode needs d >= 2")
    m = np.zeros((grid.d,) + grid.shape)
    m[0] = rho0 * amplitude * np.sin(2 * np.pi * mode * grid.coords[1])
    return FluidState.from_arrays(grid, 0.0, np.full(grid.shape, rho0), m)


def random_state(
    grid: TorusGrid,
    rng: np.random.Generator,
    rho_bar: float = 1.0,
    rho_amplitude: float = 0.1,
    u_amplitude: float = 0.1,
    kmax: float = 4.0,
    slope: float = 1.0,
) -> FluidState:
    """Smooth random perturbation of ``(rho_bar, 0)`` with modes ``|k| <= kmax``."""
    from .grid import random_band_limited

    r = random_band_limited(grid, rng, kmax, slope)
    u = random_band_limited(grid, rng, kmax, slope, components=grid.d)
    rho = rho_bar * (1 + rho_amplitude * r / max(1.0, np.max(np.abs(r))))
    u = u_amplitude * u / max(1e-300, np.max(np.abs(u)))
    return FluidState.from_arrays(grid, 0.0, rho, rho[None] * u)


def sinusoidal_forcing(amplitude: float, mode: int = 1) -> Forcing:
    """Time-independent ``f_i = A sin(2 pi k x_{i+1})`` (cyclic axes)."""

    def f(t: float, grid: TorusGrid) -> NDArray:
        out = np.empty((grid.d,) + grid.shape)
        for i in range(grid.d):
            out[i] = amplitude * np.sin(2 * np.pi * mode * grid.coords[(i + 1) % grid.d])
        return out

    return f


# -- budgets -----------------------------------------------------------------------

@dataclass
class BudgetSeries:
    t: list = field(default_factory=list)
    mass: list = field(default_factory=list)
    ekin: list = field(default_factory=list)
    epot: list = field(default_factory=list)
    diss: list = field(default_factory=list)
    rho_gamma_a: list = field(default_factory=list)
    work: list = field(default_factory=list)

    def append(self, **row) -> None:
        vals = [float(row[c]) for c in BUDGET_COLUMNS]
        if not all(math.isfinite(v) for v in vals):
            raise BlowUpError("non-finite budget entry")
        for c, v in zip(BUDGET_COLUMNS, vals):
            getattr(self, c).append(v)

    def __len__(self) -> int:
        return len(self.t)

    def array(self, name: str) -> NDArray:
        return np.asarray(getattr(self, name))

    @property
    def energy(self) -> NDArray:
        return self.array("ekin") + self.array("epot")

    def energy_residual(self) -> NDArray:
        """``E(t) + Diss(t) - W(t) - E(0)``, zero for the exact dynamics."""
        e = self.energy
        return e + self.array("diss") - self.array("work") - e[0]

    def rows(self):
        for i in range(len(self)):
            yield [getattr(self, c)[i] for c in BUDGET_COLUMNS]

    def to_csv(self, path) -> None:
        write_csv(path, BUDGET_COLUMNS, self.rows())

    @classmethod
    def from_csv(cls, path) -> "BudgetSeries":
        header, rows = read_csv(path)
        out = cls()
        for r in rows:
            out.append(**{c: float(v) for c, v in zip(header, r)})
        return out


@dataclass
class Trajectory:
    """Snapshots taken during a run (kept in memory and/or written as NSF1)."""

    grid: TorusGrid
    directory: Optional[Path] = None
    steps: list = field(default_factory=list)
    times: list = field(default_factory=list)
    states: list = field(default_factory=list)
    paths: list = field(default_factory=list)
    completed: bool = False
    failure: Optional[str] = None


# -- the integrator ---------------------------------------------------------------

class Simulation:
    """Owns the state of one trajectory and advances it substep by substep."""

    def __init__(self, initial: FluidState, cfg: SolverConfig):
        self.cfg = cfg
        self.grid = g = initial.grid
        if cfg.stress.d != g.d:
            raise ValueError("stress specification and grid dimension differ")
        rho0 = initial.rho.values
        if np.any(rho0 < 0):
            raise ValueError("initial density must be nonnegative")
        if math.isfinite(cfg.law.rho_max) and np.max(rho0) >= 0.95 * cfg.law.rho_max:
            raise DomainError("initial density reaches 0.95 of the pressure pole")
        self.rho_floor = cfg.rho_floor if cfg.rho_floor is not None else 1e-8 * float(np.max(rho0))
        self.rho_bar = float(np.mean(rho0))
        if self.rho_bar <= 0:
            raise ValueError("initial density has zero mass")
        self.state = initial
        self._tables: dict = {}
        nz = g.xi2 > 0
        inv = np.where(nz, 1.0 / np.sqrt(np.where(nz, g.xi2, 1.0)), 0.0)
        self._xi_unit = [x * inv for x in g.xi]
        self._mask = g.dealias_mask if cfg.dealias else None
        self._rates = self._rates_of(initial)

    # -- spectral building blocks ------------------------------------------------
    def _implicit_coefficient(self, rho: NDArray) -> float:
        """Inverse density used by the exponential stress factor.

        Taking at least half of ``max 1/rho`` keeps the explicit remainder
        ``(1/rho - c) D`` no larger than the implicit part, which bounds
        the Heun amplification factor by one on every mode.
        """
        inv_max = 1.0 / max(float(np.min(rho)), self.rho_floor)
        return max(1.0 / self.rho_bar, 0.5 * inv_max)

    def _linear_tables(self, t: float, h: float, coef: float):
        """Exponential factors over a substep ``h`` starting at time ``t``."""
        spec = self.cfg.stress
        key = (h, coef, id(spec.delta_at(t)))
        tab = self._tables.get(key)
        if tab is None:
            g = self.grid
            s = lame_scalar_symbol(g, spec, t) * coef
            lon = s + (spec.mu + spec.lam) * g.xi2 * coef
            e_rho = np.exp(-self.cfg.alpha * g.xi2 * h)
            e_t = np.exp(-s * h)
            e_l = np.exp(-lon * h)
            tab = (e_rho, e_t, e_l - e_t, s, lon - s)
            if len(self._tables) > 4:
                self._tables.clear()
            self._tables[key] = tab
        return tab

    def _project(self, vh: NDArray) -> NDArray:
        return sum(x * c for x, c in zip(self._xi_unit, vh))

    def _apply_linear(self, rho_h, m_h, tab):
        e_rho, e_t, e_diff, _, _ = tab
        proj = self._project(m_h)
        m_new = e_t * m_h + e_diff * np.stack([x * proj for x in self._xi_unit])
        return e_rho * rho_h, m_new

    def _implicit_stress(self, m_h: NDArray, tab) -> NDArray:
        _, _, _, s, lon_extra = tab
        proj = self._project(m_h)
        return -s * m_h - lon_extra * np.stack([x * proj for x in self._xi_unit])

    def _nonlinear(self, t: float, rho: NDArray, m: NDArray, m_h: NDArray, tab):
        g, cfg = self.grid, self.cfg
        u = velocity(rho, m, self.rho_floor)
        uh = g.fft(u)
        n_rho = -div_hat(g, m_h)
        P = cfg.law.eval(rho)
        n_m = -momentum_flux_divergence(g, m, u)
        n_m -= grad_hat(g, g.fft(P))
        n_m += stress_hat(g, cfg.stress, t, uh) - self._implicit_stress(m_h, tab)
        phys = np.zeros_like(m)
        have_phys = False
        if cfg.alpha:
            phys -= cfg.alpha * advective_gradient_term(g, rho, u)
            have_phys = True
        if cfg.forcing is not None:
            phys += rho[None] * cfg.forcing(t, g)
            have_phys = True
        if have_phys:
            n_m += g.fft(phys)
        if self._mask is not None:
            n_m *= self._mask
        return n_rho, n_m

    def _to_physical(self, rho_h: NDArray, m_h: NDArray):
        g = self.grid
        rho = g.ifft(rho_h)
        m = g.ifft(m_h)
        return self._sanitize(rho), m

    def _sanitize(self, rho: NDArray) -> NDArray:
        top = float(np.max(rho))
        if not math.isfinite(top) or not np.all(np.isfinite(rho)):
            raise BlowUpError("density became non-finite")
        low = float(np.min(rho))
        if low < 0:
            if low < -1e-10 * top:
                raise NegativeDensityError(f"density undershoot {low!r} below -1e-10 * max rho")
            rho = np.maximum(rho, 0.0)
        return rho

    def _advance(self, state: FluidState, h: float) -> FluidState:
        g = self.grid
        t = state.t
        rho0, m0 = state.rho.values, state.m.values
        tab = self._linear_tables(t, h, self._implicit_coefficient(rho0))
        r_h, m_h = g.fft(rho0), g.fft(m0)
        k_r, k_m = self._nonlinear(t, rho0, m0, m_h, tab)
        r1_h, m1_h = self._apply_linear(r_h + h * k_r, m_h + h * k_m, tab)
        rho1, m1 = self._to_physical(r1_h, m1_h)
        k_r1, k_m1 = self._nonlinear(t + h, rho1, m1, m1_h, tab)
        e_r, e_m = self._apply_linear(r_h, m_h, tab)
        r2_h = 0.5 * e_r + 0.5 * (r1_h + h * k_r1)
        m2_h = 0.5 * e_m + 0.5 * (m1_h + h * k_m1)
        rho2, m2 = self._to_physical(r2_h, m2_h)
        self._check_caps(rho2, m2)
        return FluidState.from_arrays(g, t + h, rho2, m2)

    def _check_caps(self, rho: NDArray, m: NDArray) -> None:
        if not np.all(np.isfinite(m)):
            raise BlowUpError("momentum became non-finite")
        rmax = float(np.max(rho))
        if rmax > self.cfg.rho_cap:
            raise BlowUpError(f"max density {rmax!r} exceeds cap {self.cfg.rho_cap!r}")
        umax = float(np.max(np.abs(velocity(rho, m, self.rho_floor))))
        if umax > self.cfg.u_cap:
            raise BlowUpError(f"max velocity {umax!r} exceeds cap {self.cfg.u_cap!r}")

    def stable_dt(self, state: FluidState) -> float:
        """Largest substep allowed by the advective/acoustic and explicit-diffusion limits."""
        g, cfg = self.grid, self.cfg
        rho, m = state.rho.values, state.m.values
        u = velocity(rho, m, self.rho_floor)
        speed = float(np.max(np.sqrt(np.sum(u * u, axis=0))))
        c = float(np.sqrt(max(0.0, float(np.max(cfg.law.eval_prime(np.maximum(rho, self.rho_floor)))))))
        if cfg.alpha:
            grad = np.sqrt(np.sum(g.ifft(grad_hat(g, g.fft(rho))) ** 2, axis=0))
            speed += cfg.alpha * float(np.max(grad / np.maximum(rho, self.rho_floor)))
        limit = math.inf
        if speed + c > 0:
            limit = cfg.cfl / (g.n * (speed + c))
        spec = cfg.stress
        if spec.symmetric and spec.delta_norm:
            # the extra symmetric-gradient coupling is fully explicit
            nu = spec.delta_norm / max(float(np.min(rho)), self.rho_floor)
            limit = min(limit, 1.0 / (nu * g.d * (np.pi * g.n) ** 2))
        return limit

    # -- budgets --------------------------------------------------------------
    def _rates_of(self, state: FluidState):
        g, cfg = self.grid, self.cfg
        rho, m = state.rho.values, state.m.values
        u = velocity(rho, m, self.rho_floor)
        du = g.ifft(stress_hat(g, cfg.stress, state.t, g.fft(u)))
        diss = -g.integrate(np.sum(u * du, axis=0))
        if cfg.alpha:
            gr = g.ifft(grad_hat(g, g.fft(rho)))
            weight = cfg.law.eval_prime(np.maximum(rho, self.rho_floor)) / np.maximum(rho, self.rho_floor)
            diss += cfg.alpha * g.integrate(weight * np.sum(gr * gr, axis=0))
        work = 0.0
        if cfg.forcing is not None:
            work = g.integrate(np.sum(rho[None] * cfg.forcing(state.t, g) * u, axis=0))
        a = cfg.a_exponent(g.d)
        integ = g.integrate(rho ** (cfg.law.gamma + a))
        return diss, work, integ

    def budget_row(self, state: FluidState, acc) -> dict:
        g, cfg = self.grid, self.cfg
        rho, m = state.rho.values, state.m.values
        u = velocity(rho, m, self.rho_floor)
        return dict(
            t=state.t,
            mass=g.integrate(rho),
            ekin=0.5 * g.integrate(np.sum(m * u, axis=0)),
            epot=g.integrate(potential_energy_density(cfg.law, rho)),
            diss=acc[0],
            rho_gamma_a=acc[2],
            work=acc[1],
        )

    def step(self, dt: Optional[float] = None, observers: Sequence = (), acc=None):
        """Advance by ``dt`` (default ``cfg.dt``), subdividing when needed."""
        dt = self.cfg.dt if dt is None else dt
        nsub = max(1, math.ceil(dt / self.stable_dt(self.state) - 1e-12))
        h = dt / nsub
        for _ in range(nsub):
            prev = self.state
            try:
                nxt = self._advance(prev, h)
            except DomainError as exc:
                raise BlowUpError(str(exc)) from exc
            rates = self._rates_of(nxt)
            if acc is not None:
                for i in range(3):
                    acc[i] += 0.5 * h * (self._rates[i] + rates[i])
            self._rates = rates
            for obs in observers:
                obs(prev, nxt, h)
            self.state = nxt
        return self.state


def step(state: FluidState, cfg: SolverConfig) -> FluidState:
    """One step of size ``cfg.dt`` from ``state`` (internally subdivided for stability)."""
    return Simulation(state, cfg).step()


def run(
    initial: FluidState,
    cfg: SolverConfig,
    out_dir: Optional[str | os.PathLike] = None,
    observers: Sequence = (),
    keep_states: bool = True,
    budget_every: int = 1,
) -> tuple[Trajectory, BudgetSeries]:
    """Advance ``initial`` to ``cfg.t_end``.

    Snapshots are taken at step 0, every ``snapshot_every`` steps and at the
    end; with ``out_dir`` they are written as NSF1 files next to
    ``budget.csv`` and a ``snapshots.csv`` index.  A blow-up stops the run,
    flushes what was produced and re-raises.
    """
    sim = Simulation(initial, cfg)
    g = sim.grid
    nsteps = int(round(cfg.t_end / cfg.dt))
    if abs(nsteps * cfg.dt - cfg.t_end) > 1e-9 * max(1.0, cfg.t_end):
        raise ValueError("t_end must be a multiple of dt")
    traj = Trajectory(g, Path(out_dir) if out_dir is not None else None)
    if traj.directory is not None:
        (traj.directory / "snapshots").mkdir(parents=True, exist_ok=True)
    budget = BudgetSeries()
    acc = [0.0, 0.0, 0.0]

    def snapshot(k: int, state: FluidState) -> None:
        traj.steps.append(k)
        traj.times.append(state.t)
        if keep_states:
            traj.states.append(state)
        if traj.directory is not None:
            name = f"snapshots/state_{k:07d}.nsf"
            write_snapshot(traj.directory / name, g.d, g.n, [state.rho.values, *state.m.values])
            traj.paths.append(name)

    def flush() -> None:
        if traj.directory is None:
            return
        budget.to_csv(traj.directory / "budget.csv")
        write_csv(
            traj.directory / "snapshots.csv",
            ("step", "t", "file"),
            zip(traj.steps, traj.times, traj.paths),
        )

    budget.append(**sim.budget_row(sim.state, acc))
    snapshot(0, sim.state)
    try:
        for k in range(1, nsteps + 1):
            target = k * cfg.dt
            sim.step(target - sim.state.t, observers, acc)
            if k % budget_every == 0 or k == nsteps:
                budget.append(**sim.budget_row(sim.state, acc))
            if (cfg.snapshot_every and k % cfg.snapshot_every == 0) or k == nsteps:
                if traj.steps[-1] != k:
                    snapshot(k, sim.state)
    except (BlowUpError, NegativeDensityError) as exc:
        traj.failure = str(exc)
        flush()
        raise
    traj.completed = True
    flush()
    return traj, budget


# -- effective flux ----------------------------------------------------------------

def effective_flux(prev: FluidState, next: FluidState, rho_floor: Optional[float] = None) -> ScalarField:
    """``Delta^{-1} div(d_t m + div(m (x) u))`` between two consecutive states.

    ``d_t m`` is the two-point difference; the flux divergence is averaged
    over both states so the result is centred at the midpoint.
    """
    g = prev.grid
    dt = next.t - prev.t
    if dt <= 0:
        raise ValueError("states must be in increasing time order")
    floor = rho_floor if rho_floor is not None else 1e-8 * float(np.max(prev.rho.values))
    flux = 0.0
    for s in (prev, next):
        u = velocity(s.rho.values, s.m.values, floor)
        flux = flux + 0.5 * momentum_flux_divergence(g, s.m.values, u)
    total = flux + g.fft(next.m.values - prev.m.values) / dt
    return ScalarField(g, g.ifft(inverse_laplacian_symbol(g) * div_hat(g, total)))


def flux_remainder(
    prev: FluidState,
    next: FluidState,
    alpha: float = 0.0,
    forcing: Optional[Forcing] = None,
    rho_floor: Optional[float] = None,
) -> ScalarField:
    """``F = Delta^{-1} div(alpha (grad rho . grad) u - rho f)`` averaged over both states."""
    g = prev.grid
    floor = rho_floor if rho_floor is not None else 1e-8 * float(np.max(prev.rho.values))
    acc = np.zeros((g.d,) + g.spectral_shape, dtype=complex)
    for s in (prev, next):
        rho = s.rho.values
        u = velocity(rho, s.m.values, floor)
        phys = np.zeros_like(u)
        if alpha:
            phys += alpha * advective_gradient_term(g, rho, u)
        if forcing is not None:
            phys -= rho[None] * forcing(s.t, g)
        acc += 0.5 * g.fft(phys)
    return ScalarField(g, g.ifft(inverse_laplacian_symbol(g) * div_hat(g, acc)))


def effective_flux_residual(prev: FluidState, next: FluidState, cfg: SolverConfig, rho_floor=None) -> ScalarField:
    """``(2mu+lambda) div u - P + mean P - D_rho_u - F`` with time-centred terms."""
    g = prev.grid
    spec = cfg.stress
    floor = rho_floor if rho_floor is not None else 1e-8 * float(np.max(prev.rho.values))
    divu = 0.0
    P = 0.0
    for s in (prev, next):
        u = velocity(s.rho.values, s.m.values, floor)
        divu = divu + 0.5 * g.ifft(div_hat(g, g.fft(u)))
        P = P + 0.5 * cfg.law.eval(s.rho.values)
    D = effective_flux(prev, next, floor).values
    F = flux_remainder(prev, next, cfg.alpha, cfg.forcing, floor).values
    return ScalarField(g, (2 * spec.mu + spec.lam) * divu - P + np.mean(P) - D - F)
