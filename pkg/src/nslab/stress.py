"""Viscous stress operators and the anisotropic multiplier ``A_mu``.

The momentum equation carries ``+ div(A(t) grad u) + (mu + lambda) grad div u``
with ``A = mu I + deltaA(t)``.  ``deltaA`` is symmetric, trace-free and
piecewise constant in time.  Its action may be smoothed by the Gaussian
mollifier ``exp(-eps^2 |xi|^2 / 2)`` (``mollifier_eps``; 0 means no
smoothing), and the same mollified quadratic form defines the multiplier

    e(xi) = (xi . B xi) * Khat_eps(xi),    B = deltaA / (2 ||deltaA||),

of the operator ``E`` used in ``A_mu = (Delta - a_mu E)^{-1} E``.

Second-derivative symbols use ``xi_i^2`` on the diagonal and the
Nyquist-free ``xi_i xi_j`` off the diagonal, so every operator is real and
symmetric per frequency.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from numpy.typing import ArrayLike, NDArray

from .grid import ScalarField, TorusGrid, VectorField, div_hat, grad_hat

__all__ = [
    "AnisotropySpec",
    "ResonanceError",
    "isotropic_apply",
    "anisotropic_apply",
    "amu_apply",
    "amu_symbol",
    "resolvent_laplacian_symbol",
    "symbol_bounds",
    "dissipation",
    "divu_relation_residual",
    "DivuResidual",
    "momentum_flux_divergence",
]


class ResonanceError(ArithmeticError):
    """The ``A_mu`` denominator nearly vanishes at a resolved frequency."""


def _sym_matrix(m: ArrayLike, d: int) -> NDArray:
    a = np.array(m, dtype=float).reshape(d, d)
    if not np.allclose(a, a.T, atol=1e-14, rtol=0):
        raise ValueError("deltaA must be symmetric")
    return 0.5 * (a + a.T)


@dataclass(frozen=True, eq=False)
class AnisotropySpec:
    """Lamé coefficients plus a piecewise-constant anisotropic correction.

    ``delta_table`` holds ``(t_start, matrix)`` pairs: the matrix applies for
    ``t_start <= t`` until the next entry.  A common trace of the matrices is
    moved into ``mu`` so the stored ``deltaA`` is trace-free.
    """

    mu: float
    lam: float
    d: int
    delta_table: tuple = ()
    mollifier_eps: float = 0.0
    symmetric: bool = False
    delta_norm: float = field(init=False)
    a_mu: float = field(init=False)

    def __post_init__(self) -> None:
        d, mu, lam = self.d, float(self.mu), float(self.lam)
        table = []
        traces = []
        for t0, m in self.delta_table or ((0.0, np.zeros((d, d))),):
            a = _sym_matrix(m, d)
            traces.append(np.trace(a))
            table.append((float(t0), a))
        table.sort(key=lambda item: item[0])
        if not np.allclose(traces, traces[0], atol=1e-12):
            raise ValueError("deltaA entries must share one trace (the trace is absorbed into mu)")
        tr = traces[0]
        if tr:
            mu += tr / d
            table = [(t0, a - (tr / d) * np.eye(d)) for t0, a in table]
        if mu <= 0:
            raise ValueError("shear viscosity mu must be positive")
        if 2 * mu / d + lam <= 0:
            raise ValueError("bulk coefficient must satisfy 2 mu / d + lambda > 0")
        norm = max(float(np.max(np.abs(np.linalg.eigvalsh(a)))) for _, a in table)
        if 2 * mu / d + lam - norm <= 0:
            raise ValueError("ellipticity condition 2 mu / d + lambda - ||deltaA|| > 0 violated")
        if self.mollifier_eps < 0:
            raise ValueError("mollifier_eps must be nonnegative")
        for _, a in table:
            a.setflags(write=False)
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "lam", lam)
        object.__setattr__(self, "delta_table", tuple(table))
        object.__setattr__(self, "delta_norm", norm)
        object.__setattr__(self, "a_mu", 2 * norm / (2 * mu + lam))

    @classmethod
    def isotropic(cls, mu: float, lam: float, d: int) -> "AnisotropySpec":
        return cls(mu, lam, d)

    @property
    def nu(self) -> float:
        return 1.0 / (2 * self.mu + self.lam)

    @property
    def is_isotropic(self) -> bool:
        return self.delta_norm == 0.0

    def delta_at(self, t: float) -> NDArray:
        current = self.delta_table[0][1]
        for t0, a in self.delta_table:
            if t >= t0:
                current = a
            else:
                break
        return current

    def coercivity_bound(self) -> float:
        """Lower bound of ``-<u, D u> / ||grad u||^2`` for the default operator.

        Per frequency the symbol has eigenvalues ``xi.A xi`` (transverse) and
        ``xi.A xi + (mu + lambda)|xi|^2`` (longitudinal).
        """
        lo = min(float(np.min(np.linalg.eigvalsh(a))) for _, a in self.delta_table)
        return self.mu + lo + min(0.0, self.mu + self.lam)


# -- symbol helpers ------------------------------------------------------------

def _pair(grid: TorusGrid, i: int, j: int) -> NDArray:
    if i == j:
        return grid.xi[i] ** 2
    return grid.xi_odd[i] * grid.xi_odd[j]


def _quadratic(grid: TorusGrid, a: NDArray) -> NDArray:
    q = np.zeros(grid.spectral_shape)
    for i in range(grid.d):
        for j in range(grid.d):
            if a[i, j]:
                q = q + a[i, j] * _pair(grid, i, j)
    return q


def mollifier_hat(grid: TorusGrid, eps: float) -> NDArray:
    if eps == 0:
        return np.ones(grid.spectral_shape)
    return np.exp(-0.5 * eps * eps * grid.xi2)


def e_symbol(grid: TorusGrid, spec: AnisotropySpec, t: float) -> NDArray:
    if spec.delta_norm == 0:
        return np.zeros(grid.spectral_shape)
    b = spec.delta_at(t) / (2.0 * spec.delta_norm)
    return _quadratic(grid, b) * mollifier_hat(grid, spec.mollifier_eps)


def _denominator(grid: TorusGrid, spec: AnisotropySpec, t: float) -> NDArray:
    den = -grid.xi2 - spec.a_mu * e_symbol(grid, spec, t)
    nz = grid.xi2 > 0
    if np.any(np.abs(den[nz]) < 1e-8):
        raise ResonanceError("A_mu denominator below 1e-8 on the frequency lattice")
    return np.where(nz, den, 1.0)


def amu_symbol(grid: TorusGrid, spec: AnisotropySpec, t: float) -> NDArray:
    """``e / (-|xi|^2 - a_mu e)``, zero at ``xi = 0``."""
    e = e_symbol(grid, spec, t)
    return np.where(grid.xi2 > 0, e / _denominator(grid, spec, t), 0.0)


def resolvent_laplacian_symbol(grid: TorusGrid, spec: AnisotropySpec, t: float) -> NDArray:
    """Symbol of ``(Delta - a_mu E)^{-1} Delta``, zero at ``xi = 0``."""
    return np.where(grid.xi2 > 0, -grid.xi2 / _denominator(grid, spec, t), 0.0)


def resolvent_symbol(grid: TorusGrid, spec: AnisotropySpec, t: float) -> NDArray:
    """Symbol of ``(Delta - a_mu E)^{-1}`` on zero-mean functions."""
    return np.where(grid.xi2 > 0, 1.0 / _denominator(grid, spec, t), 0.0)


def symbol_bounds(grid: TorusGrid, spec: AnisotropySpec, t: Optional[float] = None) -> tuple[float, float]:
    """Max over the lattice of ``|A_mu|`` and ``|(Delta - a_mu E)^{-1} Delta|``.

    With ``t`` omitted every entry of the time table is scanned.
    """
    times = [t] if t is not None else [t0 for t0, _ in spec.delta_table]
    a = max(float(np.max(np.abs(amu_symbol(grid, spec, s)))) for s in times)
    r = max(float(np.max(np.abs(resolvent_laplacian_symbol(grid, spec, s)))) for s in times)
    return a, r


# -- operators on spectral arrays ------------------------------------------------

def lame_scalar_symbol(grid: TorusGrid, spec: AnisotropySpec, t: float) -> NDArray:
    """``xi . A xi`` with the deltaA part mollified."""
    s = spec.mu * grid.xi2
    if spec.delta_norm:
        s = s + _quadratic(grid, spec.delta_at(t)) * mollifier_hat(grid, spec.mollifier_eps)
    return s


def stress_hat(grid: TorusGrid, spec: AnisotropySpec, t: float, uh: NDArray, scalar: Optional[NDArray] = None) -> NDArray:
    """Apply the stress operator to transformed velocity components."""
    d = grid.d
    s = lame_scalar_symbol(grid, spec, t) if scalar is None else scalar
    out = np.empty_like(uh)
    c = spec.mu + spec.lam
    for i in range(d):
        acc = -s * uh[i]
        for j in range(d):
            acc = acc - c * _pair(grid, i, j) * uh[j]
        out[i] = acc
    if spec.symmetric and spec.delta_norm:
        a = spec.delta_at(t)
        k = mollifier_hat(grid, spec.mollifier_eps)
        for i in range(d):
            acc = np.zeros(grid.spectral_shape, dtype=complex)
            for j in range(d):
                for l in range(d):
                    if a[j, l]:
                        acc = acc + a[j, l] * _pair(grid, i, l) * uh[j]
            out[i] -= k * acc
    return out


def stress_matrix(grid: TorusGrid, spec: AnisotropySpec, t: float) -> NDArray:
    """Per-frequency symbol matrix of the stress operator, shape ``(*spectral, d, d)``."""
    d = grid.d
    cols = []
    for j in range(d):
        e = np.zeros((d,) + grid.spectral_shape, dtype=complex)
        e[j] = 1.0
        cols.append(stress_hat(grid, spec, t, e).real)
    m = np.stack(cols, axis=-1)  # (d, *spectral, d) with [i, ..., j]
    return np.moveaxis(m, 0, -2)


def isotropic_apply(u: VectorField, mu: float, lam: float) -> VectorField:
    """``mu Delta u + (lambda + mu) grad div u``."""
    g = u.grid
    spec = AnisotropySpec(mu, lam, g.d) if 2 * mu / g.d + lam > 0 else None
    if spec is None:
        raise ValueError("Lamé coefficients must satisfy mu > 0 and 2 mu / d + lambda > 0")
    return VectorField(g, g.ifft(stress_hat(g, spec, 0.0, g.fft(u.values))))


def anisotropic_apply(u: VectorField, spec: AnisotropySpec, t: float) -> VectorField:
    """``div(A(t) grad u) + (mu + lambda) grad div u`` (with the configured variant)."""
    g = u.grid
    return VectorField(g, g.ifft(stress_hat(g, spec, t, g.fft(u.values))))


def amu_apply(f: ScalarField, spec: AnisotropySpec, t: float) -> ScalarField:
    """Apply ``A_mu = (Delta - a_mu E)^{-1} E``."""
    g = f.grid
    return ScalarField(g, g.ifft(amu_symbol(g, spec, t) * g.fft(f.values)))


def dissipation(u: VectorField, spec: AnisotropySpec, t: float) -> float:
    """``-<u, D u>`` in ``L^2``."""
    g = u.grid
    du = g.ifft(stress_hat(g, spec, t, g.fft(u.values)))
    return -g.integrate(np.sum(u.values * du, axis=0))


# -- coupling relation for div u ----------------------------------------------------

def momentum_flux_divergence(grid: TorusGrid, m: NDArray, u: NDArray) -> NDArray:
    """Spectral ``div(m (x) u)``: component ``i`` is ``sum_j d_j (m_i u_j)``."""
    out = np.zeros((grid.d,) + grid.spectral_shape, dtype=complex)
    for i in range(grid.d):
        out[i] = div_hat(grid, grid.fft(m[i][None] * u))
    return out


def velocity(rho: NDArray, m: NDArray, rho_floor: float) -> NDArray:
    return m / np.maximum(rho, rho_floor)[None]


def advective_gradient_term(grid: TorusGrid, rho: NDArray, u: NDArray) -> NDArray:
    """Physical ``(grad rho . grad) u``: component ``i`` is ``sum_j d_j rho d_j u_i``."""
    gr = grid.ifft(grad_hat(grid, grid.fft(rho)))
    uh = grid.fft(u)
    out = np.zeros_like(u)
    for i in range(grid.d):
        gu = grid.ifft(grad_hat(grid, uh[i]))
        out[i] = np.sum(gr * gu, axis=0)
    return out


@dataclass(frozen=True)
class DivuResidual:
    field: ScalarField
    mean: float
    norm: float


def divu_relation_residual(
    prev,
    next,
    law,
    spec: AnisotropySpec,
    alpha: float = 0.0,
    forcing: Optional[Callable[[float, TorusGrid], NDArray]] = None,
    rho_floor: Optional[float] = None,
    formula: str = "auto",
) -> DivuResidual:
    """Residual of the relation expressing ``(2mu+lambda) div u`` between two states.

    Taking the divergence of the momentum equation and inverting gives

        (2mu+lambda) div u = (P - mean P) + a_mu A_mu P
                             + (Delta - a_mu E)^{-1} div(d_t m + div(m (x) u))
                             + (Delta - a_mu E)^{-1} div(alpha (grad rho . grad) u - rho f)

    which reduces to the ``Delta^{-1}`` form when ``deltaA = 0``.  The time
    derivative is the two-point difference; every other term is averaged over
    the two states, so the residual is second-order consistent in ``dt``.
    ``formula`` selects ``"isotropic"`` (ignore deltaA), ``"anisotropic"``,
    ``"symmetric"`` (full per-frequency inversion of the stress symbol) or
    ``"auto"``.  The returned ``mean`` is the zero-frequency part the
    zero-mean inverse cannot represent, ``-(mean P)`` averaged.
    """
    grid = prev.rho.grid
    dt = next.t - prev.t
    if dt <= 0:
        raise ValueError("states must be in increasing time order")
    if formula == "auto":
        formula = "symmetric" if (spec.symmetric and spec.delta_norm) else "anisotropic"
    floor = rho_floor if rho_floor is not None else 1e-8 * float(np.max(prev.rho.values))
    t_mid = 0.5 * (prev.t + next.t)
    scale = 2 * spec.mu + spec.lam

    def instantaneous(state):
        rho = state.rho.values
        m = state.m.values
        u = velocity(rho, m, floor)
        uh = grid.fft(u)
        divu = grid.ifft(div_hat(grid, uh))
        P = np.asarray(law.eval(np.maximum(rho, 0.0)))
        Gh = momentum_flux_divergence(grid, m, u)
        if alpha:
            Gh = Gh + alpha * grid.fft(advective_gradient_term(grid, rho, u))
        if forcing is not None:
            Gh = Gh - grid.fft(rho[None] * forcing(state.t, grid))
        return divu, P, Gh

    d0, P0, G0 = instantaneous(prev)
    d1, P1, G1 = instantaneous(next)
    divu = 0.5 * (d0 + d1)
    P = 0.5 * (P0 + P1)
    Gh = 0.5 * (G0 + G1) + grid.fft(next.m.values - prev.m.values) / dt
    Ph = grid.fft(P)
    mean_part = -float(np.mean(P))

    if formula == "symmetric":
        M = stress_matrix(grid, spec, t_mid)
        rhs = np.stack([1j * x * Ph for x in grid.xi_odd]) + Gh
        nz = grid.xi2 > 0
        b = np.moveaxis(rhs, 0, -1)[nz]
        sol = np.zeros_like(np.moveaxis(rhs, 0, -1))
        sol[nz] = np.linalg.solve(M[nz], b[..., None])[..., 0]
        pred = grid.ifft(div_hat(grid, np.moveaxis(sol, -1, 0)))
        res = scale * (divu - pred)
    else:
        use = spec if formula == "anisotropic" else AnisotropySpec(spec.mu, spec.lam, grid.d)
        res_lap = resolvent_laplacian_symbol(grid, use, t_mid)
        res_inv = resolvent_symbol(grid, use, t_mid)
        pred = grid.ifft(res_lap * Ph + res_inv * div_hat(grid, Gh))
        res = scale * divu - pred
    field_ = ScalarField(grid, res)
    return DivuResidual(field_, mean_part, field_.norm(2))
