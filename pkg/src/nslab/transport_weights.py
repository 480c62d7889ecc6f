"""Maximal function, the ``D_h`` operator and the penalized weight transport.

Weights solve ``d_t w + u . grad w = -D w + alpha Delta w`` with a
penalization ``D >= 0``.  The transport step is semi-Lagrangian: the value
at ``x`` is the value at the departure point, times the exponential of the
time-integrated penalization along the characteristic, so ``0 <= w <= 1``
holds by construction rather than by luck.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from functools import lru_cache
from typing import Optional, Sequence

import numpy as np
from numpy.typing import NDArray
from scipy import ndimage

from .grid import ScalarField, TorusGrid, VectorField, div_hat, grad_hat, jacobian
from .kernels import normalized_kernel
from .pressure import PressureLaw
from .stress import AnisotropySpec, amu_symbol, velocity

__all__ = [
    "WeightField",
    "radius_ladder",
    "maximal_function",
    "maximal_function_bruteforce",
    "maximal_function_continuum",
    "dh_kernel",
    "dh_operator",
    "gradient_magnitude",
    "penalization",
    "initial_weight",
    "evolve_weight",
    "log_moment",
    "small_weight_mass",
    "maximal_inequality_constant",
    "default_lambda",
    "WeightObserver",
]

KINDS = ("D0", "D1", "Da")
W_FLOOR = 1e-300


@dataclass(frozen=True, eq=False)
class WeightField:
    w: ScalarField
    kind: str
    lambda_pen: float
    h_pen: Optional[float] = None

    def __post_init__(self) -> None:
        if self.kind not in KINDS:
            raise ValueError(f"unknown penalization kind {self.kind!r}")
        if not self.lambda_pen > 0:
            raise ValueError("lambda_pen must be positive")
        if self.kind == "Da" and self.h_pen is None:
            raise ValueError("kind Da needs a kernel scale h_pen")
        v = self.w.values
        if np.any(v < 0) or np.any(v > 1):
            raise ValueError("weights must lie in [0, 1]")

    @property
    def grid(self) -> TorusGrid:
        return self.w.grid

    def with_values(self, values: NDArray) -> "WeightField":
        return replace(self, w=ScalarField(self.grid, values))


# -- maximal function ------------------------------------------------------------

def radius_ladder(grid: TorusGrid) -> tuple[float, ...]:
    """``spacing/2`` (the single node), then ``spacing * 2^j`` up to ``1/2``."""
    radii = [0.5 * grid.spacing]
    r = grid.spacing
    while r <= 0.5 + 1e-12:
        radii.append(r)
        r *= 2
    return tuple(radii)


def _ball(grid: TorusGrid, r: float) -> NDArray:
    return grid.distance <= r * (1 + 1e-12)


@lru_cache(maxsize=16)
def _ball_transforms(grid: TorusGrid) -> tuple:
    out = []
    for r in radius_ladder(grid):
        b = _ball(grid, r).astype(float)
        out.append((grid.fft(b), float(b.sum())))
    return tuple(out)


def maximal_function(f: ScalarField) -> ScalarField:
    """Max over the radius ladder of periodic ball averages of ``f``."""
    g = f.grid
    fh = g.fft(f.values)
    best = np.array(f.values, copy=True)  # the single-node ball
    for bh, count in _ball_transforms(g)[1:]:
        # balls are symmetric, so convolution equals the centred average
        avg = g.ifft(bh * fh) / count
        np.maximum(best, avg, out=best)
    return ScalarField(g, best)


def maximal_function_bruteforce(f: ScalarField, radii: Optional[Sequence[float]] = None) -> ScalarField:
    """Direct ``O(n^{2d})`` evaluation over the same (or a given) radius set."""
    g = f.grid
    radii = radius_ladder(g) if radii is None else radii
    vals = f.values
    flat = vals.reshape(-1)
    idx = np.indices(g.shape).reshape(g.d, -1)
    out = np.full(g.size, -np.inf)
    for p in range(g.size):
        diff = (idx - idx[:, p : p + 1] + g.n // 2) % g.n - g.n // 2
        dist = np.sqrt(np.sum(diff * diff, axis=0)) / g.n
        for r in radii:
            sel = dist <= r * (1 + 1e-12)
            out[p] = max(out[p], float(np.mean(flat[sel])))
    return ScalarField(g, out.reshape(g.shape))


def maximal_function_continuum(f: ScalarField) -> ScalarField:
    """Max over every distinct lattice radius up to ``1/2`` (finer than the ladder)."""
    g = f.grid
    d2 = np.unique(np.round((g.distance * g.n) ** 2).astype(np.int64))
    radii = [math.sqrt(v) / g.n for v in d2 if math.sqrt(v) / g.n <= 0.5 + 1e-12]
    fh = g.fft(f.values)
    best = np.array(f.values, copy=True)
    for r in radii[1:]:
        b = _ball(g, r).astype(float)
        np.maximum(best, g.ifft(g.fft(b) * fh) / b.sum(), out=best)
    return ScalarField(g, best)


# -- D_h -----------------------------------------------------------------------

def _gauss(q: int) -> tuple[NDArray, NDArray]:
    x, w = np.polynomial.legendre.leggauss(q)
    return 0.5 * x, 0.5 * w  # on [-1/2, 1/2], weights summing to 1


def _cell_average(centers: NDArray, spacing: float, h: float, d: int, q: int) -> NDArray:
    """Mean of ``1_{|z|<=h} / |z|^(d-1)`` over cells centred at ``centers`` (shape ``(m, d)``)."""
    x, w = _gauss(q)
    pts = np.stack(np.meshgrid(*([x] * d), indexing="ij"), axis=-1).reshape(-1, d) * spacing
    wts = np.prod(np.stack(np.meshgrid(*([w] * d), indexing="ij"), axis=-1).reshape(-1, d), axis=1)
    z = centers[:, None, :] + pts[None]
    r = np.sqrt(np.sum(z * z, axis=-1))
    with np.errstate(divide="ignore"):
        v = np.where(r <= h, r ** (1.0 - d), 0.0)
    return v @ wts


def _center_cell_average(spacing: float, d: int) -> float:
    """Mean of ``|z|^(1-d)`` over the cell around the origin (16-point rule per half-axis)."""
    if d == 1:
        return 1.0
    if d == 2:
        # closed form: int_{[-s/2,s/2]^2} dz/|z| = 4 s asinh(1)
        return 4.0 * math.asinh(1.0) / spacing
    x, w = np.polynomial.legendre.leggauss(16)
    x = 0.25 * (x + 1) * spacing  # [0, s/2]
    w = 0.25 * w * spacing
    X, Y, Z = np.meshgrid(x, x, x, indexing="ij")
    W = w[:, None, None] * w[None, :, None] * w[None, None, :]
    return 8.0 * float(np.sum(W / (X * X + Y * Y + Z * Z))) / spacing**3


@lru_cache(maxsize=8)
def _dh_geometry(grid: TorusGrid) -> tuple:
    """Per-cell data reused by every radius: offsets, distances, interior averages."""
    s = grid.spacing
    d = grid.d
    offs = np.stack([o.reshape(-1) for o in grid.offsets], axis=1)
    dist = grid.distance.reshape(-1)
    full = np.zeros(grid.size)
    nz = dist > 0
    full[nz] = _cell_average(offs[nz], s, np.inf, d, 4)
    full[~nz] = _center_cell_average(s, d)
    return offs, dist, full, 0.5 * s * math.sqrt(d)


def _dh_kernel_array(grid: TorusGrid, h: float) -> NDArray:
    """Cell averages of ``1_{|z|<=h} / |z|^(d-1)``, divided by ``h``.

    Cells inside the ball use a 4-point Gauss rule per axis, cells cut by
    the sphere a 16-point rule, the origin cell its exact average.
    """
    offs, dist, full, half_diag = _dh_geometry(grid)
    out = np.where(dist + half_diag <= h, full, 0.0)
    cut = (np.abs(dist - h) < half_diag) & (dist > 0)
    if np.any(cut):
        out[cut] = _cell_average(offs[cut], grid.spacing, h, grid.d, 16)
    if h < half_diag:
        out[dist == 0] = _cell_average(np.zeros((1, grid.d)), grid.spacing, h, grid.d, 16)[0]
    return (out / h).reshape(grid.shape)


@lru_cache(maxsize=64)
def _dh_kernel_values(grid: TorusGrid, h: float) -> NDArray:
    return _dh_kernel_array(grid, h)


def dh_kernel(grid: TorusGrid, h: float) -> ScalarField:
    """Cell-averaged ``1_{|z|<=h} / (h |z|^(d-1))``."""
    if h < grid.spacing * (1 - 1e-12):
        raise ValueError("D_h needs h >= grid spacing")
    if h > 0.5 + 1e-12:
        raise ValueError("D_h needs h <= 1/2")
    return ScalarField(grid, _dh_kernel_values(grid, float(h)))


def dh_operator(grad_mag: ScalarField, h: float) -> ScalarField:
    """``D_h u(x) = (1/h) int_{|z|<=h} |grad u|(x+z) / |z|^(d-1) dz``."""
    g = grad_mag.grid
    k = _dh_kernel_values(g, float(h))
    return ScalarField(g, g.ifft(g.fft(k) * g.fft(grad_mag.values)) * g.cell_volume)


# -- penalizations --------------------------------------------------------------

def gradient_magnitude(u: VectorField) -> ScalarField:
    """Frobenius norm of the velocity Jacobian."""
    J = jacobian(u.grid, u.values)
    return ScalarField(u.grid, np.sqrt(np.sum(J * J, axis=(0, 1))))


def _divergence(u: VectorField) -> NDArray:
    g = u.grid
    return g.ifft(div_hat(g, g.fft(u.values)))


def penalization(
    state,
    kind: str,
    lambda_pen: float,
    law: Optional[PressureLaw] = None,
    h_pen: Optional[float] = None,
    *,
    stress: Optional[AnisotropySpec] = None,
    rho_floor: Optional[float] = None,
    a_exp: Optional[float] = None,
) -> ScalarField:
    """Pointwise penalization ``D`` of the weight equation.

    * ``D0 = lambda M|grad u|``
    * ``D1 = lambda (rho |div u| + |div u| + M|grad u| + rho^gamma_tilde)``
      (pressure laws here do not depend on ``x``, so the remaining terms vanish)
    * ``Da = lambda (M|grad u| + Kbar_h * (|div u| + |A_mu rho^gamma|))``
    """
    if kind not in KINDS:
        raise ValueError(f"unknown penalization kind {kind!r}")
    g = state.rho.grid
    rho = state.rho.values
    floor = rho_floor if rho_floor is not None else 1e-8 * max(float(np.max(rho)), 1e-300)
    u = VectorField(g, velocity(rho, state.m.values, floor))
    mgrad = maximal_function(gradient_magnitude(u)).values
    if kind == "D0":
        return ScalarField(g, lambda_pen * mgrad)
    if law is None:
        raise ValueError(f"kind {kind} needs the pressure law")
    divu = np.abs(_divergence(u))
    if kind == "D1":
        total = rho * divu + divu + mgrad + np.maximum(rho, 0.0) ** law.gamma_tilde
        return ScalarField(g, lambda_pen * total)
    if h_pen is None:
        raise ValueError("kind Da needs h_pen")
    src = divu
    if stress is not None and stress.delta_norm:
        pg = g.fft(np.maximum(rho, 0.0) ** law.gamma)
        src = src + np.abs(g.ifft(amu_symbol(g, stress, state.t) * pg))
    kb = normalized_kernel(g, h_pen, a_exp if a_exp is not None else g.d + 1.0)
    smooth = g.ifft(g.fft(kb.values) * g.fft(src)) * g.cell_volume
    return ScalarField(g, lambda_pen * (mgrad + np.maximum(smooth, 0.0)))


def initial_weight(rho0: ScalarField, kind: str, lambda_pen: float, h_pen: Optional[float] = None) -> WeightField:
    """``w = 1`` for D0/Da and ``exp(-lambda sup rho0)`` for D1."""
    g = rho0.grid
    value = math.exp(-lambda_pen * float(np.max(rho0.values))) if kind == "D1" else 1.0
    return WeightField(ScalarField(g, np.full(g.shape, value)), kind, lambda_pen, h_pen)


# -- transport -------------------------------------------------------------------

def _interp(values: NDArray, coords: NDArray, order: int) -> NDArray:
    """Periodic interpolation at index-space ``coords`` of shape ``(d, *shape)``."""
    return ndimage.map_coordinates(values, coords, order=order, mode="grid-wrap", prefilter=order > 1)


def _local_bounds(values: NDArray, coords: NDArray) -> tuple[NDArray, NDArray]:
    d = values.ndim
    n = values.shape[0]
    base = np.floor(coords).astype(np.int64)
    lo = np.full(coords.shape[1:], np.inf)
    hi = np.full(coords.shape[1:], -np.inf)
    for corner in range(2**d):
        idx = tuple((base[a] + ((corner >> a) & 1)) % n for a in range(d))
        v = values[idx]
        np.minimum(lo, v, out=lo)
        np.maximum(hi, v, out=hi)
    return lo, hi


def _index_grid(grid: TorusGrid) -> NDArray:
    return np.stack(np.meshgrid(*([np.arange(grid.n, dtype=float)] * grid.d), indexing="ij"))


def _as_array(v) -> NDArray:
    return v.values if hasattr(v, "values") else np.asarray(v, dtype=float)


def evolve_weight(
    w: WeightField,
    u_traj: Sequence,
    D_traj: Sequence,
    alpha: float,
    dt: float,
    interpolation: str = "cubic",
) -> WeightField:
    """Advance ``w`` by ``dt`` given velocity and penalization at both ends.

    ``u_traj = (u_t, u_{t+dt})`` and ``D_traj = (D_t, D_{t+dt})``.  The
    departure point comes from two midpoint fixed-point sweeps on the
    time-averaged velocity.  Cubic values are clipped to the range of the
    ``2^d`` surrounding nodes; ``interpolation="linear"`` makes the update
    exactly order preserving.  For ``alpha > 0`` the transport step sits
    between two exact heat half-steps, followed by clipping to ``[0, 1]``.
    """
    if interpolation not in ("cubic", "linear"):
        raise ValueError("interpolation must be 'cubic' or 'linear'")
    g = w.grid
    order = 3 if interpolation == "cubic" else 1
    u0, u1 = (_as_array(v) for v in u_traj)
    D0, D1 = (_as_array(v) for v in D_traj)
    if np.any(D0 < 0) or np.any(D1 < 0):
        raise ValueError("penalization must be nonnegative")
    vals = np.array(w.w.values, dtype=float)
    heat = None
    if alpha:
        heat = np.exp(-0.5 * alpha * dt * g.xi2)
        vals = np.clip(g.ifft(heat * g.fft(vals)), 0.0, 1.0)

    home = _index_grid(g)
    umid = 0.5 * (u0 + u1) * g.n  # index units per unit time
    shift = 0.5 * dt * umid
    for _ in range(2):
        pos = home - shift
        shift = 0.5 * dt * np.stack([_interp(c, pos, order) for c in umid])
    foot = home - 2.0 * shift

    moved = _interp(vals, foot, order)
    if order > 1:
        lo, hi = _local_bounds(vals, foot)
        moved = np.clip(moved, lo, hi)
    Dfoot = _interp(D0, foot, 1)
    moved = moved * np.exp(-0.5 * dt * (Dfoot + D1))
    if heat is not None:
        moved = g.ifft(heat * g.fft(moved))
    return w.with_values(np.clip(moved, 0.0, 1.0))


# -- moments ---------------------------------------------------------------------

def log_moment(rho: ScalarField, w: ScalarField, theta: float = 1.0) -> float:
    """``int rho (1 + |log max(w, 1e-300)|)^theta``."""
    if not 0 < theta <= 1:
        raise ValueError("theta must lie in (0, 1]")
    wv = np.maximum(w.values, W_FLOOR)
    return rho.grid.integrate(rho.values * (1.0 + np.abs(np.log(wv))) ** theta)


def small_weight_mass(rho: ScalarField, w: ScalarField, h: float, eta: float, a_exp: Optional[float] = None) -> float:
    """``int rho 1_{Kbar_h * w <= eta}``."""
    if not 0 < eta < 1:
        raise ValueError("eta must lie in (0, 1)")
    g = rho.grid
    kb = normalized_kernel(g, h, a_exp if a_exp is not None else g.d + 1.0)
    smooth = g.ifft(g.fft(kb.values) * g.fft(w.values)) * g.cell_volume
    return g.integrate(rho.values * (smooth <= eta))


# -- constants -------------------------------------------------------------------

def maximal_inequality_constant(
    grid: TorusGrid,
    rng: np.random.Generator,
    fields: int = 8,
    pairs: int = 2000,
    kmax: float = 6.0,
) -> float:
    """Measured ``sup |u(x)-u(y)| / (|x-y| (M|grad u|(x) + M|grad u|(y)))``."""
    from .grid import random_band_limited

    worst = 0.0
    for _ in range(fields):
        u = random_band_limited(grid, rng, kmax, slope=1.0)
        gradm = np.sqrt(np.sum(grid.ifft(grad_hat(grid, grid.fft(u))) ** 2, axis=0))
        M = maximal_function(ScalarField(grid, gradm)).values.reshape(-1)
        flat = u.reshape(-1)
        a = rng.integers(0, grid.size, pairs)
        b = rng.integers(0, grid.size, pairs)
        keep = a != b
        a, b = a[keep], b[keep]
        ia = np.array(np.unravel_index(a, grid.shape))
        ib = np.array(np.unravel_index(b, grid.shape))
        diff = (ia - ib + grid.n // 2) % grid.n - grid.n // 2
        dist = np.sqrt(np.sum(diff * diff, axis=0)) / grid.n
        ratio = np.abs(flat[a] - flat[b]) / (dist * (M[a] + M[b]))
        worst = max(worst, float(np.max(ratio)))
    return worst


@lru_cache(maxsize=4)
def default_lambda(d: int, n: int = 64, seed: int = 0) -> float:
    """``4 (1 + C_M)`` with ``C_M`` measured by ``maximal_inequality_constant``."""
    grid = TorusGrid(d, n)
    return 4.0 * (1.0 + maximal_inequality_constant(grid, np.random.default_rng(seed)))


# -- coupling to solver runs --------------------------------------------------------

class WeightObserver:
    """Evolves a weight alongside a solver run: call with ``(prev, next, dt)``."""

    def __init__(
        self,
        weight: WeightField,
        law: Optional[PressureLaw] = None,
        alpha: float = 0.0,
        stress: Optional[AnisotropySpec] = None,
        rho_floor: Optional[float] = None,
        interpolation: str = "cubic",
        record_every: int = 1,
    ):
        self.weight = weight
        self.law = law
        self.alpha = alpha
        self.stress = stress
        self.rho_floor = rho_floor
        self.interpolation = interpolation
        self.record_every = record_every
        self.times: list = []
        self.log_moments: list = []
        self.penalized_mass: list = []
        self.samples: list = []
        self._count = 0
        self._cached = None

    def _pen(self, state) -> NDArray:
        w = self.weight
        return penalization(
            state, w.kind, w.lambda_pen, self.law, w.h_pen, stress=self.stress, rho_floor=self.rho_floor
        ).values

    def __call__(self, prev, next, dt: float) -> None:
        floor = self.rho_floor if self.rho_floor is not None else 1e-8 * float(np.max(prev.rho.values))
        if self._cached is not None and self._cached[0] is prev:
            D0 = self._cached[1]
        else:
            D0 = self._pen(prev)
            if not self.times:
                self._record(prev, D0)
        D1 = self._pen(next)
        u0 = velocity(prev.rho.values, prev.m.values, floor)
        u1 = velocity(next.rho.values, next.m.values, floor)
        self.weight = evolve_weight(self.weight, (u0, u1), (D0, D1), self.alpha, dt, self.interpolation)
        self._cached = (next, D1)
        self._count += 1
        if self._count % self.record_every == 0:
            self._record(next, D1)

    def _record(self, state, D: NDArray) -> None:
        self.times.append(state.t)
        self.log_moments.append(log_moment(state.rho, self.weight.w, 1.0))
        self.penalized_mass.append(state.rho.grid.integrate(state.rho.values * D))
        self.samples.append((state.t, self.weight.w.values, state.rho.values))
