"""Oscillation functionals, rate fits, Littlewood–Paley blocks and square functions.

Double integrals ``int int K(x-y) F(x, y) dx dy`` over the torus are
evaluated as shift sums: for every lattice shift ``s`` the pair sum
``S(s) = sum_x F(x, x-s)`` is formed once, so any number of kernels can
then be applied as ``sum_s K(s) S(s) / n^{2d}``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable, Iterable, Optional, Sequence

import numpy as np
from numpy.typing import NDArray

from .grid import ScalarField, TorusGrid, VectorField, div_hat, grad_hat, jacobian
from .io import write_csv
from .kernels import (
    Kernel,
    KernelSpec,
    build_kernel,
    kernel_profile,
    log_averaged_kernel,
    normalized_kernel,
)
from .transport_weights import _dh_geometry, _dh_kernel_array, gradient_magnitude

__all__ = [
    "KernelSpec",
    "Kernel",
    "build_kernel",
    "normalized_kernel",
    "log_averaged_kernel",
    "ChiSpec",
    "pair_structure",
    "osc_functional",
    "weighted_osc",
    "thresholded_osc",
    "double_sum_bruteforce",
    "RateFit",
    "DegenerateFitError",
    "fit_rate",
    "default_h_ladder",
    "littlewood_paley",
    "besov_norm",
    "truncated_block_sum",
    "bessel_norm",
    "random_trig_poly",
    "shift_profile",
    "square_function_shift",
    "h1_norm",
    "TransportDemoConfig",
    "TransportDemoResult",
    "linear_transport_demo",
    "DiagnosticsReport",
    "diagnose_states",
]

SUPPORT_THRESHOLD = 1e-12


# -- chi functions -------------------------------------------------------------

def _quintic_join(x0, v0, d0, c0, x1, v1, d1, c1) -> NDArray:
    """Coefficients in ``(x - x0)`` of the quintic with given value/slope/curvature at both ends."""
    L = x1 - x0
    A = np.array([[L**3, L**4, L**5], [3 * L**2, 4 * L**3, 5 * L**4], [6 * L, 12 * L**2, 20 * L**3]])
    rhs = np.array([v1 - v0 - d0 * L - 0.5 * c0 * L * L, d1 - d0 - c0 * L, c1 - c0])
    return np.concatenate([[v0, d0, 0.5 * c0], np.linalg.solve(A, rhs)])


_CHI_BLEND = _quintic_join(0.5, 0.25, 1.0, 2.0, 1.0, 1.0, 1.0, 0.0)


@dataclass(frozen=True)
class ChiSpec:
    """Even convex-type functions of the density increment.

    ``standard``: ``xi^2`` on ``|xi| <= 1/2``, ``|xi|`` on ``|xi| >= 1`` and a
    ``C^2`` quintic in between.  ``anisotropic``: ``|xi|^(1 + ell)``.
    ``abs``: ``|xi|`` (degenerate comparison case).
    """

    flavor: str = "standard"
    ell: float = 1.0

    def __post_init__(self) -> None:
        if self.flavor not in ("standard", "anisotropic", "abs"):
            raise ValueError(f"unknown chi flavor {self.flavor!r}")
        if self.flavor == "anisotropic" and not self.ell > 0:
            raise ValueError("ell must be positive")

    @classmethod
    def anisotropic(cls, gamma: float) -> "ChiSpec":
        if not gamma > 1:
            raise ValueError("gamma must exceed 1")
        return cls("anisotropic", 1.0 / (gamma - 1.0))

    def __call__(self, xi: NDArray) -> NDArray:
        a = np.abs(np.asarray(xi, dtype=float))
        if self.flavor == "abs":
            return a
        if self.flavor == "anisotropic":
            return a ** (1.0 + self.ell)
        out = np.where(a <= 0.5, a * a, a)
        mid = (a > 0.5) & (a < 1.0)
        if np.any(mid):
            out[mid] = np.polynomial.polynomial.polyval(a[mid] - 0.5, _CHI_BLEND)
        return out

    def derivative(self, xi: NDArray) -> NDArray:
        x = np.asarray(xi, dtype=float)
        a = np.abs(x)
        sgn = np.sign(x)
        if self.flavor == "abs":
            return sgn
        if self.flavor == "anisotropic":
            return sgn * (1.0 + self.ell) * a**self.ell
        out = np.where(a <= 0.5, 2 * a, 1.0)
        mid = (a > 0.5) & (a < 1.0)
        if np.any(mid):
            dc = np.polynomial.polynomial.polyder(_CHI_BLEND)
            out = np.where(mid, np.polynomial.polynomial.polyval(a - 0.5, dc), out)
        return sgn * out


# -- shift sums --------------------------------------------------------------------

def _as_values(f) -> NDArray:
    return f.values if hasattr(f, "values") else np.asarray(f, dtype=float)


def pair_structure(
    fields: Sequence,
    fn: Callable[[NDArray, NDArray], NDArray],
    support: Optional[NDArray] = None,
    outputs: int = 1,
) -> NDArray:
    """``S[q, s] = sum_x fn(F(x), F(x - s))[q]`` for every lattice shift ``s``.

    ``fields`` are scalar fields on one grid, stacked so ``fn`` receives
    arrays with a leading field axis.  ``fn`` returns an array with a
    leading axis of length ``outputs`` (or a list of ``outputs`` arrays,
    which avoids stacking them).  Shifts where ``support`` is False
    are left at zero.
    """
    F = np.stack([_as_values(f) for f in fields])
    d = F.ndim - 1
    n = F.shape[1]
    last = np.arange(n)
    idx = (last[None, :] - last[:, None]) % n  # idx[s, j] = j - s
    x = F[..., None, :]
    out = np.zeros((outputs,) + (n,) * d)
    sum_axes = tuple(range(1, d)) + (d + 1,)
    for head in np.ndindex(*((n,) * (d - 1))):
        if support is not None and not np.any(support[head]):
            continue
        rolled = np.roll(F, head, axis=tuple(range(1, d))) if d > 1 else F
        y = rolled[..., idx]
        res = fn(x, y)
        if isinstance(res, (list, tuple)):
            for q, v in enumerate(res):
                out[(q,) + head] = np.sum(v, axis=tuple(a - 1 for a in sum_axes))
        else:
            vals = np.asarray(res).reshape((outputs,) + np.broadcast_shapes(x.shape[1:], y.shape[1:]))
            out[(slice(None),) + head] = vals.sum(axis=sum_axes)
    if support is not None:
        out = out * support
    return out


def _support(kernel: Kernel) -> NDArray:
    k = kernel.values
    return k > SUPPORT_THRESHOLD * float(np.max(k))


def _apply_kernel(kernel: Kernel, S: NDArray) -> float:
    g = kernel.grid
    return float(np.sum(kernel.values * S) * g.cell_volume**2)


def osc_functional(rho, kernel: Kernel, p: float = 1.0) -> float:
    """``int int K(x-y) |rho(x) - rho(y)|^p dx dy``."""
    if p < 1:
        raise ValueError("p must be at least 1")
    S = pair_structure([rho], lambda x, y: np.abs(x[0] - y[0]) ** p, _support(kernel))[0]
    return _apply_kernel(kernel, S)


def weighted_osc(
    rho,
    w,
    kernel: Kernel,
    chi: Callable = ChiSpec(),
    form: str = "sum",
    w_other=None,
) -> float:
    """``int int K(x-y) chi(rho(x) - rho(y)) W(x, y)``.

    ``form="sum"`` uses ``W = w(x) + w(y)``, ``form="product"`` uses
    ``W = w(x) w(y)``; ``w_other`` supplies a second weight for ``y``.
    """
    if form not in ("sum", "product"):
        raise ValueError("form must be 'sum' or 'product'")
    w2 = w if w_other is None else w_other

    def fn(x, y):
        W = x[1] + y[2] if form == "sum" else x[1] * y[2]
        return chi(x[0] - y[0]) * W

    S = pair_structure([rho, w, w2], fn, _support(kernel))[0]
    return _apply_kernel(kernel, S)


def thresholded_osc(rho, kernel: Kernel, chi: Callable = ChiSpec(), eta: float = 0.0) -> float:
    """``int int 1_{rho(x) >= eta} 1_{rho(y) >= eta} K(x-y) chi(rho(x) - rho(y))``."""
    if not eta > 0:
        raise ValueError("eta must be positive")

    def fn(x, y):
        return chi(x[0] - y[0]) * ((x[0] >= eta) & (y[0] >= eta))

    S = pair_structure([rho], fn, _support(kernel))[0]
    return _apply_kernel(kernel, S)


def double_sum_bruteforce(kernel: Kernel, values: Sequence, fn: Callable) -> float:
    """Direct ``sum_{x,y} K(x-y) fn(F(x), F(y)) / n^{2d}`` (small grids only)."""
    g = kernel.grid
    F = np.stack([_as_values(v).reshape(-1) for v in values])
    idx = np.indices(g.shape).reshape(g.d, -1)
    K = kernel.values
    total = 0.0
    for a in range(g.size):
        off = (idx[:, a : a + 1] - idx) % g.n
        kk = K[tuple(off)]
        total += float(np.sum(kk * fn(F[:, a : a + 1], F)))
    return total * g.cell_volume**2


# -- rate fits -----------------------------------------------------------------------

class DegenerateFitError(ValueError):
    """The data are not monotone in the scale, so no power law describes them."""


@dataclass(frozen=True)
class RateFit:
    h0_samples: tuple
    values: tuple
    model: str
    theta: float
    log_c: float
    residual: float
    flags: tuple = ()

    @property
    def c(self) -> float:
        return math.exp(self.log_c)

    def predict(self, h0) -> NDArray:
        h0 = np.asarray(h0, dtype=float)
        if self.model == "inv_log_pow":
            return self.c * np.abs(np.log(h0)) ** (-self.theta)
        return self.c * h0**self.theta

    def to_text(self) -> str:
        lines = [
            f"model = {self.model!r}",
            f"theta = {self.theta!r}",
            f"log_c = {self.log_c!r}",
            f"residual = {self.residual!r}",
            f"samples = {len(self.h0_samples)}",
            f"flags = {list(self.flags)!r}",
        ]
        return "\n".join(lines) + "\n"


def fit_rate(
    h0_samples: Sequence[float],
    values: Sequence[float],
    model: str = "inv_log_pow",
    norms: Optional[Sequence[float]] = None,
    monotone_tol: float = 0.1,
    flat_tol: float = 1e-3,
) -> RateFit:
    """Least-squares power-law fit of ``values / norms`` over the scale ladder.

    ``inv_log_pow``: ``value = C |log h0|^(-theta)``; ``inv_pow``:
    ``value = C h0^theta``.  Data that rise and fall by more than
    ``monotone_tol`` (relative) raise ``DegenerateFitError``; steps smaller
    than ``flat_tol`` are reported in ``flags``.  ``residual`` is the RMS
    of the log-space residuals.
    """
    if model not in ("inv_log_pow", "inv_pow"):
        raise ValueError(f"unknown model {model!r}")
    h = np.asarray(h0_samples, dtype=float)
    v = np.asarray(values, dtype=float)
    if h.shape != v.shape or h.ndim != 1:
        raise ValueError("h0_samples and values must be matching 1-d sequences")
    if h.size < 4:
        raise ValueError("a rate fit needs at least 4 samples")
    if np.any(h <= 0) or np.any(h >= 1) or len(set(h.tolist())) != h.size:
        raise ValueError("scales must be distinct and lie in (0, 1)")
    if norms is not None:
        v = v / np.asarray(norms, dtype=float)
    if not np.all(np.isfinite(v)) or np.any(v <= 0):
        raise DegenerateFitError("values must be positive and finite")
    order = np.argsort(h)
    h, v = h[order], v[order]
    rel = np.diff(v) / np.minimum(v[1:], v[:-1])
    if np.any(rel > monotone_tol) and np.any(rel < -monotone_tol):
        raise DegenerateFitError("values are not monotone in the scale")
    flags = tuple(f"flat between h0={h[i]!r} and h0={h[i + 1]!r}" for i in np.nonzero(np.abs(rel) < flat_tol)[0])
    x = np.log(np.abs(np.log(h))) if model == "inv_log_pow" else np.log(h)
    y = np.log(v)
    A = np.stack([np.ones_like(x), x], axis=1)
    (c0, slope), *_ = np.linalg.lstsq(A, y, rcond=None)
    theta = -slope if model == "inv_log_pow" else slope
    resid = y - (c0 + slope * x)
    return RateFit(
        tuple(h.tolist()),
        tuple(v.tolist()),
        model,
        float(theta),
        float(c0),
        float(np.sqrt(np.mean(resid**2))),
        flags,
    )


def default_h_ladder(n: int) -> tuple[float, ...]:
    """``2^-2, ..., 2^-(log2 n - 2)``: scales of at least four cells."""
    top = int(round(math.log2(n))) - 2
    return tuple(2.0**-j for j in range(2, top + 1))


# -- Littlewood–Paley -------------------------------------------------------------------

def _smooth_step(t: NDArray) -> NDArray:
    """``C^infinity`` step: 0 for ``t <= 0``, 1 for ``t >= 1``."""
    t = np.asarray(t, dtype=float)

    def f(s):
        with np.errstate(divide="ignore", over="ignore"):
            return np.where(s > 0, np.exp(-1.0 / np.where(s > 0, s, 1.0)), 0.0)

    a, b = f(t), f(1.0 - t)
    return a / (a + b)


def lp_bump(r: NDArray) -> NDArray:
    """Radial cutoff: 1 for ``r <= 1``, 0 for ``r >= 2``."""
    return 1.0 - _smooth_step(np.asarray(r, dtype=float) - 1.0)


def lp_symbols(grid: TorusGrid) -> list[NDArray]:
    """``Phi(k) = phi(|k|)`` then ``Psi_j = phi(|k|/2^j) - phi(|k|/2^(j-1))`` until the lattice is covered."""
    kn = grid.k_norm
    top = float(np.max(kn))
    out = [lp_bump(kn)]
    j = 1
    while 2.0 ** (j - 1) <= top:
        out.append(lp_bump(kn / 2.0**j) - lp_bump(kn / 2.0 ** (j - 1)))
        j += 1
    return out


def littlewood_paley(f: ScalarField) -> list[ScalarField]:
    """Dyadic blocks of ``f``; block 0 holds ``|k| < 2``, block ``j`` holds ``2^(j-1) < |k| < 2^(j+1)``."""
    g = f.grid
    fh = g.fft(f.values)
    return [ScalarField(g, g.ifft(s * fh)) for s in lp_symbols(g)]


def _weighted_lq(values: NDArray, q: float) -> float:
    if np.isinf(q):
        return float(np.max(values))
    return float(np.sum(values**q) ** (1.0 / q))


def besov_norm(f: ScalarField, s: float, p: float, q: float) -> float:
    """``|| 2^(s j) ||f_j||_p ||_{l^q}``."""
    if p < 1 or q < 1:
        raise ValueError("p and q must be at least 1")
    blocks = littlewood_paley(f)
    a = np.array([2.0 ** (s * j) * b.norm(p) for j, b in enumerate(blocks)])
    return _weighted_lq(a, q)


def truncated_block_sum(f: ScalarField, s: float, p: float, K: int) -> float:
    """``sum_{j <= K} 2^(s j) ||f_j||_p``."""
    blocks = littlewood_paley(f)
    return float(sum(2.0 ** (s * j) * b.norm(p) for j, b in enumerate(blocks[: K + 1])))


def bessel_norm(f: ScalarField, s: float, p: float) -> float:
    """``||(1 - Delta)^(s/2) f||_p``, the ``W^{s,p}`` norm used for comparisons."""
    g = f.grid
    return ScalarField(g, g.ifft((1.0 + g.xi2) ** (0.5 * s) * g.fft(f.values))).norm(p)


def random_trig_poly(grid: TorusGrid, rng: np.random.Generator, K: int, s: float) -> ScalarField:
    """Random real polynomial with ``1 <= |k| <= 2^K`` and amplitudes ``|k|^-(s + d/2)``."""
    kn = grid.k_norm
    top = 2.0**K
    if top >= grid.n / 2:
        raise ValueError("grid too coarse for the requested degree")
    keep = (kn >= 1) & (kn <= top)
    coef = (rng.standard_normal(grid.spectral_shape) + 1j * rng.standard_normal(grid.spectral_shape))
    with np.errstate(divide="ignore"):
        amp = np.where(keep, np.where(kn > 0, kn, 1.0) ** (-(s + 0.5 * grid.d)), 0.0)
    return ScalarField(grid, grid.ifft(coef * amp * grid.size))


# -- square function --------------------------------------------------------------------

def h1_norm(u: VectorField) -> float:
    g = u.grid
    J = jacobian(g, u.values)
    return math.sqrt(g.integrate(np.sum(u.values**2, axis=0)) + g.integrate(np.sum(J * J, axis=(0, 1))))


def shift_profile(fields: Sequence[VectorField]) -> NDArray:
    """``S(z) = ||D_{|z|} u - D_{|z|} u(. + z)||_{L^2}`` for every lattice shift, per field.

    ``D_r`` acts on ``|grad u|``; one kernel per distinct lattice radius is
    shared by all fields, and the shifted differences come from the
    autocorrelation ``||f - f(.+z)||^2 = 2 (c(0) - c(z))``.
    """
    if not fields:
        return np.zeros((0,))
    g = fields[0].grid
    G = np.stack([g.fft(gradient_magnitude(u).values) for u in fields])
    _, dist, _, _ = _dh_geometry(g)
    d2 = np.round((dist * g.n) ** 2).astype(np.int64)
    classes = np.unique(d2)
    out = np.zeros((len(fields), g.size))
    for c in classes[classes > 0]:
        r = math.sqrt(float(c)) / g.n
        sel = d2 == c
        kh = g.fft(_dh_kernel_array(g, r)) * g.cell_volume
        power = np.abs(kh[None] * G) ** 2
        corr = g.ifft(power).reshape(len(fields), -1)  # sum_x f(x) f(x + z)
        sq = 2.0 * (corr[:, :1] - corr[:, sel]) * g.cell_volume
        out[:, sel] = np.sqrt(np.maximum(sq, 0.0))
    return out.reshape((len(fields),) + g.shape)


def square_function_shift(
    u: VectorField,
    h0: float,
    a_exp: Optional[float] = None,
    profile: Optional[NDArray] = None,
) -> float:
    """``int_{h0}^1 int Kbar_h(z) ||D_{|z|}u - D_{|z|}u(.+z)||_2 dz dh/h``."""
    g = u.grid
    S = shift_profile([u])[0] if profile is None else profile
    k = log_averaged_kernel(g, h0, a_exp if a_exp is not None else g.d + 1.0)
    return g.integrate(k.values * S)


# -- linear transport ----------------------------------------------------------------------

@dataclass(frozen=True)
class TransportDemoConfig:
    d: int = 2
    n: int = 128
    slope: float = 3.5
    u_amplitude: float = 0.5
    compressible: float = 0.1
    rho_mean: float = 1.0
    rho_amplitude: float = 0.3
    rho_kmax: float = 2.0
    t_end: float = 0.25
    cfl: float = 0.4
    lambda_pen: float = 10.0
    a_exp: Optional[float] = None
    seed: int = 0
    smooth_velocity: bool = False
    zero_velocity: bool = False
    h_ladder: Optional[tuple] = None


@dataclass(frozen=True)
class TransportDemoResult:
    fit: RateFit
    rows: tuple
    columns: tuple = ("h", "kernel_norm", "osc_initial", "osc_final", "osc_normalized", "weighted_final")

    def to_csv(self, path) -> None:
        write_csv(path, self.columns, self.rows)


def rough_velocity(
    grid: TorusGrid,
    rng: np.random.Generator,
    slope: float,
    amplitude: float,
    compressible: float = 0.1,
) -> NDArray:
    """Rough divergence-free field plus a smooth compressible part, ``max|u| = amplitude``.

    The solenoidal part is the Leray projection of a random field with
    ``|u_k| ~ |k|^(1 - slope)`` up to the 2/3 cutoff (in one dimension, where no
    such field exists, it is a constant drift).  The compressible part is
    ``grad phi`` with ``phi`` a random ``|k| <= 2`` polynomial; its maximum is
    ``compressible`` times that of the solenoidal part, so ``div u`` stays
    bounded independently of the resolution.
    """
    from .grid import random_band_limited

    kn = grid.k_norm
    if grid.d == 1:
        sol = np.ones((1,) + grid.shape)
    else:
        keep = (kn > 0) & grid.dealias_mask & ~grid.nyquist
        with np.errstate(divide="ignore"):
            amp = np.where(keep, np.where(kn > 0, kn, 1.0) ** (1.0 - slope), 0.0)
        vh = (rng.standard_normal((grid.d,) + grid.spectral_shape)
              + 1j * rng.standard_normal((grid.d,) + grid.spectral_shape)) * amp
        nz = grid.xi2 > 0
        inv = np.where(nz, 1.0 / np.where(nz, grid.xi2, 1.0), 0.0)
        proj = sum(x * c for x, c in zip(grid.xi_odd, vh)) * inv
        vh = vh - np.stack([x * proj for x in grid.xi_odd])
        sol = grid.ifft(vh)
    sol = sol / max(float(np.max(np.abs(sol))), 1e-300)
    phi = random_band_limited(grid, rng, 2.0)
    pot = grid.ifft(grad_hat(grid, grid.fft(phi)))
    pot = pot / max(float(np.max(np.abs(pot))), 1e-300)
    return amplitude * (sol + compressible * pot) / (1.0 + compressible)


def _continuity_rhs(grid: TorusGrid, rho: NDArray, u: NDArray) -> NDArray:
    flux = grid.fft(rho[None] * u) * grid.dealias_mask
    return -grid.ifft(div_hat(grid, flux))


def linear_transport_demo(cfg: TransportDemoConfig = TransportDemoConfig()) -> TransportDemoResult:
    """Transport a bounded density by a rough stationary velocity and fit the oscillation decay.

    The density solves ``d_t rho + div(rho u) = 0`` (spectral, two-stage
    SSP Runge–Kutta, dealiased flux) and a D0 weight is carried along.  For
    each ``h`` of the ladder the kernel-weighted oscillation
    ``int int K_h |rho(x) - rho(y)| / ||K_h||_1`` is recorded together with
    its weighted counterpart; the normalized final oscillation is fitted
    against ``C / |log h|^theta``.
    """
    from .transport_weights import WeightField, evolve_weight, maximal_function

    g = TorusGrid(cfg.d, cfg.n)
    rng = np.random.default_rng(cfg.seed)
    a = cfg.a_exp if cfg.a_exp is not None else cfg.d + 1.0
    if cfg.zero_velocity:
        u = np.zeros((g.d,) + g.shape)
    elif cfg.smooth_velocity:
        u = rough_velocity(TorusGrid(cfg.d, 8), rng, 0.0, cfg.u_amplitude, cfg.compressible)
        u = np.stack([_upsample(c, g) for c in u])
    else:
        u = rough_velocity(g, rng, cfg.slope, cfg.u_amplitude, cfg.compressible)
    from .grid import random_band_limited

    r = random_band_limited(g, rng, cfg.rho_kmax, 1.0)
    rho = cfg.rho_mean * (1.0 + cfg.rho_amplitude * r / max(float(np.max(np.abs(r))), 1e-300))
    rho0 = rho.copy()
    gm = gradient_magnitude(VectorField(g, u))
    D = cfg.lambda_pen * maximal_function(gm).values
    w = WeightField(ScalarField(g, np.ones(g.shape)), "D0", cfg.lambda_pen)

    speed = float(np.max(np.sqrt(np.sum(u * u, axis=0))))
    steps = 1 if speed == 0 else max(1, math.ceil(cfg.t_end * speed * g.n / cfg.cfl))
    dt = cfg.t_end / steps
    for _ in range(steps):
        r1 = rho + dt * _continuity_rhs(g, rho, u)
        rho = 0.5 * rho + 0.5 * (r1 + dt * _continuity_rhs(g, r1, u))
        w = evolve_weight(w, (u, u), (D, D), 0.0, dt)
    if np.min(rho) <= 0:
        raise RuntimeError("transported density lost positivity")

    ladder = cfg.h_ladder if cfg.h_ladder is not None else default_h_ladder(g.n)
    S0 = pair_structure([rho0], lambda x, y: np.abs(x[0] - y[0]))[0]
    S1 = pair_structure(
        [rho, w.w.values],
        lambda x, y: np.stack([np.abs(x[0] - y[0]), np.abs(x[0] - y[0]) * x[1] * y[1]]),
        outputs=2,
    )
    rows = []
    for h in ladder:
        k = build_kernel(g, h, a)
        o0 = _apply_kernel(k, S0)
        o1 = _apply_kernel(k, S1[0])
        ow = _apply_kernel(k, S1[1])
        rows.append((h, k.norm, o0, o1, o1 / k.norm, ow))
    fit = fit_rate([r[0] for r in rows], [r[3] for r in rows], "inv_log_pow", norms=[r[1] for r in rows])
    return TransportDemoResult(fit, tuple(rows))


def _upsample(values: NDArray, grid: TorusGrid) -> NDArray:
    """Spectral interpolation of a coarse periodic array onto ``grid``."""
    coarse = TorusGrid(values.ndim, values.shape[0])
    ch = coarse.fft(values)
    fine = np.zeros(grid.spectral_shape, dtype=complex)
    kc = coarse.k
    idx = tuple((kk.astype(int)) % grid.n for kk in kc[:-1]) + (kc[-1].astype(int),)
    keep = ~coarse.nyquist
    fine[tuple(i[keep] for i in idx)] = ch[keep] * (grid.size / coarse.size)
    return grid.ifft(fine)


# -- reports -----------------------------------------------------------------------------

REPORT_COLUMNS = (
    "t",
    "h0",
    "kernel_norm",
    "osc_p1",
    "osc_p1_normalized",
    "osc_p2",
    "osc_chi",
    "osc_thresholded",
    "weighted_sum",
)


@dataclass
class DiagnosticsReport:
    rows: list = field(default_factory=list)
    fits: dict = field(default_factory=dict)
    columns: tuple = REPORT_COLUMNS

    def column(self, name: str) -> NDArray:
        i = self.columns.index(name)
        return np.array([r[i] for r in self.rows])

    def at_time(self, t: float) -> list:
        return [r for r in self.rows if r[0] == t]

    def to_csv(self, path) -> None:
        write_csv(path, self.columns, self.rows)

    def fits_text(self) -> str:
        parts = []
        for name in sorted(self.fits):
            parts.append(f"[{name}]\n" + self.fits[name].to_text())
        return "\n".join(parts)


def snapshot_structure(rho, w=None, chi: Callable = ChiSpec(), eta: float = 0.0) -> NDArray:
    """Pair sums for every report column of one snapshot (one pass over the shifts)."""
    unweighted = w is None

    def fn(x, y):
        diff = x[0] - y[0]
        ad = np.abs(diff)
        c = chi(diff)
        keep = (x[0] >= eta) & (y[0] >= eta)
        out = [ad, ad * ad, c, c * keep]
        if not unweighted:
            out.append(c * (x[1] + y[1]))
        return out

    if unweighted:
        S = pair_structure([rho], fn, outputs=4)
        return np.concatenate([S, 2.0 * S[2:3]])
    return pair_structure([rho, w], fn, outputs=5)


def diagnose_states(
    states: Sequence,
    h0_list: Sequence[float],
    a_exp: Optional[float] = None,
    chi: Callable = ChiSpec(),
    eta: Optional[float] = None,
    weights: Optional[Sequence] = None,
    structure: Optional[Callable] = None,
) -> DiagnosticsReport:
    """One report row per ``(snapshot, h0)`` with the log-averaged kernel ``Kcal_{h0}``.

    ``eta`` defaults to half the smallest snapshot mean density.  When
    ``weights`` are given (one per state) the sum-weighted functional is
    evaluated with them, otherwise with ``w = 1``.  With at least four
    ``h0`` values the normalized ``p = 1`` oscillation of the last
    snapshot is fitted against ``C / |log h0|^theta``.
    """
    if not states:
        raise ValueError("no snapshots to diagnose")
    g = states[0].rho.grid
    a = a_exp if a_exp is not None else g.d + 1.0
    if eta is None:
        eta = 0.5 * min(float(np.mean(s.rho.values)) for s in states)
    kernels = [log_averaged_kernel(g, h0, a) for h0 in h0_list]
    compute = structure if structure is not None else snapshot_structure
    report = DiagnosticsReport()
    for i, s in enumerate(states):
        w = None if weights is None else weights[i]
        S = compute(s.rho, w, chi, eta)
        for h0, k in zip(h0_list, kernels):
            vals = [_apply_kernel(k, S[q]) for q in range(S.shape[0])]
            report.rows.append((s.t, h0, k.norm, vals[0], vals[0] / k.norm, vals[1], vals[2], vals[3], vals[4]))
    if len(h0_list) >= 4:
        last = report.at_time(states[-1].t)
        try:
            report.fits["osc_p1"] = fit_rate([r[1] for r in last], [r[3] for r in last], "inv_log_pow", norms=[r[2] for r in last])
        except DegenerateFitError:
            pass
    return report
