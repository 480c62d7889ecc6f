"""Periodic grid on the unit torus and the spectral calculus built on it.

Fields live on the uniform grid ``x_j = j/n`` of ``[0, 1)^d``.  Transforms are
real-to-complex (``rfftn``) over all axes, so the spectral lattice stores only
the half space ``k_d >= 0``.  Physical frequencies are ``xi = 2*pi*k`` with
integer ``k``.

Conventions used throughout the package:

* odd-order derivatives zero the Nyquist planes (the Nyquist mode is its own
  conjugate on the grid, so ``i*xi`` has no real-valued action there);
* ``inverse_laplacian_zero_mean`` projects out the mean before inverting;
* ``convolve`` is the periodic Riemann sum ``sum_y K(y) f(x - y) / n^d`` so a
  kernel of unit discrete mass preserves constants.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable, Sequence, Union

import numpy as np
from numpy.typing import ArrayLike, NDArray

__all__ = [
    "TorusGrid",
    "ScalarField",
    "VectorField",
    "gradient",
    "divergence",
    "laplacian",
    "inverse_laplacian_zero_mean",
    "apply_multiplier",
    "convolve",
    "random_band_limited",
]

Symbol = Union[Callable[..., ArrayLike], NDArray]


@dataclass(frozen=True)
class TorusGrid:
    """Uniform grid with ``n`` points per axis on the unit torus ``[0,1)^d``."""

    d: int
    n: int

    def __post_init__(self) -> None:
        if self.d not in (1, 2, 3):
            raise ValueError(f"dimension must be 1, 2 or 3, got {self.d}")
        if self.n < 2 or self.n & (self.n - 1):
            raise ValueError(f"n must be a power of two >= 2, got {self.n}")

    # -- physical space -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return (self.n,) * self.d

    @property
    def spacing(self) -> float:
        return 1.0 / self.n

    @property
    def cell_volume(self) -> float:
        return float(self.n) ** (-self.d)

    @property
    def size(self) -> int:
        return self.n**self.d

    @cached_property
    def coords(self) -> tuple[NDArray, ...]:
        """Node coordinates, one broadcastable array per axis."""
        x = np.arange(self.n) / self.n
        return tuple(np.meshgrid(*([x] * self.d), indexing="ij"))

    @cached_property
    def offsets(self) -> tuple[NDArray, ...]:
        """Minimal-image lattice offsets in ``[-1/2, 1/2)`` per axis."""
        j = np.arange(self.n)
        z = np.where(j < self.n // 2, j, j - self.n) / self.n
        return tuple(np.meshgrid(*([z] * self.d), indexing="ij"))

    @cached_property
    def distance(self) -> NDArray:
        """Periodic distance ``|x|`` of every node to the origin."""
        return np.sqrt(sum(z * z for z in self.offsets))

    # -- spectral space -------------------------------------------------
    @property
    def spectral_shape(self) -> tuple[int, ...]:
        return (self.n,) * (self.d - 1) + (self.n // 2 + 1,)

    @cached_property
    def k(self) -> tuple[NDArray, ...]:
        """Integer frequency vector on the half lattice, one array per axis."""
        full = np.fft.fftfreq(self.n, 1.0 / self.n)
        half = np.fft.rfftfreq(self.n, 1.0 / self.n)
        axes = [full] * (self.d - 1) + [half]
        return tuple(np.meshgrid(*axes, indexing="ij"))

    @cached_property
    def xi(self) -> tuple[NDArray, ...]:
        return tuple(2.0 * np.pi * kk for kk in self.k)

    @cached_property
    def xi2(self) -> NDArray:
        return sum(x * x for x in self.xi)

    @cached_property
    def k_norm(self) -> NDArray:
        return np.sqrt(sum(kk * kk for kk in self.k))

    @cached_property
    def nyquist(self) -> NDArray:
        """True on every lattice point with some component equal to n/2."""
        mask = np.zeros(self.spectral_shape, dtype=bool)
        for kk in self.k:
            mask |= np.abs(kk) == self.n // 2
        return mask

    @cached_property
    def xi_odd(self) -> tuple[NDArray, ...]:
        """``xi`` with the Nyquist planes zeroed, for odd-order derivatives."""
        return tuple(np.where(self.nyquist, 0.0, x) for x in self.xi)

    @cached_property
    def dealias_mask(self) -> NDArray:
        """2/3-rule mask: keeps modes with every ``|k_j| < n/3``."""
        cut = self.n / 3.0
        mask = np.ones(self.spectral_shape, dtype=bool)
        for kk in self.k:
            mask &= np.abs(kk) < cut
        return mask

    @cached_property
    def hermitian_weight(self) -> NDArray:
        """Multiplicity of each stored coefficient in the full lattice."""
        kd = self.k[-1]
        w = np.where((kd > 0) & (kd < self.n // 2), 2.0, 1.0)
        return np.broadcast_to(w, self.spectral_shape)

    # -- transforms -----------------------------------------------------
    def fft(self, a: NDArray) -> NDArray:
        axes = tuple(range(-self.d, 0))
        return np.fft.rfftn(a, axes=axes)

    def ifft(self, ah: NDArray) -> NDArray:
        axes = tuple(range(-self.d, 0))
        return np.fft.irfftn(ah, s=self.shape, axes=axes)

    def integrate(self, a: NDArray) -> float:
        """Riemann sum over the torus (exact for trigonometric polynomials)."""
        return float(np.sum(a) * self.cell_volume)


def _as_values(f) -> NDArray:
    return f.values if isinstance(f, (ScalarField, VectorField)) else np.asarray(f, dtype=float)


@dataclass(frozen=True, eq=False)
class ScalarField:
    """Real values on the nodes of ``grid``; immutable."""

    grid: TorusGrid
    values: NDArray = field(repr=False)

    def __post_init__(self) -> None:
        v = np.array(self.values, dtype=float)
        if v.shape != self.grid.shape:
            raise ValueError(f"expected shape {self.grid.shape}, got {v.shape}")
        if not np.all(np.isfinite(v)):
            raise ValueError("scalar field contains non-finite values")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @classmethod
    def from_function(cls, grid: TorusGrid, fn: Callable[..., ArrayLike]) -> "ScalarField":
        return cls(grid, np.broadcast_to(fn(*grid.coords), grid.shape))

    @classmethod
    def constant(cls, grid: TorusGrid, c: float) -> "ScalarField":
        return cls(grid, np.full(grid.shape, float(c)))

    def mean(self) -> float:
        return float(np.mean(self.values))

    def integral(self) -> float:
        return self.grid.integrate(self.values)

    def norm(self, p: float = 2.0) -> float:
        a = np.abs(self.values)
        if np.isinf(p):
            return float(a.max())
        return float(self.grid.integrate(a**p) ** (1.0 / p))

    def _wrap(self, v) -> "ScalarField":
        return ScalarField(self.grid, v)

    def __add__(self, other):
        return self._wrap(self.values + _as_values(other))

    __radd__ = __add__

    def __sub__(self, other):
        return self._wrap(self.values - _as_values(other))

    def __rsub__(self, other):
        return self._wrap(_as_values(other) - self.values)

    def __mul__(self, other):
        return self._wrap(self.values * _as_values(other))

    __rmul__ = __mul__

    def __neg__(self):
        return self._wrap(-self.values)


@dataclass(frozen=True, eq=False)
class VectorField:
    """``d`` components on a shared grid, stored as one ``(d, *shape)`` array."""

    grid: TorusGrid
    values: NDArray = field(repr=False)

    def __post_init__(self) -> None:
        v = np.array(self.values, dtype=float)
        expected = (self.grid.d,) + self.grid.shape
        if v.shape != expected:
            raise ValueError(f"expected shape {expected}, got {v.shape}")
        if not np.all(np.isfinite(v)):
            raise ValueError("vector field contains non-finite values")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @classmethod
    def from_components(cls, components: Sequence[ScalarField]) -> "VectorField":
        grids = {c.grid for c in components}
        if len(grids) != 1:
            raise ValueError("components must share one grid")
        grid = grids.pop()
        return cls(grid, np.stack([c.values for c in components]))

    @classmethod
    def zeros(cls, grid: TorusGrid) -> "VectorField":
        return cls(grid, np.zeros((grid.d,) + grid.shape))

    @property
    def components(self) -> tuple[ScalarField, ...]:
        return tuple(ScalarField(self.grid, c) for c in self.values)

    def magnitude(self) -> ScalarField:
        return ScalarField(self.grid, np.sqrt(np.sum(self.values**2, axis=0)))

    def _wrap(self, v) -> "VectorField":
        return VectorField(self.grid, v)

    def __add__(self, other):
        return self._wrap(self.values + _as_values(other))

    __radd__ = __add__

    def __sub__(self, other):
        return self._wrap(self.values - _as_values(other))

    def __mul__(self, other):
        o = _as_values(other)
        if isinstance(other, ScalarField):
            o = o[None]
        return self._wrap(self.values * o)

    __rmul__ = __mul__

    def __neg__(self):
        return self._wrap(-self.values)


# -- array-level kernels (shared by the solver hot loop) --------------------

def grad_hat(grid: TorusGrid, fh: NDArray) -> NDArray:
    """Spectral gradient of one transformed scalar: shape ``(d, *spectral)``."""
    return np.stack([1j * x * fh for x in grid.xi_odd])


def div_hat(grid: TorusGrid, vh: NDArray) -> NDArray:
    """Spectral divergence of a transformed vector ``(d, *spectral)``."""
    out = np.zeros(grid.spectral_shape, dtype=complex)
    for x, c in zip(grid.xi_odd, vh):
        out += 1j * x * c
    return out


def jacobian(grid: TorusGrid, u: NDArray) -> NDArray:
    """``J[i, j] = d_j u_i`` for a physical vector array ``u`` of shape ``(d, *shape)``."""
    uh = grid.fft(u)
    return np.stack([grid.ifft(grad_hat(grid, uh[i])) for i in range(grid.d)])


def inverse_laplacian_symbol(grid: TorusGrid) -> NDArray:
    xi2 = grid.xi2
    with np.errstate(divide="ignore"):
        s = np.where(xi2 > 0, -1.0 / np.where(xi2 > 0, xi2, 1.0), 0.0)
    return s


# -- public field operations -------------------------------------------------

def gradient(f: ScalarField) -> VectorField:
    """Exact spectral gradient of the trigonometric interpolant of ``f``."""
    g = f.grid
    return VectorField(g, g.ifft(grad_hat(g, g.fft(f.values))))


def divergence(v: VectorField) -> ScalarField:
    """Exact spectral divergence; the result has zero mean."""
    g = v.grid
    return ScalarField(g, g.ifft(div_hat(g, g.fft(v.values))))


def laplacian(f: ScalarField) -> ScalarField:
    """Exact spectral Laplacian (multiplier ``-|xi|^2``, Nyquist included)."""
    g = f.grid
    return ScalarField(g, g.ifft(-g.xi2 * g.fft(f.values)))


def inverse_laplacian_zero_mean(f: ScalarField) -> ScalarField:
    """Return ``g`` with ``laplacian(g) = f - mean(f)`` and ``mean(g) = 0``."""
    grid = f.grid
    return ScalarField(grid, grid.ifft(inverse_laplacian_symbol(grid) * grid.fft(f.values)))


def symbol_table(grid: TorusGrid, symbol: Symbol, at_zero: complex) -> NDArray:
    """Evaluate ``symbol`` on the half lattice with the zero mode set to ``at_zero``.

    ``symbol`` is either a callable taking the integer frequency components
    ``k_1, ..., k_d`` (arrays) or an array already shaped like the lattice.
    Nyquist coefficients are self-conjugate on the grid, so only the real
    part of the symbol acts there.
    """
    if callable(symbol):
        with np.errstate(divide="ignore", invalid="ignore"):
            table = np.asarray(symbol(*grid.k))
        table = np.broadcast_to(table, grid.spectral_shape).astype(complex)
    else:
        table = np.array(np.broadcast_to(symbol, grid.spectral_shape), dtype=complex)
    table[(0,) * grid.d] = at_zero
    if np.any(np.isnan(table)):
        raise ValueError("symbol returned NaN on the frequency lattice")
    if not np.all(np.isfinite(table)):
        raise ValueError("symbol is not finite on the frequency lattice")
    table = np.where(grid.nyquist, table.real, table)
    if not np.any(table.imag):
        return table.real
    return table


def apply_multiplier(symbol: Symbol, f: ScalarField, *, at_zero: complex) -> ScalarField:
    """Multiply the spectral coefficients of ``f`` by ``symbol``.

    The symbol is assumed Hermitian, ``sigma(-k) = conj(sigma(k))``; the
    half-lattice storage then gives a real result.  The value at ``k = 0`` is
    never evaluated from ``symbol``; it is ``at_zero``.
    """
    grid = f.grid
    table = symbol_table(grid, symbol, at_zero)
    return ScalarField(grid, grid.ifft(table * grid.fft(f.values)))


def convolve(kernel: ScalarField, f: ScalarField) -> ScalarField:
    """Periodic convolution ``sum_y kernel(y) f(x - y) / n^d`` via the FFT."""
    if kernel.grid != f.grid:
        raise ValueError("kernel and field live on different grids")
    g = f.grid
    out = g.ifft(g.fft(kernel.values) * g.fft(f.values)) * g.cell_volume
    return ScalarField(g, out)


def spectral_energy(f: ScalarField) -> float:
    """Sum of ``|c_k|^2`` over the full lattice for the normalized coefficients."""
    g = f.grid
    c = g.fft(f.values) / g.size
    return float(np.sum(g.hermitian_weight * np.abs(c) ** 2))


def random_band_limited(
    grid: TorusGrid,
    rng: np.random.Generator,
    kmax: float,
    slope: float = 0.0,
    components: int | None = None,
) -> NDArray:
    """Random real trigonometric polynomial with ``0 < |k| <= kmax``.

    Coefficient amplitudes scale like ``|k|^(-slope)``; the Nyquist planes
    are always empty so odd derivatives act exactly.  Returns an array of
    shape ``grid.shape`` or ``(components, *grid.shape)``.
    """
    shape = grid.shape if components is None else (components,) + grid.shape
    noise = rng.standard_normal(shape)
    kn = grid.k_norm
    keep = (kn > 0) & (kn <= kmax) & ~grid.nyquist
    with np.errstate(divide="ignore"):
        amp = np.where(keep, np.where(kn > 0, kn, 1.0) ** (-slope), 0.0)
    out = grid.ifft(grid.fft(noise) * amp)
    scale = np.sqrt(np.mean(out**2))
    return out / scale if scale > 0 else out
