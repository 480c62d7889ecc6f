"""Singular kernel families on the torus.

``K_h(x) = (h + |x|)^(-a)`` for ``|x| <= 1/2``; on ``1/2 <= |x| <= 2/3`` a
quintic Hermite piece joins it (value, slope, curvature) to the constant
``(5/3)^(-a)``, which is never reached by the power law itself for
``h <= 1``, so ``K_h`` is decreasing in ``|x|`` and ``h``-independent beyond
``2/3``.  ``|x|`` is the minimal-image distance.

``Kbar_h = K_h / ||K_h||_1`` uses the grid quadrature of the norm, and the
log-averaged kernel

    Kcal_{h0} = int_{h0}^1 Kbar_h dh / h

is evaluated by Gauss–Legendre quadrature in ``log h``, so its discrete
``L^1`` norm equals ``|log h0|`` up to roundoff.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from numpy.typing import NDArray

from .grid import ScalarField, TorusGrid

__all__ = [
    "KernelSpec",
    "Kernel",
    "build_kernel",
    "normalized_kernel",
    "log_averaged_kernel",
    "kernel_profile",
    "kernel_profile_derivative",
]

LOG_NODES = 40
_BLEND_START = 0.5
_BLEND_END = 2.0 / 3.0


@dataclass(frozen=True)
class KernelSpec:
    """Parameters of the ``K_h`` family; ``a_exp`` must exceed the dimension."""

    a_exp: float
    h_list: tuple = ()
    h0: float = 2.0**-5
    log_nodes: int = LOG_NODES

    def check(self, d: int) -> None:
        if not self.a_exp > d:
            raise ValueError(f"kernel exponent a={self.a_exp} must exceed d={d}")
        for h in self.h_list:
            if not 0 < h <= 1:
                raise ValueError("kernel scales must lie in (0, 1]")

    @classmethod
    def default(cls, d: int) -> "KernelSpec":
        return cls(a_exp=d + 1.0)


@dataclass(frozen=True, eq=False)
class Kernel:
    field: ScalarField
    norm: float
    h: float
    a_exp: float
    label: str = "K"

    @property
    def values(self) -> NDArray:
        return self.field.values

    @property
    def grid(self) -> TorusGrid:
        return self.field.grid


def _tail_value(a: float) -> float:
    return (5.0 / 3.0) ** (-a)


def _hermite_coefficients(h: float, a: float) -> NDArray:
    """Quintic on ``[0, L]`` (local variable) matching value/slope/curvature at both ends."""
    L = _BLEND_END - _BLEND_START
    y0 = (h + _BLEND_START) ** (-a)
    y1 = -a * (h + _BLEND_START) ** (-a - 1)
    y2 = a * (a + 1) * (h + _BLEND_START) ** (-a - 2)
    c = _tail_value(a)
    # p(s) = y0 + y1 s + y2 s^2/2 + c3 s^3 + c4 s^4 + c5 s^5,  p(L)=c, p'(L)=p''(L)=0
    A = np.array([[L**3, L**4, L**5], [3 * L**2, 4 * L**3, 5 * L**4], [6 * L, 12 * L**2, 20 * L**3]])
    rhs = np.array([c - y0 - y1 * L - 0.5 * y2 * L * L, -y1 - y2 * L, -y2])
    c3, c4, c5 = np.linalg.solve(A, rhs)
    return np.array([y0, y1, 0.5 * y2, c3, c4, c5])


def kernel_profile(r: NDArray, h: float, a: float) -> NDArray:
    """Radial profile of ``K_h`` at distances ``r >= 0``."""
    r = np.asarray(r, dtype=float)
    if not 0 < h <= 1:
        raise ValueError("kernel scale h must lie in (0, 1]")
    out = np.empty_like(r)
    inner = r <= _BLEND_START
    tail = r >= _BLEND_END
    mid = ~(inner | tail)
    out[inner] = (h + r[inner]) ** (-a)
    out[tail] = _tail_value(a)
    if np.any(mid):
        s = r[mid] - _BLEND_START
        out[mid] = np.polynomial.polynomial.polyval(s, _hermite_coefficients(h, a))
    return out


def kernel_profile_derivative(r: NDArray, h: float, a: float) -> NDArray:
    """``d K_h / d r``."""
    r = np.asarray(r, dtype=float)
    out = np.zeros_like(r)
    inner = r <= _BLEND_START
    mid = (r > _BLEND_START) & (r < _BLEND_END)
    out[inner] = -a * (h + r[inner]) ** (-a - 1)
    if np.any(mid):
        coef = np.polynomial.polynomial.polyder(_hermite_coefficients(h, a))
        out[mid] = np.polynomial.polynomial.polyval(r[mid] - _BLEND_START, coef)
    return out


def build_kernel(grid: TorusGrid, h: float, a_exp: float) -> Kernel:
    """Periodized ``K_h`` sampled at the nodes, with its grid ``L^1`` norm."""
    if not a_exp > grid.d:
        raise ValueError(f"kernel exponent a={a_exp} must exceed d={grid.d}")
    values = kernel_profile(grid.distance, h, a_exp)
    f = ScalarField(grid, values)
    return Kernel(f, f.integral(), h, a_exp, "K")


def normalized_kernel(grid: TorusGrid, h: float, a_exp: float) -> Kernel:
    """``Kbar_h`` with unit discrete mass."""
    k = build_kernel(grid, h, a_exp)
    f = ScalarField(grid, k.values / k.norm)
    return Kernel(f, f.integral(), h, a_exp, "Kbar")


@lru_cache(maxsize=8)
def _log_rule(nodes: int) -> tuple[NDArray, NDArray]:
    return np.polynomial.legendre.leggauss(nodes)


def log_averaged_kernel(grid: TorusGrid, h0: float, a_exp: float, nodes: int = LOG_NODES) -> Kernel:
    """``Kcal_{h0}`` by ``nodes``-point Gauss–Legendre in ``log h`` on ``[h0, 1]``."""
    if not 0 < h0 < 1:
        raise ValueError("h0 must lie in (0, 1)")
    x, w = _log_rule(nodes)
    L = -np.log(h0)
    # log h = -L (1 - x) / 2 maps [-1, 1] onto [log h0, 0]
    hs = np.exp(-0.5 * L * (1.0 - x))
    weights = 0.5 * L * w
    acc = np.zeros(grid.shape)
    for h, wt in zip(hs, weights):
        k = kernel_profile(grid.distance, float(h), a_exp)
        acc += wt * k / grid.integrate(k)
    f = ScalarField(grid, acc)
    return Kernel(f, f.integral(), h0, a_exp, "Kcal")
