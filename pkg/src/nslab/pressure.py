"""Barotropic pressure laws, internal energy and growth-hypothesis checks.

Every law carries declared exponents ``gamma`` (growth of ``P``),
``gamma_tilde`` and ``pbar`` (growth of ``|P'|``).  The derivative bound is
checked in the form ``|P'(s)| <= pbar * max(1, s)**(gamma_tilde - 1)``: above
``s = 1`` this is the usual power bound, below it reduces to a Lipschitz
constant near vacuum (a single power cannot bound ``P'`` at both ends when
``gamma_tilde > gamma``, as for the oscillatory law).

All evaluators accept either a ``ScalarField`` or a plain array and return
the same kind of object.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from types import MappingProxyType
from typing import Mapping, Optional, Sequence

import numpy as np
from numpy.typing import NDArray
from scipy import integrate, optimize

from .grid import ScalarField

__all__ = [
    "PressureLaw",
    "DomainError",
    "QuadratureError",
    "DerivativeBoundError",
    "HypothesisEntry",
    "HypothesisReport",
    "internal_energy",
    "truncate_quasi_monotone",
    "check_hypotheses",
    "isotropic_gamma_threshold",
    "anisotropic_gamma_threshold",
    "KINDS",
]

KINDS = (
    "power",
    "van_der_waals_isothermal",
    "truncated_virial",
    "oscillatory_perturbation",
    "quasi_monotone_truncation",
)


class DomainError(ValueError):
    """Density outside the admissible range of a law."""


class QuadratureError(RuntimeError):
    """Adaptive quadrature failed to reach the requested tolerance."""


class DerivativeBoundError(ValueError):
    """``|P'|`` exceeds the declared growth bound at some node."""


def _unwrap(rho):
    if isinstance(rho, ScalarField):
        return rho.values, rho.grid
    return np.asarray(rho, dtype=float), None


def _rewrap(values, grid):
    if grid is None:
        return values if np.ndim(values) else float(values)
    return ScalarField(grid, values)


@dataclass(frozen=True)
class PressureLaw:
    """Immutable equation of state ``P(rho)`` with metadata.

    Use the named constructors (``power``, ``van_der_waals``, ``virial``,
    ``oscillatory``) or :func:`truncate_quasi_monotone`.
    """

    kind: str
    params: Mapping[str, float]
    gamma: float
    gamma_tilde: float
    pbar: float
    rho_ref: float
    sandwich_C: Optional[float] = None
    coefficients: tuple[float, ...] = ()
    base: Optional["PressureLaw"] = field(default=None, repr=False)

    def __post_init__(self) -> None:
        if self.kind not in KINDS:
            raise ValueError(f"unknown pressure kind {self.kind!r}")
        object.__setattr__(self, "params", MappingProxyType(dict(self.params)))

    # -- constructors ---------------------------------------------------
    @classmethod
    def power(cls, gamma: float, a: float = 1.0, **declared) -> "PressureLaw":
        if gamma <= 1 or a <= 0:
            raise ValueError("power law needs gamma > 1 and a > 0")
        meta = dict(gamma_tilde=gamma, pbar=a * gamma, sandwich_C=max(a, 1.0 / a))
        meta.update(declared)
        return cls("power", {"a": a}, gamma=gamma, rho_ref=0.0, **meta)

    @classmethod
    def van_der_waals(
        cls, a: float = 1.0, b: float = 2.0, c: float = 1.0, theta: float = 1.0, gamma: float = 2.0, **declared
    ) -> "PressureLaw":
        if b <= 0 or c * theta <= 0:
            raise ValueError("Van der Waals law needs b > 0 and c*theta > 0")
        params = {"a": a, "b": b, "c": c, "theta": theta}
        rho_ref = 1.0 if b > 1.0 else 0.5 * b
        # |P'| on the admissible range [0, 0.95 b]; beyond 1 the bound is a power.
        s = np.linspace(0.0, 0.95 * b, 4001)
        dp = np.abs(c * theta * b / (b - s) ** 2 - 2 * a * s)
        meta = dict(gamma_tilde=gamma, pbar=float(np.max(dp / np.maximum(1.0, s) ** (gamma - 1))) * 1.0001)
        meta.update(declared)
        return cls("van_der_waals_isothermal", params, gamma=gamma, rho_ref=rho_ref, **meta)

    @classmethod
    def virial(cls, gamma: float, coefficients: Sequence[float], theta: float = 1.0, **declared) -> "PressureLaw":
        """``P = rho^gamma + theta * sum_n B_n rho^n`` with ``B_0 = 0``."""
        B = tuple(float(b) for b in coefficients)
        if B and B[0] != 0.0:
            raise ValueError("virial coefficient B_0 must vanish so that P(0) = 0")
        order = len(B) - 1
        if gamma <= max(order, 1):
            raise ValueError("virial law needs gamma above the polynomial order")
        pbar = gamma + abs(theta) * sum(n * abs(b) for n, b in enumerate(B))
        meta = dict(gamma_tilde=gamma, pbar=pbar)
        meta.update(declared)
        return cls("truncated_virial", {"theta": theta}, gamma=gamma, rho_ref=1.0, coefficients=B, **meta)

    @classmethod
    def oscillatory(
        cls, gamma: float, frequency: float, amplitude: float = 0.5, a: float = 1.0, **declared
    ) -> "PressureLaw":
        """``P = a rho^gamma (1 + amplitude * sin(frequency * rho))``."""
        if not 0 <= amplitude < 1:
            raise ValueError("oscillation amplitude must lie in [0, 1)")
        if gamma <= 1 or a <= 0:
            raise ValueError("oscillatory law needs gamma > 1 and a > 0")
        params = {"a": a, "amplitude": amplitude, "frequency": frequency}
        pbar = a * (gamma * (1 + amplitude) + amplitude * abs(frequency))
        meta = dict(
            gamma_tilde=gamma + 1.0 if amplitude * frequency else gamma,
            pbar=pbar,
            sandwich_C=max(a * (1 + amplitude), 1.0 / (a * (1 - amplitude))),
        )
        meta.update(declared)
        return cls("oscillatory_perturbation", params, gamma=gamma, rho_ref=0.0, **meta)

    # -- admissible range -------------------------------------------------
    @property
    def rho_max(self) -> float:
        """Supremum of the admissible densities (``inf`` unless a pole exists)."""
        if self.kind == "van_der_waals_isothermal":
            return self.params["b"]
        return math.inf

    def _check_domain(self, r: NDArray) -> None:
        if np.any(r < 0):
            raise DomainError("negative density passed to a pressure law")
        if self.kind == "van_der_waals_isothermal":
            b = self.params["b"]
            bad = np.flatnonzero(np.ravel(r) >= b)
            if bad.size:
                raise DomainError(f"density {np.ravel(r)[bad[0]]!r} reaches the Van der Waals pole b={b}")

    # -- evaluation -------------------------------------------------------
    def _p(self, r: NDArray) -> NDArray:
        p = self.params
        if self.kind == "power":
            return p["a"] * r**self.gamma
        if self.kind == "van_der_waals_isothermal":
            return p["c"] * r * p["theta"] / (p["b"] - r) - p["a"] * r * r
        if self.kind == "truncated_virial":
            poly = np.zeros_like(r)
            for b in reversed(self.coefficients):
                poly = poly * r + b
            return r**self.gamma + p["theta"] * poly
        if self.kind == "oscillatory_perturbation":
            return p["a"] * r**self.gamma * (1 + p["amplitude"] * np.sin(p["frequency"] * r))
        c0, C = p["c0"], p["C"]
        below = r <= c0
        rb = np.where(below, r, c0)
        above = self.base._p(np.asarray(c0, dtype=float)) + C * np.maximum(r - c0, 0.0) ** self.gamma
        return np.where(below, self.base._p(rb), above)

    def _dp(self, r: NDArray) -> NDArray:
        p = self.params
        g = self.gamma
        if self.kind == "power":
            return p["a"] * g * r ** (g - 1)
        if self.kind == "van_der_waals_isothermal":
            return p["c"] * p["theta"] * p["b"] / (p["b"] - r) ** 2 - 2 * p["a"] * r
        if self.kind == "truncated_virial":
            dpoly = np.zeros_like(r)
            B = self.coefficients
            for n in range(len(B) - 1, 0, -1):
                dpoly = dpoly * r + n * B[n]
            return g * r ** (g - 1) + p["theta"] * dpoly
        if self.kind == "oscillatory_perturbation":
            a, amp, k = p["a"], p["amplitude"], p["frequency"]
            return a * g * r ** (g - 1) * (1 + amp * np.sin(k * r)) + a * amp * k * r**g * np.cos(k * r)
        c0, C = p["c0"], p["C"]
        below = r <= c0
        rb = np.where(below, r, c0)
        return np.where(below, self.base._dp(rb), C * g * np.maximum(r - c0, 0.0) ** (g - 1))

    def eval(self, rho):
        """Pointwise ``P(rho)``."""
        r, grid = _unwrap(rho)
        self._check_domain(r)
        return _rewrap(self._p(r), grid)

    __call__ = eval

    def derivative_bound(self, rho):
        """Declared bound ``pbar * max(1, rho)**(gamma_tilde - 1)``."""
        r, grid = _unwrap(rho)
        return _rewrap(self.pbar * np.maximum(1.0, r) ** (self.gamma_tilde - 1), grid)

    def eval_prime(self, rho, validate: bool = False):
        """Pointwise ``P'(rho)``; with ``validate`` the declared bound is enforced."""
        r, grid = _unwrap(rho)
        self._check_domain(r)
        dp = self._dp(r)
        if validate:
            bound = self.pbar * np.maximum(1.0, r) ** (self.gamma_tilde - 1)
            bad = np.flatnonzero(np.ravel(np.abs(dp) > bound * (1 + 1e-12)))
            if bad.size:
                i = bad[0]
                raise DerivativeBoundError(
                    f"node {i}: |P'({np.ravel(r)[i]!r})| = {abs(np.ravel(dp)[i])!r} exceeds "
                    f"{self.pbar!r} * max(1, rho)^{self.gamma_tilde - 1!r}"
                )
        return _rewrap(dp, grid)

    def internal_energy(self, rho, rho_ref: Optional[float] = None, method: str = "auto"):
        return internal_energy(self, rho, rho_ref=rho_ref, method=method)

    def describe(self) -> str:
        items = ", ".join(f"{k}={v!r}" for k, v in self.params.items())
        if self.coefficients:
            items += f", B={list(self.coefficients)!r}"
        return f"{self.kind}({items}; gamma={self.gamma!r}, gamma_tilde={self.gamma_tilde!r}, pbar={self.pbar!r})"


# -- internal energy ---------------------------------------------------------

def _power_energy(a: float, g: float, r: NDArray, r0: float) -> NDArray:
    """``a * int_{r0}^{r} s^(g-2) ds``."""
    if g == 1:
        return a * np.log(r / r0)
    return a * (r ** (g - 1) - r0 ** (g - 1)) / (g - 1)


def _closed_energy(law: PressureLaw, r: NDArray, r0: float) -> Optional[NDArray]:
    p = law.params
    if law.kind == "power":
        return _power_energy(p["a"], law.gamma, r, r0)
    if law.kind == "van_der_waals_isothermal":
        if r0 <= 0:
            return None
        b, ct = p["b"], p["c"] * p["theta"]
        return (ct / b) * (np.log(r / (b - r)) - math.log(r0 / (b - r0))) - p["a"] * (r - r0)
    if law.kind == "truncated_virial":
        if r0 <= 0:
            return None
        out = _power_energy(1.0, law.gamma, r, r0)
        for n, b in enumerate(law.coefficients):
            if b == 0.0:
                continue
            out = out + p["theta"] * _power_energy(b, float(n), r, r0)
        return out
    return None


_GL_X, _GL_W = np.polynomial.legendre.leggauss(10)


def _gauss(fn, a: NDArray, b: NDArray) -> NDArray:
    mid, half = 0.5 * (a + b), 0.5 * (b - a)
    s = mid[:, None] + half[:, None] * _GL_X[None, :]
    return half * (fn(s) @ _GL_W)


def _segment_integrals(fn, a: NDArray, b: NDArray, tol: NDArray, depth: int = 0) -> NDArray:
    """Adaptive composite 10-point Gauss–Legendre on many segments at once."""
    whole = _gauss(fn, a, b)
    m = 0.5 * (a + b)
    halves = _gauss(fn, a, m) + _gauss(fn, m, b)
    err = np.abs(whole - halves)
    bad = err > tol
    if not np.any(bad):
        return halves
    if depth > 40:
        raise QuadratureError("adaptive quadrature did not converge")
    out = halves.copy()
    out[bad] = _segment_integrals(fn, a[bad], m[bad], 0.5 * tol[bad], depth + 1) + _segment_integrals(
        fn, m[bad], b[bad], 0.5 * tol[bad], depth + 1
    )
    return out


def _quadrature_energy(law: PressureLaw, r: NDArray, r0: float, tol: float = 1e-10) -> NDArray:
    flat = np.ravel(r)
    nodes, inverse = np.unique(flat, return_inverse=True)

    def integrand(s):
        return law._p(s) / (s * s)

    def scalar(s):
        return float(integrand(np.asarray([s]))[0])

    # Split the sorted nodes at r0: integrals run outward from r0 on both sides.
    values = np.zeros(nodes.size)
    for side in (1, -1):
        sel = nodes > r0 if side == 1 else nodes < r0
        pts = nodes[sel] if side == 1 else nodes[sel][::-1]
        if pts.size == 0:
            continue
        start = np.concatenate(([r0], pts[:-1]))
        span = np.abs(pts - start)
        seg_tol = tol * np.maximum(span / max(span.sum(), 1e-300), 1e-3 / pts.size)
        seg = np.empty(pts.size)
        # The leg touching vacuum may carry an integrable endpoint singularity.
        first_singular = start[0] == 0.0 or pts[0] == 0.0
        lo = 1 if first_singular else 0
        if first_singular:
            val, err = integrate.quad(scalar, start[0], pts[0], epsabs=0.1 * tol, epsrel=0.0, limit=500)
            if not np.isfinite(val) or err > tol:
                raise QuadratureError(f"quadrature near vacuum failed (error estimate {err!r})")
            seg[0] = val
        if pts.size > lo:
            seg[lo:] = _segment_integrals(integrand, start[lo:], pts[lo:], seg_tol[lo:])
        out = np.cumsum(seg)
        values[sel] = out if side == 1 else out[::-1]
    return values[inverse].reshape(np.shape(r))


def _truncated_energy(law: PressureLaw, r: NDArray, r0: float, method: str) -> NDArray:
    c0, C = law.params["c0"], law.params["C"]
    base = law.base
    below = r <= c0
    rb = np.where(below, r, c0)
    e_base = _energy_values(base, rb, r0, method)
    if np.all(below):
        return e_base
    e_c0 = float(_energy_values(base, np.asarray([c0]), r0, method)[0])
    pc0 = float(base._p(np.asarray(c0, dtype=float)))
    ra = r[~below]

    def tail(s):
        return C * np.maximum(s - c0, 0.0) ** law.gamma / (s * s)

    extra = _segment_integrals(
        tail, np.full(ra.size, c0), np.ravel(ra), np.full(ra.size, 1e-11)
    ).reshape(ra.shape)
    out = np.array(e_base, dtype=float)
    out[~below] = e_c0 + pc0 * (1.0 / c0 - 1.0 / ra) + extra
    return out


def _energy_values(law: PressureLaw, r: NDArray, r0: float, method: str) -> NDArray:
    if law.kind == "quasi_monotone_truncation":
        return _truncated_energy(law, r, r0, method)
    if method in ("auto", "closed"):
        closed = _closed_energy(law, r, r0)
        if closed is not None:
            return closed
        if method == "closed":
            raise ValueError(f"no closed form for {law.kind}")
    return _quadrature_energy(law, r, r0)


def internal_energy(law: PressureLaw, rho, rho_ref: Optional[float] = None, method: str = "auto"):
    """``e(rho) = int_{rho_ref}^{rho} P(s)/s^2 ds``.

    ``rho_ref`` defaults to the law's convention (0 for power-like laws, whose
    integrand is integrable at vacuum, 1 otherwise).  ``method`` is
    ``"auto"`` (closed form when known), ``"closed"`` or ``"quadrature"``.
    """
    r, grid = _unwrap(rho)
    law._check_domain(r)
    r0 = law.rho_ref if rho_ref is None else float(rho_ref)
    if r0 < 0:
        raise ValueError("rho_ref must be nonnegative")
    if r0 == 0 and np.any(r == 0) and law.gamma <= 1:
        raise DomainError("internal energy diverges at vacuum")
    with np.errstate(divide="ignore", invalid="ignore"):
        e = _energy_values(law, np.asarray(r, dtype=float), r0, method)
    e = np.where(r == r0, 0.0, e)
    return _rewrap(np.asarray(e, dtype=float), grid)


def potential_energy_density(law: PressureLaw, rho: NDArray) -> NDArray:
    """``rho * e(rho)`` with the vacuum value 0."""
    r = np.asarray(rho, dtype=float)
    pos = r > 0
    e = np.zeros_like(r)
    if np.any(pos):
        e[pos] = internal_energy(law, r[pos])
    return r * e


# -- quasi-monotone truncation -------------------------------------------------

def truncate_quasi_monotone(law: PressureLaw, c0: float, C: float) -> PressureLaw:
    """``P_eps = P`` on ``[0, c0]`` and ``P(c0) + C (rho - c0)^gamma`` above.

    The returned law reports ``params["rho0"]``: beyond this density
    ``P_eps(s)/s`` is nondecreasing.
    """
    if c0 <= 0 or C <= 0:
        raise ValueError("truncation needs c0 > 0 and C > 0")
    if c0 >= law.rho_max:
        raise DomainError("truncation threshold beyond the base law's admissible range")
    g = law.gamma
    pc0 = float(law._p(np.asarray(c0, dtype=float)))

    # On (c0, inf): s P' - P = C (s-c0)^(g-1) ((g-1) s + c0) - P(c0), increasing in s.
    def excess(s: float) -> float:
        return C * (s - c0) ** (g - 1) * ((g - 1) * s + c0) - pc0

    if pc0 <= 0:
        rho0 = c0
    else:
        hi = c0 + 1.0
        while excess(hi) < 0:
            hi = c0 + 2 * (hi - c0)
        rho0 = optimize.brentq(excess, c0, hi, xtol=1e-14, rtol=1e-14)
    gt = max(law.gamma_tilde, g)
    pbar = max(law.pbar, C * g)
    sandwich = None
    return PressureLaw(
        "quasi_monotone_truncation",
        {"c0": float(c0), "C": float(C), "rho0": float(rho0)},
        gamma=g,
        gamma_tilde=gt,
        pbar=pbar,
        rho_ref=law.rho_ref,
        sandwich_C=sandwich,
        base=law,
    )


# -- hypothesis checking --------------------------------------------------------

def isotropic_gamma_threshold(gamma_tilde: float, d: int) -> float:
    return (max(2.0, gamma_tilde) + 1.0) * d / (d + 2.0)


def anisotropic_gamma_threshold(d: int) -> float:
    return 0.5 * d * ((1.0 + 1.0 / d) + math.sqrt(1.0 + 1.0 / d**2))


@dataclass(frozen=True)
class HypothesisEntry:
    name: str
    value: float
    threshold: float
    relation: str
    passed: bool
    required: bool
    detail: str = ""


@dataclass(frozen=True)
class HypothesisReport:
    law: str
    d: int
    entries: tuple[HypothesisEntry, ...]

    @property
    def passed(self) -> bool:
        return all(e.passed for e in self.entries if e.required)

    def entry(self, name: str) -> HypothesisEntry:
        for e in self.entries:
            if e.name == name:
                return e
        raise KeyError(name)

    def failures(self) -> list[HypothesisEntry]:
        return [e for e in self.entries if e.required and not e.passed]

    def to_text(self) -> str:
        lines = [f"law = {self.law}", f"dimension = {self.d}", f"passed = {str(self.passed).lower()}", ""]
        for e in self.entries:
            lines.append(f"[{e.name}]")
            lines.append(f"value = {e.value!r}")
            lines.append(f"relation = \"{e.relation}\"")
            lines.append(f"threshold = {e.threshold!r}")
            lines.append(f"passed = {str(e.passed).lower()}")
            lines.append(f"required = {str(e.required).lower()}")
            if e.detail:
                lines.append(f"detail = \"{e.detail}\"")
            lines.append("")
        return "\n".join(lines)


def _density_sample(law: PressureLaw, count: int = 241) -> NDArray:
    hi = min(1e3, 0.95 * law.rho_max)
    return np.geomspace(1e-3, hi, count)


def minimal_sandwich_constant(P: NDArray, power: NDArray) -> float:
    """Smallest ``C >= 1`` with ``power/C - C <= P <= C*power + C`` on the sample."""
    upper = np.max(P / (power + 1.0))
    lower = np.max(0.5 * (-P + np.sqrt(P * P + 4.0 * power)))
    return float(max(1.0, upper, lower))


def _anisotropy_triplet(anisotropy):
    if anisotropy is None:
        return None
    if hasattr(anisotropy, "delta_norm"):
        return anisotropy.delta_norm, anisotropy.mu, anisotropy.lam
    delta, mu, lam = anisotropy
    return float(delta), float(mu), float(lam)


def check_hypotheses(law: PressureLaw, d: int, anisotropy=None, a_mu_max: float = 0.5) -> HypothesisReport:
    """Evaluate the growth and viscosity hypotheses for ``law`` in dimension ``d``.

    ``anisotropy`` is optional: an ``AnisotropySpec`` or a tuple
    ``(||deltaA||, mu, lambda)``.  With a vanishing ``deltaA`` the isotropic
    exponent condition is the required one; otherwise the anisotropic
    exponent, ellipticity and smallness conditions are.
    """
    entries: list[HypothesisEntry] = []
    trip = _anisotropy_triplet(anisotropy)
    anisotropic = trip is not None and trip[0] > 0

    p0 = float(law._p(np.asarray(0.0)))
    entries.append(HypothesisEntry("pressure_vanishes_at_zero", p0, 0.0, "==", p0 == 0.0, True))

    s = _density_sample(law)
    P = law._p(s)
    C = minimal_sandwich_constant(P, s**law.gamma)
    declared = law.sandwich_C if law.sandwich_C is not None else math.inf
    entries.append(
        HypothesisEntry(
            "growth_sandwich",
            C,
            declared,
            "<=",
            bool(np.isfinite(C) and C <= declared * (1 + 1e-12)),
            True,
            f"minimal C on {s.size} log-spaced densities in [{float(s[0])!r}, {float(s[-1])!r}]",
        )
    )

    dp = law._dp(s)
    ratio = float(np.max(np.abs(dp) / law.derivative_bound(s)))
    entries.append(
        HypothesisEntry(
            "derivative_bound", ratio, 1.0, "<=", ratio <= 1 + 1e-12, True,
            f"sup |P'(s)| / (pbar max(1,s)^(gamma_tilde-1)), pbar={law.pbar!r}, gamma_tilde={law.gamma_tilde!r}",
        )
    )

    thr = isotropic_gamma_threshold(law.gamma_tilde, d)
    entries.append(
        HypothesisEntry("isotropic_growth_exponent", law.gamma, thr, ">", law.gamma > thr, not anisotropic)
    )
    thr_a = anisotropic_gamma_threshold(d)
    entries.append(
        HypothesisEntry("anisotropic_growth_exponent", law.gamma, thr_a, ">", law.gamma > thr_a, anisotropic)
    )

    if trip is not None:
        delta, mu, lam = trip
        ell = 2 * mu / d + lam - delta
        entries.append(HypothesisEntry("anisotropic_ellipticity", ell, 0.0, ">", ell > 0, True))
        a_mu = 2 * delta / (2 * mu + lam) if 2 * mu + lam > 0 else math.inf
        entries.append(HypothesisEntry("anisotropy_smallness", a_mu, a_mu_max, "<=", a_mu <= a_mu_max, anisotropic))
        trans = mu - delta
        entries.append(HypothesisEntry("transverse_ellipticity", trans, 0.0, ">", trans > 0, anisotropic))
        Cd = minimal_sandwich_constant(dp, s ** (law.gamma - 1))
        # On a finite sample some C always exists; the lower half of the bound
        # is only meaningful if P' is eventually positive, so test that too.
        tail = s > min(10.0, s[-1] / 2)
        eventually_monotone = bool(np.all(dp[tail] > 0))
        entries.append(
            HypothesisEntry(
                "derivative_sandwich", Cd, math.inf, "<", bool(np.isfinite(Cd) and eventually_monotone),
                anisotropic, "C^-1 s^(gamma-1) - C <= P'(s) <= C s^(gamma-1) + C, P' > 0 at large densities",
            )
        )
    return HypothesisReport(law.describe(), d, tuple(entries))
