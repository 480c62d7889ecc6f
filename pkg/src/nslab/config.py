"""Run configuration: TOML text with typed sections, unknown keys rejected.

Sections::

    [grid]         d, n
    [pressure]     kind plus the kind's parameters (declared metadata optional)
    [stress]       mu, lam, delta (one matrix) or delta_table, mollifier_eps, symmetric
    [solver]       dt, t_end, alpha, rho_floor, dealias, snapshot_every, caps, cfl,
                   integrability_a, forcing_amplitude, forcing_mode
    [initial]      kind = uniform | acoustic | shear | random and its parameters
    [diagnostics]  h0, a_exp, eta, chi, chi_ell
    [weights]      kind, lambda_pen, h_pen, interpolation, record_every
    [plan]         alpha, h0, eta, lambda_pen ladders and the seed
    [transport]    fields of ``TransportDemoConfig``

Every section except ``[grid]`` and ``[pressure]`` is optional for ``check``;
``run`` also needs ``[stress]`` and ``[solver]``.
"""

from __future__ import annotations

import math
import sys
from dataclasses import dataclass, fields, replace
from pathlib import Path
from typing import Any, Mapping, Optional

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .diagnostics import ChiSpec, TransportDemoConfig
from .grid import TorusGrid
from .pressure import PressureLaw, truncate_quasi_monotone
from .solver import (
    FluidState,
    SolverConfig,
    acoustic_state,
    random_state,
    shear_state,
    sinusoidal_forcing,
    uniform_state,
)
from .stress import AnisotropySpec

__all__ = ["ConfigError", "RunConfig", "ExperimentPlan", "load_config", "parse_config"]


class ConfigError(ValueError):
    """Malformed configuration: bad syntax, unknown key, missing or mistyped value."""


_DECLARED = ("gamma_tilde", "pbar", "sandwich_C")
_PRESSURE_KEYS = {
    "power": ("gamma", "a"),
    "van_der_waals_isothermal": ("a", "b", "c", "theta", "gamma"),
    "truncated_virial": ("gamma", "coefficients", "theta"),
    "oscillatory_perturbation": ("gamma", "frequency", "amplitude", "a"),
    "quasi_monotone_truncation": ("c0", "C", "base"),
}
_SECTIONS = {
    "grid": ("d", "n"),
    "stress": ("mu", "lam", "delta", "delta_table", "mollifier_eps", "symmetric"),
    "solver": (
        "dt", "t_end", "alpha", "rho_floor", "dealias", "snapshot_every", "u_cap", "rho_cap", "cfl",
        "integrability_a", "forcing_amplitude", "forcing_mode",
    ),
    "initial": ("kind", "rho_mean", "rho_amplitude", "u_amplitude", "amplitude", "mode", "kmax", "slope"),
    "diagnostics": ("h0", "a_exp", "eta", "chi", "chi_ell"),
    "weights": ("kind", "lambda_pen", "h_pen", "interpolation", "record_every"),
    "plan": ("alpha", "h0", "eta", "lambda_pen", "seed"),
    "transport": tuple(f.name for f in fields(TransportDemoConfig) if f.name not in ("d", "n", "seed")),
}
_INITIAL_KEYS = {
    "uniform": ("rho_mean",),
    "acoustic": ("rho_mean", "amplitude", "mode"),
    "shear": ("rho_mean", "amplitude", "mode"),
    "random": ("rho_mean", "rho_amplitude", "u_amplitude", "kmax", "slope"),
}


def _check_keys(where: str, table: Mapping, allowed) -> None:
    if not isinstance(table, Mapping):
        raise ConfigError(f"[{where}] must be a table")
    unknown = sorted(set(table) - set(allowed))
    if unknown:
        raise ConfigError(f"[{where}] unknown key(s): {', '.join(unknown)}")


def _num(where: str, table: Mapping, key: str, default=None, *, integer: bool = False, required: bool = False):
    if key not in table:
        if required:
            raise ConfigError(f"[{where}] missing required key {key!r}")
        return default
    v = table[key]
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ConfigError(f"[{where}] {key!r} must be a number")
    if integer:
        if not isinstance(v, int):
            raise ConfigError(f"[{where}] {key!r} must be an integer")
        return int(v)
    if not math.isfinite(v):
        raise ConfigError(f"[{where}] {key!r} must be finite")
    return float(v)


def _flag(where: str, table: Mapping, key: str, default: bool) -> bool:
    v = table.get(key, default)
    if not isinstance(v, bool):
        raise ConfigError(f"[{where}] {key!r} must be true or false")
    return v


def _num_list(where: str, table: Mapping, key: str) -> Optional[tuple]:
    if key not in table:
        return None
    v = table[key]
    if not isinstance(v, list) or not v:
        raise ConfigError(f"[{where}] {key!r} must be a non-empty list of numbers")
    for x in v:
        if isinstance(x, bool) or not isinstance(x, (int, float)):
            raise ConfigError(f"[{where}] {key!r} must be a non-empty list of numbers")
    return tuple(float(x) for x in v)


def _matrix(where: str, value, d: int) -> np.ndarray:
    try:
        a = np.asarray(value, dtype=float)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{where}] matrix entries must be numbers") from exc
    if a.shape != (d, d):
        raise ConfigError(f"[{where}] matrix must be {d}x{d}")
    return a


def parse_pressure(table: Mapping, where: str = "pressure") -> PressureLaw:
    if not isinstance(table, Mapping) or "kind" not in table:
        raise ConfigError(f"[{where}] needs a 'kind'")
    kind = table["kind"]
    if kind not in _PRESSURE_KEYS:
        raise ConfigError(f"[{where}] unknown pressure kind {kind!r}")
    _check_keys(where, table, ("kind", *_PRESSURE_KEYS[kind], *_DECLARED))
    declared = {k: _num(where, table, k) for k in _DECLARED if k in table}
    g = lambda k, dflt=None, req=False: _num(where, table, k, dflt, required=req)  # noqa: E731
    try:
        if kind == "power":
            return PressureLaw.power(g("gamma", req=True), g("a", 1.0), **declared)
        if kind == "van_der_waals_isothermal":
            return PressureLaw.van_der_waals(g("a", 1.0), g("b", 2.0), g("c", 1.0), g("theta", 1.0), g("gamma", 2.0), **declared)
        if kind == "truncated_virial":
            coeffs = _num_list(where, table, "coefficients") or ()
            return PressureLaw.virial(g("gamma", req=True), coeffs, g("theta", 1.0), **declared)
        if kind == "oscillatory_perturbation":
            return PressureLaw.oscillatory(g("gamma", req=True), g("frequency", req=True), g("amplitude", 0.5), g("a", 1.0), **declared)
        if "base" not in table:
            raise ConfigError(f"[{where}] truncation needs a [{where}.base] law")
        law = truncate_quasi_monotone(parse_pressure(table["base"], f"{where}.base"), g("c0", req=True), g("C", req=True))
        return replace(law, **declared) if declared else law
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError(f"[{where}] {exc}") from exc


@dataclass(frozen=True)
class ExperimentPlan:
    """Parameter ladders swept by ``run``/``diagnose`` plus the random seed.

    A ladder left out of the file falls back to the single value of the
    base configuration, so no ladder is ever empty.
    """

    alpha: tuple
    h0: tuple
    eta: tuple
    lambda_pen: tuple
    seed: int = 0

    def __post_init__(self) -> None:
        for name in ("alpha", "h0", "eta", "lambda_pen"):
            if not getattr(self, name):
                raise ConfigError(f"[plan] ladder {name!r} is empty")
        if any(a < 0 for a in self.alpha):
            raise ConfigError("[plan] alpha values must be nonnegative")
        if any(not 0 < h < 1 for h in self.h0):
            raise ConfigError("[plan] h0 values must lie in (0, 1)")

    @property
    def is_family(self) -> bool:
        return len(self.alpha) > 1


@dataclass(frozen=True)
class RunConfig:
    """Everything one configuration file describes, parsed into library objects."""

    grid: TorusGrid
    law: PressureLaw
    stress: Optional[AnisotropySpec]
    solver: Optional[Mapping[str, Any]]
    initial: Mapping[str, Any]
    diagnostics: Mapping[str, Any]
    weights: Optional[Mapping[str, Any]]
    plan: ExperimentPlan
    transport: Mapping[str, Any]
    source: str = ""

    def with_seed(self, seed: int) -> "RunConfig":
        return replace(self, plan=replace(self.plan, seed=int(seed)))

    def solver_config(self, alpha: Optional[float] = None) -> SolverConfig:
        if self.stress is None or self.solver is None:
            raise ConfigError("running needs [stress] and [solver] sections")
        s = dict(self.solver)
        amp = s.pop("forcing_amplitude")
        mode = s.pop("forcing_mode")
        if alpha is not None:
            s["alpha"] = alpha
        forcing = sinusoidal_forcing(amp, mode) if amp else None
        try:
            return SolverConfig(law=self.law, stress=self.stress, forcing=forcing, **s)
        except ValueError as exc:
            raise ConfigError(f"[solver] {exc}") from exc

    def initial_state(self) -> FluidState:
        p = dict(self.initial)
        kind = p.pop("kind")
        g = self.grid
        if kind == "uniform":
            return uniform_state(g, p["rho_mean"])
        if kind == "acoustic":
            return acoustic_state(g, p["rho_mean"], p["amplitude"], p["mode"])
        if kind == "shear":
            if g.d < 2:
                raise ConfigError("[initial] shear data needs d >= 2")
            return shear_state(g, p["rho_mean"], p["amplitude"], int(p["mode"][0]))
        rng = np.random.default_rng(self.plan.seed)
        return random_state(g, rng, p["rho_mean"], p["rho_amplitude"], p["u_amplitude"], p["kmax"], p["slope"])

    def chi(self) -> ChiSpec:
        return ChiSpec(self.diagnostics["chi"], self.diagnostics["chi_ell"])

    def transport_config(self) -> TransportDemoConfig:
        return TransportDemoConfig(d=self.grid.d, n=self.grid.n, seed=self.plan.seed, **self.transport)


def _parse_stress(table: Mapping, d: int) -> AnisotropySpec:
    _check_keys("stress", table, _SECTIONS["stress"])
    mu = _num("stress", table, "mu", required=True)
    lam = _num("stress", table, "lam", 0.0)
    if "delta" in table and "delta_table" in table:
        raise ConfigError("[stress] give either 'delta' or 'delta_table', not both")
    entries = ()
    if "delta" in table:
        entries = ((0.0, _matrix("stress", table["delta"], d)),)
    elif "delta_table" in table:
        rows = table["delta_table"]
        if not isinstance(rows, list) or not rows:
            raise ConfigError("[stress] delta_table must be a non-empty array of tables")
        out = []
        for r in rows:
            _check_keys("stress.delta_table", r, ("t", "matrix"))
            out.append((_num("stress.delta_table", r, "t", required=True), _matrix("stress.delta_table", r.get("matrix"), d)))
        entries = tuple(out)
    try:
        return AnisotropySpec(
            mu, lam, d, entries, _num("stress", table, "mollifier_eps", 0.0), _flag("stress", table, "symmetric", False)
        )
    except ValueError as exc:
        raise ConfigError(f"[stress] {exc}") from exc


def _parse_solver(table: Mapping) -> dict:
    _check_keys("solver", table, _SECTIONS["solver"])
    w = "solver"
    out = {
        "dt": _num(w, table, "dt", required=True),
        "t_end": _num(w, table, "t_end", required=True),
        "alpha": _num(w, table, "alpha", 0.0),
        "rho_floor": _num(w, table, "rho_floor"),
        "dealias": _flag(w, table, "dealias", True),
        "snapshot_every": _num(w, table, "snapshot_every", 0, integer=True),
        "u_cap": _num(w, table, "u_cap", 1e3),
        "rho_cap": _num(w, table, "rho_cap", 1e6),
        "cfl": _num(w, table, "cfl", 0.5),
        "integrability_a": _num(w, table, "integrability_a"),
        "forcing_amplitude": _num(w, table, "forcing_amplitude", 0.0),
        "forcing_mode": _num(w, table, "forcing_mode", 1, integer=True),
    }
    if out["snapshot_every"] < 0:
        raise ConfigError("[solver] snapshot_every must be nonnegative")
    return out


def _parse_initial(table: Mapping, d: int) -> dict:
    kind = table.get("kind", "uniform")
    if kind not in _INITIAL_KEYS:
        raise ConfigError(f"[initial] unknown kind {kind!r}")
    _check_keys("initial", table, ("kind", *_INITIAL_KEYS[kind]))
    w = "initial"
    out: dict = {"kind": kind, "rho_mean": _num(w, table, "rho_mean", 1.0)}
    if out["rho_mean"] <= 0:
        raise ConfigError("[initial] rho_mean must be positive")
    if kind in ("acoustic", "shear"):
        out["amplitude"] = _num(w, table, "amplitude", 0.01)
        mode = table.get("mode", [1] + [0] * (d - 1))
        if isinstance(mode, int) and not isinstance(mode, bool):
            mode = [mode] + [0] * (d - 1)
        if not isinstance(mode, list) or len(mode) != d or not all(isinstance(m, int) and not isinstance(m, bool) for m in mode):
            raise ConfigError(f"[initial] mode must be an integer or a list of {d} integers")
        out["mode"] = tuple(mode)
    if kind == "random":
        out["rho_amplitude"] = _num(w, table, "rho_amplitude", 0.1)
        out["u_amplitude"] = _num(w, table, "u_amplitude", 0.1)
        out["kmax"] = _num(w, table, "kmax", 4.0)
        out["slope"] = _num(w, table, "slope", 1.0)
    return out


def _parse_diagnostics(table: Mapping, grid: TorusGrid) -> dict:
    from .diagnostics import default_h_ladder

    _check_keys("diagnostics", table, _SECTIONS["diagnostics"])
    w = "diagnostics"
    chi = table.get("chi", "standard")
    if chi not in ("standard", "anisotropic", "abs"):
        raise ConfigError(f"[diagnostics] unknown chi flavor {chi!r}")
    out = {
        "h0": _num_list(w, table, "h0") or default_h_ladder(grid.n),
        "a_exp": _num(w, table, "a_exp", grid.d + 1.0),
        "eta": _num(w, table, "eta"),
        "chi": chi,
        "chi_ell": _num(w, table, "chi_ell", 1.0),
    }
    if not out["a_exp"] > grid.d:
        raise ConfigError("[diagnostics] a_exp must exceed the dimension")
    return out


def _parse_weights(table: Mapping) -> dict:
    _check_keys("weights", table, _SECTIONS["weights"])
    w = "weights"
    kind = table.get("kind", "D0")
    if kind not in ("D0", "D1", "Da"):
        raise ConfigError(f"[weights] unknown kind {kind!r}")
    interp = table.get("interpolation", "cubic")
    if interp not in ("cubic", "linear"):
        raise ConfigError(f"[weights] unknown interpolation {interp!r}")
    return {
        "kind": kind,
        "lambda_pen": _num(w, table, "lambda_pen"),
        "h_pen": _num(w, table, "h_pen"),
        "interpolation": interp,
        "record_every": _num(w, table, "record_every", 1, integer=True),
    }


def _parse_transport(table: Mapping) -> dict:
    _check_keys("transport", table, _SECTIONS["transport"])
    out: dict = {}
    for f in fields(TransportDemoConfig):
        if f.name not in table:
            continue
        if f.name in ("smooth_velocity", "zero_velocity"):
            out[f.name] = _flag("transport", table, f.name, False)
        elif f.name == "h_ladder":
            out[f.name] = _num_list("transport", table, f.name)
        else:
            out[f.name] = _num("transport", table, f.name)
    return out


def parse_config(data: Mapping, source: str = "") -> RunConfig:
    allowed = ("grid", "pressure", *(s for s in _SECTIONS if s != "grid"))
    _check_keys("top level", data, allowed)
    if "grid" not in data or "pressure" not in data:
        raise ConfigError("configuration needs [grid] and [pressure]")
    gt = data["grid"]
    _check_keys("grid", gt, _SECTIONS["grid"])
    d = _num("grid", gt, "d", 2, integer=True)
    n = _num("grid", gt, "n", 64, integer=True)
    try:
        grid = TorusGrid(d, n)
    except ValueError as exc:
        raise ConfigError(f"[grid] {exc}") from exc
    law = parse_pressure(data["pressure"])
    stress = _parse_stress(data["stress"], d) if "stress" in data else None
    solver = _parse_solver(data["solver"]) if "solver" in data else None
    initial = _parse_initial(data.get("initial", {}), d)
    diagnostics = _parse_diagnostics(data.get("diagnostics", {}), grid)
    weights = _parse_weights(data["weights"]) if "weights" in data else None

    pt = data.get("plan", {})
    _check_keys("plan", pt, _SECTIONS["plan"])
    base_alpha = solver["alpha"] if solver is not None else 0.0
    base_eta = diagnostics["eta"] if diagnostics["eta"] is not None else 0.5 * initial["rho_mean"]
    base_lambda = weights["lambda_pen"] if weights is not None and weights["lambda_pen"] is not None else 0.0
    plan = ExperimentPlan(
        alpha=_num_list("plan", pt, "alpha") or (base_alpha,),
        h0=_num_list("plan", pt, "h0") or tuple(diagnostics["h0"]),
        eta=_num_list("plan", pt, "eta") or (base_eta,),
        lambda_pen=_num_list("plan", pt, "lambda_pen") or (base_lambda,),
        seed=_num("plan", pt, "seed", 0, integer=True),
    )
    transport = _parse_transport(data.get("transport", {}))
    return RunConfig(grid, law, stress, solver, initial, diagnostics, weights, plan, transport, source)


def load_config(path: str | Path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from exc
    try:
        data = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return parse_config(data, text)
