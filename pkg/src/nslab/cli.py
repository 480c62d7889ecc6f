"""Command-line front end: ``nslab run | diagnose | check | transport-demo``.

Exit codes: 0 success, 1 runtime or configuration failure, 2 hypothesis
failure, 3 numerical blow-up.

A configuration whose ``[plan]`` lists several ``alpha`` values is run as a
family: member ``j`` goes to ``alpha_<j>/`` under the output directory and
members are distributed over a thread pool.  Every member owns its
directory and nothing written depends on scheduling, so outputs are
byte-identical for any ``--threads``.
"""

from __future__ import annotations

import argparse
import os
import shutil
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .config import ConfigError, RunConfig, load_config
from .diagnostics import DiagnosticsReport, diagnose_states, linear_transport_demo
from .grid import ScalarField, TorusGrid, VectorField
from .io import read_csv, read_snapshot, write_csv
from .pressure import check_hypotheses
from .solver import BlowUpError, FluidState, NegativeDensityError, run
from .stress import ResonanceError, symbol_bounds
from .transport_weights import WeightObserver, initial_weight, small_weight_mass

__all__ = ["main", "build_parser", "cmd_run", "cmd_diagnose", "cmd_check", "cmd_transport_demo"]

EXIT_OK, EXIT_FAILURE, EXIT_HYPOTHESIS, EXIT_BLOWUP = 0, 1, 2, 3
CONFIG_NAME = "config.toml"
PLAN_NAME = "plan.csv"
TREND_TOLERANCE = 0.1


class _Parser(argparse.ArgumentParser):
    """Usage errors count as runtime failures so that exit 2 stays reserved."""

    def error(self, message: str):
        self.print_usage(sys.stderr)
        self.exit(EXIT_FAILURE, f"{self.prog}: error: {message}\n")


def _err(msg: str) -> None:
    print(msg, file=sys.stderr)


def resolve_threads(value: Optional[int]) -> int:
    if value is None:
        env = os.environ.get("NSLAB_THREADS")
        if env is None or not env.strip():
            return 1
        try:
            value = int(env)
        except ValueError:
            raise ConfigError(f"NSLAB_THREADS must be an integer, got {env!r}") from None
    if value < 1:
        raise ConfigError("thread count must be at least 1")
    return value


def _load(args) -> RunConfig:
    cfg = load_config(args.config)
    if getattr(args, "seed", None) is not None:
        cfg = cfg.with_seed(args.seed)
    return cfg


def _member_dir(j: int) -> str:
    return f"alpha_{j:02d}"


def _hypothesis_text(cfg: RunConfig) -> tuple[bool, str]:
    report = check_hypotheses(cfg.law, cfg.grid.d, cfg.stress)
    ok, text = report.passed, report.to_text()
    if cfg.stress is not None and not cfg.stress.is_isotropic:
        a, r = symbol_bounds(cfg.grid, cfg.stress)
        within = a <= 1.0
        text += f"\n[amu_symbol]\nmax_abs = {a!r}\nresolvent_max_abs = {r!r}\npassed = {str(within).lower()}\n"
        ok = ok and within
    return ok, text


def _gate(cfg: RunConfig, force: bool) -> tuple[Optional[int], str]:
    try:
        ok, text = _hypothesis_text(cfg)
    except ResonanceError as exc:
        _err(f"resonance: {exc}")
        return EXIT_FAILURE, ""
    if not ok and not force:
        _err(text)
        return EXIT_HYPOTHESIS, text
    return None, text


# -- run ----------------------------------------------------------------------------

def _weights_rows(cfg: RunConfig, observers: Sequence[WeightObserver]) -> list:
    h = cfg.weights["h_pen"] or min(cfg.plan.h0)
    a = cfg.diagnostics["a_exp"]
    rows = []
    for lam, obs in zip(cfg.plan.lambda_pen, observers):
        for (t, w, rho), lm, pm in zip(obs.samples, obs.log_moments, obs.penalized_mass):
            rf, wf = ScalarField(cfg.grid, rho), ScalarField(cfg.grid, w)
            for eta in cfg.plan.eta:
                rows.append((lam, t, eta, lm, pm, small_weight_mass(rf, wf, h, eta, a)))
    return rows


def _run_member(cfg: RunConfig, alpha: Optional[float], out: Path) -> tuple[int, str]:
    scfg = cfg.solver_config(alpha)
    state = cfg.initial_state()
    observers = []
    if cfg.weights is not None:
        wt = cfg.weights
        for lam in cfg.plan.lambda_pen:
            w0 = initial_weight(state.rho, wt["kind"], lam, wt["h_pen"])
            observers.append(
                WeightObserver(w0, cfg.law, scfg.alpha, cfg.stress, scfg.rho_floor, wt["interpolation"], wt["record_every"])
            )
    out.mkdir(parents=True, exist_ok=True)
    try:
        run(state, scfg, out, observers, keep_states=False)
    except (BlowUpError, NegativeDensityError) as exc:
        return EXIT_BLOWUP, f"{out.name}: blow-up: {exc}"
    if observers:
        write_csv(
            out / "weights.csv",
            ("lambda_pen", "t", "eta", "log_moment", "penalized_mass", "small_weight_mass"),
            _weights_rows(cfg, observers),
        )
    return EXIT_OK, ""


def _pool_map(fn, items: Sequence, threads: int) -> list:
    if threads == 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=min(threads, len(items))) as pool:
        return list(pool.map(fn, items))


def _prepare_out(out: Path) -> None:
    if out.exists() and any(out.iterdir()):
        # stale members or snapshots from an earlier run would mix into the new one
        for name in ("snapshots",) + tuple(p.name for p in out.glob("alpha_*")):
            shutil.rmtree(out / name, ignore_errors=True)
    out.mkdir(parents=True, exist_ok=True)


def cmd_run(args) -> int:
    cfg = _load(args)
    threads = resolve_threads(args.threads)
    status, text = _gate(cfg, args.force)
    if status is not None:
        return status
    if cfg.stress is None or cfg.solver is None:
        raise ConfigError("running needs [stress] and [solver] sections")
    out = Path(args.out)
    _prepare_out(out)
    (out / CONFIG_NAME).write_text(cfg.source)
    (out / "hypotheses.txt").write_text(text)
    if not cfg.plan.is_family:
        code, msg = _run_member(cfg, cfg.plan.alpha[0], out)
        results = [(code, msg)]
    else:
        write_csv(
            out / PLAN_NAME,
            ("member", "alpha", "directory"),
            [(j, a, _member_dir(j)) for j, a in enumerate(cfg.plan.alpha)],
        )
        jobs = list(enumerate(cfg.plan.alpha))
        results = _pool_map(lambda job: _run_member(cfg, job[1], out / _member_dir(job[0])), jobs, threads)
    worst = EXIT_OK
    for code, msg in results:
        if msg:
            _err(msg)
        worst = max(worst, code)
    return worst


# -- diagnose -------------------------------------------------------------------------

def load_trajectory(directory: Path) -> list[FluidState]:
    index = directory / "snapshots.csv"
    if not index.exists():
        raise ConfigError(f"{directory}: no snapshots.csv")
    header, rows = read_csv(index)
    col = {name: i for i, name in enumerate(header)}
    states = []
    grid = None
    for r in rows:
        d, n, values = read_snapshot(directory / r[col["file"]])
        if grid is None or grid.d != d or grid.n != n:
            grid = TorusGrid(d, n)
        states.append(FluidState(float(r[col["t"]]), ScalarField(grid, values[0]), VectorField(grid, values[1:])))
    return states


def _diagnose_dir(cfg: RunConfig, traj: Path, out: Path) -> DiagnosticsReport:
    states = load_trajectory(traj)
    if not states:
        raise ConfigError(f"{traj}: trajectory has no snapshots")
    eta = cfg.diagnostics["eta"] if cfg.diagnostics["eta"] is not None else cfg.plan.eta[0]
    report = diagnose_states(states, cfg.plan.h0, cfg.diagnostics["a_exp"], cfg.chi(), eta)
    out.mkdir(parents=True, exist_ok=True)
    report.to_csv(out / "diagnostics.csv")
    (out / "fits.txt").write_text(report.fits_text())
    return report


def family_trend(alphas: Sequence[float], reports: Sequence[DiagnosticsReport], tolerance: float = TREND_TOLERANCE):
    """Rows ``(member, alpha, h0, kernel_norm, osc_p1_normalized)`` at the final time, and the trend verdict.

    The verdict holds when at every ``h0`` each member's normalized
    oscillation is at most ``1 + tolerance`` times the previous member's.
    """
    rows = []
    table = []
    for j, (a, rep) in enumerate(zip(alphas, reports)):
        last = rep.at_time(rep.rows[-1][0])
        table.append([r[4] for r in last])
        for r in last:
            rows.append((j, a, r[1], r[2], r[4]))
    v = np.array(table)
    worst = float(np.max(v[1:] / v[:-1])) if len(v) > 1 else 1.0
    return rows, worst, worst <= 1.0 + tolerance


def cmd_diagnose(args) -> int:
    traj = Path(args.trajectory)
    if not traj.is_dir():
        raise ConfigError(f"{traj}: not a directory")
    cfg_path = Path(args.config) if args.config else traj / CONFIG_NAME
    cfg = load_config(cfg_path)
    threads = resolve_threads(args.threads)
    out = Path(args.out) if args.out else traj
    if not (traj / PLAN_NAME).exists():
        _diagnose_dir(cfg, traj, out)
        return EXIT_OK
    _, rows = read_csv(traj / PLAN_NAME)
    members = [(int(r[0]), float(r[1]), str(r[2])) for r in rows]
    reports = _pool_map(lambda m: _diagnose_dir(cfg, traj / m[2], out / m[2]), members, threads)
    trend_rows, worst, ok = family_trend([m[1] for m in members], reports)
    write_csv(out / "family.csv", ("member", "alpha", "h0", "kernel_norm", "osc_p1_normalized"), trend_rows)
    lines = [f"max_successive_ratio = {worst!r}", f"tolerance = {TREND_TOLERANCE!r}", f"nonincreasing = {str(ok).lower()}", ""]
    for (j, a, _), rep in zip(members, reports):
        lines.append(f"[member_{j:02d}]")
        lines.append(f"alpha = {a!r}")
        if "osc_p1" in rep.fits:
            lines.append(rep.fits["osc_p1"].to_text())
        else:
            lines.append("fit = \"none\"\n")
    (out / "trend.txt").write_text("\n".join(lines))
    return EXIT_OK


# -- check and transport demo ------------------------------------------------------------

def cmd_check(args) -> int:
    cfg = _load(args)
    try:
        ok, text = _hypothesis_text(cfg)
    except ResonanceError as exc:
        _err(f"resonance: {exc}")
        return EXIT_FAILURE
    print(text)
    if not ok:
        _err("hypotheses not satisfied")
        return EXIT_HYPOTHESIS
    return EXIT_OK


def cmd_transport_demo(args) -> int:
    if args.config:
        tcfg = _load(args).transport_config()
    else:
        from .diagnostics import TransportDemoConfig

        tcfg = TransportDemoConfig(seed=args.seed if args.seed is not None else 0)
    result = linear_transport_demo(tcfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    result.to_csv(out / "transport_demo.csv")
    (out / "fit.txt").write_text(result.fit.to_text())
    print(result.fit.to_text(), end="")
    return EXIT_OK


# -- entry point ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="nslab", description="Compressible Navier-Stokes lab on the periodic box.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, config_required: bool = True):
        sp.add_argument("--config", required=config_required, help="TOML run configuration")
        sp.add_argument("--threads", type=int, default=None, help="worker threads (default: $NSLAB_THREADS or 1)")
        sp.add_argument("--seed", type=int, default=None, help="override the [plan] seed")

    r = sub.add_parser("run", help="integrate a configuration (or an alpha family)")
    common(r)
    r.add_argument("--out", required=True, help="output directory")
    r.add_argument("--force", action="store_true", help="run even if the hypotheses fail")
    r.set_defaults(func=cmd_run)

    d = sub.add_parser("diagnose", help="oscillation diagnostics of a run directory")
    d.add_argument("trajectory", help="directory written by 'nslab run'")
    common(d, config_required=False)
    d.add_argument("--out", default=None, help="report directory (default: the trajectory directory)")
    d.set_defaults(func=cmd_diagnose)

    c = sub.add_parser("check", help="evaluate the pressure and viscosity hypotheses")
    common(c)
    c.set_defaults(func=cmd_check)

    t = sub.add_parser("transport-demo", help="oscillation decay under a rough velocity")
    common(t, config_required=False)
    t.add_argument("--out", required=True, help="output directory")
    t.set_defaults(func=cmd_transport_demo)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        _err(f"configuration error: {exc}")
        return EXIT_FAILURE
    except (OSError, ValueError, RuntimeError, ArithmeticError) as exc:
        _err(f"error: {exc}")
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
