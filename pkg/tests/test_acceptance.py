"""Acceptance suite: one test per criterion, at the stated tolerances and budgets.

Each test records its measured quantities; ``conftest.py`` prints one
PASS/FAIL line per criterion at the end of the run.
"""

import filecmp
import math
import re
import time
from pathlib import Path

import numpy as np
import pytest

from nslab import cli
from nslab.diagnostics import (
    TransportDemoConfig,
    besov_norm,
    bessel_norm,
    default_h_ladder,
    h1_norm,
    linear_transport_demo,
    littlewood_paley,
    osc_functional,
    random_trig_poly,
    shift_profile,
    square_function_shift,
    truncated_block_sum,
)
from nslab.grid import (
    ScalarField,
    TorusGrid,
    VectorField,
    apply_multiplier,
    convolve,
    divergence,
    gradient,
    inverse_laplacian_zero_mean,
    laplacian,
    random_band_limited,
    spectral_energy,
)
from nslab.io import read_csv
from nslab.kernels import build_kernel, log_averaged_kernel, normalized_kernel
from nslab.pressure import PressureLaw
from nslab.solver import (
    Simulation,
    SolverConfig,
    acoustic_state,
    effective_flux_residual,
    random_state,
    run,
    shear_state,
)
from nslab.stress import AnisotropySpec, dissipation, symbol_bounds
from nslab.transport_weights import (
    WeightObserver,
    default_lambda,
    dh_operator,
    gradient_magnitude,
    initial_weight,
    maximal_function,
    maximal_function_bruteforce,
    small_weight_mass,
)

ROOT = Path(__file__).resolve().parents[1]
FAMILY_CONFIG = ROOT / "configs" / "oscillatory_family.toml"

pytestmark = pytest.mark.acceptance


class Criterion:
    """Records measured values and checks the runtime budget."""

    def __init__(self, record, number, title, budget):
        self.record = record
        self.budget = budget
        self.start = time.perf_counter()
        record("criterion", number)
        record("title", title)

    def measured(self, **values):
        for k, v in values.items():
            self.record(k, f"{v:.4g}" if isinstance(v, float) else v)

    def finish(self):
        elapsed = time.perf_counter() - self.start
        self.record("seconds", f"{elapsed:.1f}")
        assert elapsed < self.budget, f"runtime {elapsed:.1f}s exceeds {self.budget}s"


@pytest.fixture
def criterion(record_property):
    def make(number, title, budget):
        return Criterion(record_property, number, title, budget)

    return make


def _loglog_slope(x, y) -> float:
    return float(np.polyfit(np.log(x), np.log(y), 1)[0])


def _trig_field(grid, rng, kmax):
    """Random real trigonometric polynomial with its analytic derivatives, summed mode by mode."""
    ks = [k for k in np.ndindex(*(2 * kmax + 1,) * grid.d)]
    ks = [np.array(k) - kmax for k in ks]
    ks = [k for k in ks if 0 < np.linalg.norm(k) <= kmax]
    f = np.zeros(grid.shape)
    grad = np.zeros((grid.d,) + grid.shape)
    lap = np.zeros(grid.shape)
    for k in ks:
        a, b = rng.standard_normal(2)
        phase = 2 * np.pi * sum(kj * xj for kj, xj in zip(k, grid.coords))
        c, s = np.cos(phase), np.sin(phase)
        f += a * c + b * s
        for j in range(grid.d):
            grad[j] += 2 * np.pi * k[j] * (-a * s + b * c)
        lap -= (2 * np.pi) ** 2 * float(k @ k) * (a * c + b * s)
    return f, grad, lap


def _rel(a, b) -> float:
    return float(np.max(np.abs(a - b)) / np.max(np.abs(b)))


def test_c01_spectral_identities(criterion):
    c = criterion(1, "spectral identities", 5.0)
    g = TorusGrid(2, 64)
    rng = np.random.default_rng(101)
    worst = {"gradient": 0.0, "divergence": 0.0, "laplacian": 0.0, "inverse": 0.0, "multiplier": 0.0, "parseval": 0.0}

    def sigma(k1, k2):
        return 1.0 + k1 * k1 + k2 * k2 + 1j * k1

    def sigma_inv(k1, k2):
        return 1.0 / sigma(k1, k2)

    for _ in range(50):
        f, grad, lap = _trig_field(g, rng, 6)
        F = ScalarField(g, f)
        worst["gradient"] = max(worst["gradient"], _rel(gradient(F).values, grad))
        worst["divergence"] = max(worst["divergence"], _rel(divergence(VectorField(g, grad)).values, lap))
        worst["laplacian"] = max(worst["laplacian"], _rel(laplacian(F).values, lap))
        worst["inverse"] = max(worst["inverse"], _rel(inverse_laplacian_zero_mean(ScalarField(g, lap)).values, f))
        back = apply_multiplier(sigma_inv, apply_multiplier(sigma, F, at_zero=1.0), at_zero=1.0)
        worst["multiplier"] = max(worst["multiplier"], _rel(back.values, f))
        worst["parseval"] = max(worst["parseval"], abs(spectral_energy(F) / F.norm(2) ** 2 - 1))
    c.measured(**{k: v for k, v in worst.items()})
    assert max(worst.values()) <= 1e-12, worst
    c.finish()


def test_c02_maximal_function(criterion):
    c = criterion(2, "maximal function oracle", 30.0)
    g = TorusGrid(2, 16)
    rng = np.random.default_rng(202)

    def field():
        return ScalarField(g, np.abs(random_band_limited(g, rng, 5.0)))

    err = 0.0
    for _ in range(20):
        f = field()
        err = max(err, _rel(maximal_function(f).values, maximal_function_bruteforce(f).values))
    sub, hom = 0.0, 0.0
    for _ in range(100):
        f, h = field(), field()
        lam = float(rng.uniform(0.1, 10.0))
        Mf, Mh = maximal_function(f).values, maximal_function(h).values
        sub = max(sub, float(np.max(maximal_function(f + h).values / (Mf + Mh))))
        hom = max(hom, _rel(maximal_function(f * lam).values, lam * Mf))
    c.measured(oracle_error=err, sublinear_ratio=sub, homogeneity_error=hom)
    assert err <= 1e-13
    assert sub <= 1.0 + 1e-13
    assert hom <= 1e-13
    c.finish()


def test_c03_dh_constants(criterion):
    c = criterion(3, "D_h constants", 30.0)
    closed = []
    for d, expected in ((1, 2.0), (2, 2 * math.pi)):
        g = TorusGrid(d, 128)
        one = ScalarField.constant(g, 1.0)
        for h in (1 / 32, 1 / 16, 1 / 8, 1 / 4, 1 / 2):
            closed.append(float(np.max(np.abs(dh_operator(one, h).values / expected - 1))))
    g = TorusGrid(2, 64)
    rng = np.random.default_rng(303)
    worst = 0.0
    for _ in range(50):
        u = VectorField(g, random_band_limited(g, rng, 8.0, 1.0, components=2))
        gm = gradient_magnitude(u)
        M = maximal_function(gm).values
        for h in (1 / 16, 1 / 8, 1 / 4, 1 / 2):
            worst = max(worst, float(np.max(dh_operator(gm, h).values / M)))
    c.measured(closed_form_error=max(closed), C=worst)
    assert max(closed) <= 0.01
    assert worst <= 8.0
    c.finish()


def test_c04_mollification_inequality(criterion):
    c = criterion(4, "mollification inequality", 60.0)
    rng = np.random.default_rng(404)
    violations, checks, tightest = 0, 0, 0.0
    for d, n, count in ((1, 128, 100), (2, 32, 100)):
        g = TorusGrid(d, n)
        a_exp = d + 1.0
        ladder = default_h_ladder(n)
        kernels = [(build_kernel(g, h, a_exp), normalized_kernel(g, h, a_exp)) for h in ladder]
        for _ in range(count):
            rho = ScalarField(g, 1.0 + 0.3 * random_band_limited(g, rng, n / 4, 1.0))
            for K, Kbar in kernels:
                smooth = convolve(Kbar.field, rho)
                for p in (1.0, 2.0):
                    lhs = g.integrate(np.abs(rho.values - smooth.values) ** p)
                    rhs = osc_functional(rho, K, p) / K.norm
                    checks += 1
                    violations += int(lhs > rhs)
                    tightest = max(tightest, lhs / rhs)
    c.measured(checks=checks, violations=violations, max_ratio=tightest)
    assert violations == 0
    c.finish()


def test_c05_kernel_laws(criterion):
    c = criterion(5, "kernel laws", 10.0)
    mass = 0.0
    g32 = TorusGrid(2, 32)
    for h in (1.0, 0.5, 0.1, 0.02, 0.005):
        mass = max(mass, abs(normalized_kernel(g32, h, 3.0).norm - 1))
    worst_C, ratios = 0.0, []
    for d, n in ((1, 1024), (2, 256)):
        g = TorusGrid(d, n)
        for e in range(3, 9):
            h0 = 2.0**-e
            K = log_averaged_kernel(g, h0, d + 1.0)
            rat = K.values / (h0 + g.distance) ** (-d)
            worst_C = max(worst_C, float(rat.max()), float(1 / rat.min()))
            ratios.append(K.norm / abs(math.log(h0)))
    c.measured(mass_error=mass, sandwich_C=worst_C, norm_ratio_min=min(ratios), norm_ratio_max=max(ratios))
    assert mass <= 1e-14
    assert worst_C <= 10.0
    assert 0.5 <= min(ratios) and max(ratios) <= 2.0
    c.finish()


def test_c06_conservation_and_dissipation(criterion):
    c = criterion(6, "solver conservation and dissipation", 300.0)
    law = PressureLaw.power(2.0, 1.0)
    g = TorusGrid(2, 64)
    s0 = random_state(g, np.random.default_rng(0), rho_amplitude=0.2, u_amplitude=0.3, kmax=3.0)
    dt = 0.002
    cfg = SolverConfig(law, AnisotropySpec.isotropic(0.05, 0.0, 2), dt=dt, t_end=20.0)
    _, b = run(s0, cfg, keep_states=False)
    mass = b.array("mass")
    drift = float(np.max(np.abs(mass - mass[0])) / mass[0])
    E = b.energy
    excess = float(np.max((E + b.array("diss")) / (E[0] * (1 + 5 * dt)) - 1))

    g32 = TorusGrid(2, 32)
    s1 = random_state(g32, np.random.default_rng(0), rho_amplitude=0.2, u_amplitude=0.3, kmax=2.0)
    dts = [0.008, 0.004, 0.002, 0.001]
    res = []
    for h in dts:
        _, bb = run(s1, SolverConfig(law, AnisotropySpec.isotropic(0.05, 0.0, 2), dt=h, t_end=0.4), keep_states=False)
        res.append(abs(bb.energy_residual()[-1]))
    order = _loglog_slope(dts, res)
    c.measured(steps=len(mass) - 1, mass_drift=drift, energy_excess=excess, residual_order=order)
    assert len(mass) - 1 == 10_000
    assert drift <= 1e-10
    assert excess <= 0.0
    assert order >= 1.7
    c.finish()


def test_c07_linearized_physics(criterion):
    c = criterion(7, "acoustic frequency and viscous decay", 60.0)
    g = TorusGrid(2, 32)
    law = PressureLaw.power(2.0, 1.0)
    mu = 0.01
    spec = AnisotropySpec.isotropic(mu, 0.0, 2)
    s0 = acoustic_state(g, 1.0, 1e-4, (1, 0))
    tr, _ = run(s0, SolverConfig(law, spec, dt=0.002, t_end=2.0, snapshot_every=1))
    amp = np.array([g.fft(s.rho.values)[1, 0].real for s in tr.states])
    t = np.array(tr.times)
    idx = np.where(np.sign(amp[1:]) != np.sign(amp[:-1]))[0]
    crossings = t[idx] - amp[idx] * (t[idx + 1] - t[idx]) / (amp[idx + 1] - amp[idx])
    omega = math.pi / float(np.mean(np.diff(crossings)))
    expected = math.sqrt(float(law.eval_prime(np.array([1.0]))[0])) * 2 * math.pi
    freq_err = abs(omega / expected - 1)

    s1 = shear_state(g, 1.0, 1e-3, 1)
    _, b = run(s1, SolverConfig(law, spec, dt=0.002, t_end=1.0), keep_states=False)
    ek = b.array("ekin")
    rate = -math.log(ek[-1] / ek[0]) / 1.0
    decay_err = abs(rate / (2 * mu * (2 * math.pi) ** 2) - 1)
    c.measured(omega=omega, omega_expected=expected, frequency_error=freq_err, decay_error=decay_err)
    assert freq_err <= 0.02
    assert decay_err <= 0.02
    c.finish()


def test_c08_weight_contracts(criterion):
    c = criterion(8, "weight contracts", 300.0)
    g = TorusGrid(2, 64)
    law = PressureLaw.power(2.0, 1.0)
    spec = AnisotropySpec.isotropic(0.02, 0.0, 2)
    s0 = random_state(g, np.random.default_rng(0), rho_amplitude=0.3, u_amplitude=0.5, kmax=4.0)
    lam_default = default_lambda(2)
    range_ok, d1_excess = True, -np.inf
    for lam in (1.0, lam_default):
        obs = WeightObserver(initial_weight(s0.rho, "D1", lam), law)
        run(s0, SolverConfig(law, spec, dt=0.002, t_end=0.2), observers=[obs], keep_states=False)
        for _, w, rho in obs.samples:
            range_ok &= bool(np.all(w >= 0) and np.all(w <= 1))
            d1_excess = max(d1_excess, float(np.max(w - np.exp(-lam * rho))))

    discrepancies = []
    for dt in (0.004, 0.002, 0.001):
        obs = WeightObserver(initial_weight(s0.rho, "D0", lam_default), law)
        run(s0, SolverConfig(law, spec, dt=dt, t_end=0.2), observers=[obs], keep_states=False)
        lm, pm, t = np.array(obs.log_moments), np.array(obs.penalized_mass), np.array(obs.times)
        integral = np.concatenate([[0.0], np.cumsum(0.5 * np.diff(t) * (pm[1:] + pm[:-1]))])
        for _, w, _ in obs.samples:
            range_ok &= bool(np.all(w >= 0) and np.all(w <= 1))
        discrepancies.append(float(np.max(np.abs(lm - lm[0] - integral)) / abs(lm[-1] - lm[0])))

    s3 = random_state(g, np.random.default_rng(3), rho_amplitude=0.2, u_amplitude=0.5, kmax=3.0)
    obs = WeightObserver(initial_weight(s3.rho, "D0", 50.0), law, record_every=25)
    run(s3, SolverConfig(law, spec, dt=0.002, t_end=0.25), observers=[obs], keep_states=False)
    etas = np.array([1e-2, 1e-4, 1e-8])
    monotone, spread = True, 0.0
    for t, w, rho in obs.samples:
        if t < 0.2 - 1e-9:
            continue
        for h in (1 / 4, 1 / 16):
            v = np.array([small_weight_mass(ScalarField(g, rho), ScalarField(g, w), h, e) for e in etas])
            monotone &= bool(np.all(np.diff(v) <= 0))
            scaled = v * np.abs(np.log(etas))
            C = math.exp(float(np.mean(np.log(scaled))))
            spread = max(spread, float(np.max(np.maximum(scaled / C, C / scaled))))
    c.measured(
        d1_excess=d1_excess,
        log_moment_rel=max(discrepancies),
        small_mass_factor=spread,
    )
    assert range_ok
    assert d1_excess <= 1e-6
    for dt, disc in zip((0.004, 0.002, 0.001), discrepancies):
        assert disc <= dt
    assert monotone
    assert spread <= 3.0
    c.finish()


def test_c09_besov_suite(criterion):
    c = criterion(9, "Besov suite", 60.0)
    rng = np.random.default_rng(909)
    g = TorusGrid(2, 64)
    recon, comp = 0.0, []
    for _ in range(20):
        f = ScalarField(g, random_band_limited(g, rng, 30.0, 1.0))
        blocks = littlewood_paley(f)
        recon = max(recon, _rel(sum(b.values for b in blocks), f.values))
        comp.append(besov_norm(f, 0.0, 2.0, 2.0) / f.norm(2))
    g1 = TorusGrid(1, 1024)
    s, p = 0.5, 2.0
    constants = []
    for K in range(4, 9):
        ratios = []
        for _ in range(50):
            f = random_trig_poly(g1, rng, K, s)
            ratios.append(truncated_block_sum(f, s, p, K) / (math.sqrt(K) * bessel_norm(f, s, p)))
        constants.append(max(ratios))
    constants = np.array(constants)
    stability = float(np.max(np.abs(constants / constants.mean() - 1)))
    c.measured(
        reconstruction=recon,
        b022_ratio_min=min(comp),
        b022_ratio_max=max(comp),
        C_min=float(constants.min()),
        C_max=float(constants.max()),
        C_spread=stability,
    )
    assert recon <= 1e-12
    assert 1 / math.sqrt(3) <= min(comp) and max(comp) <= math.sqrt(3)
    assert stability <= 0.2
    c.finish()


def test_c10_square_function(criterion):
    c = criterion(10, "square-function bound", 120.0)
    g = TorusGrid(2, 128)
    rng = np.random.default_rng(0)
    us = []
    for _ in range(20):
        u = VectorField(g, random_band_limited(g, rng, 16.0, 2.0, components=2))
        us.append(u * (1 / h1_norm(u)))
    profiles = shift_profile(us)
    exps = range(3, 8)
    ratio = np.array(
        [[square_function_shift(u, 2.0**-e, profile=P) / math.sqrt(e * math.log(2)) for e in exps] for u, P in zip(us, profiles)]
    )
    spread = float(ratio.max() / ratio.min())
    c.measured(max_over_min=spread)
    assert spread <= 3.0
    c.finish()


def test_c11_effective_flux_order(criterion):
    c = criterion(11, "effective-flux residual order", 180.0)
    g = TorusGrid(2, 32)
    law = PressureLaw.power(2.0)
    s0 = random_state(g, np.random.default_rng(1), rho_amplitude=0.2, u_amplitude=0.2, kmax=3.0)
    T = 0.2
    dts = [0.01, 0.005, 0.0025, 0.00125]
    res = []
    for dt in dts:
        cfg = SolverConfig(law, AnisotropySpec.isotropic(0.05, 0.0, 2), dt=dt, t_end=T)
        sim = Simulation(s0, cfg)
        prev = sim.state
        for _ in range(int(round(T / dt))):
            prev = sim.state
            sim.step()
        res.append(effective_flux_residual(prev, sim.state, cfg).norm(2))
    order = _loglog_slope(dts, res)
    c.measured(order=order, finest_residual=res[-1])
    assert order >= 0.9
    c.finish()


def _trace_free(delta, angle):
    co, si = math.cos(angle), math.sin(angle)
    R = np.array([[co, -si], [si, co]])
    return R @ np.diag([delta, -delta]) @ R.T


def test_c12_amu_bounds(criterion):
    c = criterion(12, "A_mu symbol bounds and dissipation positivity", 10.0)
    g = TorusGrid(2, 32)
    worst = 0.0
    for a_mu in np.linspace(0.0, 0.5, 6):
        for angle in np.linspace(0.0, math.pi, 5):
            for eps in (0.0, 0.05, 0.2):
                # a_mu = 2 delta / (2 mu + lambda) with mu = 1, lambda = 0
                spec = AnisotropySpec(1.0, 0.0, 2, ((0.0, _trace_free(a_mu, angle)),), mollifier_eps=eps)
                worst = max(worst, symbol_bounds(g, spec)[0])
    rng = np.random.default_rng(1212)
    mu, least = 0.5, np.inf
    for frac in (0.0, 0.5, 0.9, 0.99):
        for angle in (0.0, 0.7, 2.0):
            spec = AnisotropySpec(mu, 0.0, 2, ((0.0, _trace_free(frac * mu, angle)),))
            for _ in range(5):
                u = VectorField(g, random_band_limited(g, rng, 8.0, components=2))
                least = min(least, dissipation(u, spec, 0.0) / g.integrate(np.sum(u.values**2, axis=0)))
    c.measured(max_symbol=worst, min_dissipation=float(least))
    assert worst <= 1.0
    assert least > 0
    c.finish()


def _family_run(out: Path, threads: int) -> None:
    args = ["--threads", str(threads)]
    assert cli.main(["run", "--config", str(FAMILY_CONFIG), "--out", str(out)] + args) == cli.EXIT_OK
    assert cli.main(["diagnose", str(out)] + args) == cli.EXIT_OK


@pytest.fixture(scope="module")
def family_dirs(tmp_path_factory):
    base = tmp_path_factory.mktemp("family")
    made = {}

    def get(threads):
        if threads not in made:
            start = time.perf_counter()
            out = base / f"threads_{threads}"
            _family_run(out, threads)
            made[threads] = (out, time.perf_counter() - start)
        return made[threads]

    return get


def _member_fits(trend_text: str) -> dict:
    fits = {}
    for block in re.split(r"\n(?=\[member_)", trend_text):
        m = re.match(r"\[member_(\d+)\]", block)
        if not m:
            continue
        vals = dict(re.findall(r"^(\w+) = (.+)$", block, flags=re.M))
        fits[int(m.group(1))] = (float(vals["theta"]), float(vals["residual"]))
    return fits


def test_c13_compactness_trend(criterion, family_dirs):
    c = criterion(13, "compactness trend along the alpha ladder", 900.0)
    out, _ = family_dirs(1)
    header, rows = read_csv(out / "family.csv")
    col = {name: i for i, name in enumerate(header)}
    table = {}
    for r in rows:
        table.setdefault(float(r[col["h0"]]), {})[int(r[col["member"]])] = float(r[col["osc_p1_normalized"]])
    worst = 0.0
    for by_member in table.values():
        v = [by_member[j] for j in sorted(by_member)]
        assert len(v) == 4
        worst = max(worst, max(b / a for a, b in zip(v, v[1:])))
    fits = _member_fits((out / "trend.txt").read_text())
    thetas = [t for t, _ in fits.values()]
    residuals = [r for _, r in fits.values()]
    c.measured(max_successive_ratio=worst, theta_min=min(thetas), theta_max=max(thetas), residual_max=max(residuals))
    assert len(fits) == 4
    assert worst <= 1.1
    assert min(thetas) > 0
    assert max(residuals) < 0.2
    c.finish()


def test_c14_transport_demo(criterion):
    c = criterion(14, "linear-transport demo", 300.0)
    result = linear_transport_demo(TransportDemoConfig())
    c.measured(theta=result.fit.theta, residual=result.fit.residual)
    assert 0.5 <= result.fit.theta <= 2.0
    c.finish()


def test_c15_thread_determinism(criterion, family_dirs):
    c = criterion(15, "byte-identical outputs across thread counts", 900.0)
    one, _ = family_dirs(1)
    eight, _ = family_dirs(8)
    files_one = sorted(p.relative_to(one) for p in one.rglob("*") if p.is_file())
    files_eight = sorted(p.relative_to(eight) for p in eight.rglob("*") if p.is_file())
    assert files_one == files_eight
    differing = [str(p) for p in files_one if not filecmp.cmp(one / p, eight / p, shallow=False)]
    c.measured(files=len(files_one), differing=len(differing))
    assert not differing, differing
    c.finish()
