import os
import textwrap
from pathlib import Path

import numpy as np
import pytest

from nslab.cli import EXIT_BLOWUP, EXIT_FAILURE, EXIT_HYPOTHESIS, EXIT_OK, load_trajectory, main, resolve_threads
from nslab.config import ConfigError, ExperimentPlan, load_config, parse_config
from nslab.io import read_csv
from nslab.solver import BudgetSeries


def _write(tmp_path, text, name="c.toml"):
    p = tmp_path / name
    p.write_text(textwrap.dedent(text))
    return p


SMALL = """
[grid]
d = 2
n = 16

[pressure]
kind = "oscillatory_perturbation"
gamma = 3.0
frequency = 12.0

[stress]
mu = 0.05
lam = 0.0

[solver]
dt = 0.01
t_end = 0.04
snapshot_every = 2

[initial]
kind = "random"
rho_amplitude = 0.3
u_amplitude = 0.2
kmax = 3.0
"""


class TestConfig:
    def test_reference_configs_parse(self, configs_dir):
        for p in sorted(configs_dir.glob("*.toml")):
            load_config(p)

    def test_family_plan(self, configs_dir):
        cfg = load_config(configs_dir / "oscillatory_family.toml")
        assert cfg.plan.is_family
        np.testing.assert_allclose(cfg.plan.alpha, [0.005 * 4.0**-j for j in range(4)])
        assert cfg.law.kind == "oscillatory_perturbation"

    def test_unknown_key_is_error(self, tmp_path):
        p = _write(tmp_path, SMALL.replace("mu = 0.05", "mu = 0.05\nviscosity = 1.0"))
        with pytest.raises(ConfigError, match="viscosity"):
            load_config(p)

    def test_unknown_section_is_error(self, tmp_path):
        with pytest.raises(ConfigError):
            load_config(_write(tmp_path, SMALL + "\n[extras]\nx = 1\n"))

    def test_mistyped_value(self, tmp_path):
        with pytest.raises(ConfigError):
            load_config(_write(tmp_path, SMALL.replace("n = 16", 'n = "16"')))

    def test_declared_exponent_override(self, tmp_path):
        cfg = load_config(_write(tmp_path, SMALL.replace("frequency = 12.0", "frequency = 12.0\ngamma_tilde = 4.5")))
        assert cfg.law.gamma_tilde == 4.5

    def test_syntax_error(self, tmp_path):
        with pytest.raises(ConfigError):
            load_config(_write(tmp_path, "[grid\n"))

    def test_truncated_law(self, tmp_path):
        text = """
        [grid]
        d = 1
        n = 16
        [pressure]
        kind = "quasi_monotone_truncation"
        c0 = 1.5
        C = 2.0
        [pressure.base]
        kind = "van_der_waals_isothermal"
        """
        assert load_config(_write(tmp_path, text)).law.kind == "quasi_monotone_truncation"

    def test_anisotropic_stress(self, tmp_path):
        text = SMALL.replace("lam = 0.0", "lam = 0.0\ndelta = [[0.01, 0.0], [0.0, -0.01]]")
        cfg = load_config(_write(tmp_path, text))
        assert cfg.stress.delta_norm == pytest.approx(0.01)

    def test_empty_ladder_rejected(self):
        with pytest.raises(ConfigError):
            ExperimentPlan((), (0.25,), (0.5,), (1.0,))

    def test_seed_changes_random_initial_data(self, tmp_path):
        cfg = load_config(_write(tmp_path, SMALL))
        a = cfg.initial_state().rho.values
        b = cfg.with_seed(1).initial_state().rho.values
        assert not np.array_equal(a, b)
        np.testing.assert_array_equal(a, cfg.initial_state().rho.values)


class TestThreads:
    def test_env_fallback(self, monkeypatch):
        monkeypatch.setenv("NSLAB_THREADS", "3")
        assert resolve_threads(None) == 3
        assert resolve_threads(2) == 2

    def test_default(self, monkeypatch):
        monkeypatch.delenv("NSLAB_THREADS", raising=False)
        assert resolve_threads(None) == 1

    @pytest.mark.parametrize("value", ["zero", "0"])
    def test_invalid_env(self, monkeypatch, value):
        monkeypatch.setenv("NSLAB_THREADS", value)
        with pytest.raises(ConfigError):
            resolve_threads(None)


class TestCommands:
    def test_check_exit_codes(self, configs_dir, capsys):
        assert main(["check", "--config", str(configs_dir / "oscillatory_family.toml")]) == EXIT_OK
        assert main(["check", "--config", str(configs_dir / "subcritical.toml")]) == EXIT_HYPOTHESIS

    def test_stationary_run_has_flat_budget(self, configs_dir, tmp_path):
        out = tmp_path / "st"
        assert main(["run", "--config", str(configs_dir / "stationary.toml"), "--out", str(out)]) == EXIT_OK
        b = BudgetSeries.from_csv(out / "budget.csv")
        for col in ("mass", "ekin", "epot", "diss", "work"):
            assert np.ptp(b.array(col)) == 0.0

    def test_subcritical_gate(self, configs_dir, tmp_path, capsys):
        out = tmp_path / "sub"
        code = main(["run", "--config", str(configs_dir / "subcritical.toml"), "--out", str(out)])
        assert code == EXIT_HYPOTHESIS
        assert "isotropic_growth_exponent" in capsys.readouterr().err
        assert not (out / "budget.csv").exists()

    def test_force_overrides_gate(self, configs_dir, tmp_path):
        out = tmp_path / "sub"
        assert main(["run", "--config", str(configs_dir / "subcritical.toml"), "--out", str(out), "--force"]) == EXIT_OK
        assert (out / "budget.csv").exists()

    def test_blow_up_exit_code(self, tmp_path):
        p = _write(tmp_path, SMALL.replace("t_end = 0.04", "t_end = 0.04\nu_cap = 0.01"))
        assert main(["run", "--config", str(p), "--out", str(tmp_path / "o")]) == EXIT_BLOWUP
        assert (tmp_path / "o" / "budget.csv").exists()

    def test_config_error_exit_code(self, tmp_path, capsys):
        p = _write(tmp_path, SMALL.replace("[stress]", "[stress]\nbogus = 1"))
        assert main(["run", "--config", str(p), "--out", str(tmp_path / "o")]) == EXIT_FAILURE
        assert "bogus" in capsys.readouterr().err

    def test_usage_error_is_runtime_failure(self):
        with pytest.raises(SystemExit) as exc:
            main(["run"])
        assert exc.value.code == EXIT_FAILURE

    def test_run_then_diagnose(self, tmp_path):
        p = _write(tmp_path, SMALL + "\n[plan]\nh0 = [0.25, 0.125, 0.0625, 0.03125]\n")
        out = tmp_path / "o"
        assert main(["run", "--config", str(p), "--out", str(out)]) == EXIT_OK
        states = load_trajectory(out)
        assert [s.t for s in states] == pytest.approx([0.0, 0.02, 0.04])
        assert main(["diagnose", str(out)]) == EXIT_OK
        header, rows = read_csv(out / "diagnostics.csv")
        assert header[:3] == ["t", "h0", "kernel_norm"]
        assert len(rows) == 12
        assert "theta" in (out / "fits.txt").read_text()

    def test_diagnose_single_snapshot_has_no_fit(self, tmp_path):
        p = _write(tmp_path, SMALL.replace("t_end = 0.04", "t_end = 0.0").replace("snapshot_every = 2", "snapshot_every = 0"))
        out = tmp_path / "o"
        assert main(["run", "--config", str(p), "--out", str(out)]) == EXIT_OK
        cfg2 = _write(tmp_path, SMALL + "\n[plan]\nh0 = [0.25, 0.125]\n", "d.toml")
        assert main(["diagnose", str(out), "--config", str(cfg2)]) == EXIT_OK
        _, rows = read_csv(out / "diagnostics.csv")
        assert len(rows) == 2
        assert (out / "fits.txt").read_text() == ""

    def test_diagnose_empty_trajectory(self, tmp_path):
        (tmp_path / "empty").mkdir()
        assert main(["diagnose", str(tmp_path / "empty"), "--config", str(_write(tmp_path, SMALL))]) == EXIT_FAILURE

    def test_weights_output(self, configs_dir, tmp_path):
        out = tmp_path / "w"
        assert main(["run", "--config", str(configs_dir / "weights_d1.toml"), "--out", str(out)]) == EXIT_OK
        header, rows = read_csv(out / "weights.csv")
        assert header[0] == "lambda_pen"
        assert {r[0] for r in rows} == {1.0, 4.0}

    def test_small_family_is_thread_independent(self, tmp_path):
        p = _write(tmp_path, SMALL + "\n[plan]\nalpha = [0.01, 0.0025]\nh0 = [0.25, 0.125, 0.0625, 0.03125]\n")
        outs = []
        for threads in ("1", "4"):
            out = tmp_path / f"t{threads}"
            assert main(["run", "--config", str(p), "--out", str(out), "--threads", threads]) == EXIT_OK
            assert main(["diagnose", str(out), "--threads", threads]) == EXIT_OK
            outs.append(out)
        files = sorted(f.relative_to(outs[0]) for f in outs[0].rglob("*") if f.is_file())
        assert Path("alpha_01/budget.csv") in files and Path("trend.txt") in files
        for f in files:
            assert (outs[0] / f).read_bytes() == (outs[1] / f).read_bytes(), f
