import numpy as np
import pytest
from hypothesis import given, strategies as st

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
from nslab.io import read_csv, read_snapshot, write_csv, write_snapshot


def _field(grid, seed, kmax=None):
    rng = np.random.default_rng(seed)
    return ScalarField(grid, random_band_limited(grid, rng, kmax or grid.n / 3))


class TestTorusGrid:
    @pytest.mark.parametrize("d,n", [(1, 8), (2, 16), (3, 8)])
    def test_shapes(self, d, n):
        g = TorusGrid(d, n)
        assert g.shape == (n,) * d
        assert g.spectral_shape == (n,) * (d - 1) + (n // 2 + 1,)
        assert g.cell_volume == pytest.approx(n**-d)

    @pytest.mark.parametrize("d,n", [(0, 8), (4, 8), (2, 7)])
    def test_rejects_bad_sizes(self, d, n):
        with pytest.raises(ValueError):
            TorusGrid(d, n)

    def test_distance_is_minimal_image(self):
        g = TorusGrid(1, 8)
        np.testing.assert_allclose(g.distance, [0, 1, 2, 3, 4, 3, 2, 1] / np.float64(8))

    def test_integral_of_constant(self):
        g = TorusGrid(2, 16)
        assert g.integrate(np.full(g.shape, 3.0)) == pytest.approx(3.0, rel=1e-15)

    def test_fft_roundtrip(self, rng):
        g = TorusGrid(2, 32)
        a = rng.standard_normal(g.shape)
        np.testing.assert_allclose(g.ifft(g.fft(a)), a, atol=1e-13)


class TestFields:
    def test_values_are_read_only(self):
        f = ScalarField(TorusGrid(1, 8), np.zeros(8))
        with pytest.raises(ValueError):
            f.values[0] = 1.0

    def test_rejects_non_finite(self):
        with pytest.raises(ValueError):
            ScalarField(TorusGrid(1, 8), np.full(8, np.nan))

    def test_rejects_wrong_shape(self):
        with pytest.raises(ValueError):
            VectorField(TorusGrid(2, 8), np.zeros((1, 8, 8)))


class TestSpectralCalculus:
    def test_gradient_of_sine(self):
        g = TorusGrid(2, 32)
        f = ScalarField.from_function(g, lambda x, y: np.sin(2 * np.pi * 3 * x))
        grad = gradient(f).values
        np.testing.assert_allclose(grad[0], 6 * np.pi * np.cos(6 * np.pi * g.coords[0]), atol=1e-11)
        np.testing.assert_allclose(grad[1], 0.0, atol=1e-12)

    def test_laplacian_eigenfunction(self):
        g = TorusGrid(2, 16)
        f = ScalarField.from_function(g, lambda x, y: np.cos(2 * np.pi * (x + 2 * y)))
        np.testing.assert_allclose(laplacian(f).values, -(2 * np.pi) ** 2 * 5 * f.values, atol=1e-10)

    @given(st.integers(0, 2**31 - 1))
    def test_divergence_of_gradient_is_laplacian(self, seed):
        g = TorusGrid(2, 16)
        f = _field(g, seed)
        np.testing.assert_allclose(divergence(gradient(f)).values, laplacian(f).values, atol=1e-9)

    @given(st.integers(0, 2**31 - 1))
    def test_inverse_laplacian_roundtrip(self, seed):
        g = TorusGrid(2, 16)
        f = _field(g, seed)
        back = laplacian(inverse_laplacian_zero_mean(f)).values
        np.testing.assert_allclose(back, f.values - f.mean(), atol=1e-12)

    @given(st.integers(0, 2**31 - 1))
    def test_parseval(self, seed):
        g = TorusGrid(2, 16)
        f = _field(g, seed, kmax=16)
        assert spectral_energy(f) == pytest.approx(f.norm(2) ** 2, rel=1e-12)

    def test_multiplier_zero_mode_is_explicit(self):
        g = TorusGrid(1, 16)
        f = ScalarField(g, np.full(16, 2.0))
        out = apply_multiplier(lambda k: 1.0 / k, f, at_zero=0.5)
        np.testing.assert_allclose(out.values, 1.0)

    def test_convolution_with_delta(self, rng):
        g = TorusGrid(2, 8)
        delta = np.zeros(g.shape)
        delta[0, 0] = 1.0 / g.cell_volume
        f = ScalarField(g, rng.standard_normal(g.shape))
        np.testing.assert_allclose(convolve(ScalarField(g, delta), f).values, f.values, atol=1e-12)

    def test_band_limited_has_no_nyquist_content(self, rng):
        g = TorusGrid(2, 16)
        a = random_band_limited(g, rng, 100.0)
        assert np.max(np.abs(g.fft(a)[g.nyquist])) < 1e-10


class TestIO:
    def test_snapshot_roundtrip(self, tmp_path, rng):
        comps = [rng.standard_normal((8, 8)) for _ in range(3)]
        write_snapshot(tmp_path / "s.nsf", 2, 8, comps)
        d, n, values = read_snapshot(tmp_path / "s.nsf")
        assert (d, n) == (2, 8)
        np.testing.assert_array_equal(values, np.stack(comps))

    def test_snapshot_header_layout(self, tmp_path):
        write_snapshot(tmp_path / "s.nsf", 1, 4, [np.arange(4.0)])
        raw = (tmp_path / "s.nsf").read_bytes()
        assert raw[:4] == b"NSF1"
        assert int.from_bytes(raw[4:8], "little") == 1
        assert len(raw) == 16 + 4 * 8

    def test_bad_magic(self, tmp_path):
        (tmp_path / "s.nsf").write_bytes(b"XXXX" + bytes(12))
        with pytest.raises(ValueError):
            read_snapshot(tmp_path / "s.nsf")

    @given(st.lists(st.floats(allow_nan=False, allow_infinity=False, width=64), min_size=1, max_size=20))
    def test_csv_roundtrip_is_lossless(self, values):
        import tempfile
        from pathlib import Path

        with tempfile.TemporaryDirectory() as d:
            p = Path(d) / "t.csv"
            write_csv(p, ("i", "v"), [(i, v) for i, v in enumerate(values)])
            header, rows = read_csv(p)
        assert header == ["i", "v"]
        assert [float(r[1]) for r in rows] == values
