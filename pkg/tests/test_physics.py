import math

import mpmath as mp
import numpy as np
import pytest
from scipy import integrate
from hypothesis import given
from hypothesis import strategies as st

from scatterct import physics
from scatterct.physics import (
    EnergyBinning, Spectrum, band_intensity, compton_shift, f_kn_total, kn_differential, kramers_spectrum, mu_at,
    photoelectric_factor,
)

energies = st.floats(0.5, 1000.0)
angles = st.floats(0.0, math.pi)


def mp_f_kn(e_kev, dps=50):
    with mp.workdps(dps):
        g = mp.mpf(e_kev) / 511
        lg = mp.log(1 + 2 * g)
        return (1 + g) / g**2 * (2 * (1 + g) / (1 + 2 * g) - lg / g) + lg / (2 * g) - (1 + 3 * g) / (1 + 2 * g) ** 2


class TestKleinNishina:
    @pytest.mark.parametrize("e", [0.01, 1.0, 5.0, 10.2, 10.3, 20.0, 60.0, 120.0, 511.0, 2000.0])
    def test_total_matches_high_precision(self, e):
        assert f_kn_total(e) == pytest.approx(float(mp_f_kn(e)), rel=1e-12)

    def test_thomson_limit(self):
        assert f_kn_total(0.001) == pytest.approx(4 / 3, abs=1e-4)

    def test_decreasing_over_detector_band(self):
        e = np.linspace(20, 120, 101)
        assert np.all(np.diff(f_kn_total(e)) < 0)
        assert f_kn_total(60.0) > f_kn_total(120.0)

    def test_branches_agree_at_switch(self):
        e = physics.SERIES_GAMMA * physics.M_E_C2_KEV
        below, above = f_kn_total(e * (1 - 1e-9)), f_kn_total(e * (1 + 1e-9))
        assert below == pytest.approx(above, rel=1e-10)

    def test_vector_matches_scalar(self):
        e = np.array([3.0, 20.0, 60.0, 511.0])
        assert np.allclose(f_kn_total(e), [f_kn_total(x) for x in e], rtol=0, atol=0)

    def test_forward_differential_is_re_squared(self):
        for e in (20.0, 100.0, 511.0):
            assert kn_differential(e, 0.0) == pytest.approx(physics.R_E_CM**2, rel=1e-14)

    def test_backscatter_value(self):
        g = 100 / 511
        expect = physics.R_E_CM**2 / 2 * (1 + 2 * g) ** -2 * (2 + 4 * g**2 / (1 + 2 * g))
        assert kn_differential(100.0, math.pi) == pytest.approx(expect, rel=1e-13)

    @pytest.mark.parametrize("e", [20.0, 60.0, 140.0])
    def test_sphere_integral_matches_total(self, e):
        # composite Simpson in cos(theta) on 10^4 + 1 nodes
        x = np.linspace(-1.0, 1.0, 10_001)
        integral = 2 * np.pi * integrate.simpson(kn_differential(e, np.arccos(x)), x=x)
        assert integral == pytest.approx(2 * np.pi * physics.R_E_CM**2 * f_kn_total(e), rel=1e-3)

    @given(energies, angles)
    def test_differential_positive_and_peaked_forward(self, e, theta):
        v = kn_differential(e, theta)
        assert v > 0
        assert v <= kn_differential(e, 0.0) * (1 + 1e-12)

    def test_rejects_bad_domain(self):
        with pytest.raises(ValueError):
            f_kn_total(0.0)
        with pytest.raises(ValueError):
            kn_differential(50.0, 4.0)


class TestComptonShift:
    def test_backscatter_100kev(self):
        assert compton_shift(100.0, math.pi) == pytest.approx(71.87, abs=0.01)
        assert compton_shift(100.0, math.pi) == pytest.approx(100 / (1 + 200 / 511), rel=1e-14)

    def test_right_angle(self):
        assert compton_shift(100.0, math.pi / 2) == pytest.approx(83.63, abs=0.01)

    def test_forward_is_elastic(self):
        assert compton_shift(87.5, 0.0) == 87.5

    @given(energies, angles, angles)
    def test_monotone_in_angle(self, e, a, b):
        lo, hi = sorted((a, b))
        assert compton_shift(e, hi) <= compton_shift(e, lo)
        assert 0 < compton_shift(e, hi) <= e

    @given(energies, energies, st.floats(0.01, math.pi))
    def test_shift_grows_with_energy(self, e1, e2, theta):
        lo, hi = sorted((e1, e2))
        assert lo - compton_shift(lo, theta) <= hi - compton_shift(hi, theta) + 1e-12 * hi


class TestMaterialModel:
    def test_photoelectric_reference(self):
        assert mu_at(0.0, 0.5439, 20.0) == pytest.approx(0.5439, rel=1e-15)
        assert mu_at(0.0, 0.4134, 40.0) == pytest.approx(0.4134 / 8, rel=1e-15)
        assert photoelectric_factor(20.0) == 1.0

    def test_water_compton_calibration(self):
        assert mu_at(1.0, 0.0, 60.0) == pytest.approx(0.1803, rel=1e-12)

    def test_pmma_against_tabulated_total(self):
        # NIST XCOM, PMMA at 60 keV: total mass attenuation 0.1924 cm^2/g
        xcom = 0.1924 * 1.18
        assert mu_at(1.18, 0.3263, 60.0) == pytest.approx(xcom, rel=0.15)

    @given(st.floats(0, 3), st.floats(0, 1), st.floats(0, 3), st.floats(0, 1), st.floats(0.1, 4), st.floats(20, 120))
    def test_superposition(self, r1, p1, r2, p2, c, e):
        lhs = mu_at(r1 + c * r2, p1 + c * p2, e)
        rhs = mu_at(r1, p1, e) + c * mu_at(r2, p2, e)
        assert lhs == pytest.approx(rhs, rel=1e-12, abs=1e-15)

    def test_rejects_negative(self):
        with pytest.raises(ValueError):
            mu_at(-1.0, 0.0, 60.0)


class TestSpectraAndBins:
    def test_flat_band(self):
        spec = Spectrum(np.arange(1.0, 141.0), np.ones(140), 1.0)
        assert band_intensity(spec, 57.5, 62.5) == pytest.approx(5.0, rel=1e-15)

    def test_full_range_sum_is_total(self):
        spec = kramers_spectrum()
        bins = EnergyBinning.from_range(0.0, 145.0, 5.0)
        total = sum(band_intensity(spec, lo, lo + 5.0) for lo in bins.edges[:-1])
        assert total == pytest.approx(spec.total, rel=1e-12)
        assert spec.total == pytest.approx(1e6, rel=1e-12)

    def test_single_bin_direct_sum(self):
        spec = kramers_spectrum()
        inside = spec.intensities[(spec.energies_kev >= 59.5) & (spec.energies_kev <= 60.5)]
        assert band_intensity(spec, 59.5, 60.5) == pytest.approx(inside.sum(), rel=1e-14)

    @given(st.lists(st.floats(20.0, 120.0), min_size=1, max_size=6))
    def test_additive_over_partitions(self, cuts):
        spec = kramers_spectrum(140.0, 1.0)
        edges = [20.0] + sorted(cuts) + [120.0]
        parts = sum(band_intensity(spec, a, b) for a, b in zip(edges, edges[1:]))
        assert parts == pytest.approx(band_intensity(spec, 20.0, 120.0), rel=1e-12)

    def test_binning_layout(self):
        b = EnergyBinning.from_range(20.0, 120.0, 1.0)
        assert b.n == 100 and b.centers_kev[0] == 20.5 and b.centers_kev[-1] == 119.5

    def test_half_open_assignment(self):
        b = EnergyBinning.from_range(20.0, 120.0, 5.0)
        assert b.assign([20.0, 24.999, 25.0, 119.999, 120.0, 19.99]).tolist() == [0, 0, 1, 19, -1, -1]

    @given(st.lists(st.floats(0.0, 200.0), min_size=1, max_size=200))
    def test_window_partition_invariant_to_bin_width(self, e_out):
        # each in-range energy is counted by exactly one bin at every width
        counts = []
        for w in (1.0, 2.0, 5.0, 10.0, 20.0, 25.0, 50.0, 100.0):
            m = EnergyBinning.from_range(20.0, 120.0, w).assign(e_out)
            counts.append(int(np.sum(np.bincount(m[m >= 0], minlength=int(100 / w)))))
        assert len(set(counts)) == 1
        assert counts[0] == sum(20.0 <= e < 120.0 for e in e_out)

    def test_spectrum_csv_round_trip(self, tmp_path):
        f = tmp_path / "s.csv"
        f.write_text("energy_keV,intensity\n10,1\n11,2\n12,0\n")
        s = Spectrum.from_csv(f)
        assert s.bin_width_kev == 1.0 and s.intensities.tolist() == [1.0, 2.0, 0.0]
        f.write_text("e,i\n10,1\n")
        with pytest.raises(ValueError):
            Spectrum.from_csv(f)
