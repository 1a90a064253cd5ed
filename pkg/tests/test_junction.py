import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from stmlab.junction import (
    BARRIER_CONSTANT, GAP_CONSTANT, CrashError, JunctionQuery, Site, SiteKind, SurfaceModel,
    barrier_from_slope, barrier_from_slope_exact, capacitive_current, current, default_site,
    gap_for_current, harmonic_amplitudes, log_current_slope, sample_site, small_signal_limit,
    tunneling_current,
)
from stmlab.dsp import demodulate

from .conftest import fourier_coefficients


def _site(phi=4.0, conduct=(0.0, 2e-5, 0.0, 4e-6), height=0.0):
    return Site(SiteKind.HSi, height, phi, tuple(conduct))


def test_sample_site_node_identity():
    s = SurfaceModel.uniform(4, 4)
    s.height[2, 1] = 1.3
    s.phi[2, 1] = 3.0
    q = sample_site(s, 1 * s.a, 2 * s.a)
    assert q.height == pytest.approx(1.3)
    assert q.phi == pytest.approx(3.0)


def test_sample_site_midpoint_and_cell():
    s = SurfaceModel.uniform(2, 2, a=1.0)
    s.height[:] = [[0.0, 1.0], [2.0, 3.0]]
    # midway between (0,0)=0 and (0,1)=1
    assert sample_site(s, 0.5, 0.0).height == pytest.approx(0.5)
    # bilinear by hand at fx=0.25, fy=0.75: 0*.1875 + 1*.0625 + 2*.5625 + 3*.1875
    assert sample_site(s, 0.25, 0.75).height == pytest.approx(1.75)


def test_sample_site_out_of_bounds():
    s = SurfaceModel.uniform(4, 4)
    with pytest.raises(IndexError):
        sample_site(s, -1.0, 0.0)


def test_sample_site_kind_from_nearest():
    s = SurfaceModel.uniform(4, 4, a=1.0)
    s.desorb(1, 1)
    assert sample_site(s, 1.1, 0.9).kind is SiteKind.DanglingBond
    assert sample_site(s, 1.6, 0.9).kind is SiteKind.HSi


def test_tunneling_current_cases():
    zero = _site(conduct=(0.0,))
    assert tunneling_current(JunctionQuery(0, 0, 3.0, -2.5), zero) == 0.0
    s = _site()
    assert tunneling_current(JunctionQuery(0, 0, 0.0, -2.5), s) == pytest.approx(float(s.L(-2.5)), rel=1e-15)
    with pytest.raises(CrashError):
        tunneling_current(JunctionQuery(0, 0, -0.01, -2.5), s)


def test_twenty_percent_per_tenth_angstrom():
    # ~20% current change per 0.1 A gap change: solve for phi, then evaluate forward
    phi = (math.log(0.8) / (-GAP_CONSTANT * 0.1)) ** 2
    assert phi == pytest.approx(4.74, abs=0.01)
    s = _site(phi=4.74)
    i0 = tunneling_current(JunctionQuery(0, 0, 5.0, 1.0), s)
    i1 = tunneling_current(JunctionQuery(0, 0, 5.1, 1.0), s)
    assert i1 / i0 == pytest.approx(0.8, rel=1e-3)


def test_log_current_slope_values():
    assert log_current_slope(4.0) == pytest.approx(-2.05)
    assert log_current_slope(1.0) == pytest.approx(-1.025)
    assert log_current_slope(4.74) == pytest.approx(math.log(0.8) / 0.1, rel=1e-3)
    with pytest.raises(ValueError):
        log_current_slope(0.0)


def test_barrier_from_slope_values():
    assert barrier_from_slope(-2.05) == pytest.approx(4.001, rel=1e-4)
    assert barrier_from_slope(0.0) == 0.0
    assert barrier_from_slope(-1.025) == pytest.approx(1.0002, rel=1e-4)
    assert BARRIER_CONSTANT * GAP_CONSTANT**2 == pytest.approx(1.000195, rel=1e-6)
    assert barrier_from_slope_exact(-2.05) == pytest.approx(4.0, rel=1e-12)


def test_capacitive_current_values():
    w = 2 * np.pi * 2000
    assert capacitive_current(1e-12, 0.0, w, 0.3) == 0.0
    assert capacitive_current(1e-12, 2.5, w, 0.0) == pytest.approx(31.4159e-9, rel=1e-4)
    assert abs(capacitive_current(1e-12, 2.5, w, np.pi / (2 * w))) < 1e-20


def test_capacitive_current_is_quadrature():
    fs, f = 1e5, 2000.0
    t = np.arange(int(0.5 * fs)) / fs
    y = capacitive_current(0.5e-12, 2.5, 2 * np.pi * f, t)
    ph = demodulate(y, fs, f, (1,), 4, 200.0)[0]
    amp = 0.5e-12 * 2.5 * 2 * np.pi * f
    assert abs(ph.real) < 1e-3 * amp
    assert ph.imag == pytest.approx(amp, rel=1e-2)


def test_harmonics_linear_conductance():
    s = _site(conduct=(0.0, 3e-6))
    h = harmonic_amplitudes(s, 2.0, 0.5, 0.1, 3)
    assert h[1] == pytest.approx(0.1 * 3e-6 * math.exp(-GAP_CONSTANT * 2.0 * 2.0))
    assert h[2] == pytest.approx(0.0, abs=1e-25)
    assert h[3] == pytest.approx(0.0, abs=1e-25)


def test_harmonics_cubic_closed_form():
    s = _site(phi=1.0, conduct=(0, 0, 0, 1.0))
    h = harmonic_amplitudes(s, 0.0, 1.0, 0.1, 3)
    assert h[1] == pytest.approx(0.1 * (3 + 0.1**2 * 6 / 8), rel=1e-12)
    assert h[1] == pytest.approx(0.30075, rel=1e-12)
    ref = fourier_coefficients(lambda V: V**3, 1.0, 0.1, 3)
    assert np.allclose(h, ref, rtol=1e-9, atol=1e-14)


def test_small_signal_limit_matches_fourier():
    s = default_site()
    vm = 1e-3
    for n in (1, 2, 3):
        ref = fourier_coefficients(lambda V: current(s.conduct, s.phi, 6.0, V), -1.0, vm, 3)
        assert abs(ref[n]) / vm**n == pytest.approx(small_signal_limit(s, 6.0, -1.0, n), rel=1e-2)


def test_gap_for_current_roundtrip():
    s = default_site()
    d = gap_for_current(s, -2.5, 0.5e-9)
    assert abs(current(s.conduct, s.phi, d, -2.5)) == pytest.approx(0.5e-9, rel=1e-12)


def test_vacancy_must_not_conduct():
    with pytest.raises(ValueError):
        Site(SiteKind.Vacancy, 0.0, 4.0, (0.0, 1e-6))
    with pytest.raises(ValueError):
        Site(SiteKind.HSi, 0.0, 0.0, (0.0, 1e-6))


def test_surface_validation():
    with pytest.raises(ValueError):
        SurfaceModel.uniform(2, 2, a=0.0)
    with pytest.raises(ValueError):
        SurfaceModel.uniform(2, 2, i_min=0.0)


def test_desorb_applies_factors():
    s = SurfaceModel.uniform(3, 3)
    phi0, c0 = s.phi[1, 1], s.conduct[1, 1].copy()
    s.desorb(1, 1)
    assert s.phi[1, 1] == pytest.approx(0.6 * phi0)
    assert np.allclose(s.conduct[1, 1], 5 * c0)


phis = st.floats(0.5, 8.0)
gaps = st.floats(0.0, 15.0)


@given(phis, gaps, gaps, st.floats(-3.0, -0.2))
def test_log_difference_exact(phi, d1, d2, V):
    s = _site(phi=phi)
    i1 = tunneling_current(JunctionQuery(0, 0, d1, V), s)
    i2 = tunneling_current(JunctionQuery(0, 0, d2, V), s)
    assert math.log(abs(i2)) - math.log(abs(i1)) == pytest.approx(-GAP_CONSTANT * math.sqrt(phi) * (d2 - d1), abs=1e-9)


@given(phis)
def test_barrier_roundtrip(phi):
    assert barrier_from_slope(log_current_slope(phi)) == pytest.approx(phi, rel=3e-4)


@settings(max_examples=60, deadline=None)
@given(
    st.lists(st.floats(-1e-5, 1e-5), min_size=1, max_size=8),
    st.floats(-2.0, 2.0), st.floats(0.0, 1.0), st.floats(0.0, 8.0), st.floats(1.0, 6.0),
)
def test_harmonics_match_fourier_integration(coef, vdc, vm, delta, phi):
    s = _site(phi=phi, conduct=coef)
    h = harmonic_amplitudes(s, delta, vdc, vm, len(coef) + 1)
    ref = fourier_coefficients(lambda V: current(coef, phi, delta, V), vdc, vm, len(coef) + 1)
    scale = max(np.max(np.abs(ref)), 1e-300)
    assert np.max(np.abs(h - ref)) <= 1e-6 * scale
