import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from stmlab.control import (
    ControlError, GainAdapter, LBHEstimate, PIGains, PIState, adapt_gains, bandwidth_ki,
    check_modulation_frequency, closed_loop, critical_ki, default_grid, design_region, error_signal,
    hinf_ki, imaging_bandwidth, lbh_dc_gain_ratio, lbh_gap_modulation, peak_db, pi_shape, pi_step,
)
from stmlab.junction import Site, SiteKind, SurfaceModel
from stmlab.loop import Loop
from stmlab.plant import LinearSystem, resonant_mode

FS = 1e5
WC = 2 * np.pi * 500


def _plant(gain=1.0):
    G = resonant_mode(1000.0, 0.05)
    G.gain *= gain
    G.discretize(FS)
    return G


def _frf(G):
    # one-sample transport delay, as in the simulator below
    return lambda f: G.dfrf(f) * np.exp(-2j * np.pi * np.asarray(f) / FS)


def _simulate(G, gains, n=20000, r=1.0):
    """Discrete closed loop: y = G u[n-1], e = r - y, u = PI(e)."""
    st_ = PIState(clamp=1e12)
    G.reset()
    u, out = 0.0, np.empty(n)
    for k in range(n):
        e = r - G.step(u)
        u = pi_step(gains, st_, e, FS)
        out[k] = e
    return out


def test_pi_step_zero_error_constant():
    st_ = PIState(acc=0.3)
    assert [pi_step(PIGains(10.0, 100.0), st_, 0.0, FS) for _ in range(5)] == [0.3] * 5


def test_pi_step_jump_then_ramp():
    g = PIGains(50.0, 200.0)
    st_ = PIState(clamp=1e9)
    u = np.array([pi_step(g, st_, 1.0, FS) for _ in range(1001)])
    # Tustin integrator: first sample carries half a step of area
    assert u[0] == pytest.approx(g.k_i / g.omega_c + 0.5 * g.k_i / FS)
    assert np.diff(u) == pytest.approx(np.full(1000, g.k_i / FS))


def test_pi_step_clamp_freezes_integrator():
    g = PIGains(1000.0, 1e4)
    st_ = PIState(clamp=1.0)
    for _ in range(5000):
        pi_step(g, st_, 1.0, FS)
    assert st_.clamped and st_.u == 1.0
    acc = st_.acc
    assert acc <= 1.0
    # on reversal the output leaves the clamp at once (no wound-up integrator to unwind)
    u = pi_step(g, st_, -1.0, FS)
    assert u < 1.0
    unclamped = PIState(clamp=1e12)
    for _ in range(5000):
        pi_step(g, unclamped, 1.0, FS)
    assert unclamped.acc > 4.0 * acc


def test_error_signal_examples():
    R = 1e8
    assert error_signal(0.5e-9 * R, 0.5e-9, R) == pytest.approx(0.0, abs=1e-15)
    assert error_signal(1e-9 * R, 0.5e-9, R) == pytest.approx(-math.log(2))
    e0 = error_signal(0.0, 0.5e-9, R)
    assert math.isfinite(e0) and e0 == pytest.approx(math.log(0.5e-9 / 1e-15))
    assert error_signal(-1e-9 * R, 0.5e-9, R) == pytest.approx(-math.log(2))


def test_pi_shape_tustin_close_to_continuous_at_low_f():
    f = np.array([1.0, 10.0, 100.0])
    assert np.allclose(pi_shape(f, WC, FS), pi_shape(f, WC), rtol=1e-4)


def test_critical_ki_time_domain_dichotomy():
    G = _plant()
    kc = critical_ki(_frf(G), WC, default_grid(FS), FS)
    assert kc.bounded
    e_lo = _simulate(G, PIGains(0.9 * kc.k_i, WC))
    e_hi = _simulate(G, PIGains(1.1 * kc.k_i, WC))
    assert np.max(np.abs(e_lo[-2000:])) < 0.01
    assert np.max(np.abs(e_hi[-2000:])) > 1.0


def test_critical_ki_from_closed_loop_poles():
    # independent oracle: largest stable k_i from the discrete characteristic polynomial
    G = _plant()
    kc = critical_ki(_frf(G), WC, default_grid(FS), FS).k_i
    b, a = np.polynomial.polynomial.polyfromroots, None
    zd, pd, kd = G.zpk_discrete()
    nG = kd * np.poly(zd)
    dG = np.poly(pd)
    T = 1 / FS
    # C(z) = k [ (T/2)(z+1) + (z-1)/wc ] / (z-1)
    nC = np.array([T / 2 + 1 / WC, T / 2 - 1 / WC])
    dC = np.array([1.0, -1.0])

    def stable(k):
        den = np.polymul(np.polymul(dC, dG), [1.0, 0.0])  # extra z for the delay
        num = k * np.polymul(nC, nG)
        return np.max(np.abs(np.roots(np.polyadd(den, num)))) < 1

    assert stable(0.995 * kc) and not stable(1.005 * kc)


def test_critical_ki_unbounded_for_integrator_only():
    r = critical_ki(lambda f: np.ones_like(np.asarray(f), dtype=complex), WC, np.geomspace(1, 4e4, 2000))
    assert not r.bounded and math.isinf(r.k_i)


def test_critical_ki_scales_inversely_with_dc_gain():
    k1 = critical_ki(_frf(_plant(1.0)), WC, default_grid(FS), FS).k_i
    k2 = critical_ki(_frf(_plant(2.0)), WC, default_grid(FS), FS).k_i
    assert k2 == pytest.approx(k1 / 2, rel=1e-6)


@pytest.fixture(scope="module")
def loop_frf():
    lp = Loop(SurfaceModel.uniform(8, 8))
    return lambda f: lp.plant_frf(f, 1.0, 1.0)


def test_bandwidth_ki_within_band(loop_frf):
    wc = 2 * np.pi * 1e4
    b = bandwidth_ki(loop_frf, wc, 50.0, FS)
    assert b.feasible
    f = np.geomspace(0.5, 5000, 20000)
    m = np.abs(closed_loop(loop_frf, PIGains(b.k_i, wc), f, FS))
    bw = f[np.argmax(m < 1 / math.sqrt(2))]
    assert 50.0 <= bw * 1.001 and bw <= 1.2 * 50.0
    b2 = bandwidth_ki(loop_frf, wc, 100.0, FS)
    assert b2.k_i >= b.k_i


def test_hinf_ki_peak_at_limit(loop_frf):
    wc = 2 * np.pi * 1e4
    h = hinf_ki(loop_frf, wc, 3.0, FS)
    assert h.feasible
    assert peak_db(loop_frf, PIGains(h.k_i, wc), default_grid(FS), FS) == pytest.approx(3.0, abs=0.1)
    kc = critical_ki(loop_frf, wc, default_grid(FS), FS).k_i
    assert hinf_ki(loop_frf, wc, math.inf, FS).k_i == pytest.approx(kc)


def test_design_region_recommendation(loop_frf):
    grid = 2 * np.pi * np.array([3e3, 1e4, 3e4])
    reg = design_region(loop_frf, grid, 50.0, 3.0, FS)
    assert np.allclose(reg.ki_recommended, 0.5 * np.minimum(reg.ki_upper, reg.ki_hinf))
    assert np.array_equal(reg.nonempty, reg.ki_lower <= np.minimum(reg.ki_upper, reg.ki_hinf))
    assert reg.nonempty[1:].all()
    empty = design_region(loop_frf, grid[:1], 5000.0, 3.0, FS)
    assert not empty.nonempty.any()
    best = reg.best()
    assert best.k_i == pytest.approx(reg.ki_recommended.max())


def test_design_region_csv(tmp_path, loop_frf):
    reg = design_region(loop_frf, [2 * np.pi * 1e4], 50.0, 3.0, FS)
    p = tmp_path / "r.csv"
    reg.to_csv(p)
    rows = np.loadtxt(p, delimiter=",", skiprows=1, ndmin=2)
    assert rows.shape == (1, 5)
    assert open(p).readline().strip() == "omega_c,ki_upper,ki_lower,ki_hinf,ki_recommended"


def test_imaging_bandwidth_is_first_crossing(loop_frf):
    g = PIGains(3.0, 2 * np.pi * 1e4)
    bw = imaging_bandwidth(loop_frf, g, None, FS)
    assert abs(closed_loop(loop_frf, g, np.array([bw]), FS)[0]) == pytest.approx(1 / math.sqrt(2), rel=5e-3)


def test_modulation_frequency_rule():
    check_modulation_frequency(2000.0, 100.0, 9000.0)
    with pytest.raises(ControlError):
        check_modulation_frequency(50.0, 100.0, 9000.0)
    with pytest.raises(ControlError):
        check_modulation_frequency(4000.0, 100.0, 9000.0)


def test_adapt_gains_examples():
    g = PIGains(100.0, 1e3)
    assert adapt_gains(g, 2.0, 2.0).k_i == 100.0
    assert adapt_gains(g, 4.0, 2.0).k_i == pytest.approx(50.0)
    assert adapt_gains(g, 4.0, 2.0).omega_c == 1e3
    assert adapt_gains(g, LBHEstimate("dc_gain_ratio", 4.0, False), 2.0) is g
    assert adapt_gains(g, math.nan, 2.0) is g
    with pytest.raises(ControlError):
        PIGains(0.0, 1.0)


@given(st.floats(0.1, 1e4), st.floats(1e-3, 1e3), st.floats(1e-3, 1e3))
def test_adapt_gains_keeps_product(k, est, des):
    g = adapt_gains(PIGains(k, 100.0), est, des)
    assert g.k_i * est == pytest.approx(k * des, rel=1e-12)


def _engaged(phi=4.0, sp=0.5e-9):
    s = SurfaceModel.uniform(8, 8, site=Site(SiteKind.HSi, 0.0, phi, (0.0, 2e-5, 0.0, 4e-6)))
    lp = Loop(s)
    lp.set_setpoint(sp)
    lp.engage(1.0, 1.0)
    lp.run_for(0.01)
    return lp


def test_dc_gain_ratio_matches_plant_frf():
    lp = _engaged()
    e = lbh_dc_gain_ratio(lp)
    assert e.valid
    assert e.value == pytest.approx(abs(lp.plant_frf(1500.0, 1.0, 1.0)), rel=0.02)


def test_dc_gain_ratio_sqrt_phi_and_setpoint_invariance():
    ref = lbh_dc_gain_ratio(_engaged()).value
    assert lbh_dc_gain_ratio(_engaged(phi=1.0)).value / ref == pytest.approx(0.5, rel=0.02)
    for sp in (0.49e-9, 0.51e-9, 2e-9):
        assert lbh_dc_gain_ratio(_engaged(sp=sp)).value / ref == pytest.approx(1.0, rel=0.02)


def test_gap_modulation_open_loop_and_bias():
    lp = _engaged()
    lp.open()
    est = lbh_gap_modulation(lp)
    assert est.valid
    assert est.value == pytest.approx(1.025 * 2.0, rel=0.01)
    # homogeneous surface: spatially constant
    vals = []
    for x in (1.0, 1.5, 2.0):
        lp = _engaged()
        lp.open()
        lp.place(x, x)
        vals.append(lbh_gap_modulation(lp).value)
    assert np.ptp(vals) <= 0.02 * np.mean(vals)
    # with a stiff loop the dither is partly cancelled by the controller
    lp = _engaged()
    lp.set_gains(PIGains(3 * lp.gains.k_i, lp.gains.omega_c))
    biased = abs(lbh_gap_modulation(lp).value / (1.025 * 2.0) - 1)
    lp = _engaged()
    lp.set_gains(PIGains(3 * lp.gains.k_i, lp.gains.omega_c))
    ratio = abs(lbh_dc_gain_ratio(lp).value / abs(lp.plant_frf(1500.0, 1.0, 1.0)) - 1)
    assert biased > ratio
    assert biased > 0.01


def test_gain_adapter_window_geometry():
    lp = _engaged()
    ad = GainAdapter(lp, lp.gains)
    # whole tone periods and at least f_m / cutoff of them
    periods = ad.window * 1500.0 / lp.fs
    assert periods == pytest.approx(round(periods))
    assert periods >= 10


def test_gain_adapter_calibrates_to_batch_estimate():
    lp = _engaged()
    batch = lbh_dc_gain_ratio(lp).value
    ad = GainAdapter(lp, lp.gains)
    assert ad.calibrate() == pytest.approx(batch, rel=0.02)


def test_gain_adapter_holds_product_across_phi_step():
    lp = _engaged()
    nominal = lp.gains
    ad = GainAdapter(lp, nominal)
    des = ad.calibrate()
    lp.surface.phi[:] *= 2.5
    for _ in range(40):
        tr = lp.run(ad.window // 4, u1=ad.injection(ad.window // 4))
        g = ad.update(tr)
        if g is not None:
            lp.set_gains(g)
    assert lp.gains.k_i * ad.estimate == pytest.approx(nominal.k_i * des, rel=0.05)
    assert lp.gains.k_i == pytest.approx(nominal.k_i / math.sqrt(2.5), rel=0.05)


def test_gain_adapter_rate_limit():
    lp = _engaged()
    ad = GainAdapter(lp, lp.gains, des=1e6, max_step=2.0)
    tr = lp.run(ad.window, u1=ad.injection(ad.window))
    g = ad.update(tr)
    assert g.k_i == pytest.approx(2.0 * lp.gains.k_i)
