import math

import numpy as np
import pytest

from stmlab.dsp import LockInConfig, NotchBank
from stmlab.junction import GAP_CONSTANT, CrashError, SurfaceModel, harmonic_amplitudes, sample_site
from stmlab.loop import Loop, LoopError
from stmlab.plant import PlantConfig


def _loop(**kw):
    return Loop(SurfaceModel.uniform(16, 16, **kw))


def test_engage_holds_setpoint():
    lp = _loop()
    gap = lp.engage(2.0, 2.0)
    s = sample_site(lp.surface, 2.0, 2.0)
    # oracle: solve |L(V)| exp(-1.025 d sqrt(phi)) = I_set by hand
    d = math.log(abs(float(s.L(-2.5))) / 0.5e-9) / (GAP_CONSTANT * 2.0)
    assert gap == pytest.approx(d, rel=1e-12)
    tr = lp.run_for(0.02)
    assert np.allclose(np.abs(tr.current), 0.5e-9, rtol=1e-6)
    assert np.max(np.abs(tr.e)) < 1e-6


def test_setpoint_step_tracks():
    lp = _loop()
    lp.engage(2.0, 2.0)
    lp.set_setpoint(1.0e-9)
    lp.run_for(0.05)
    tr = lp.run_for(0.01)
    assert np.abs(tr.current[-1]) == pytest.approx(1.0e-9, rel=1e-3)
    # the gap closes by ln 2 / (1.025 sqrt(phi))
    assert tr.gap[-1] == pytest.approx(lp.target_gap(2.0, 2.0), abs=1e-4)


def test_open_loop_hva_step_moves_z_by_dc_gain():
    lp = _loop()
    gap0 = lp.engage(2.0, 2.0)
    lp.open()
    tr = lp.run_for(0.05, u2=0.01)
    # z is extension towards the sample: gap = z_coarse - z - h
    assert tr.z[-1] == pytest.approx(0.01 * lp.k_z, rel=1e-3)
    assert tr.gap[-1] == pytest.approx(gap0 - 0.01 * lp.k_z, rel=1e-3)
    i_ref = 0.5e-9 * math.exp(GAP_CONSTANT * 2.0 * 0.01 * lp.k_z)
    assert abs(tr.current[-1]) == pytest.approx(i_ref, rel=1e-2)


def test_crash_flags_and_blocks_further_runs():
    lp = _loop()
    lp.engage(2.0, 2.0)
    lp.open()
    tr = lp.run_for(0.05, u2=1.0)
    assert tr.crashed
    assert len(tr) < 5000
    with pytest.raises(CrashError):
        lp.run(10)


def test_out_of_bounds_raises():
    lp = _loop()
    lp.engage(2.0, 2.0)
    with pytest.raises(LoopError):
        lp.run(100, x=np.linspace(2.0, 100.0, 100))


def test_input_length_checked():
    lp = _loop()
    lp.engage(1.0, 1.0)
    with pytest.raises(LoopError):
        lp.run(10, u1=np.zeros(9))


def test_setpoint_validation():
    lp = _loop()
    with pytest.raises(LoopError):
        lp.set_setpoint(-1.0)
    with pytest.raises(LoopError):
        lp.set_setpoint(1e-9, "bogus")


def test_deterministic_with_noise_and_seed():
    recs = []
    for _ in range(2):
        lp = Loop(SurfaceModel.uniform(8, 8, noise_sigma=5e-12), seed=7)
        lp.engage(1.0, 1.0)
        recs.append(lp.run_for(0.01).rec.tobytes())
    assert recs[0] == recs[1]
    lp = Loop(SurfaceModel.uniform(8, 8, noise_sigma=5e-12), seed=8)
    lp.engage(1.0, 1.0)
    assert lp.run_for(0.01).rec.tobytes() != recs[0]


def test_lockin_channels_in_amperes():
    lp = _loop(capacitance=0.0)
    lp.set_lockin(LockInConfig(2000.0, (1, 2, 3), 4, 200.0))
    lp.set_modulation(0.3)
    gap = lp.engage(2.0, 2.0)
    lp.open()
    tr = lp.run_for(0.1)
    s = sample_site(lp.surface, 2.0, 2.0)
    ref = harmonic_amplitudes(s, gap, -2.5, 0.3, 3)
    for h in (1, 2, 3):
        val = tr.X(h)[-1] if h % 2 else tr.Q(h)[-1]
        assert val == pytest.approx(ref[h], rel=0.01)


def test_capacitive_current_shows_in_quadrature():
    lp = Loop(SurfaceModel.uniform(8, 8, capacitance=0.5e-12))
    lp.set_lockin(LockInConfig(2000.0, (1,), 4, 200.0))
    lp.set_modulation(0.5)
    lp.engage(1.0, 1.0)
    lp.open()
    tr = lp.run_for(0.1)
    cap = 0.5e-12 * 0.5 * 2 * np.pi * 2000.0
    assert tr.Q(1)[-1] == pytest.approx(cap, rel=0.01)


def test_adc_clip_counted():
    lp = Loop(SurfaceModel.uniform(8, 8), plant=PlantConfig(adc_clip=0.04))
    lp.engage(1.0, 1.0)
    lp.run_for(0.001)
    assert lp.state.clips > 0


def test_plant_frf_dc_gain():
    lp = _loop()
    lp.engage(1.0, 1.0)
    assert abs(lp.plant_frf(np.array([0.0]))[0]) == pytest.approx(GAP_CONSTANT * 2.0 * lp.k_z, rel=1e-9)
    assert lp.loop_gain_dc() == pytest.approx(GAP_CONSTANT * 2.0 * lp.k_z)


def test_notch_keeps_current_loop_steady():
    lp = _loop()
    lp.set_notch(NotchBank.harmonics_of(2000.0, 4, 5.0, lp.fs))
    lp.engage(1.0, 1.0)
    tr = lp.run_for(0.02)
    assert np.max(np.abs(tr.e)) < 1e-6


def test_topography_sign():
    lp = _loop()
    assert lp.topography(np.array([1.0]))[0] == pytest.approx(-lp.k_z)
