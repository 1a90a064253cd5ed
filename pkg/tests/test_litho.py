import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from stmlab.control import GainAdapter, PIGains, critical_ki, default_grid
from stmlab.dsp import LockInConfig, NotchBank
from stmlab.junction import KIND_CODES, SiteKind, SurfaceModel
from stmlab.litho import (
    DesorptionModel, FCLConfig, HDLConfig, LithoError, LithoLog, VMFCLConfig, fcl, fcl_watch, fe_write,
    hdl_line, replay, vmfcl,
)
from stmlab.loop import Loop
from stmlab.surface import surface_to_dict

DB = KIND_CODES[SiteKind.DanglingBond]


def _db_sites(s):
    return set(zip(*map(lambda v: v.tolist(), np.nonzero(s.kind == DB))))


def _same(a, b):
    return json.dumps(surface_to_dict(a), sort_keys=True) == json.dumps(surface_to_dict(b), sort_keys=True)


def test_model_validation():
    with pytest.raises(LithoError):
        DesorptionModel(tau_d=0.0)
    s = SurfaceModel.uniform(4, 4)
    s.v_desorb[:] = 6.5
    with pytest.raises(LithoError):
        DesorptionModel().check_surface(s)
    with pytest.raises(LithoError):
        VMFCLConfig(ramp_rate=0.0)
    with pytest.raises(LithoError):
        VMFCLConfig(threshold=-0.1)


def test_vmfcl_defaults():
    c = VMFCLConfig()
    assert (c.bias, c.setpoint, c.f_mod, c.ramp_rate, c.v_max, c.threshold) == (-2.5, 1e-9, 1000.0, 0.15, 1.5, 0.3)
    assert c.ramp_down == 10.0


def test_hdl_line_five_sites():
    s = SurfaceModel.uniform(12, 16)
    a = s.a
    r = hdl_line(Loop(s), [(3 * a, 5 * a), (7 * a, 5 * a)])
    assert r.completed and not r.instability
    assert _db_sites(s) == {(5, j) for j in range(3, 8)}
    assert sorted(r.log.sites) == [(5, j) for j in range(3, 8)]
    assert all(e.trigger == "desorbed" for e in r.events)


def test_hdl_line_below_threshold():
    s = SurfaceModel.uniform(12, 16)
    a = s.a
    r = hdl_line(Loop(s), [(3 * a, 5 * a), (7 * a, 5 * a)], HDLConfig(bias=2.0))
    assert r.completed and r.log.sites == [] and not _db_sites(s)


def test_hdl_empty_path():
    s = SurfaceModel.uniform(8, 8)
    r = hdl_line(Loop(s), [])
    assert r.completed and r.log.sites == []


def _hdl_loop(cfg):
    s = SurfaceModel.uniform(12, 16, db_phi_factor=2.5)
    lp = Loop(s)
    lp.set_modulation(cfg.vm, cfg.f_mod)
    lp.set_lockin(LockInConfig(cfg.f_mod, (1,), 4, cfg.lockin_cutoff))
    lp.set_notch(NotchBank.harmonics_of(cfg.f_mod, 4, 5.0, lp.fs))
    lp.set_bias(cfg.bias)
    lp.set_setpoint(cfg.setpoint, "didv")
    return s, lp


def test_hdl_fixed_gain_destabilises_adaptive_completes():
    # the written sites raise the local barrier, so the loop gain jumps under the tip
    cfg = HDLConfig(imaging_setpoint=2.5e-9, imaging_bias=3.0)
    s, lp = _hdl_loop(cfg)
    a = s.a
    wc = 2 * np.pi * 1e4
    kc = critical_ki(lambda f: lp.plant_frf(f, 3 * a, 5 * a), wc, default_grid(lp.fs), lp.fs).k_i
    gains = PIGains(0.8 * kc, wc)
    path = [(3 * a, 5 * a), (9 * a, 5 * a)]
    results = []
    for adaptive in (False, True):
        s, lp = _hdl_loop(cfg)
        lp.set_gains(gains)
        lp.engage(3 * a, 5 * a)
        lp.run_for(0.02)
        ad = None
        if adaptive:
            ad = GainAdapter(lp, gains, max_skip=1, f_m=1500, cutoff=150, amplitude=0.02, max_step=4.0)
            ad.calibrate()
        results.append((s, hdl_line(lp, path, cfg, adapter=ad)))
    (_, fixed), (s_ad, adapt) = results
    assert fixed.instability and not fixed.completed
    assert adapt.completed and not adapt.instability
    assert _db_sites(s_ad) == {(5, j) for j in range(3, 10)}
    assert adapt.gain_history and min(k for _, k in adapt.gain_history) < 0.8 * kc


def test_fe_write_stripe():
    s = SurfaceModel.uniform(48, 48)
    lp = Loop(s)
    log = fe_write(lp, [(3.0, 9.0), (13.0, 9.0)], 7.0)
    ii, jj = np.nonzero(s.kind == DB)
    y, x = ii * s.a, jj * s.a
    assert y.min() >= 9.0 - 2.5 and y.max() <= 9.0 + 2.5
    # node centres span the stripe less one lattice spacing
    assert y.max() - y.min() + s.a == pytest.approx(5.0, abs=s.a)
    assert x.min() >= 3.0 - 2.5 and x.max() <= 13.0 + 2.5
    assert len(log.mutations) == len(ii)
    with pytest.raises(LithoError):
        fe_write(lp, [(3.0, 9.0)], 5.0)


def test_fe_write_empty_and_parallel():
    s = SurfaceModel.uniform(48, 48)
    s0 = s.copy()
    lp = Loop(s)
    assert fe_write(lp, [], 7.0).mutations == []
    assert _same(s, s0)
    fe_write(lp, [(3.0, 4.0), (13.0, 4.0)], 7.0)
    fe_write(lp, [(3.0, 14.0), (13.0, 14.0)], 7.0)
    rows = np.unique(np.nonzero(s.kind == DB)[0]) * s.a
    gap = rows[np.argmax(np.diff(rows))], rows[np.argmax(np.diff(rows)) + 1]
    assert gap[0] <= 6.5 and gap[1] >= 11.5


def _hover(threshold, desorb=True):
    s = SurfaceModel.uniform(12, 12)
    lp = Loop(s)
    lp.engage(4 * s.a, 4 * s.a)
    lp.run_for(0.02)
    pre = [lp.run_for(0.01)]
    n_step = lp.state.n
    if desorb:
        s.desorb(4, 4)
    post = [lp.run_for(0.005) for _ in range(6)]
    return list(fcl_watch(lp, pre + post, threshold=threshold)), n_step, lp


def test_fcl_watch_latency():
    evs, n_step, lp = _hover(0.3)
    assert len(evs) == 1 and evs[0].site == (4, 4)
    assert 0 <= evs[0].t - n_step / lp.fs <= 5e-3
    assert evs[0].z_jump > 0.3


def test_fcl_watch_quiet_and_miss():
    assert _hover(0.3, desorb=False)[0] == []
    # the desorption jump is about 2.6 A; a threshold above it never fires
    assert _hover(3.5)[0] == []


def test_fcl_two_targets():
    s = SurfaceModel.uniform(12, 12)
    r = fcl(Loop(s), FCLConfig(targets=[(4, 4), (4, 7)]))
    assert r.completed
    assert [e.trigger for e in r.events] == ["z_jump", "z_jump"]
    assert _db_sites(s) == {(4, 4), (4, 7)}


@pytest.fixture(scope="module")
def vmfcl_run():
    s = SurfaceModel.uniform(16, 16)
    s0 = s.copy()
    tg = [(i, j) for i in (4, 7, 10) for j in (4, 7, 10)]
    r = vmfcl(Loop(s), VMFCLConfig(targets=tg))
    return s0, s, tg, r


def test_vmfcl_nine_targets(vmfcl_run):
    s0, s, tg, r = vmfcl_run
    assert r.completed
    assert [e.site for e in r.events] == tg
    assert all(e.trigger == "z_jump" and e.z_jump >= 0.3 for e in r.events)
    # the thresholds sit at 2.8 V, so Vm stops near 0.3 V above the 2.5 V bias
    assert all(0.29 < e.vm < 0.35 for e in r.events)
    assert _db_sites(s) == set(tg)
    assert _db_sites(s0) == set()


def test_vmfcl_ripple_and_telemetry(vmfcl_run):
    _, _, tg, r = vmfcl_run
    assert len(r.telemetry["ripple_ratio"]) == len(tg)
    assert r.telemetry["ripple_ratio"].max() <= 0.05
    tel = r.telemetry
    assert len({len(tel[k]) for k in ("t", "z", "vm", "I", "I_filt")}) == 1
    assert tel["vm"].max() < 0.35 and tel["vm"].min() == 0.0


def test_vmfcl_replay(vmfcl_run, tmp_path):
    s0, s, _, r = vmfcl_run
    assert _same(replay(s0, r.log), s)
    r.log.to_jsonl(tmp_path / "log.jsonl")
    back = LithoLog.from_jsonl(tmp_path / "log.jsonl")
    assert back.mutations == [tuple(m) for m in r.log.mutations]
    assert _same(replay(s0, back), s)


def test_vmfcl_unreachable_target():
    s = SurfaceModel.uniform(12, 12)
    s.v_desorb[5, 5] = 4.5
    r = vmfcl(Loop(s), VMFCLConfig(targets=[(5, 5)]))
    assert r.completed
    assert r.events[0].trigger == "v_max_reached"
    assert r.events[0].vm == pytest.approx(1.5)
    assert not _db_sites(s)


def test_vmfcl_empty_targets():
    r = vmfcl(Loop(SurfaceModel.uniform(8, 8)), VMFCLConfig())
    assert r.completed and r.events == []


@settings(max_examples=6, deadline=None)
@given(st.lists(st.floats(2.6, 4.2), min_size=3, max_size=3), st.floats(0.2, 1.2), st.floats(0.0, 0.5))
def test_vmfcl_monotone_in_vmax_and_threshold(thresholds, v_max, dv):
    tg = [(4, 4), (4, 6), (4, 8)]

    def written(v_max, shift):
        s = SurfaceModel.uniform(10, 12)
        for (i, j), v in zip(tg, thresholds):
            s.v_desorb[i, j] = v - shift
        vmfcl(Loop(s), VMFCLConfig(targets=tg, v_max=v_max, ramp_rate=1.5))
        return _db_sites(s)

    base = written(v_max, 0.0)
    assert base <= written(v_max + dv, 0.0)
    assert base <= written(v_max, dv)
