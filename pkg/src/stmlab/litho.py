"""Hydrogen depassivation lithography on the simulated loop.

Desorption itself happens inside the loop kernel (threshold + dwell on the
nearest lattice node); this module drives the tip and bias, watches the
controller output for the retraction that follows a desorption, and keeps
an event log that can be replayed onto the starting surface.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.ndimage import uniform_filter1d

from .dsp import LockInConfig, NotchBank
from .junction import KIND_CODES, SiteKind, SurfaceModel
from .loop import Loop, Trace


class LithoError(ValueError):
    pass


@dataclass
class DesorptionModel:
    """Threshold + dwell desorption. Per-site |V| thresholds live on the surface."""

    tau_d: float = 5e-3  # s above threshold
    r_fe: float = 2.5  # nm, field-emission half width
    v_fe: float = 6.0  # V, field-emission onset

    def __post_init__(self):
        if not self.tau_d > 0:
            raise LithoError("tau_d must be positive")
        if not self.r_fe > 0:
            raise LithoError("r_fe must be positive")

    def check_surface(self, surface: SurfaceModel):
        hsi = surface.kind == KIND_CODES[SiteKind.HSi]
        if hsi.any() and float(surface.v_desorb[hsi].max()) >= self.v_fe:
            raise LithoError("atomic-precision thresholds must lie below the field-emission voltage")


@dataclass
class DesorptionEvent:
    site: tuple
    t: float
    trigger: str  # "z_jump" | "v_max_reached" | "desorbed"
    z_jump: float = 0.0  # angstrom
    vm: float = math.nan

    def to_dict(self):
        d = asdict(self)
        d["site"] = [int(s) for s in self.site]
        return d


@dataclass
class LithoLog:
    """Surface mutations (kernel or geometric) and detector events, in order."""

    mutations: list = field(default_factory=list)  # (n, i, j)
    events: list = field(default_factory=list)  # DesorptionEvent

    def lines(self):
        out = []
        for n, i, j in self.mutations:
            out.append({"type": "desorb", "n": int(n), "i": int(i), "j": int(j)})
        for ev in self.events:
            out.append({"type": "event", **ev.to_dict()})
        return out

    def to_jsonl(self, path):
        with open(path, "w") as fh:
            for rec in self.lines():
                fh.write(json.dumps(rec, sort_keys=True) + "\n")

    @classmethod
    def from_jsonl(cls, path):
        log = cls()
        with open(path) as fh:
            for line in fh:
                if not line.strip():
                    continue
                rec = json.loads(line)
                if rec["type"] == "desorb":
                    log.mutations.append((rec["n"], rec["i"], rec["j"]))
                else:
                    log.events.append(DesorptionEvent(tuple(rec["site"]), rec["t"], rec["trigger"], rec["z_jump"], rec["vm"]))
        return log

    @property
    def sites(self):
        return [(i, j) for _, i, j in self.mutations]


def replay(surface: SurfaceModel, log: LithoLog) -> SurfaceModel:
    """Apply the logged mutations to a copy of the starting surface."""
    s = surface.copy()
    for _, i, j in log.mutations:
        s.desorb(i, j)
    return s


# -- detection ---------------------------------------------------------------
class FCLWatch:
    """Streaming z-jump detector on the controller output.

    An event fires when the apparent height rises more than ``threshold``
    above its minimum over the preceding ``window`` seconds. The retraction
    after a desorption lasts several loop time constants, so after an event
    the detector re-arms only once the windowed rise is back below the
    threshold.
    """

    def __init__(self, loop: Loop, threshold: float = 0.3, window: float = 2e-3):
        if not threshold > 0:
            raise LithoError("threshold must be positive")
        self.loop = loop
        self.threshold = threshold
        self.n_win = max(int(round(window * loop.fs)), 1)
        self.reset()

    def reset(self):
        self._buf = np.zeros(0)
        self._armed = True

    def feed(self, tr: Trace):
        """Return (sample offset within tr, jump) of the first detection, or None."""
        z = self.loop.topography(tr.u)
        m = len(z)
        if m == 0:
            return None
        full = np.concatenate([self._buf, z])
        nb = len(self._buf)
        self._buf = full[-self.n_win:]
        if len(full) < 2:
            return None
        w = min(self.n_win, len(full) - 1)
        # running minimum of the w samples before each new sample
        pad = np.concatenate([np.full(w, np.inf), full])
        prev_min = np.lib.stride_tricks.sliding_window_view(pad, w)[: len(full)].min(axis=1)
        rise = (full - prev_min)[nb:]
        over = rise > self.threshold
        start = 0
        if not self._armed:
            quiet = np.nonzero(~over)[0]
            if not len(quiet):
                return None
            start = int(quiet[0])
            self._armed = True
        cand = np.nonzero(over[start:])[0]
        if not len(cand):
            return None
        k = start + int(cand[0])
        self._armed = False
        # the detector stays disarmed if the rise is still above threshold at the end of the trace
        rest = np.nonzero(~over[k:])[0]
        if len(rest):
            self._armed = True
            later = np.nonzero(over[k + int(rest[0]):])[0]
            self._armed = not len(later)
        return k, float(rise[k])


def fcl_watch(loop: Loop, traces, threshold: float = 0.3, window: float = 2e-3):
    """Run the detector over a sequence of traces; yields DesorptionEvent."""
    w = FCLWatch(loop, threshold, window)
    site = loop.surface.nearest(loop.state.x, loop.state.y)
    for tr in traces:
        hit = w.feed(tr)
        if hit is not None:
            k, jump = hit
            yield DesorptionEvent(site, (tr.n0 + k) / loop.fs, "z_jump", jump)


def _record_mutations(loop: Loop, start: int, log: LithoLog):
    for rec in loop.events[start:]:
        log.mutations.append((rec.n, rec.i, rec.j))
    return len(loop.events)


def _move(loop: Loop, x, y, speed, chunk, log, ev0):
    st = loop.state
    dist = math.hypot(x - st.x, y - st.y)
    n = int(round(dist / speed * loop.fs))
    xs = np.linspace(st.x, x, n) if n else np.zeros(0)
    ys = np.linspace(st.y, y, n) if n else np.zeros(0)
    for a in range(0, n, chunk):
        b = min(a + chunk, n)
        tr = loop.run(b - a, x=xs[a:b], y=ys[a:b])
        ev0 = _record_mutations(loop, ev0, log)
        if tr.crashed:
            return False, ev0
    loop.place(x, y)
    return True, ev0


# -- field emission ------------------------------------------------------------
def _segment_distance(px, py, ax, ay, bx, by):
    dx, dy = bx - ax, by - ay
    L2 = dx * dx + dy * dy
    if L2 == 0:
        return np.hypot(px - ax, py - ay)
    t = np.clip(((px - ax) * dx + (py - ay) * dy) / L2, 0.0, 1.0)
    return np.hypot(px - (ax + t * dx), py - (ay + t * dy))


def fe_write(loop: Loop, path, V: float, model: DesorptionModel | None = None, log: LithoLog | None = None) -> LithoLog:
    """Field-emission write: every H site within r_FE of the path desorbs."""
    model = model or DesorptionModel()
    log = log or LithoLog()
    if abs(V) < model.v_fe:
        raise LithoError(f"field emission needs |V| >= {model.v_fe} V, got {V}")
    path = np.asarray(path, float).reshape(-1, 2)
    if len(path) == 0:
        return log
    s = loop.surface
    rows, cols = s.shape
    jj, ii = np.meshgrid(np.arange(cols) * s.a, np.arange(rows) * s.a)
    if len(path) == 1:
        path = np.vstack([path, path])
    d = np.full(s.shape, np.inf)
    for (ax, ay), (bx, by) in zip(path[:-1], path[1:]):
        d = np.minimum(d, _segment_distance(jj, ii, ax, ay, bx, by))
    n = loop.state.n
    for i, j in zip(*np.nonzero(d <= model.r_fe)):
        if s.desorb(i, j):
            log.mutations.append((n, int(i), int(j)))
            log.events.append(DesorptionEvent((int(i), int(j)), n / loop.fs, "desorbed"))
    return log


# -- atomic-precision line writes --------------------------------------------------
@dataclass
class HDLConfig:
    setpoint: float = 2.5e-9  # A/V, dI/dV feedback during the write
    bias: float = 3.0  # V
    speed: float = 5.0  # nm/s
    vm: float = 0.8  # V
    f_mod: float = 2000.0  # Hz
    lockin_cutoff: float = 500.0
    imaging_setpoint: float = 0.9375e-9  # A/V
    imaging_bias: float = -2.5
    switch_time: float = 0.02  # s hover after switching to the write parameters
    instability_window: float = 2e-3
    instability_rms: float = 0.5
    instability_hold: float = 20e-3
    chunk: float = 1e-3


@dataclass
class LithoResult:
    log: LithoLog
    completed: bool
    crashed: bool
    instability: list = field(default_factory=list)  # (t, rms)
    telemetry: dict = field(default_factory=dict)
    gain_history: list = field(default_factory=list)

    @property
    def events(self):
        return self.log.events


def hdl_line(loop: Loop, path, cfg: HDLConfig | None = None, model: DesorptionModel | None = None,
             adapter=None, abort_on_instability: bool = True) -> LithoResult:
    """Constant dI/dV write along a polyline: switch to the write setpoint and
    bias, traverse the path, switch back."""
    cfg = cfg or HDLConfig()
    model = model or DesorptionModel()
    log = LithoLog()
    path = np.asarray(path, float).reshape(-1, 2)
    if len(path) == 0:
        return LithoResult(log, True, False)
    loop.set_modulation(cfg.vm, cfg.f_mod)
    loop.set_lockin(LockInConfig(cfg.f_mod, (1,), 4, cfg.lockin_cutoff))
    loop.set_notch(NotchBank.harmonics_of(cfg.f_mod, 4, 5.0, loop.fs))
    loop.set_bias(cfg.imaging_bias)
    loop.set_setpoint(cfg.imaging_setpoint, "didv")
    if not loop.state.engaged:
        loop.engage(path[0, 0], path[0, 1])
    chunk = max(int(round(cfg.chunk * loop.fs)), 1)
    ev0 = len(loop.events)
    ok, ev0 = _move(loop, path[0, 0], path[0, 1], cfg.speed * 20, chunk, log, ev0)
    if not ok:
        return LithoResult(log, False, True)
    loop.enable_litho(model.tau_d)
    loop.set_bias(cfg.bias)
    loop.set_setpoint(cfg.setpoint, "didv")
    win = max(int(round(cfg.instability_window * loop.fs)), 1)
    recent = np.zeros(0)
    unstable = []
    gains = []
    completed = True
    # a desorption step under the tip is a large but decaying error; only
    # a sustained excursion counts as instability
    hold = max(int(round(cfg.instability_hold * loop.fs)), 1)
    over = 0
    xs, ys = [path[0, 0]], [path[0, 1]]
    for (ax, ay), (bx, by) in zip(path[:-1], path[1:]):
        n = max(int(round(math.hypot(bx - ax, by - ay) / cfg.speed * loop.fs)), 1)
        xs.append(np.linspace(ax, bx, n + 1)[1:])
        ys.append(np.linspace(ay, by, n + 1)[1:])
    xs = np.concatenate([np.atleast_1d(v) for v in xs])
    ys = np.concatenate([np.atleast_1d(v) for v in ys])
    # hover at the start, then traverse
    nh = int(round(cfg.switch_time * loop.fs))
    xs = np.concatenate([np.full(nh, xs[0]), xs])
    ys = np.concatenate([np.full(nh, ys[0]), ys])
    for a in range(0, len(xs), chunk):
        b = min(a + chunk, len(xs))
        kw = {"u1": adapter.injection(b - a)} if adapter is not None else {}
        tr = loop.run(b - a, x=xs[a:b], y=ys[a:b], **kw)
        ev0 = _record_mutations(loop, ev0, log)
        if tr.crashed:
            completed = False
            break
        if adapter is not None:
            g = adapter.update(tr)
            if g is not None:
                loop.set_gains(g)
                gains.append((loop.time, g.k_i))
        if b <= nh:
            # setpoint step transient after the switch, not monitored
            continue
        recent = np.concatenate([recent, tr.e[max(nh - a, 0):]])[-win:]
        rms = float(np.sqrt(np.mean(recent**2)))
        over = over + (b - a) if (len(recent) >= win and rms > cfg.instability_rms) else 0
        if over >= hold:
            unstable.append((loop.time, rms))
            if abort_on_instability:
                completed = False
                break
    loop.disable_litho()
    for n, i, j in log.mutations:
        log.events.append(DesorptionEvent((i, j), n / loop.fs, "desorbed"))
    crashed = loop.state.crashed
    if not crashed:
        loop.set_bias(cfg.imaging_bias)
        loop.set_setpoint(cfg.imaging_setpoint, "didv")
    return LithoResult(log, completed and not crashed, crashed, unstable, {}, gains)


# -- voltage-modulated FCL -------------------------------------------------------
@dataclass
class VMFCLConfig:
    bias: float = -2.5  # V
    setpoint: float = 1e-9  # A
    f_mod: float = 1000.0  # Hz
    ramp_rate: float = 0.15  # V/s
    v_max: float = 1.5  # V
    threshold: float = 0.3  # angstrom
    targets: list = field(default_factory=list)  # (i, j) site indices or {"x":..,"y":..} in nm
    window: float = 2e-3  # s, detector window
    ramp_down: float = 10.0  # ramp-down speed relative to ramp-up
    move_speed: float = 20.0  # nm/s between targets
    hover: float = 0.02  # s before ramping
    notch_count: int = 4
    notch_q: float = 5.0
    lockin_cutoff: float = 100.0
    chunk: float = 1e-3
    telemetry_decimate: int = 10
    settle_after: float = 0.01  # s after ramp-down before the jump is measured

    def __post_init__(self):
        if not self.ramp_rate > 0:
            raise LithoError("ramp rate must be positive")
        if not self.threshold > 0:
            raise LithoError("z-jump threshold must be positive")
        if not self.v_max > 0:
            raise LithoError("v_max must be positive")


def _target_xy(surface: SurfaceModel, t):
    if isinstance(t, dict):
        x, y = float(t["x"]), float(t["y"])
        return surface.nearest(x, y), (x, y)
    i, j = int(t[0]), int(t[1])
    return (i, j), surface.position(i, j)


def vmfcl(loop: Loop, cfg: VMFCLConfig, model: DesorptionModel | None = None) -> LithoResult:
    """Hover over each target, ramp the modulation until the controller
    retracts by more than the threshold or Vm reaches v_max, then ramp down
    and move on. Bias and setpoint stay at their imaging values."""
    model = model or DesorptionModel()
    s = loop.surface
    loop.set_bias(cfg.bias)
    loop.set_modulation(0.0, cfg.f_mod)
    loop.set_lockin(None)
    loop.set_setpoint(cfg.setpoint, "current")
    loop.set_notch(NotchBank.harmonics_of(cfg.f_mod, cfg.notch_count, cfg.notch_q, loop.fs))
    targets = [_target_xy(s, t) for t in cfg.targets]
    log = LithoLog()
    tel = {k: [] for k in ("t", "z", "vm", "I", "I_filt")}
    ripple = []
    if not targets:
        return LithoResult(log, True, False, telemetry=_pack(tel))
    if not loop.state.engaged:
        loop.engage(*targets[0][1])
    loop.enable_litho(model.tau_d)
    chunk = max(int(round(cfg.chunk * loop.fs)), 1)
    dec = max(int(cfg.telemetry_decimate), 1)
    ev0 = len(loop.events)
    watch = FCLWatch(loop, cfg.threshold, cfg.window)
    dv_up = cfg.ramp_rate / loop.fs
    dv_down = cfg.ramp_down * dv_up
    period = max(int(round(loop.fs / cfg.f_mod)), 1)

    def run(n, vm):
        nonlocal ev0
        tr = loop.run(n, vm=vm)
        ev0 = _record_mutations(loop, ev0, log)
        sl = slice(None, None, dec)
        tel["t"].append(tr.t[sl])
        tel["z"].append(loop.topography(tr.u)[sl])
        tel["vm"].append(np.broadcast_to(np.asarray(vm, float), (len(tr),))[sl])
        tel["I"].append(tr.v[sl] / loop.R)
        tel["I_filt"].append(tr.vf[sl] / loop.R)
        return tr

    completed = True
    for site, (x, y) in targets:
        ok, ev0 = _move(loop, x, y, cfg.move_speed, chunk, log, ev0)
        if not ok:
            completed = False
            break
        run(int(round(cfg.hover * loop.fs)), 0.0)
        z_before = float(np.mean(tel["z"][-1][-max(len(tel["z"][-1]) // 2, 1):]))
        watch.reset()
        vm = 0.0
        trigger = None
        jump_seen = 0.0
        t_hit = math.nan
        seg_v, seg_f = [], []
        while trigger is None:
            n = chunk
            ramp = vm + dv_up * np.arange(1, n + 1)
            over = np.nonzero(ramp >= cfg.v_max)[0]
            if len(over):
                n = int(over[0]) + 1
                ramp = np.minimum(ramp[:n], cfg.v_max)
            tr = run(n, ramp)
            if tr.crashed:
                break
            vm = float(ramp[len(tr) - 1])
            hit = watch.feed(tr)
            if hit is not None:
                trigger = "z_jump"
                jump_seen = hit[1]
                t_hit = (tr.n0 + hit[0]) / loop.fs
            elif vm >= cfg.v_max:
                trigger = "v_max_reached"
                t_hit = loop.time
            seg_v.append(tr.v)
            seg_f.append(tr.vf)
        if len(seg_v):
            # 50 ms of ramp ending 10 ms before the trigger, clear of the desorption transient
            a, b = int(0.06 * loop.fs), int(0.01 * loop.fs)
            r = _ripple_ratio(np.concatenate(seg_v)[-a:-b], np.concatenate(seg_f)[-a:-b], period)
            if math.isfinite(r):
                ripple.append(r)
        if loop.state.crashed:
            completed = False
            break
        vm_hit = vm
        # fast ramp down
        nd = max(int(math.ceil(vm / dv_down)), 1)
        down = np.maximum(vm - dv_down * np.arange(1, nd + 1), 0.0)
        for a in range(0, nd, chunk):
            tr = run(min(chunk, nd - a), down[a:a + chunk])
            if tr.crashed:
                break
        if loop.state.crashed:
            completed = False
            break
        run(int(round(cfg.settle_after * loop.fs)), 0.0)
        z_after = float(np.mean(tel["z"][-1][-max(len(tel["z"][-1]) // 2, 1):]))
        jump = z_after - z_before if trigger == "z_jump" else max(jump_seen, 0.0)
        log.events.append(DesorptionEvent(site, t_hit, trigger, jump, vm_hit))
    loop.disable_litho()
    loop.set_modulation(0.0)
    res = LithoResult(log, completed and not loop.state.crashed, loop.state.crashed, telemetry=_pack(tel))
    res.telemetry["ripple_ratio"] = np.array(ripple)
    return res


def _ripple_ratio(v, vf, period):
    """Std of the sub-period content of the notched current over the raw one."""
    if len(v) < 2 * period:
        return math.nan
    hp = lambda a: a - uniform_filter1d(a, period, mode="nearest")
    ru = float(np.std(hp(v)))
    return float(np.std(hp(vf))) / ru if ru > 0 else math.nan


def _pack(tel):
    return {k: (np.concatenate(v) if v else np.zeros(0)) for k, v in tel.items()}


def write_telemetry_csv(path, tel: dict):
    keys = ("t", "z", "vm", "I", "I_filt")
    data = np.column_stack([tel[k] for k in keys]) if len(tel.get("t", ())) else np.zeros((0, len(keys)))
    np.savetxt(path, data, delimiter=",", header="t_s,z_A,vm_V,I_A,I_filt_A", comments="", fmt="%.10g")


def load_targets(path):
    """Job file: {"targets": [[i, j], ...]} or [{"x": .., "y": ..}, ...]."""
    with open(path) as fh:
        d = json.load(fh)
    items = d["targets"] if isinstance(d, dict) else d
    return [t if isinstance(t, dict) else tuple(t) for t in items]


# -- conventional FCL ------------------------------------------------------------
@dataclass
class FCLConfig:
    bias: float = 3.0  # V, write bias switched in over each target
    imaging_bias: float = -2.5
    setpoint: float = 1e-9  # A
    threshold: float = 0.3  # angstrom
    window: float = 2e-3
    max_time: float = 0.5  # s at the write bias before giving up
    hover: float = 0.02
    move_speed: float = 20.0
    targets: list = field(default_factory=list)
    chunk: float = 1e-3

    def __post_init__(self):
        if not self.threshold > 0:
            raise LithoError("z-jump threshold must be positive")
        if not self.max_time > 0:
            raise LithoError("max_time must be positive")


def fcl(loop: Loop, cfg: FCLConfig, model: DesorptionModel | None = None) -> LithoResult:
    """Bias-switching FCL: over each target switch to the write bias, stop at
    the first z-jump (or after max_time) and switch back."""
    model = model or DesorptionModel()
    s = loop.surface
    loop.set_modulation(0.0)
    loop.set_lockin(None)
    loop.set_notch(None)
    loop.set_bias(cfg.imaging_bias)
    loop.set_setpoint(cfg.setpoint, "current")
    targets = [_target_xy(s, t) for t in cfg.targets]
    log = LithoLog()
    if not targets:
        return LithoResult(log, True, False)
    if not loop.state.engaged:
        loop.engage(*targets[0][1])
    loop.enable_litho(model.tau_d)
    chunk = max(int(round(cfg.chunk * loop.fs)), 1)
    ev0 = len(loop.events)
    watch = FCLWatch(loop, cfg.threshold, cfg.window)
    completed = True
    for site, (x, y) in targets:
        ok, ev0 = _move(loop, x, y, cfg.move_speed, chunk, log, ev0)
        if not ok:
            completed = False
            break
        loop.run(int(round(cfg.hover * loop.fs)))
        z0 = float(np.mean(loop.topography(loop.run(chunk).u)))
        loop.set_bias(cfg.bias)
        watch.reset()
        n_max = int(round(cfg.max_time * loop.fs))
        trigger, t_hit, done = None, math.nan, 0
        while done < n_max:
            tr = loop.run(min(chunk, n_max - done))
            ev0 = _record_mutations(loop, ev0, log)
            done += len(tr)
            if tr.crashed:
                break
            hit = watch.feed(tr)
            if hit is not None:
                trigger, t_hit = "z_jump", (tr.n0 + hit[0]) / loop.fs
                break
        if loop.state.crashed:
            completed = False
            break
        loop.set_bias(cfg.imaging_bias)
        tr = loop.run(int(round(cfg.hover * loop.fs)))
        z1 = float(np.mean(loop.topography(tr.u[len(tr) // 2:])))
        if trigger is None:
            trigger, t_hit = "timeout", loop.time
        log.events.append(DesorptionEvent(site, t_hit, trigger, z1 - z0 if trigger == "z_jump" else 0.0))
    loop.disable_litho()
    return LithoResult(log, completed and not loop.state.crashed, loop.state.crashed)
