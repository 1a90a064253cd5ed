"""Tip approach, raster trajectories and the three imaging modes."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import _kernel as K
from .dsp import LockInConfig, NotchBank
from .loop import Loop, Trace

MODES = ("constant_height", "constant_current", "constant_didv")


class ScanConfigError(ValueError):
    pass


@dataclass
class TipState:
    x: float
    y: float
    z_fine: float  # angstrom of piezo extension
    z_coarse: float  # angstrom
    engaged: bool
    crashed: bool


def tip_state(loop: Loop) -> TipState:
    st = loop.state
    z = loop.k_z * st.u
    return TipState(st.x, st.y, z, st.z_coarse, st.engaged, st.crashed)


# -- approach -------------------------------------------------------------------------
@dataclass
class ApproachConfig:
    u_max: float = 4.0  # V at the HVA input for full extension
    coarse_step: float = 150.0  # angstrom
    slew: float = 2000.0  # angstrom / s of fine extension
    detect: float = 0.1e-9  # A
    band: tuple = (0.1, 0.9)  # desired fraction of the fine range
    max_steps: int = 50
    settle: float = 0.02  # s of closed-loop settling after engagement


@dataclass
class ApproachResult:
    success: bool
    coarse_steps: int
    extensions: int
    extension: float  # angstrom at detection
    in_band: bool
    state: TipState
    log: list = field(default_factory=list)


def approach(loop: Loop, cfg: ApproachConfig | None = None, x=None, y=None, start_gap: float | None = None) -> ApproachResult:
    """Coarse/fine approach state machine.

    Each iteration extends the fine actuator over its full range at the slew
    rate and stops on current detection. A detection beyond the desired band
    is followed by a full retract and one coarse step when that step cannot
    overshoot the band; otherwise the loop closes at the detection point.
    """
    from .junction import sample_site

    cfg = cfg or ApproachConfig()
    fine = loop.k_z * cfg.u_max
    if cfg.coarse_step >= fine:
        raise ScanConfigError(
            f"coarse step {cfg.coarse_step:g} A exceeds the fine range {fine:g} A; ranges would not overlap"
        )
    st = loop.state
    if x is not None:
        st.x = float(x)
    if y is not None:
        st.y = float(y)
    site = sample_site(loop.surface, st.x, st.y)
    if start_gap is not None:
        st.params[K.P_ZCOARSE] = site.height + start_gap
    st.crashed = False
    st.engaged = False
    loop.open()
    sc = st.scalars
    sc[K.S_U] = sc[K.S_ACC] = 0.0
    st.hp_zi[:] = 0.0
    n = max(int(math.ceil(fine / cfg.slew * loop.fs)), 2)
    ramp = np.linspace(0.0, cfg.u_max, n)
    steps = 0
    extensions = 0
    log = []
    lo, hi = cfg.band[0] * fine, cfg.band[1] * fine
    while True:
        extensions += 1
        tr = loop.run(n, u2=ramp, i_stop=cfg.detect)
        if tr.crashed:
            log.append(("crash", steps))
            return ApproachResult(False, steps, extensions, math.nan, False, tip_state(loop), log)
        if tr.status == K.STATUS_CURRENT_TRIP:
            u_stop = ramp[len(tr) - 1]
            ext = loop.k_z * u_stop
            log.append(("detect", steps, ext))
            if ext > hi and ext - cfg.coarse_step >= lo and steps < cfg.max_steps:
                _retract(loop, u_stop, n)
                st.params[K.P_ZCOARSE] -= cfg.coarse_step
                steps += 1
                log.append(("coarse_step", steps))
                continue
            # hand the held extension over to the controller and close the loop
            sc[K.S_U] = sc[K.S_ACC] = u_stop
            loop.close()
            tr = loop.run_for(cfg.settle)
            st.engaged = not tr.crashed
            return ApproachResult(not tr.crashed, steps, extensions, ext, lo <= ext <= hi, tip_state(loop), log)
        log.append(("full_extension", steps))
        _retract(loop, cfg.u_max, n)
        if steps >= cfg.max_steps:
            return ApproachResult(False, steps, extensions, math.nan, False, tip_state(loop), log)
        st.params[K.P_ZCOARSE] -= cfg.coarse_step
        steps += 1
        log.append(("coarse_step", steps))


def _retract(loop, u_from, n):
    loop.run(n, u2=np.linspace(u_from, 0.0, n))


# -- raster -----------------------------------------------------------------------------
@dataclass
class ScanConfig:
    mode: str = "constant_current"
    extent: tuple = (5.0, 5.0)  # nm (width, height)
    origin: tuple = (0.0, 0.0)  # nm
    pixels: tuple = (32, 32)  # rows, cols
    speed: float = 100.0  # nm/s
    bias: float = -2.5  # V
    setpoint: float = 0.5e-9  # A, or A/V in constant_didv mode
    vm: float = 0.0  # V
    f_mod: float = 2000.0  # Hz
    harmonics: tuple = (1,)
    lockin_order: int = 4
    lockin_cutoff: float = 500.0  # Hz
    notch: bool = False
    notch_count: int = 4
    notch_q: float = 5.0
    dwell: float = 0.01  # s per pixel when the fast-axis width is zero
    settle: float = 0.02  # s closed-loop settle before the first line
    imaging_bandwidth: float | None = None  # Hz, enables the line-rate validator
    instability_window: float = 2e-3  # s
    instability_rms: float = 0.5  # ln units
    abort_on_instability: bool = True
    chunk: float = 1e-3  # s per kernel call

    def __post_init__(self):
        self.extent = tuple(float(v) for v in self.extent)
        self.origin = tuple(float(v) for v in self.origin)
        self.pixels = tuple(int(v) for v in self.pixels)
        self.harmonics = tuple(int(h) for h in self.harmonics)

    @property
    def line_frequency(self):
        w = self.extent[0]
        return self.speed / (2 * w) if w > 0 else 0.0

    def validate(self, surface=None):
        if self.mode not in MODES:
            raise ScanConfigError(f"unknown scan mode {self.mode!r}")
        if not self.speed > 0:
            raise ScanConfigError("tip speed must be positive")
        if min(self.pixels) < 1:
            raise ScanConfigError("pixel grid must be at least 1x1")
        if min(self.extent) < 0:
            raise ScanConfigError("extent must be non-negative")
        if self.mode == "constant_didv" and not self.vm > 0:
            raise ScanConfigError("constant_didv mode needs a modulation amplitude")
        if self.imaging_bandwidth is not None and self.line_frequency * 10 > self.imaging_bandwidth:
            raise ScanConfigError(
                f"line rate {self.line_frequency:.3g} Hz x 10 exceeds the imaging bandwidth "
                f"{self.imaging_bandwidth:.3g} Hz"
            )
        if surface is not None:
            w, h = surface.extent
            x1, y1 = self.origin[0] + self.extent[0], self.origin[1] + self.extent[1]
            if self.origin[0] < 0 or self.origin[1] < 0 or x1 > w + 1e-9 or y1 > h + 1e-9:
                raise ScanConfigError(f"scan area exceeds the surface extent ({w:.4g} x {h:.4g} nm)")

    def to_dict(self):
        return asdict(self)


@dataclass
class Pass:
    row: int
    direction: str  # forward | reverse
    x: np.ndarray
    y: np.ndarray
    col: np.ndarray


def _pass_samples(cfg: ScanConfig, fs: float) -> int:
    w = cfg.extent[0]
    if w == 0:
        return max(int(round(cfg.dwell * fs * cfg.pixels[1])), cfg.pixels[1])
    return max(int(round(w / cfg.speed * fs)), cfg.pixels[1], 2)


def passes(cfg: ScanConfig, fs: float):
    """Yield forward/reverse passes: triangle on x, continuous ramp on y."""
    rows, cols = cfg.pixels
    x0, y0 = cfg.origin
    w, h = cfg.extent
    n = _pass_samples(cfg, fs)
    total = 2 * rows * n
    k = np.arange(n)
    col = np.minimum(k * cols // n, cols - 1)
    fwd = x0 + (w * k / (n - 1) if n > 1 else np.zeros(n))
    for r in range(rows):
        for d, direction in enumerate(("forward", "reverse")):
            start = (2 * r + d) * n
            if rows > 1:
                y = y0 + h * (start + k) / (total - 1)
            else:
                y = np.full(n, y0)
            if direction == "forward":
                yield Pass(r, direction, fwd, y, col)
            else:
                yield Pass(r, direction, fwd[::-1].copy(), y, cols - 1 - col)


@dataclass
class Raster:
    t: np.ndarray
    x: np.ndarray
    y: np.ndarray
    row: np.ndarray
    col: np.ndarray
    forward: np.ndarray
    f_line: float


def raster(cfg: ScanConfig, fs: float = 1e5) -> Raster:
    ps = list(passes(cfg, fs))
    x = np.concatenate([p.x for p in ps])
    y = np.concatenate([p.y for p in ps])
    row = np.concatenate([np.full(len(p.x), p.row) for p in ps])
    col = np.concatenate([p.col for p in ps])
    fwd = np.concatenate([np.full(len(p.x), p.direction == "forward") for p in ps])
    return Raster(np.arange(len(x)) / fs, x, y, row, col, fwd, cfg.line_frequency)


# -- images -----------------------------------------------------------------------------
CHANNEL_UNITS = {
    "topo": "angstrom",
    "err": "ln",
    "fb": "ln",
    "current": "A",
    "lnI": "ln(A)",
    "didv": "A/V",
    "I1": "A",
    "I2": "A",
    "I3": "A",
    "Q1": "A",
}


@dataclass
class Image:
    data: np.ndarray
    channel: str
    direction: str = "forward"
    meta: dict = field(default_factory=dict)

    @property
    def unit(self):
        return CHANNEL_UNITS.get(self.channel, "")

    @property
    def shape(self):
        return self.data.shape


@dataclass
class ScanEvent:
    kind: str  # crash | instability | clip
    t: float
    row: int
    detail: float = 0.0


@dataclass
class ScanResult:
    images: dict
    events: list
    completed: bool
    crashed: bool
    config: ScanConfig
    duration: float  # simulated seconds
    gain_history: list = field(default_factory=list)

    def __getitem__(self, key):
        if isinstance(key, tuple):
            return self.images[key]
        return self.images[(key, "forward")]

    @property
    def unstable(self):
        return any(e.kind in ("instability", "crash") for e in self.events)


class _Accumulator:
    def __init__(self, rows, cols, channels):
        self.sums = {(c, d): np.zeros(rows * cols) for c in channels for d in ("forward", "reverse")}
        self.counts = {d: np.zeros(rows * cols) for d in ("forward", "reverse")}
        self.cols = cols
        self.rows = rows

    def add(self, direction, row, col, values: dict):
        idx = row * self.cols + col
        n = self.rows * self.cols
        self.counts[direction] += np.bincount(idx, minlength=n)
        for c, v in values.items():
            self.sums[(c, direction)] += np.bincount(idx, weights=v, minlength=n)

    def images(self, meta):
        out = {}
        for (c, d), s in self.sums.items():
            cnt = self.counts[d]
            with np.errstate(invalid="ignore", divide="ignore"):
                data = np.where(cnt > 0, s / np.maximum(cnt, 1), np.nan)
            out[(c, d)] = Image(data.reshape(self.rows, self.cols), c, d, dict(meta))
        return out


def configure_loop(loop: Loop, cfg: ScanConfig):
    """Put the loop into the feedback topology the scan mode needs."""
    loop.set_bias(cfg.bias)
    needs_lockin = cfg.vm > 0
    harmonics = cfg.harmonics
    if cfg.mode == "constant_didv":
        # the fundamental drives the feedback and must come first
        harmonics = (1,) + tuple(h for h in harmonics if h != 1)
    loop.set_modulation(cfg.vm, cfg.f_mod)
    if needs_lockin:
        loop.set_lockin(LockInConfig(cfg.f_mod, harmonics, cfg.lockin_order, cfg.lockin_cutoff))
    else:
        loop.set_lockin(None)
    if cfg.notch:
        loop.set_notch(NotchBank.harmonics_of(cfg.f_mod, cfg.notch_count, cfg.notch_q, loop.fs))
    else:
        loop.set_notch(None)
    mode = "didv" if cfg.mode == "constant_didv" else "current"
    loop.set_setpoint(cfg.setpoint, mode)


def _channels(cfg, harmonics):
    ch = ["topo", "err", "fb", "current", "lnI"]
    if cfg.mode == "constant_didv":
        ch.append("didv")
    for h in harmonics:
        ch.append(f"I{h}")
    if 1 in harmonics:
        ch.append("Q1")
    return ch


def scan(loop: Loop, cfg: ScanConfig, adapter=None, keep_trace: bool = False) -> ScanResult:
    """Raster the surface in the configured mode and build per-pixel images."""
    cfg.validate(loop.surface)
    configure_loop(loop, cfg)
    rows, cols = cfg.pixels
    x0, y0 = cfg.origin
    loop.engage(x0, y0)
    if cfg.settle > 0:
        loop.run_for(cfg.settle)
    if cfg.mode == "constant_height":
        loop.open()
    harmonics = tuple(int(h) for h in loop.harm)
    acc = _Accumulator(rows, cols, _channels(cfg, harmonics))
    events: list[ScanEvent] = []
    chunk = max(int(round(cfg.chunk * loop.fs)), 1)
    win = max(int(round(cfg.instability_window * loop.fs)), 1)
    recent = np.zeros(0)
    clips0 = loop.state.clips
    t_start = loop.time
    traces = []
    lnR = math.log(loop.R)
    completed = True
    gain_history = []
    stop = False
    for p in passes(cfg, loop.fs):
        for a in range(0, len(p.x), chunk):
            b = min(a + chunk, len(p.x))
            n = b - a
            kw = {}
            if adapter is not None:
                kw["u1"] = adapter.injection(n)
            tr = loop.run(n, x=p.x[a:b], y=p.y[a:b], **kw)
            if keep_trace:
                traces.append(tr)
            m = len(tr)
            vals = {
                "topo": loop.topography(tr.u),
                "err": tr.e,
                "fb": tr.fb,
                "current": tr.vf / loop.R,
                "lnI": tr.fb - lnR,
            }
            if cfg.mode == "constant_didv":
                vals["didv"] = tr.X(1) / cfg.vm
                vals["fb"] = tr.fb
            for h in harmonics:
                vals[f"I{h}"] = tr.X(h) if h % 2 else tr.Q(h)
            if 1 in harmonics:
                vals["Q1"] = tr.Q(1)
            if m:
                acc.add(p.direction, p.row, p.col[a:a + m], vals)
            if tr.crashed:
                events.append(ScanEvent("crash", loop.time, p.row))
                completed = False
                stop = True
                break
            if loop.state.clips > clips0:
                events.append(ScanEvent("clip", loop.time, p.row, loop.state.clips - clips0))
                clips0 = loop.state.clips
            if cfg.mode != "constant_height":
                recent = np.concatenate([recent, tr.e])[-win:]
                rms = float(np.sqrt(np.mean(recent**2)))
                if len(recent) >= win and rms > cfg.instability_rms:
                    events.append(ScanEvent("instability", loop.time, p.row, rms))
                    if cfg.abort_on_instability:
                        completed = False
                        stop = True
                        break
            if adapter is not None:
                g = adapter.update(tr)
                if g is not None:
                    loop.set_gains(g)
                    gain_history.append((loop.time, g.k_i))
        if stop:
            break
    meta = {"mode": cfg.mode, "extent": list(cfg.extent), "pixels": list(cfg.pixels), "speed": cfg.speed,
            "bias": cfg.bias, "setpoint": cfg.setpoint}
    images = acc.images(meta)
    # first engaged pixel defines the topography datum
    ref = images[("topo", "forward")].data[0, 0]
    if np.isfinite(ref):
        for d in ("forward", "reverse"):
            images[("topo", d)].data = images[("topo", d)].data - ref
    res = ScanResult(images, events, completed, loop.state.crashed, cfg, loop.time - t_start, gain_history)
    if keep_trace and traces:
        res.trace = Trace.concat(traces)
    return res


def scan_constant_height(loop: Loop, cfg: ScanConfig, **kw) -> ScanResult:
    cfg.mode = "constant_height"
    return scan(loop, cfg, **kw)


def scan_constant_current(loop: Loop, cfg: ScanConfig, **kw) -> ScanResult:
    cfg.mode = "constant_current"
    return scan(loop, cfg, **kw)


def scan_constant_didv(loop: Loop, cfg: ScanConfig, **kw) -> ScanResult:
    cfg.mode = "constant_didv"
    return scan(loop, cfg, **kw)
