"""Scanning tunneling spectroscopy: single-point I-V, CITS, harmonic imaging
and ultrafast per-pixel I-V with capacitive-current subtraction."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .dsp import LockInConfig, demodulate
from .loop import Loop, Trace
from .scan import Image, ScanConfig, passes, scan


class SpectroscopyError(ValueError):
    pass


@dataclass
class IVCurve:
    V: np.ndarray
    I: np.ndarray
    mode: str = "sweep"
    pixel: tuple = (0, 0)
    gap: float = math.nan  # mean tip-sample gap during acquisition (angstrom)

    def __post_init__(self):
        self.V = np.atleast_1d(np.asarray(self.V, float))
        self.I = np.atleast_1d(np.asarray(self.I, float))

    def __len__(self):
        return len(self.V)

    def didv(self):
        if len(self.V) < 2:
            return np.full(len(self.V), np.nan)
        return np.gradient(self.I, self.V)


@dataclass
class IVSet:
    """Curves on a shared bias grid, stored as a (rows, cols, nV) cube."""

    V: np.ndarray
    I: np.ndarray
    mode: str
    gap: np.ndarray | None = None
    valid: np.ndarray | None = None
    acquisition_time: float = math.nan  # simulated seconds
    meta: dict = field(default_factory=dict)

    @property
    def shape(self):
        return self.I.shape[:2]

    def curve(self, i, j) -> IVCurve:
        g = float(self.gap[i, j]) if self.gap is not None else math.nan
        return IVCurve(self.V, self.I[i, j], self.mode, (i, j), g)

    def curves(self):
        rows, cols = self.shape
        return [self.curve(i, j) for i in range(rows) for j in range(cols)]

    def to_csv(self, path):
        rows, cols = self.shape
        with open(path, "w") as fh:
            fh.write("pixel_row,pixel_col,V,I\n")
            for i in range(rows):
                for j in range(cols):
                    for v, c in zip(self.V, self.I[i, j]):
                        fh.write(f"{i},{j},{v:.10g},{c:.10g}\n")


def junction_iv(loop: Loop, V, x, y, gap):
    """Oracle: I(V) = L(V) exp(-1.025 gap sqrt(phi)) at the given position."""
    from .junction import GAP_CONSTANT, sample_site

    site = sample_site(loop.surface, x, y)
    return np.asarray(site.L(np.asarray(V, float))) * math.exp(-GAP_CONSTANT * gap * math.sqrt(site.phi))


# -- single point and CITS ----------------------------------------------------------
def single_point_iv(loop: Loop, v_start: float, v_end: float, rate: float = 10.0, n_points: int = 101,
                    restore: bool = True) -> IVCurve:
    """Freeze z, ramp the bias linearly at ``rate`` (V/s) and record the current."""
    if not rate > 0:
        raise SpectroscopyError("sweep rate must be positive")
    was_closed = loop.closed
    bias0 = loop.bias
    vm0 = loop.vm
    loop.open()
    loop.set_modulation(0.0)
    if v_start == v_end:
        n = max(int(round(1e-3 * loop.fs)), 1)
        tr = loop.run(n, vdc=v_start)
        V = np.array([v_start])
        I = np.array([np.mean(tr.v[-max(n // 2, 1):]) / loop.R])
        gap = float(np.mean(tr.gap))
    else:
        dur = abs(v_end - v_start) / rate
        n = max(int(round(dur * loop.fs)), n_points)
        ramp = np.linspace(v_start, v_end, n)
        # park at the start bias until the preamp has settled
        loop.run(max(int(round(1e-3 * loop.fs)), 1), vdc=v_start)
        tr = loop.run(n, vdc=ramp)
        idx = np.linspace(0, len(tr) - 1, n_points).round().astype(int)
        V = ramp[idx]
        I = tr.v[idx] / loop.R
        gap = float(np.mean(tr.gap))
    if restore:
        loop.set_modulation(vm0)
        loop.run(max(int(round(1e-3 * loop.fs)), 1), vdc=bias0)
        if was_closed:
            loop.close()
    return IVCurve(V, I, "sweep", (0, 0), gap)


@dataclass
class CITSConfig:
    extent: tuple = (1.0, 1.0)  # nm
    origin: tuple = (0.0, 0.0)
    pixels: tuple = (4, 4)
    V: tuple = tuple(np.linspace(-2.5, 2.5, 11))
    settle: float = 0.2  # s closed-loop settle per pixel
    point_time: float = 0.02  # s per bias point
    speed: float = 100.0  # nm/s between pixels


def pixel_centres(extent, origin, pixels):
    rows, cols = pixels
    w, h = extent
    xs = origin[0] + (np.arange(cols) + 0.5) * (w / cols) if cols else np.array([])
    ys = origin[1] + (np.arange(rows) + 0.5) * (h / rows) if rows else np.array([])
    return xs, ys


def cits(loop: Loop, cfg: CITSConfig) -> IVSet:
    """Per pixel: move, close the loop and settle, freeze z, step the bias, re-engage."""
    V = np.asarray(cfg.V, float)
    rows, cols = cfg.pixels
    xs, ys = pixel_centres(cfg.extent, cfg.origin, cfg.pixels)
    I = np.full((rows, cols, len(V)), np.nan)
    gaps = np.full((rows, cols), np.nan)
    bias0 = loop.bias
    t0 = loop.time
    loop.engage(xs[0], ys[0])
    n_pt = max(int(round(cfg.point_time * loop.fs)), 2)
    for i in range(rows):
        for j in range(cols):
            _move(loop, xs[j], ys[i], cfg.speed)
            loop.close()
            loop.run_for(cfg.settle, vdc=bias0)
            loop.open()
            g = []
            for k, v in enumerate(V):
                tr = loop.run(n_pt, vdc=v)
                tail = slice(n_pt // 2, None)
                I[i, j, k] = np.mean(tr.v[tail]) / loop.R
                g.append(np.mean(tr.gap[tail]))
            gaps[i, j] = float(np.mean(g))
            # back to the imaging bias before the loop takes over again
            loop.run(max(n_pt // 10, 1), vdc=bias0)
    loop.close()
    total = loop.time - t0
    meta = {"settle": cfg.settle, "point_time": cfg.point_time, "points": len(V)}
    return IVSet(V, I, "cits", gaps, np.isfinite(I).all(axis=2), total, meta)


def cits_time_model(pixels: int, settle: float, point_time: float, points: int) -> float:
    return pixels * (settle + points * point_time)


def _move(loop: Loop, x, y, speed):
    st = loop.state
    dist = math.hypot(x - st.x, y - st.y)
    n = int(round(dist / speed * loop.fs))
    if n > 0:
        loop.run(n, x=np.linspace(st.x, x, n), y=np.linspace(st.y, y, n))
    loop.place(x, y)


# -- harmonic imaging --------------------------------------------------------------
@dataclass
class HarmonicImageSet:
    topo: Image
    channels: dict  # "I1".. -> Image
    result: object = None

    def __getitem__(self, key):
        return self.channels[key]


def harmonic_scan(loop: Loop, cfg: ScanConfig, n_max: int = 3, notch: bool = True, vm: float | None = None) -> HarmonicImageSet:
    """Constant-current scan with bias modulation and a multi-harmonic lock-in.

    With ``notch`` the feedback current passes a bank at f and its first
    harmonics before the logarithm.
    """
    cfg.mode = "constant_current"
    if vm is not None:
        cfg.vm = vm
    if not cfg.vm > 0:
        raise SpectroscopyError("harmonic imaging needs a modulation amplitude")
    cfg.harmonics = tuple(range(1, n_max + 1))
    cfg.notch = notch
    res = scan(loop, cfg)
    ch = {f"I{h}": res[f"I{h}"] for h in cfg.harmonics}
    return HarmonicImageSet(res["topo"], ch, res)


# -- ultrafast I-V -----------------------------------------------------------------
@dataclass
class UltrafastConfig:
    extent: tuple = (15.0, 15.0)  # nm
    origin: tuple = (0.0, 0.0)
    pixels: tuple = (120, 120)
    speed: float = 100.0  # nm/s
    vm: float = 2.5  # V
    f_mod: float = 2000.0  # Hz
    v_dc: float = 0.0  # V
    setpoint: float = 1e-9  # A of I1 when v_dc = 0, else dc current
    lockin_cutoff: float = 200.0
    lockin_order: int = 4
    bins: int = 64
    settle: float = 0.05
    subtract: bool = True
    keep_trace: bool = False


@dataclass
class UltrafastResult:
    iv: IVSet
    topo: Image
    I1: Image
    Q1: Image
    acquisition_time: float
    cap_estimate: float  # mean calibrated quadrature, A
    quad_before: float = math.nan
    quad_after: float = math.nan
    trace: Trace | None = None

    def slice(self, V_sel) -> Image:
        return current_slice(self.iv, V_sel)


def subtract_capacitive(v_over_R, theta, q1, preamp):
    """Remove the quadrature (capacitive) fundamental as seen through the preamp.

    ``q1`` is the calibrated quadrature amplitude (amperes, per sample or
    scalar) and ``preamp`` the complex normalised preamp response at f_mod.
    """
    return v_over_R - abs(preamp) * q1 * np.cos(theta + np.angle(preamp))


def ultrafast_iv(loop: Loop, cfg: UltrafastConfig) -> UltrafastResult:
    """Per-pixel I-V from one large modulation, with the loop closed on I1 (v_dc = 0)
    or on the dc current otherwise."""
    sc = ScanConfig(
        mode="constant_current", extent=cfg.extent, origin=cfg.origin, pixels=cfg.pixels, speed=cfg.speed,
        bias=cfg.v_dc, setpoint=cfg.setpoint, vm=cfg.vm, f_mod=cfg.f_mod, harmonics=(1,),
        lockin_order=cfg.lockin_order, lockin_cutoff=cfg.lockin_cutoff, settle=cfg.settle,
    )
    sc.validate(loop.surface)
    loop.set_bias(cfg.v_dc)
    loop.set_modulation(cfg.vm, cfg.f_mod)
    loop.set_lockin(LockInConfig(cfg.f_mod, (1,), cfg.lockin_order, cfg.lockin_cutoff))
    loop.set_notch(None)
    loop.set_setpoint(cfg.setpoint, "i1" if cfg.v_dc == 0 else "current")
    if cfg.v_dc != 0:
        # dc feedback under a large modulation needs the notch bank
        from .dsp import NotchBank

        loop.set_notch(NotchBank.harmonics_of(cfg.f_mod, 4, 5.0, loop.fs))
    rows, cols = cfg.pixels
    loop.engage(cfg.origin[0], cfg.origin[1])
    if cfg.settle > 0:
        loop.run_for(cfg.settle)
    ga = loop.g_a.dfrf(np.array([cfg.f_mod]))[0] / loop.R
    edges = np.linspace(cfg.v_dc - cfg.vm, cfg.v_dc + cfg.vm, cfg.bins + 1)
    centres = 0.5 * (edges[:-1] + edges[1:])
    npx = rows * cols
    sumI = np.zeros((npx, cfg.bins))
    sumV = np.zeros((npx, cfg.bins))
    cnt = np.zeros((npx, cfg.bins))
    pix_cnt = np.zeros(npx)
    acc = {k: np.zeros(npx) for k in ("topo", "I1", "Q1", "gap")}
    t0 = loop.time
    traces = []
    crashed = False
    chunk = int(round(0.01 * loop.fs))
    for p in passes(sc, loop.fs):
        if p.direction == "reverse":
            # the reverse pass repositions the tip; its samples are not binned
            for a in range(0, len(p.x), chunk):
                b = min(a + chunk, len(p.x))
                tr = loop.run(b - a, x=p.x[a:b], y=p.y[a:b])
                if tr.crashed:
                    crashed = True
                    break
            if crashed:
                break
            continue
        for a in range(0, len(p.x), chunk):
            b = min(a + chunk, len(p.x))
            tr = loop.run(b - a, x=p.x[a:b], y=p.y[a:b])
            if cfg.keep_trace:
                traces.append(tr)
            m = len(tr)
            pix = p.row * cols + p.col[a:a + m]
            q1 = tr.Q(1)
            meas = tr.v / loop.R
            itun = subtract_capacitive(meas, tr.theta, q1, ga) if cfg.subtract else meas
            # bias as it appears at the preamp output (same group delay as the current)
            Vp = cfg.v_dc + cfg.vm * np.sin(tr.theta + np.angle(ga))
            b_idx = np.clip(np.searchsorted(edges, Vp, side="right") - 1, 0, cfg.bins - 1)
            flat = pix * cfg.bins + b_idx
            sumI.ravel()[:] += np.bincount(flat, weights=itun, minlength=npx * cfg.bins)
            sumV.ravel()[:] += np.bincount(flat, weights=Vp, minlength=npx * cfg.bins)
            cnt.ravel()[:] += np.bincount(flat, minlength=npx * cfg.bins)
            pix_cnt += np.bincount(pix, minlength=npx)
            for k, v in (("topo", loop.topography(tr.u)), ("I1", tr.X(1)), ("Q1", q1), ("gap", tr.gap)):
                acc[k] += np.bincount(pix, weights=v, minlength=npx)
            if tr.crashed:
                crashed = True
                break
        if crashed:
            break
    acq = loop.time - t0
    I = np.full((npx, cfg.bins), np.nan)
    for k in range(npx):
        ok = cnt[k] > 0
        if ok.sum() >= 2:
            mv = sumV[k, ok] / cnt[k, ok]
            mi = sumI[k, ok] / cnt[k, ok]
            I[k] = np.interp(centres, mv, mi)
    with np.errstate(invalid="ignore", divide="ignore"):
        means = {k: np.where(pix_cnt > 0, v / np.maximum(pix_cnt, 1), np.nan).reshape(rows, cols) for k, v in acc.items()}
    topo = means["topo"] - means["topo"][0, 0]
    meta = {"vm": cfg.vm, "f_mod": cfg.f_mod, "v_dc": cfg.v_dc, "bins": cfg.bins}
    iv = IVSet(centres, I.reshape(rows, cols, cfg.bins), "ultrafast", means["gap"], pix_cnt.reshape(rows, cols) > 0, acq, meta)
    res = UltrafastResult(
        iv, Image(topo, "topo", meta=meta), Image(means["I1"], "I1", meta=meta), Image(means["Q1"], "Q1", meta=meta),
        acq, float(np.nanmean(means["Q1"])),
    )
    if traces:
        tr = Trace.concat(traces)
        res.trace = tr
        res.quad_before, res.quad_after = quadrature_residual(tr, loop, cfg)
    return res


def quadrature_residual(tr: Trace, loop: Loop, cfg: UltrafastConfig):
    """Quadrature amplitude of the fundamental before and after capacitive subtraction."""
    ga = loop.g_a.dfrf(np.array([cfg.f_mod]))[0] / loop.R
    meas = tr.v / loop.R
    after = subtract_capacitive(meas, tr.theta, tr.Q(1), ga)
    # demodulate against the modulation phase itself
    ref_s = np.sin(tr.theta + np.angle(ga))
    ref_c = np.cos(tr.theta + np.angle(ga))
    skip = int(round(10 / (2 * np.pi * cfg.lockin_cutoff) * loop.fs))
    skip = min(skip, len(tr) // 2)

    def quad(x):
        x = x[skip:]
        return abs(2 * np.mean(x * ref_c[skip:]))

    return quad(meas), quad(after)


def current_slice(iv: IVSet, V_sel: float) -> Image:
    """Current map at V_sel by linear interpolation between bias bins."""
    V = iv.V
    if not (V[0] - 1e-12 <= V_sel <= V[-1] + 1e-12):
        raise SpectroscopyError(f"V_sel={V_sel} outside the swept band [{V[0]:.4g}, {V[-1]:.4g}]")
    k = int(np.clip(np.searchsorted(V, V_sel) - 1, 0, len(V) - 2)) if len(V) > 1 else 0
    if len(V) == 1:
        data = iv.I[:, :, 0]
    else:
        w = (V_sel - V[k]) / (V[k + 1] - V[k])
        data = (1 - w) * iv.I[:, :, k] + w * iv.I[:, :, k + 1]
        if np.isclose(w, 1.0):
            data = iv.I[:, :, k + 1]
        elif np.isclose(w, 0.0):
            data = iv.I[:, :, k]
    return Image(np.array(data), "current", meta={"V": float(V_sel)})
