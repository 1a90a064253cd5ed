"""PI control in the log-current domain, stability-region design, LBH estimation
and gain adaptation."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


class ControlError(ValueError):
    pass


@dataclass
class PIGains:
    k_i: float  # 1/s, volts per (ln-unit * s)
    omega_c: float  # rad/s

    def __post_init__(self):
        if not (self.k_i > 0 and self.omega_c > 0):
            raise ControlError(f"PI gains must be positive, got k_i={self.k_i}, omega_c={self.omega_c}")

    @property
    def k_p(self):
        return self.k_i / self.omega_c

    def scaled(self, factor: float) -> "PIGains":
        return PIGains(self.k_i * factor, self.omega_c)


@dataclass
class PIState:
    acc: float = 0.0
    e_prev: float = 0.0
    u: float = 0.0
    clamp: float = 10.0
    clamped: bool = False


def pi_step(gains: PIGains, state: PIState, error: float, fs: float) -> float:
    """One sample of C(s) = k_i (1/s + 1/omega_c), Tustin integrator, clamp anti-windup.

    Mirrors the update used inside the compiled loop kernel.
    """
    T = 1.0 / fs
    acc_new = state.acc + gains.k_i * T * 0.5 * (error + state.e_prev)
    u = acc_new + gains.k_i * error / gains.omega_c
    state.e_prev = error
    if abs(u) > state.clamp:
        state.u = math.copysign(state.clamp, u)
        state.clamped = True
    else:
        state.u = u
        state.acc = acc_new
        state.clamped = False
    return state.u


def error_signal(preamp_out, setpoint: float, R: float, i_min: float = 1e-15):
    """ln(setpoint R) - ln(max(|preamp_out|, R I_min))."""
    v = np.maximum(np.abs(np.asarray(preamp_out, float)), R * i_min)
    return math.log(setpoint * R) - np.log(v)


# -- frequency-domain design ---------------------------------------------------
def pi_shape(f, omega_c: float, fs: float | None = None):
    """C(jw)/k_i. With ``fs`` the Tustin form used by the simulator is returned."""
    f = np.asarray(f, float)
    if fs is None:
        return 1.0 / (2j * np.pi * f) + 1.0 / omega_c
    z = np.exp(2j * np.pi * f / fs)
    return (0.5 / fs) * (z + 1) / (z - 1) + 1.0 / omega_c


def _eval_frf(G, f):
    """Evaluate a plant given as callable, LinearSystem, FRFData or (f, H) pair."""
    from .plant import LinearSystem

    if isinstance(G, LinearSystem):
        return G.dfrf(f) if G.fs is not None else G.frf(f)
    if callable(G):
        return np.asarray(G(f), complex)
    if hasattr(G, "f") and hasattr(G, "G"):
        f0, H0 = np.asarray(G.f), np.asarray(G.G)
    else:
        f0, H0 = (np.asarray(a) for a in G)
    f = np.asarray(f, float)
    if np.any(f < f0[0] * (1 - 1e-9)) or np.any(f > f0[-1] * (1 + 1e-9)):
        raise ControlError("requested frequencies outside the sampled FRF band")
    mag = np.interp(np.log(f), np.log(f0), np.log(np.abs(H0)))
    ph = np.interp(np.log(f), np.log(f0), np.unwrap(np.angle(H0)))
    return np.exp(mag + 1j * ph)


def default_grid(fs: float | None = None, f_lo: float = 1.0, f_hi: float | None = None, n: int = 6000):
    if f_hi is None:
        f_hi = 0.49 * fs if fs else 50e3
    return np.geomspace(f_lo, f_hi, n)


@dataclass
class CriticalGain:
    k_i: float  # math.inf when no crossover
    f_pc: float | None  # phase crossover (Hz)
    bounded: bool


def critical_ki(G, omega_c: float, f=None, fs: float | None = None) -> CriticalGain:
    """Smallest 1/|G_lp| over the -180 degree crossings of G_lp = C(jw)/k_i * G."""
    f = default_grid(fs) if f is None else np.asarray(f, float)
    L = pi_shape(f, omega_c, fs) * _eval_frf(G, f)
    # crossings of the negative real axis
    im = L.imag
    idx = np.nonzero((np.sign(im[:-1]) != np.sign(im[1:])) & (np.sign(im[:-1]) != 0))[0]
    best = CriticalGain(math.inf, None, False)
    for k in idx:
        a, b = im[k], im[k + 1]
        w = a / (a - b)
        re = L.real[k] + w * (L.real[k + 1] - L.real[k])
        if re >= 0:
            continue
        fpc = f[k] * (f[k + 1] / f[k]) ** w
        Lpc = pi_shape(fpc, omega_c, fs) * _eval_frf(G, np.array([fpc]))[0]
        kc = 1.0 / abs(Lpc)
        if kc < best.k_i:
            best = CriticalGain(float(kc), float(fpc), True)
    return best


def closed_loop(G, gains: PIGains, f, fs: float | None = None):
    """T = CG / (1 + CG); equals the tip-motion response to topography."""
    L = gains.k_i * pi_shape(f, gains.omega_c, fs) * _eval_frf(G, f)
    return L / (1 + L)


def imaging_bandwidth(G, gains: PIGains, f=None, fs: float | None = None) -> float:
    """First frequency where |G_img| falls below -3 dB (Hz)."""
    f = default_grid(fs, f_lo=0.1) if f is None else np.asarray(f, float)
    m = np.abs(closed_loop(G, gains, f, fs))
    below = np.nonzero(m < 1 / math.sqrt(2))[0]
    if not len(below):
        return float(f[-1])
    k = below[0]
    if k == 0:
        return float(f[0])
    # log-frequency interpolation of the -3 dB crossing in dB
    d0, d1 = 20 * np.log10(m[k - 1]), 20 * np.log10(m[k])
    w = (-3.0103 - d0) / (d1 - d0)
    return float(f[k - 1] * (f[k] / f[k - 1]) ** w)


def peak_db(G, gains: PIGains, f=None, fs: float | None = None) -> float:
    f = default_grid(fs) if f is None else np.asarray(f, float)
    return float(20 * np.log10(np.max(np.abs(closed_loop(G, gains, f, fs)))))


def _bisect(pred, lo, hi, rtol=0.005, maxit=200):
    """pred(lo) False, pred(hi) True; returns the smallest passing value within rtol."""
    for _ in range(maxit):
        if hi - lo <= rtol * hi:
            break
        mid = math.sqrt(lo * hi) if lo > 0 else 0.5 * hi
        if pred(mid):
            hi = mid
        else:
            lo = mid
    return lo, hi


@dataclass
class GainBound:
    k_i: float
    feasible: bool


def bandwidth_ki(G, omega_c: float, f_min: float = 50.0, fs: float | None = None, f=None, k_max=None) -> GainBound:
    """Smallest k_i whose imaging bandwidth reaches ``f_min`` (Hz)."""
    if k_max is None:
        k_max = critical_ki(G, omega_c, f, fs).k_i
    hi = k_max if math.isfinite(k_max) else 1e6
    fgrid = default_grid(fs, f_lo=min(0.1, f_min / 100)) if f is None else f

    def ok(k):
        return imaging_bandwidth(G, PIGains(k, omega_c), fgrid, fs) >= f_min

    if not ok(hi * (1 - 1e-9)):
        return GainBound(math.inf, False)
    _, k = _bisect(ok, hi * 1e-6, hi * (1 - 1e-9))
    return GainBound(k, True)


def hinf_ki(G, omega_c: float, limit_db: float = 3.0, fs: float | None = None, f=None, k_max=None) -> GainBound:
    """Largest k_i whose closed-loop peak stays at or below ``limit_db``."""
    if k_max is None:
        k_max = critical_ki(G, omega_c, f, fs).k_i
    if not math.isfinite(limit_db):
        return GainBound(k_max, True)
    hi = k_max * (1 - 1e-9) if math.isfinite(k_max) else 1e6
    fgrid = default_grid(fs) if f is None else f

    def too_big(k):
        return peak_db(G, PIGains(k, omega_c), fgrid, fs) > limit_db

    if not too_big(hi):
        return GainBound(hi, True)
    lo, _ = _bisect(too_big, hi * 1e-6, hi)
    return GainBound(lo, lo > hi * 1e-6)


@dataclass
class StabilityRegion:
    omega_c: np.ndarray
    ki_upper: np.ndarray
    ki_lower: np.ndarray
    ki_hinf: np.ndarray
    ki_recommended: np.ndarray
    nonempty: np.ndarray
    f_min: float = 50.0
    limit_db: float = 3.0

    def rows(self):
        for k in range(len(self.omega_c)):
            yield (
                float(self.omega_c[k]),
                float(self.ki_upper[k]),
                float(self.ki_lower[k]),
                float(self.ki_hinf[k]),
                float(self.ki_recommended[k]),
            )

    def to_csv(self, path):
        with open(path, "w") as fh:
            fh.write("omega_c,ki_upper,ki_lower,ki_hinf,ki_recommended\n")
            for r in self.rows():
                fh.write(",".join(f"{v:.10g}" for v in r) + "\n")

    def best(self) -> PIGains:
        """Operating point with the largest recommended gain inside the region."""
        ok = np.nonzero(self.nonempty)[0]
        pool = ok if len(ok) else np.arange(len(self.omega_c))
        k = pool[np.argmax(self.ki_recommended[pool])]
        return PIGains(float(self.ki_recommended[k]), float(self.omega_c[k]))


def design_region(G, omega_c_grid, f_min: float = 50.0, limit_db: float = 3.0, fs: float | None = None, f=None) -> StabilityRegion:
    wc = np.asarray(omega_c_grid, float)
    up, lo, hinf, rec, ne = [], [], [], [], []
    for w in wc:
        kc = critical_ki(G, w, f, fs).k_i
        kh = hinf_ki(G, w, limit_db, fs, f, k_max=kc).k_i
        kl = bandwidth_ki(G, w, f_min, fs, f, k_max=kc).k_i
        top = min(kc, kh)
        up.append(kc)
        hinf.append(kh)
        lo.append(kl)
        rec.append(0.5 * top)
        ne.append(bool(kl <= top))
    return StabilityRegion(wc, np.array(up), np.array(lo), np.array(hinf), np.array(rec), np.array(ne), f_min, limit_db)


# -- LBH estimation and adaptation ---------------------------------------------
@dataclass
class LBHEstimate:
    method: str
    value: float
    valid: bool
    detail: dict = field(default_factory=dict)


def check_modulation_frequency(f_m: float, imaging_bw: float, first_resonance: float):
    if not imaging_bw < f_m < first_resonance / 3:
        raise ControlError(
            f"modulation {f_m:g} Hz must lie between the imaging bandwidth ({imaging_bw:g} Hz) "
            f"and a third of the first resonance ({first_resonance / 3:g} Hz)"
        )


def _tone(loop, n, f, amp):
    t = (loop.state.n + np.arange(n)) / loop.fs
    return amp * np.sin(2 * np.pi * f * t), t


def _demod_pair(t, a, b, f, cutoff, skip):
    from .dsp import LockInConfig, LockIn

    cfg = LockInConfig(f, (1,), 4, cutoff)
    out = []
    for sig in (a, b):
        li = LockIn(cfg, 1.0 / (t[1] - t[0]))
        x, q = li.process(t, sig - np.mean(sig))
        out.append(np.mean(x[0, skip:]) + 1j * np.mean(q[0, skip:]))
    return out


def lbh_gap_modulation(loop, dither: float = 0.005, f_d: float = 500.0, cutoff: float = 50.0, duration: float | None = None) -> LBHEstimate:
    """Conventional dI/dz estimate: dither the HVA input, demodulate ln I, assume dz = k_z * dither."""
    settle = 10 / (2 * np.pi * cutoff)
    if duration is None:
        duration = 3 * settle
    n = int(round(duration * loop.fs))
    u2, t = _tone(loop, n, f_d, dither)
    tr = loop.run(n, u2=u2)
    if tr.crashed:
        return LBHEstimate("gap_modulation", math.nan, False, {"crashed": True})
    skip = int(round(settle * loop.fs))
    _, y = _demod_pair(t, u2, tr.fb, f_d, cutoff, skip)
    value = abs(y) / (dither * loop.k_z)
    return LBHEstimate("gap_modulation", float(value), duration >= settle, {"dlnI": abs(y)})


def lbh_dc_gain_ratio(loop, amplitude: float = 0.02, f_m: float = 1500.0, cutoff: float = 150.0, duration: float | None = None, floor: float = 1e-9) -> LBHEstimate:
    """|Y2(jw)| / |Y1(jw)| with U1 modulation at the setpoint."""
    settle = 10 / (2 * np.pi * cutoff)
    if duration is None:
        duration = 3 * settle
    n = int(round(duration * loop.fs))
    u1, t = _tone(loop, n, f_m, amplitude)
    tr = loop.run(n, u1=u1)
    if tr.crashed:
        return LBHEstimate("dc_gain_ratio", math.nan, False, {"crashed": True})
    skip = int(round(settle * loop.fs))
    y1, y2 = _demod_pair(t, tr.y1, tr.fb, f_m, cutoff, skip)
    if abs(y1) < floor:
        return LBHEstimate("dc_gain_ratio", math.nan, False, {"y1": abs(y1)})
    return LBHEstimate("dc_gain_ratio", float(abs(y2) / abs(y1)), duration >= settle, {"G": y2 / y1})


def adapt_gains(gains: PIGains, est: LBHEstimate | float, des: float, floor: float = 1e-12) -> PIGains:
    """k_i,new = k_i * des / est; omega_c untouched. Invalid estimates leave gains alone."""
    if isinstance(est, LBHEstimate):
        if not est.valid:
            return gains
        est = est.value
    if not (est is not None and math.isfinite(est) and est > floor):
        return gains
    return PIGains(gains.k_i * des / est, gains.omega_c)


class GainAdapter:
    """Streaming dc-gain-ratio estimator driving rate-limited k_i updates.

    The ratio comes from one Hann-windowed DFT bin at f_m on a rolling window
    of whole tone periods, long enough to resolve f_m to ``cutoff``. Each
    window is detrended first so the dc levels of u and ln I cannot leak into
    the bin. A new estimate is made once per window (the estimator settling
    period), and windows that straddle a gain change are discarded. A window
    whose detrended ln I residual is far above the running typical value
    (a desorption step, say) is skipped, but never two in a row, so a
    genuine oscillation still reaches the estimate.

    Updates are always computed from the nominal gains, so repeated updates
    track the current estimate rather than compounding past corrections.
    """

    def __init__(self, loop, nominal: PIGains, des: float | None = None, amplitude: float = 0.02,
                 f_m: float = 1500.0, cutoff: float = 150.0, max_step: float = 4.0, reject: float = 3.0, max_skip: int = 1):
        self.loop = loop
        self.nominal = nominal
        self.des = des
        self.amplitude = amplitude
        self.f_m = f_m
        spp = loop.fs / f_m
        p0 = max(3, int(math.ceil(f_m / cutoff)))
        p = next((k for k in range(p0, 4 * p0) if abs(k * spp - round(k * spp)) < 1e-6 * spp), p0)
        self.window = int(round(p * spp))
        self.hop = self.window
        self.period = self.window / loop.fs
        self._x = np.linspace(-1.0, 1.0, self.window)
        self._w = np.hanning(self.window)
        self._reset_buffer()
        self.max_step = max_step
        self.reject = reject
        self._typ = math.nan
        self._skipped = 0
        self.max_skip = max_skip
        self.history: list[tuple[float, float, float]] = []  # (t, estimate, k_i)
        self.estimate = math.nan

    def _reset_buffer(self):
        self._t = np.zeros(0)
        self._y1 = np.zeros(0)
        self._y2 = np.zeros(0)
        self._fresh = 0

    def injection(self, n):
        return _tone(self.loop, n, self.f_m, self.amplitude)[0]

    def calibrate(self, duration: float | None = None, chunk: int = 100) -> float:
        """Run the loop with the injection on and take the median settled estimate as the target."""
        duration = 8 * self.period if duration is None else duration
        n = int(round(duration * self.loop.fs))
        self._reset_buffer()
        est = []
        for a in range(0, n, chunk):
            m = min(chunk, n - a)
            tr = self.loop.run(m, u1=self.injection(m))
            e = self._feed(tr)
            if e is not None:
                est.append(e[1])
        # the first full window carries the engage transient
        est = est[1:] or est
        if not est:
            raise ControlError("calibration too short for one estimate window")
        self.des = float(np.median(est))
        self.estimate = self.des
        self._reset_buffer()
        return self.des

    def _detrend(self, y):
        c = np.polynomial.polynomial.polyfit(self._x, y, 1)
        return y - c[0] - c[1] * self._x

    def _bin(self, r, t):
        return np.sum(r * self._w * np.exp(-2j * np.pi * self.f_m * t))

    def _feed(self, tr):
        """Append a trace; returns (t_end, estimate) when a new window is due."""
        n = self.window
        self._t = np.concatenate([self._t, tr.t])[-n:]
        self._y1 = np.concatenate([self._y1, tr.y1])[-n:]
        self._y2 = np.concatenate([self._y2, tr.fb])[-n:]
        self._fresh += len(tr.t)
        if len(self._t) < n or self._fresh < self.hop:
            return None
        self._fresh = 0
        r1, r2 = self._detrend(self._y1), self._detrend(self._y2)
        spread = float(np.sqrt(np.mean(r2**2)))
        outlier = math.isfinite(self._typ) and spread > self.reject * self._typ
        if outlier and self._skipped < self.max_skip:
            self._skipped += 1
            return None
        self._skipped = 0
        if not outlier:
            self._typ = spread if not math.isfinite(self._typ) else 0.8 * self._typ + 0.2 * spread
        a = abs(self._bin(r1, self._t))
        if not a > 0:
            return None
        return float(self._t[-1]), float(abs(self._bin(r2, self._t)) / a)

    def update(self, tr) -> PIGains | None:
        """Feed one trace; returns new gains when an estimate is made."""
        r = self._feed(tr)
        if r is None:
            return None
        t_end, est = r
        self.estimate = est
        if self.des is None:
            self.des = est
        g = adapt_gains(self.nominal, est, self.des)
        cur = self.loop.gains.k_i
        k = min(max(g.k_i, cur / self.max_step), cur * self.max_step)
        self.history.append((t_end, est, k))
        if k != cur:
            # the next estimate must come from the new controller only
            self._reset_buffer()
        return PIGains(k, g.omega_c)
