"""Closed-loop STM simulation: surface + plant + controller + lock-in + notch."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import signal

from . import _kernel as K
from .control import PIGains
from .dsp import LockInConfig, NotchBank, design_lowpass
from .junction import (
    GAP_CONSTANT,
    CrashError,
    SurfaceModel,
    harmonic_amplitudes,
    sample_site,
)
from .plant import PlantConfig, build_plant

FEEDBACK_MODES = {"current": 0, "didv": 1, "i1": 1}


class LoopError(RuntimeError):
    pass


@dataclass
class Trace:
    """Per-sample record of one :meth:`Loop.run` call."""

    rec: np.ndarray
    harmonics: tuple
    fs: float
    n0: int  # global index of the first sample
    status: int = K.STATUS_OK
    x: np.ndarray | None = None
    y: np.ndarray | None = None

    def __len__(self):
        return self.rec.shape[0]

    @property
    def t(self):
        return (self.n0 + np.arange(len(self))) / self.fs

    u = property(lambda s: s.rec[:, K.R_U])
    y1 = property(lambda s: s.rec[:, K.R_Y1])
    z = property(lambda s: s.rec[:, K.R_Z])
    gap = property(lambda s: s.rec[:, K.R_GAP])
    current = property(lambda s: s.rec[:, K.R_I])
    v = property(lambda s: s.rec[:, K.R_V])
    vf = property(lambda s: s.rec[:, K.R_VF])
    fb = property(lambda s: s.rec[:, K.R_FB])
    e = property(lambda s: s.rec[:, K.R_E])
    bias = property(lambda s: s.rec[:, K.R_BIAS])
    theta = property(lambda s: s.rec[:, K.R_THETA])

    def X(self, h=1):
        """Calibrated in-phase (sin) coefficient of harmonic h, amperes."""
        return self.rec[:, K.N_REC + 2 * self.harmonics.index(h)]

    def Q(self, h=1):
        """Calibrated quadrature (cos) coefficient of harmonic h, amperes."""
        return self.rec[:, K.N_REC + 2 * self.harmonics.index(h) + 1]

    @property
    def crashed(self):
        return self.status == K.STATUS_CRASH

    @staticmethod
    def concat(traces):
        traces = [t for t in traces if len(t)]
        if not traces:
            raise ValueError("nothing to concatenate")
        first = traces[0]
        out = Trace(np.vstack([t.rec for t in traces]), first.harmonics, first.fs, first.n0)
        out.status = traces[-1].status
        if all(t.x is not None for t in traces):
            out.x = np.concatenate([t.x for t in traces])
            out.y = np.concatenate([t.y for t in traces])
        return out


@dataclass
class LoopState:
    """Everything that evolves sample to sample, apart from the surface."""

    params: np.ndarray
    scalars: np.ndarray
    hp_zi: np.ndarray
    ga_zi: np.ndarray
    nt_zi: np.ndarray
    li_zi: np.ndarray
    dwell: np.ndarray
    n: int = 0  # global sample counter
    x: float = 0.0  # nm
    y: float = 0.0
    engaged: bool = False
    crashed: bool = False

    @property
    def z_coarse(self):
        return float(self.params[K.P_ZCOARSE])

    @property
    def u(self):
        return float(self.scalars[K.S_U])

    @property
    def clips(self):
        return int(self.scalars[K.S_CLIPS])


@dataclass
class DesorptionRecord:
    n: int  # global sample index
    i: int
    j: int


class Loop:
    """Fixed-step z-axis feedback loop around a synthetic junction.

    Inputs that vary per sample (tip position, dc bias, modulation
    amplitude, setpoint injection U1 and HVA injection U2) are passed to
    :meth:`run`; everything else is configured on the instance.
    """

    def __init__(
        self,
        surface: SurfaceModel,
        plant: PlantConfig | None = None,
        fs: float = 1e5,
        gains: PIGains | None = None,
        lockin: LockInConfig | None = None,
        notch: NotchBank | None = None,
        seed: int | None = 0,
        u_clamp: float = 10.0,
    ):
        self.surface = surface
        self.plant = plant or PlantConfig()
        self.fs = float(fs)
        self.g_hp, self.g_a = build_plant(self.plant, self.fs)
        self.hp_sos = np.ascontiguousarray(self.g_hp.sos())
        self.ga_sos = np.ascontiguousarray(self.g_a.sos())
        self.rng = np.random.default_rng(seed)
        self.gains = gains or PIGains(3.0, 2 * np.pi * 1e4)
        self.bias = -2.5
        self.vm = 0.0
        self.f_mod = 2000.0
        self.setpoint = 0.5e-9
        self.fb_mode = "current"
        self.litho = None  # (tau_d,) when desorption tracking is active
        self.events: list[DesorptionRecord] = []

        p = np.zeros(K.N_PARAM)
        p[K.P_T] = 1.0 / self.fs
        p[K.P_CLAMP] = u_clamp
        p[K.P_CAP] = surface.capacitance
        p[K.P_ADC] = self.plant.adc_clip
        p[K.P_A] = surface.a
        p[K.P_R] = self.plant.R
        p[K.P_FLOOR] = self.plant.R * surface.i_min
        p[K.P_CLOSED] = 1.0
        self.state = LoopState(
            params=p,
            scalars=np.zeros(K.N_STATE),
            hp_zi=np.zeros((self.hp_sos.shape[0], 2)),
            ga_zi=np.zeros((self.ga_sos.shape[0], 2)),
            nt_zi=np.zeros((0, 2)),
            li_zi=np.zeros((0, 1, 2)),
            dwell=np.zeros(surface.shape),
        )
        self.notch = None
        self.nt_sos = np.zeros((0, 6))
        self.lockin = None
        self.li_sos = np.zeros((1, 6))
        self.harm = np.zeros(0, dtype=np.int64)
        self.cal = np.zeros(0, dtype=complex)
        self.set_gains(self.gains)
        self.set_modulation(0.0, self.f_mod)
        self.set_setpoint(self.setpoint, "current")
        if lockin is not None:
            self.set_lockin(lockin)
        if notch is not None:
            self.set_notch(notch)

    # -- configuration ---------------------------------------------------
    @property
    def R(self):
        return self.plant.R

    @property
    def k_z(self):
        """Angstrom of extension per volt of HVA input at dc."""
        return self.plant.dc_gain

    def set_gains(self, gains: PIGains):
        self.gains = gains
        self.state.params[K.P_KI] = gains.k_i
        self.state.params[K.P_WC] = gains.omega_c

    def set_modulation(self, vm: float, f_mod: float | None = None):
        self.vm = float(vm)
        if f_mod is not None and f_mod != self.f_mod:
            self.f_mod = float(f_mod)
            if self.lockin is not None:
                cfg = self.lockin
                self.set_lockin(LockInConfig(self.f_mod, cfg.harmonics, cfg.order, cfg.cutoff, cfg.phase))
        self.state.params[K.P_DTHETA] = 2 * np.pi * self.f_mod / self.fs
        self._update_fb_scale()

    def set_bias(self, v: float):
        self.bias = float(v)

    def set_setpoint(self, value: float, mode: str | None = None):
        if mode is not None:
            if mode not in FEEDBACK_MODES:
                raise LoopError(f"unknown feedback mode {mode!r}")
            self.fb_mode = mode
        if not value > 0:
            raise LoopError("setpoint must be positive")
        self.setpoint = float(value)
        p = self.state.params
        p[K.P_FBMODE] = FEEDBACK_MODES[self.fb_mode]
        p[K.P_REF] = math.log(self.setpoint * self.R)
        self._update_fb_scale()

    def _update_fb_scale(self):
        p = self.state.params
        if self.fb_mode == "didv":
            p[K.P_FBSCALE] = self.R / self.vm if self.vm > 0 else 0.0
        else:
            p[K.P_FBSCALE] = self.R

    def set_lockin(self, cfg: LockInConfig | None):
        if cfg is None:
            self.lockin = None
            self.harm = np.zeros(0, dtype=np.int64)
            self.li_sos = np.zeros((1, 6))
            self.state.li_zi = np.zeros((0, 1, 2))
            self.cal = np.zeros(0, dtype=complex)
            return
        if cfg.f_ref != self.f_mod:
            self.f_mod = float(cfg.f_ref)
            self.state.params[K.P_DTHETA] = 2 * np.pi * self.f_mod / self.fs
        self.lockin = cfg
        self.harm = np.asarray(cfg.harmonics, dtype=np.int64)
        self.li_sos = np.ascontiguousarray(design_lowpass(cfg.order, cfg.cutoff, self.fs))
        self.state.li_zi = np.zeros((2 * len(self.harm), self.li_sos.shape[0], 2))
        # undo preamp gain/phase so X, Q come out in amperes of junction current
        ga = self.g_a.dfrf(self.harm * self.f_mod)
        self.cal = np.exp(-1j * cfg.phase) / ga

    def set_notch(self, bank: NotchBank | None):
        self.notch = bank
        if bank is None or not len(bank):
            self.nt_sos = np.zeros((0, 6))
            self.state.nt_zi = np.zeros((0, 2))
        else:
            self.nt_sos = np.ascontiguousarray(bank.sos)
            self.state.nt_zi = np.zeros((len(bank), 2))
            # start notch states at the current dc level
            vf = math.exp(self.state.scalars[K.S_FB]) if self.state.engaged else 0.0
            if self.fb_mode == "current" and self.state.engaged:
                vf = math.copysign(vf, self._bias_sign())
            self.state.nt_zi = signal.sosfilt_zi(self.nt_sos) * vf

    def enable_litho(self, tau_d: float = 5e-3):
        p = self.state.params
        p[K.P_LITHO] = 1.0
        p[K.P_TAU_D] = tau_d
        p[K.P_CONDF] = self.surface.db_conduct_factor
        p[K.P_PHIF] = self.surface.db_phi_factor

    def disable_litho(self):
        self.state.params[K.P_LITHO] = 0.0

    def open(self):
        """Hold the controller output (z frozen apart from injections)."""
        self.state.params[K.P_CLOSED] = 0.0

    def close(self):
        self.state.params[K.P_CLOSED] = 1.0
        self.state.scalars[K.S_EPREV] = 0.0

    @property
    def closed(self):
        return self.state.params[K.P_CLOSED] > 0.5

    def _bias_sign(self):
        site = sample_site(self.surface, self.state.x, self.state.y)
        return 1.0 if float(site.L(self.bias)) >= 0 else -1.0

    # -- placement ---------------------------------------------------------
    def target_gap(self, x: float, y: float) -> float:
        """Gap at which the configured setpoint is met at (x, y) in steady state."""
        site = sample_site(self.surface, x, y)
        k = GAP_CONSTANT * math.sqrt(site.phi)
        if self.fb_mode == "current":
            mag = abs(float(site.L(self.bias)))
        else:
            i1 = harmonic_amplitudes(site, 0.0, self.bias, self.vm, 1)[1]
            mag = abs(i1) * self.state.params[K.P_FBSCALE] / self.R
        if mag <= 0:
            raise LoopError("setpoint unreachable: signal vanishes at this bias")
        return math.log(mag / self.setpoint) / k

    def engage(self, x: float | None = None, y: float | None = None, settle: float | None = None):
        """Place the tip at the setpoint gap with u = 0 and settled filters."""
        st = self.state
        if x is not None:
            st.x = float(x)
        if y is not None:
            st.y = float(y)
        site = sample_site(self.surface, st.x, st.y)
        gap = self.target_gap(st.x, st.y)
        st.params[K.P_ZCOARSE] = site.height + gap
        sc = st.scalars
        sc[K.S_ACC] = sc[K.S_U] = sc[K.S_EPREV] = 0.0
        st.hp_zi[:] = 0.0
        i0 = float(site.L(self.bias)) * math.exp(-GAP_CONSTANT * gap * math.sqrt(site.phi))
        st.ga_zi = signal.sosfilt_zi(self.ga_sos) * i0
        v0 = i0 * self.R
        if len(self.nt_sos):
            st.nt_zi = signal.sosfilt_zi(self.nt_sos) * v0
        st.li_zi[:] = 0.0
        sc[K.S_FB] = st.params[K.P_REF]
        st.engaged = True
        st.crashed = False
        if settle is None:
            settle = self.lockin.settle_time if (self.fb_mode != "current" and self.lockin) else 0.0
        if settle > 0:
            was_closed = self.closed
            self.open()
            self.run_for(settle)
            # re-seed the feedback at the settled lock-in value so closing is bumpless
            sc[K.S_FB] = st.params[K.P_REF]
            if was_closed:
                self.close()
        return gap

    def place(self, x: float, y: float):
        self.state.x, self.state.y = float(x), float(y)

    # -- running -----------------------------------------------------------
    def _noise(self, n):
        sigma = math.hypot(self.plant.noise_sigma, self.surface.noise_sigma)
        if sigma <= 0:
            return np.zeros(0)
        return self.rng.standard_normal(n) * sigma * self.R

    def run(self, n: int, x=None, y=None, vdc=None, vm=None, u1=None, u2=None, i_stop=None) -> Trace:
        """Advance ``n`` samples. Array inputs must have length n; scalars broadcast."""
        st = self.state
        n = int(n)
        if st.crashed:
            raise CrashError("loop has crashed; re-engage before running")

        def arr(v, default):
            if v is None:
                v = default
            a = np.asarray(v, dtype=float)
            if a.ndim == 0:
                return np.full(n, float(a))
            if a.shape != (n,):
                raise LoopError(f"input length {a.shape} does not match n={n}")
            return np.ascontiguousarray(a)

        xs = arr(x, st.x)
        ys = arr(y, st.y)
        vdc_ = arr(vdc, self.bias)
        vm_ = arr(vm, self.vm)
        u1_ = arr(u1, 0.0)
        u2_ = arr(u2, 0.0)
        noise = self._noise(n)
        st.params[K.P_ISTOP] = i_stop if i_stop else 0.0
        rec = np.zeros((n, K.N_REC + 2 * len(self.harm)))
        events = np.zeros((64, 3))
        s = self.surface
        # the kernel indexes its event buffer from the chunk-local count
        st.scalars[K.S_NEVENT] = 0
        status, done = K.run_chunk(
            st.params, st.scalars, xs, ys, vdc_, vm_, u1_, u2_, noise,
            s.height, s.phi, s.conduct, s.kind, s.v_desorb, st.dwell,
            self.hp_sos, st.hp_zi, self.ga_sos, st.ga_zi, self.nt_sos, st.nt_zi,
            self.harm, self.li_sos, st.li_zi, self.cal.real.copy(), self.cal.imag.copy(),
            rec, events,
        )
        nev = int(st.scalars[K.S_NEVENT])
        for k in range(min(nev, events.shape[0])):
            self.events.append(DesorptionRecord(st.n + int(events[k, 0]), int(events[k, 1]), int(events[k, 2])))
        if nev > events.shape[0]:
            raise LoopError("more desorption events in one chunk than the kernel buffer holds")
        tr = Trace(rec[:done], tuple(int(h) for h in self.harm), self.fs, st.n, status, xs[:done], ys[:done])
        st.n += done
        if done:
            st.x, st.y = float(xs[done - 1]), float(ys[done - 1])
        if status == K.STATUS_CRASH:
            st.crashed = True
            st.engaged = False
        elif status == K.STATUS_OUT_OF_BOUNDS:
            raise LoopError(f"tip left the surface at ({xs[done]:.4g}, {ys[done]:.4g}) nm")
        return tr

    def run_for(self, duration: float, **kw) -> Trace:
        return self.run(int(round(duration * self.fs)), **kw)

    @property
    def time(self):
        return self.state.n / self.fs

    def topography(self, u):
        """Apparent height (angstrom) from controller output."""
        return -self.k_z * np.asarray(u)

    def loop_gain_dc(self, x=None, y=None):
        """k_g * k_hva * k_piezo at the tip position (constant-current linearisation)."""
        st = self.state
        site = sample_site(self.surface, st.x if x is None else x, st.y if y is None else y)
        return GAP_CONSTANT * math.sqrt(site.phi) * self.k_z

    def plant_frf(self, f, x=None, y=None, delay=True):
        """Discrete-exact open-loop G from HVA input to the fed-back log signal.

        Constant-current feedback: k_g * G_hp * G_A/R * notch * z^-1.
        dI/dV feedback: the preamp and notch are replaced by the lock-in LPF
        acting on the demodulated envelope.
        """
        f = np.asarray(f, float)
        kg = self.loop_gain_dc(x, y) / self.k_z
        G = kg * self.g_hp.dfrf(f)
        if self.fb_mode == "current":
            G = G * self.g_a.dfrf(f) / self.R
            if len(self.nt_sos):
                G = G * signal.sosfreqz(self.nt_sos, worN=f, fs=self.fs)[1]
        else:
            G = G * signal.sosfreqz(self.li_sos, worN=f, fs=self.fs)[1]
        if delay:
            G = G * np.exp(-2j * np.pi * f / self.fs)
        return G
