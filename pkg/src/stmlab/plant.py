"""Linear z-axis dynamics: HVA + piezo, preamplifier, ADC and noise."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import signal


class ValidationError(ValueError):
    pass


class LinearSystem:
    """SISO rational transfer function held as continuous zeros/poles/gain.

    A discrete state-space realisation (bilinear transform) is cached per
    sample rate and regenerated whenever ``fs`` changes.
    """

    def __init__(self, zeros=(), poles=(), gain=1.0, fs=None, name=""):
        self.zeros = np.atleast_1d(np.asarray(zeros, dtype=complex))
        self.poles = np.atleast_1d(np.asarray(poles, dtype=complex))
        self.gain = float(gain)
        self.name = name
        if len(self.zeros) > len(self.poles):
            raise ValidationError(f"{name or 'system'} is improper")
        self._fs = None
        self._ss = None
        self.x = None
        if fs is not None:
            self.discretize(fs)

    @classmethod
    def from_tf(cls, num, den, fs=None, name=""):
        z, p, k = signal.tf2zpk(np.atleast_1d(num), np.atleast_1d(den))
        return cls(z, p, k, fs=fs, name=name)

    @classmethod
    def static(cls, gain, fs=None, name=""):
        return cls((), (), gain, fs=fs, name=name)

    def __mul__(self, other: "LinearSystem") -> "LinearSystem":
        return LinearSystem(
            np.concatenate([self.zeros, other.zeros]),
            np.concatenate([self.poles, other.poles]),
            self.gain * other.gain,
            fs=self._fs,
        )

    def __repr__(self):
        return f"LinearSystem({self.name!r}, order={self.order}, gain={self.gain:.4g})"

    @property
    def order(self):
        return len(self.poles)

    @property
    def fs(self):
        return self._fs

    def is_stable(self):
        return bool(np.all(self.poles.real < 0))

    def frf(self, f):
        """Continuous frequency response at f (Hz)."""
        s = 2j * np.pi * np.asarray(f, dtype=float)
        num = np.ones_like(s) * self.gain
        for z in self.zeros:
            num = num * (s - z)
        for p in self.poles:
            num = num / (s - p)
        return num

    def dcgain(self):
        return complex(self.frf(0.0)).real

    # -- discrete form --------------------------------------------------
    def discretize(self, fs):
        """Tustin transform via discrete zpk, realised as cascaded biquads.

        Going through zpk keeps lightly damped high-frequency poles well
        conditioned; the state vector matches scipy's sosfilt ``zi`` layout.
        """
        self._fs = float(fs)
        self._ss = _sos_to_ss(self.sos())
        self.x = np.zeros(self._ss[0].shape[0])
        return self._ss

    @property
    def ss(self):
        if self._ss is None:
            raise ValidationError("system not discretised")
        return self._ss

    def zpk_discrete(self):
        if self._fs is None:
            raise ValidationError("system not discretised")
        return signal.bilinear_zpk(self.zeros, self.poles, self.gain, self._fs)

    def sos(self):
        """Discrete second-order sections (scipy ordering b0 b1 b2 a0 a1 a2)."""
        zd, pd, kd = self.zpk_discrete()
        if len(pd) == 0:
            return np.array([[kd, 0.0, 0.0, 1.0, 0.0, 0.0]])
        return signal.zpk2sos(zd, pd, kd)

    def dfrf(self, f):
        """Frequency response of the discretised system at f (Hz)."""
        zd, pd, kd = self.zpk_discrete()
        z = np.exp(2j * np.pi * np.asarray(f, dtype=float) / self._fs)
        out = np.ones_like(z) * kd
        for q in zd:
            out = out * (z - q)
        for p in pd:
            out = out / (z - p)
        return out

    def reset(self):
        if self._ss is not None:
            self.x = np.zeros(self._ss[0].shape[0])

    def step(self, u: float) -> float:
        """One fixed-step update x <- Ax + Bu, y = Cx + Du."""
        A, B, C, D = self.ss
        y = float((C @ self.x)[0] + D[0, 0] * u) if A.size else float(D[0, 0] * u)
        if A.size:
            self.x = A @ self.x + B[:, 0] * u
        return y

    def simulate(self, u):
        """Run a block of inputs from the current state (vectorised)."""
        A, B, C, D = self.ss
        u = np.asarray(u, dtype=float)
        if not A.size:
            return D[0, 0] * u
        out = np.empty_like(u)
        x = self.x
        Cr = C[0]
        Bc = B[:, 0]
        d = D[0, 0]
        for n, un in enumerate(u):
            out[n] = Cr @ x + d * un
            x = A @ x + Bc * un
        self.x = x
        return out


def _sos_to_ss(sos):
    """Series connection of transposed direct-form II biquads."""
    A = np.zeros((0, 0))
    B = np.zeros((0, 1))
    C = np.zeros((1, 0))
    D = np.ones((1, 1))
    for b0, b1, b2, a0, a1, a2 in np.asarray(sos, float):
        b0, b1, b2, a1, a2 = b0 / a0, b1 / a0, b2 / a0, a1 / a0, a2 / a0
        As = np.array([[-a1, 1.0], [-a2, 0.0]])
        Bs = np.array([[b1 - a1 * b0], [b2 - a2 * b0]])
        Cs = np.array([[1.0, 0.0]])
        n = A.shape[0]
        A = np.block([[A, np.zeros((n, 2))], [Bs @ C, As]])
        B = np.vstack([B, Bs @ D])
        C = np.hstack([b0 * C, Cs])
        D = b0 * D
    return A, B, C, D


def first_order(bandwidth_hz, gain=1.0, name=""):
    w = 2 * np.pi * bandwidth_hz
    return LinearSystem((), (-w,), gain * w, name=name)


def resonant_mode(freq_hz, zeta, modal_gain=1.0):
    """Unit-dc mode factor ((1-g)(s^2 + 2 zeta w s) + w^2) / (s^2 + 2 zeta w s + w^2)."""
    w = 2 * np.pi * freq_hz
    den = [1.0, 2 * zeta * w, w * w]
    g = float(modal_gain)
    num = [1 - g, (1 - g) * 2 * zeta * w, w * w]
    if g == 1.0:
        num = [w * w]
    return LinearSystem.from_tf(num, den, name=f"mode@{freq_hz:g}Hz")


@dataclass
class PlantConfig:
    # (frequency Hz, damping ratio, modal gain)
    modes: list = field(default_factory=lambda: [(9000.0, 0.015, 1.0), (16800.0, 0.03, 0.5)])
    k_piezo: float = 5.0  # angstrom / V
    k_hva: float = 10.0  # V / V
    hva_bandwidth: float = 25e3  # Hz
    preamp_gain: float = 1e8  # V / A
    preamp_gbw: float = 4e12  # Hz * V/A, bandwidth = gbw / R
    preamp_bandwidth: float | None = None  # overrides the tradeoff curve
    adc_clip: float = 10.0  # V
    noise_sigma: float = 0.0  # A

    def __post_init__(self):
        for name in ("k_piezo", "k_hva", "preamp_gain", "hva_bandwidth", "adc_clip"):
            if not getattr(self, name) > 0:
                raise ValidationError(f"{name} must be positive")
        if self.noise_sigma < 0:
            raise ValidationError("noise_sigma must be non-negative")
        for f, zeta, _ in self.modes:
            if not (f > 0 and zeta > 0):
                raise ValidationError(f"unstable or invalid mode ({f}, {zeta})")
        self.modes = [tuple(float(v) for v in m) for m in self.modes]

    @property
    def R(self):
        return self.preamp_gain

    @property
    def preamp_bw(self):
        if self.preamp_bandwidth is not None:
            return self.preamp_bandwidth
        return self.preamp_gbw / self.preamp_gain

    @property
    def dc_gain(self):
        """Angstrom of piezo extension per volt at the HVA input."""
        return self.k_hva * self.k_piezo

    @classmethod
    def from_dict(cls, d):
        return cls(**d)

    def to_dict(self):
        return {
            "modes": [list(m) for m in self.modes],
            "k_piezo": self.k_piezo,
            "k_hva": self.k_hva,
            "hva_bandwidth": self.hva_bandwidth,
            "preamp_gain": self.preamp_gain,
            "preamp_gbw": self.preamp_gbw,
            "preamp_bandwidth": self.preamp_bandwidth,
            "adc_clip": self.adc_clip,
            "noise_sigma": self.noise_sigma,
        }


#: Minimum ratio between sample rate and highest resonance accepted by build_plant.
MIN_OVERSAMPLING = 5.0


def build_plant(cfg: PlantConfig, fs: float):
    """Return discretised (G_hp, G_A).

    G_hp maps HVA input volts to piezo extension in angstrom; G_A maps
    tunneling current in amperes to preamp output volts.
    """
    top = max((m[0] for m in cfg.modes), default=0.0)
    if top and fs < MIN_OVERSAMPLING * top:
        raise ValidationError(
            f"fs={fs:g} Hz too low for a {top:g} Hz mode (need >= {MIN_OVERSAMPLING:g}x)"
        )
    g_hp = first_order(cfg.hva_bandwidth, cfg.dc_gain, name="G_hp")
    for f, zeta, g in cfg.modes:
        g_hp = g_hp * resonant_mode(f, zeta, g)
    g_hp.name = "G_hp"
    if not g_hp.is_stable():
        raise ValidationError("G_hp has poles outside the open left half-plane")
    g_a = first_order(cfg.preamp_bw, cfg.preamp_gain, name="G_A")
    g_hp.discretize(fs)
    g_a.discretize(fs)
    return g_hp, g_a


def discretize(sys: LinearSystem, fs: float):
    return sys.discretize(fs)


def step_sample(sys: LinearSystem, u: float) -> float:
    return sys.step(u)


def measure_current(i_true, cfg: PlantConfig, fs: float, rng=None, g_a: LinearSystem | None = None):
    """Preamp output for a block of true currents: filter, add noise, clip.

    Returns (volts, clipped_mask). The noise path is the only RNG consumer
    and is skipped entirely when ``noise_sigma`` is zero.
    """
    i_true = np.asarray(i_true, dtype=float)
    if g_a is None:
        g_a = first_order(cfg.preamp_bw, cfg.preamp_gain)
        g_a.discretize(fs)
    sos = g_a.sos()
    v = signal.sosfilt(sos, i_true)
    if cfg.noise_sigma > 0:
        if rng is None:
            raise ValidationError("noise requested without an rng")
        v = v + rng.standard_normal(v.shape) * cfg.noise_sigma * cfg.preamp_gain
    clipped = np.abs(v) > cfg.adc_clip
    return np.clip(v, -cfg.adc_clip, cfg.adc_clip), clipped


def write_frf_csv(path, f, H):
    H = np.asarray(H)
    rows = np.column_stack([f, 20 * np.log10(np.abs(H)), np.degrees(np.angle(H))])
    np.savetxt(path, rows, delimiter=",", header="f_Hz,mag_dB,phase_deg", comments="", fmt="%.10g")
