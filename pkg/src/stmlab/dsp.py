"""Lock-in demodulation, Butterworth low-pass, notch banks and swept sines."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import signal


class DSPConfigError(ValueError):
    pass


@dataclass
class LockInConfig:
    f_ref: float  # Hz
    harmonics: tuple = (1,)
    order: int = 4
    cutoff: float = 500.0  # Hz
    phase: float = 0.0  # rad, reference offset

    def __post_init__(self):
        self.harmonics = tuple(int(h) for h in self.harmonics)
        if self.order < 1:
            raise DSPConfigError("LPF order must be >= 1")
        if not self.harmonics or min(self.harmonics) < 1:
            raise DSPConfigError("harmonic indices must be >= 1")
        if self.cutoff >= min(self.harmonics) * self.f_ref:
            raise DSPConfigError(
                f"LPF cutoff {self.cutoff:g} Hz must sit below the lowest tracked frequency"
            )

    @property
    def omega(self):
        return 2 * np.pi * self.f_ref

    @property
    def settle_time(self):
        """Ten LPF time constants."""
        return 10.0 / (2 * np.pi * self.cutoff)


@dataclass
class HarmonicEstimate:
    harmonics: tuple
    in_phase: np.ndarray  # sin(i w t) coefficients
    quadrature: np.ndarray  # cos(i w t) coefficients
    valid: bool = True

    @property
    def amplitude(self):
        return np.hypot(self.in_phase, self.quadrature)

    @property
    def phase(self):
        # y = a sin(i w t + phi)
        return np.arctan2(self.quadrature, self.in_phase)

    def phasor(self):
        return self.in_phase + 1j * self.quadrature

    def __getitem__(self, h):
        k = self.harmonics.index(h)
        return complex(self.in_phase[k], self.quadrature[k])


def design_lowpass(order: int, cutoff: float, fs: float):
    """Digital Butterworth low-pass as second-order sections."""
    if order < 1:
        raise DSPConfigError("order must be >= 1")
    if not 0 < cutoff < fs / 2:
        raise DSPConfigError(f"cutoff {cutoff:g} Hz must lie in (0, fs/2)")
    return signal.butter(order, cutoff, btype="low", fs=fs, output="sos")


def design_notch(center: float, Q: float, fs: float):
    """Second-order notch section with a zero pair on the unit circle at ``center``."""
    if not 0 < center < fs / 2:
        raise DSPConfigError(f"notch centre {center:g} Hz must lie in (0, fs/2)")
    b, a = signal.iirnotch(center, Q, fs=fs)
    return np.concatenate([b, a])[None, :]


@dataclass
class NotchBank:
    centers: tuple
    Q: float = 5.0
    fs: float = 1e5
    sos: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.centers = tuple(float(c) for c in self.centers)
        if len(set(self.centers)) != len(self.centers):
            raise DSPConfigError("notch centres must be distinct")
        if self.centers:
            self.sos = np.vstack([design_notch(c, self.Q, self.fs) for c in self.centers])
        else:
            self.sos = np.zeros((0, 6))
        self.zi = np.zeros((len(self.centers), 2))

    @classmethod
    def harmonics_of(cls, f: float, count: int = 4, Q: float = 5.0, fs: float = 1e5):
        """Fundamental plus ``count - 1`` harmonics, dropping any above Nyquist."""
        centers = [k * f for k in range(1, count + 1) if k * f < fs / 2]
        return cls(tuple(centers), Q, fs)

    def __len__(self):
        return len(self.centers)

    def frf(self, f):
        h = np.ones(np.shape(f), dtype=complex)
        if len(self.centers):
            _, h = signal.sosfreqz(self.sos, worN=np.atleast_1d(f), fs=self.fs)
        return h

    def filter(self, x):
        if not len(self.centers):
            return np.asarray(x, float)
        y, self.zi = signal.sosfilt(self.sos, x, zi=self.zi)
        return y


def apply_notch_bank(bank: NotchBank, sample: float) -> float:
    return float(bank.filter(np.array([sample]))[0])


class LockIn:
    """Multi-harmonic lock-in: mix with sin/cos(i w t), LPF, scale by 2."""

    def __init__(self, cfg: LockInConfig, fs: float):
        self.cfg = cfg
        self.fs = float(fs)
        self.sos = design_lowpass(cfg.order, cfg.cutoff, fs)
        nh = len(cfg.harmonics)
        self.zi = np.zeros((2 * nh, self.sos.shape[0], 2))
        self.elapsed = 0.0
        self._last = (np.zeros(nh), np.zeros(nh))

    def reset(self):
        self.zi[:] = 0.0
        self.elapsed = 0.0

    def _mix(self, t, y):
        h = np.asarray(self.cfg.harmonics, float)[:, None]
        arg = h * self.cfg.omega * np.atleast_1d(t)[None, :] + self.cfg.phase
        y = np.atleast_1d(y)[None, :]
        return np.vstack([y * np.sin(arg), y * np.cos(arg)])

    def process(self, t, y):
        """Demodulate a block. Returns (in_phase, quadrature), each (n_harm, n)."""
        t = np.atleast_1d(np.asarray(t, float))
        mixed = self._mix(t, y)
        out = np.empty_like(mixed)
        for k in range(mixed.shape[0]):
            out[k], self.zi[k] = signal.sosfilt(self.sos, mixed[k], zi=self.zi[k])
        out *= 2.0
        nh = len(self.cfg.harmonics)
        self.elapsed += len(t) / self.fs
        self._last = (out[:nh, -1].copy(), out[nh:, -1].copy())
        return out[:nh], out[nh:]

    def step(self, t: float, y: float) -> HarmonicEstimate:
        self.process(np.array([t]), np.array([y]))
        return self.estimate()

    def estimate(self) -> HarmonicEstimate:
        x, q = self._last
        return HarmonicEstimate(self.cfg.harmonics, x, q, self.elapsed >= self.cfg.settle_time)


def lockin_step(lockin: LockIn, t: float, y: float) -> HarmonicEstimate:
    return lockin.step(t, y)


def demodulate(y, fs, f_ref, harmonics=(1,), order=4, cutoff=None, settle=None):
    """Post-hoc lock-in on a recorded block; returns the mean phasor over the settled tail.

    ``y`` is assumed to start at t = 0 of the reference.
    """
    y = np.asarray(y, float)
    if cutoff is None:
        cutoff = f_ref / 10.0
    cfg = LockInConfig(f_ref, harmonics, order, cutoff)
    li = LockIn(cfg, fs)
    t = np.arange(len(y)) / fs
    x, q = li.process(t, y)
    start = int(round((settle if settle is not None else cfg.settle_time) * fs))
    start = min(start, len(y) - 1)
    return x[:, start:].mean(axis=1) + 1j * q[:, start:].mean(axis=1)


def swept_sine(f_start: float, f_end: float, duration: float, amplitude: float, fs: float):
    """Logarithmic sweep; returns (t, samples, instantaneous frequency)."""
    if f_end > fs / 2 or f_start > fs / 2:
        raise DSPConfigError("sweep must stay below Nyquist")
    if f_start <= 0 or f_end <= 0:
        raise DSPConfigError("sweep frequencies must be positive")
    n = max(int(round(duration * fs)), 1)
    t = np.arange(n) / fs
    if f_start == f_end:
        finst = np.full(n, float(f_start))
        phase = 2 * np.pi * f_start * t
    else:
        k = np.log(f_end / f_start) / t[-1] if n > 1 else 0.0
        finst = f_start * np.exp(k * t)
        phase = 2 * np.pi * f_start * np.expm1(k * t) / k
    return t, amplitude * np.sin(phase), finst


def filter_frf(sos, f, fs):
    _, h = signal.sosfreqz(sos, worN=np.atleast_1d(np.asarray(f, float)), fs=fs)
    return h


def write_filter_csv(path, sos, f, fs):
    from .plant import write_frf_csv

    write_frf_csv(path, f, filter_frf(sos, f, fs))
