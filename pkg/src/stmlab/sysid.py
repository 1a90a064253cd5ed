"""Closed-loop frequency response measurement and rational fitting."""
from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import signal

from .dsp import demodulate
from .plant import LinearSystem

INJECTIONS = ("U1", "U2", "D1", "D2")
MAX_LN_PERTURBATION = 0.2
COHERENCE_MIN = 0.95


class SysIDError(ValueError):
    pass


@dataclass
class FRFData:
    f: np.ndarray  # Hz
    G: np.ndarray  # complex ratio Y2/Y1
    G11: np.ndarray  # Y1 / injection
    G21: np.ndarray  # Y2 / injection
    amplitude: float
    coherence: np.ndarray
    inject: str = "U1"
    partial: bool = False

    def __post_init__(self):
        self.f = np.asarray(self.f, float)
        if np.any(np.diff(self.f) <= 0):
            raise SysIDError("frequency grid must be strictly increasing")
        self.coherence = np.clip(np.asarray(self.coherence, float), 0.0, 1.0)

    def __len__(self):
        return len(self.f)

    def to_csv(self, path):
        rows = np.column_stack([self.f, self.G.real, self.G.imag, self.coherence])
        np.savetxt(path, rows, delimiter=",", header="f_Hz,re,im,coherence", comments="", fmt="%.12g")

    @classmethod
    def from_csv(cls, path, amplitude=float("nan")):
        d = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        G = d[:, 1] + 1j * d[:, 2]
        nan = np.full(len(d), np.nan + 0j)
        return cls(d[:, 0], G, nan, nan, amplitude, d[:, 3])


def _segment_coherence(a, b, f, fs, nseg=8):
    """Magnitude-squared coherence at f from single-bin DFTs of equal segments."""
    n = len(a) // nseg
    if n < 2:
        return 1.0
    a = np.asarray(a, float) - np.mean(a)
    b = np.asarray(b, float) - np.mean(b)
    t = np.arange(n) / fs
    ref = np.exp(-2j * np.pi * f * t) * np.hanning(n)
    A = np.array([np.dot(a[k * n:(k + 1) * n], ref) for k in range(nseg)])
    B = np.array([np.dot(b[k * n:(k + 1) * n], ref) for k in range(nseg)])
    num = abs(np.sum(np.conj(A) * B)) ** 2
    den = np.sum(abs(A) ** 2) * np.sum(abs(B) ** 2)
    return float(num / den) if den > 0 else 0.0


def dwell_time(f, cutoff):
    """max(10 LPF time constants, 20 periods)."""
    return max(10.0 / (2 * np.pi * cutoff), 20.0 / f)


def measure_closed_loop_frf(loop, inject: str = "U1", f=None, amplitude: float = 0.02,
                            settle: float = 0.02, cutoff_ratio: float = 0.1, check: bool = True) -> FRFData:
    """Stepped-sine two-point injection. G = Y2/Y1 for either injection point.

    U1/D1 add to the log setpoint; U2/D2 add to the HVA input. Y1 is the HVA
    input and Y2 the fed-back log signal (ln current or ln I1).
    """
    if inject not in INJECTIONS:
        raise SysIDError(f"unknown injection point {inject!r}")
    if f is None:
        f = np.geomspace(100.0, 4500.0, 30)
    f = np.asarray(f, float)
    if check:
        predicted = _predicted_perturbation(loop, inject, f, amplitude)
        if predicted >= MAX_LN_PERTURBATION:
            raise SysIDError(
                f"injection amplitude {amplitude:g} gives a ln-current perturbation of {predicted:.3g} "
                f"(limit {MAX_LN_PERTURBATION})"
            )
    on_setpoint = inject in ("U1", "D1")
    G = np.full(len(f), np.nan + 0j)
    G11 = G.copy()
    G21 = G.copy()
    coh = np.zeros(len(f))
    partial = False
    for k, fk in enumerate(f):
        cutoff = cutoff_ratio * fk
        dwell = dwell_time(fk, cutoff)
        n_settle = int(round((settle + 10 / (2 * np.pi * cutoff)) * loop.fs))
        n_meas = int(round(dwell * loop.fs))
        # round the measured block to whole periods
        per = loop.fs / fk
        n_meas = int(round(max(round(n_meas / per), 1) * per))
        n = n_settle + n_meas
        t = np.arange(n) / loop.fs
        tone = amplitude * np.sin(2 * np.pi * fk * t)
        tr = loop.run(n, u1=tone) if on_setpoint else loop.run(n, u2=tone)
        if tr.crashed or len(tr) < n:
            partial = True
            break
        ts = n_settle / loop.fs
        ref = demodulate(tone, loop.fs, fk, cutoff=cutoff, settle=ts)[0]
        y1 = demodulate(tr.y1 - tr.y1.mean(), loop.fs, fk, cutoff=cutoff, settle=ts)
        y2 = demodulate(tr.fb - tr.fb.mean(), loop.fs, fk, cutoff=cutoff, settle=ts)
        G11[k] = y1[0] / ref
        G21[k] = y2[0] / ref
        G[k] = y2[0] / y1[0]
        coh[k] = _segment_coherence(tr.y1[n_settle:], tr.fb[n_settle:], fk, loop.fs)
    return FRFData(f, G, G11, G21, amplitude, coh, inject, partial)


def _predicted_perturbation(loop, inject, f, amplitude):
    from .control import pi_shape

    G = loop.plant_frf(f)
    C = loop.gains.k_i * pi_shape(f, loop.gains.omega_c, loop.fs)
    if inject in ("U1", "D1"):
        y2 = np.abs(C * G / (1 + C * G))
    else:
        y2 = np.abs(G / (1 + C * G))
    return float(np.max(y2) * amplitude)


# -- rational fitting ---------------------------------------------------------------
@dataclass
class FitResult:
    system: LinearSystem
    order: int
    rmse_db: float
    f: np.ndarray
    converged: bool = True
    residues: np.ndarray | None = None
    poles: np.ndarray | None = None
    d: float = 0.0

    def frf(self, f=None):
        return self.system.frf(self.f if f is None else f)

    def report(self):
        s = self.system
        return {
            "order": self.order,
            "rmse_db": self.rmse_db,
            "gain": s.gain,
            "poles": [[p.real, p.imag] for p in s.poles],
            "zeros": [[z.real, z.imag] for z in s.zeros],
            "converged": self.converged,
        }

    def to_json(self, path):
        with open(path, "w") as fh:
            json.dump(self.report(), fh, indent=2, sort_keys=True)


def rmse_db(fit, frf, f=None) -> float:
    """RMS of the dB magnitude difference on the given grid.

    ``fit`` may be a FitResult, LinearSystem or complex array; ``frf`` an
    FRFData or complex array (then ``f`` is required for model inputs).
    """
    if isinstance(frf, FRFData):
        f = frf.f if f is None else f
        meas = frf.G
    else:
        meas = np.asarray(frf)
    if isinstance(fit, FitResult):
        model = fit.system.frf(f)
    elif isinstance(fit, LinearSystem):
        model = fit.frf(f)
    else:
        model = np.asarray(fit)
    d = 20 * np.log10(np.abs(model)) - 20 * np.log10(np.abs(meas))
    return float(np.sqrt(np.mean(d**2)))


def _initial_poles(order, w):
    npairs = order // 2
    beta = np.geomspace(w[0], w[-1], npairs + 2)[1:-1] if npairs else np.array([])
    poles = []
    for b in beta:
        poles += [complex(-b / 100, b), complex(-b / 100, -b)]
    if order % 2:
        poles.append(complex(-w[-1] if npairs else -np.sqrt(w[0] * w[-1]), 0.0))
    return np.array(poles)


def _basis(s, poles):
    """Real-valued partial-fraction basis; complex pairs as (1/(s-p)+1/(s-p*), j/(s-p)-j/(s-p*))."""
    cols = []
    k = 0
    kinds = []
    while k < len(poles):
        p = poles[k]
        if abs(p.imag) > 0:
            cols.append(1 / (s - p) + 1 / (s - np.conj(p)))
            cols.append(1j / (s - p) - 1j / (s - np.conj(p)))
            kinds.append(("c", p))
            k += 2
        else:
            cols.append(1 / (s - p.real))
            kinds.append(("r", p.real))
            k += 1
    return np.column_stack(cols) if cols else np.zeros((len(s), 0)), kinds


def _sort_pairs(poles):
    real = sorted([p.real for p in poles if abs(p.imag) <= 1e-12 * max(abs(p), 1)])
    cplx = sorted([p for p in poles if p.imag > 1e-12 * max(abs(p), 1)], key=lambda p: p.imag)
    out = []
    for p in cplx:
        out += [p, np.conj(p)]
    return np.array(out + [complex(r, 0) for r in real])


def _relocate(s, H, poles, weight):
    """One vector-fitting pole relocation step."""
    Phi, kinds = _basis(s, poles)
    n = Phi.shape[1]
    A = np.hstack([Phi, np.ones((len(s), 1)), -H[:, None] * Phi])
    A = A * weight[:, None]
    b = H * weight
    Ar = np.vstack([A.real, A.imag])
    br = np.concatenate([b.real, b.imag])
    x, *_ = np.linalg.lstsq(Ar, br, rcond=None)
    ct = x[n + 1:]
    # state-space of sigma(s): A_s - b c^T gives the zeros of sigma
    Am = np.zeros((n, n))
    bv = np.zeros(n)
    k = 0
    for kind, p in kinds:
        if kind == "c":
            Am[k:k + 2, k:k + 2] = [[p.real, p.imag], [-p.imag, p.real]]
            bv[k:k + 2] = [2.0, 0.0]
            k += 2
        else:
            Am[k, k] = p
            bv[k] = 1.0
            k += 1
    new = np.linalg.eigvals(Am - np.outer(bv, ct))
    # reflect unstable poles
    new = np.where(new.real > 0, -new.real + 1j * new.imag, new)
    new = np.where(new.real == 0, new - 1e-6 * np.abs(new) - 1e-9, new)
    return _sort_pairs(new)


def _residues(s, H, poles, weight, with_d=True):
    Phi, kinds = _basis(s, poles)
    A = np.hstack([Phi, np.ones((len(s), 1))]) if with_d else Phi
    A = A * weight[:, None]
    b = H * weight
    x, *_ = np.linalg.lstsq(np.vstack([A.real, A.imag]), np.concatenate([b.real, b.imag]), rcond=None)
    d = x[-1] if with_d else 0.0
    res = []
    k = 0
    for kind, p in kinds:
        if kind == "c":
            r = x[k] + 1j * x[k + 1]
            res += [r, np.conj(r)]
            k += 2
        else:
            res.append(complex(x[k]))
            k += 1
    return np.array(res), float(d)


def _to_linear_system(poles, res, d, scale):
    """Pole-residue model in normalised s (s/scale) to physical zpk."""
    den = np.real(np.poly(poles)) if len(poles) else np.array([1.0])
    num = d * den
    for k, (p, r) in enumerate(zip(poles, res)):
        others = np.delete(poles, k)
        term = r * np.poly(others) if len(others) else np.array([r])
        num = num + np.concatenate([np.zeros(len(den) - len(term)), term])
    num = np.real_if_close(num, tol=1e6).real
    # trim negligible leading coefficients so the zero count is right
    tol = 1e-10 * np.max(np.abs(num))
    while len(num) > 1 and abs(num[0]) <= tol:
        num = num[1:]
    z, p, k = signal.tf2zpk(num, den)
    k_phys = k * scale ** (len(p) - len(z))
    return LinearSystem(z * scale, p * scale, k_phys)


def fit_rational(frf, order: int, band=None, f=None, max_iter: int = 50, tol: float = 1e-10,
                 weight: str = "relative", strictly_proper: bool = False) -> FitResult:
    """Vector fitting with pole reflection on the (coherence-gated) FRF points."""
    if isinstance(frf, FRFData):
        fg, H = frf.f, frf.G
        keep = frf.coherence >= COHERENCE_MIN
        keep &= np.isfinite(H)
    else:
        fg = np.asarray(f, float)
        H = np.asarray(frf, complex)
        keep = np.isfinite(H)
    if band is not None:
        keep &= (fg >= band[0]) & (fg <= band[1])
    fg, H = fg[keep], H[keep]
    if order < 1:
        raise SysIDError("order must be >= 1")
    if len(fg) < 2:
        raise SysIDError("not enough FRF points to fit")
    w = 2 * np.pi * fg
    scale = float(w[-1])
    s = 1j * w / scale
    wt = 1.0 / np.abs(H) if weight == "relative" else np.ones(len(H))
    poles = _initial_poles(order, w / scale)
    best = None
    converged = False
    prev = None
    for it in range(max_iter):
        poles = _relocate(s, H, poles, wt)
        res, d = _residues(s, H, poles, wt, not strictly_proper)
        sysn = _model_values(s, poles, res, d)
        err = float(np.sqrt(np.mean((20 * np.log10(np.abs(sysn) / np.abs(H))) ** 2)))
        if best is None or err < best[0]:
            best = (err, poles.copy(), res.copy(), d)
        if prev is not None and abs(prev - err) <= tol * max(1.0, err):
            converged = True
            break
        prev = err
    if not converged:
        warnings.warn(f"vector fitting did not converge in {max_iter} iterations; returning best-so-far")
    err, poles, res, d = best
    system = _to_linear_system(poles, res, d, scale)
    result = FitResult(system, order, 0.0, fg, converged, res, poles * scale, d)
    result.rmse_db = rmse_db(system.frf(fg), H)
    return result


def _model_values(s, poles, res, d):
    out = np.full(len(s), d, dtype=complex)
    for p, r in zip(poles, res):
        out += r / (s - p)
    return out


def fit_sweep(frf, orders, band=None, f=None, **kw):
    """Fits over increasing orders, carrying the best model forward.

    A model of order n is also representable at every higher order (extra
    poles with zero residue), so the reported RMSE is non-increasing.
    """
    out = []
    best = None
    for n in sorted(orders):
        r = fit_rational(frf, n, band=band, f=f, **kw)
        if best is not None and best.rmse_db < r.rmse_db:
            r = FitResult(best.system, n, best.rmse_db, best.f, best.converged, best.residues, best.poles, best.d)
        best = r
        out.append(r)
    return out
