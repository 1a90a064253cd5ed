"""Synthetic tunneling junction.

Maps tip height, bias and local surface properties to tunneling current
with the simplified exponential gap law

    I = L(V) * exp(-1.025 * delta * sqrt(phi))

where ``delta`` is the tip-sample gap in angstrom, ``phi`` the local barrier
height in eV and ``L(V)`` a per-site polynomial lumping the densities of
states and the preamplifier gain (kept in amperes).
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from math import comb
from typing import Sequence

import numpy as np

#: Gap decay constant, 1/(angstrom * sqrt(eV)).
GAP_CONSTANT = 1.025
#: Barrier-height-from-slope constant, eV * angstrom^2.
BARRIER_CONSTANT = 0.952
#: Highest supported degree of the conductance polynomial.
MAX_DEGREE = 7


class CrashError(RuntimeError):
    """Tip below the surface (negative gap)."""


class SiteKind(str, enum.Enum):
    HSi = "HSi"
    DanglingBond = "DanglingBond"
    Vacancy = "Vacancy"


KIND_CODES = {SiteKind.HSi: 0, SiteKind.DanglingBond: 1, SiteKind.Vacancy: 2}
CODE_KINDS = {v: k for k, v in KIND_CODES.items()}


@dataclass(frozen=True)
class Site:
    kind: SiteKind
    height: float  # angstrom
    phi: float  # eV
    conduct: tuple  # c_0..c_K of L(V), amperes per volt^k
    v_desorb: float = 2.8  # volts, magnitude

    def __post_init__(self):
        if not self.phi > 0:
            raise ValueError(f"barrier height must be positive, got {self.phi}")
        if len(self.conduct) == 0 or len(self.conduct) > MAX_DEGREE + 1:
            raise ValueError("conductance polynomial must have 1..8 coefficients")
        if self.kind is SiteKind.Vacancy and any(c != 0 for c in self.conduct):
            raise ValueError("vacancy sites carry zero conductance")

    def L(self, V):
        return np.polynomial.polynomial.polyval(V, self.conduct)


@dataclass(frozen=True)
class JunctionQuery:
    x: float  # nm
    y: float  # nm
    z_tip: float  # angstrom, same datum as Site.height
    V: float  # instantaneous total bias, volts


@dataclass
class SurfaceModel:
    """Lattice of sites held as dense arrays.

    ``conduct`` has shape (rows, cols, K+1). Site (i, j) sits at
    x = j * a, y = i * a (nm).
    """

    a: float
    kind: np.ndarray
    height: np.ndarray
    phi: np.ndarray
    conduct: np.ndarray
    v_desorb: np.ndarray
    capacitance: float = 0.5e-12
    noise_sigma: float = 0.0
    i_min: float = 1e-15
    db_conduct_factor: float = 5.0
    db_phi_factor: float = 0.6

    def __post_init__(self):
        self.kind = np.asarray(self.kind, dtype=np.int8)
        self.height = np.asarray(self.height, dtype=float)
        self.phi = np.asarray(self.phi, dtype=float)
        self.conduct = np.asarray(self.conduct, dtype=float)
        self.v_desorb = np.asarray(self.v_desorb, dtype=float)
        if self.height.ndim != 2 or self.height.size == 0:
            raise ValueError("surface grid must be a non-empty 2-D array")
        shape = self.height.shape
        if self.kind.shape != shape or self.phi.shape != shape or self.v_desorb.shape != shape:
            raise ValueError("per-site arrays must share the grid shape")
        if self.conduct.ndim != 3 or self.conduct.shape[:2] != shape:
            raise ValueError("conduct must have shape (rows, cols, K+1)")
        if self.conduct.shape[2] > MAX_DEGREE + 1:
            raise ValueError(f"conductance degree above {MAX_DEGREE}")
        if not self.a > 0:
            raise ValueError("lattice spacing must be positive")
        if not self.i_min > 0:
            raise ValueError("current floor must be positive")
        if np.any(self.phi <= 0):
            raise ValueError("barrier heights must be positive")
        vac = self.kind == KIND_CODES[SiteKind.Vacancy]
        if np.any(self.conduct[vac] != 0):
            raise ValueError("vacancy sites carry zero conductance")

    @classmethod
    def uniform(cls, rows, cols, a=0.384, site: Site | None = None, **kw):
        site = site or default_site()
        k = len(site.conduct)
        return cls(
            a=a,
            kind=np.full((rows, cols), KIND_CODES[site.kind]),
            height=np.full((rows, cols), site.height),
            phi=np.full((rows, cols), site.phi),
            conduct=np.broadcast_to(np.asarray(site.conduct, float), (rows, cols, k)).copy(),
            v_desorb=np.full((rows, cols), site.v_desorb),
            **kw,
        )

    @property
    def shape(self):
        return self.height.shape

    @property
    def extent(self):
        """(width, height) in nm covered by the lattice nodes."""
        rows, cols = self.shape
        return (cols - 1) * self.a, (rows - 1) * self.a

    def contains(self, x, y):
        w, h = self.extent
        eps = 1e-9 * self.a
        return -eps <= x <= w + eps and -eps <= y <= h + eps

    def position(self, i, j):
        return j * self.a, i * self.a

    def nearest(self, x, y):
        rows, cols = self.shape
        j = int(np.clip(np.rint(x / self.a), 0, cols - 1))
        i = int(np.clip(np.rint(y / self.a), 0, rows - 1))
        return i, j

    def site(self, i, j) -> Site:
        return Site(
            kind=CODE_KINDS[int(self.kind[i, j])],
            height=float(self.height[i, j]),
            phi=float(self.phi[i, j]),
            conduct=tuple(float(c) for c in self.conduct[i, j]),
            v_desorb=float(self.v_desorb[i, j]),
        )

    def set_site(self, i, j, site: Site):
        k = self.conduct.shape[2]
        if len(site.conduct) > k:
            pad = np.zeros(self.shape + (len(site.conduct) - k,))
            self.conduct = np.concatenate([self.conduct, pad], axis=2)
            k = self.conduct.shape[2]
        self.kind[i, j] = KIND_CODES[site.kind]
        self.height[i, j] = site.height
        self.phi[i, j] = site.phi
        self.conduct[i, j] = 0.0
        self.conduct[i, j, : len(site.conduct)] = site.conduct
        self.v_desorb[i, j] = site.v_desorb

    def desorb(self, i, j):
        """Turn an H-terminated site into a dangling bond. Returns False if not HSi."""
        if self.kind[i, j] != KIND_CODES[SiteKind.HSi]:
            return False
        self.kind[i, j] = KIND_CODES[SiteKind.DanglingBond]
        self.conduct[i, j] *= self.db_conduct_factor
        self.phi[i, j] *= self.db_phi_factor
        return True

    def copy(self):
        return SurfaceModel(
            a=self.a,
            kind=self.kind.copy(),
            height=self.height.copy(),
            phi=self.phi.copy(),
            conduct=self.conduct.copy(),
            v_desorb=self.v_desorb.copy(),
            capacitance=self.capacitance,
            noise_sigma=self.noise_sigma,
            i_min=self.i_min,
            db_conduct_factor=self.db_conduct_factor,
            db_phi_factor=self.db_phi_factor,
        )

    def check_operating_bias(self, biases: Sequence[float]):
        """Raise if any H-Si site's L(V) vanishes or changes sign over the biases."""
        hsi = self.kind == KIND_CODES[SiteKind.HSi]
        if not np.any(hsi):
            return
        coef = self.conduct[hsi]
        vals = np.stack([np.polynomial.polynomial.polyval(v, coef.T) for v in biases], axis=-1)
        sign = np.sign(vals)
        if np.any(vals == 0) or np.any(sign != sign[:, :1]):
            raise ValueError("L(V) vanishes or changes sign inside the operating bias range")


def default_site(kind: SiteKind = SiteKind.HSi) -> Site:
    """H-Si site with a cubic conductance giving ~0.5 nA at -2.5 V and ~6 A gap."""
    return Site(kind=kind, height=0.0, phi=4.0, conduct=(0.0, 2.0e-5, 0.0, 4.0e-6), v_desorb=2.8)


def sample_site(surface: SurfaceModel, x: float, y: float) -> Site:
    """Bilinear interpolation of height, phi and conductance at (x, y) nm.

    Kind and desorption threshold come from the nearest lattice node.
    """
    if not surface.contains(x, y):
        raise IndexError(f"position ({x}, {y}) nm outside surface extent {surface.extent}")
    rows, cols = surface.shape
    gx, gy = x / surface.a, y / surface.a
    j0 = min(int(math.floor(gx)), max(cols - 2, 0))
    i0 = min(int(math.floor(gy)), max(rows - 2, 0))
    j0, i0 = max(j0, 0), max(i0, 0)
    j1, i1 = min(j0 + 1, cols - 1), min(i0 + 1, rows - 1)
    fx = min(max(gx - j0, 0.0), 1.0) if j1 > j0 else 0.0
    fy = min(max(gy - i0, 0.0), 1.0) if i1 > i0 else 0.0
    w = ((1 - fx) * (1 - fy), fx * (1 - fy), (1 - fx) * fy, fx * fy)
    idx = ((i0, j0), (i0, j1), (i1, j0), (i1, j1))

    def blend(arr):
        return sum(wk * arr[ij] for wk, ij in zip(w, idx))

    ni, nj = surface.nearest(x, y)
    kind = CODE_KINDS[int(surface.kind[ni, nj])]
    conduct = tuple(float(c) for c in blend(surface.conduct))
    if kind is SiteKind.Vacancy and any(conduct):
        # off-node blend next to a vacancy still conducts
        kind = SiteKind.HSi
    return Site(
        kind=kind,
        height=float(blend(surface.height)),
        phi=float(blend(surface.phi)),
        conduct=conduct,
        v_desorb=float(surface.v_desorb[ni, nj]),
    )


def tunneling_current(q: JunctionQuery, s: Site) -> float:
    delta = q.z_tip - s.height
    if delta < 0:
        raise CrashError(f"tip crashed: gap {delta:.4g} A at ({q.x}, {q.y}) nm")
    return float(s.L(q.V)) * math.exp(-GAP_CONSTANT * delta * math.sqrt(s.phi))


def current(conduct, phi, delta, V):
    """Vectorised junction current for arrays of gaps and biases (no crash check)."""
    L = np.polynomial.polynomial.polyval(V, np.asarray(conduct, float))
    return L * np.exp(-GAP_CONSTANT * np.asarray(delta) * np.sqrt(phi))


def log_current_slope(s: Site | float) -> float:
    """d(ln I)/d(delta) in 1/angstrom."""
    phi = s.phi if isinstance(s, Site) else float(s)
    if not phi > 0:
        raise ValueError("barrier height must be positive")
    return -GAP_CONSTANT * math.sqrt(phi)


def barrier_from_slope(slope: float) -> float:
    return BARRIER_CONSTANT * slope * slope


def barrier_from_slope_exact(slope: float) -> float:
    """Inverse of :func:`log_current_slope` using 1/1.025**2 instead of 0.952."""
    return (slope / GAP_CONSTANT) ** 2


def gap_for_current(s: Site, V: float, current_a: float) -> float:
    """Gap (angstrom) at which |I| equals ``current_a`` for bias V."""
    L = abs(float(s.L(V)))
    if L <= 0 or current_a <= 0:
        raise ValueError("current unreachable: L(V) vanishes")
    return math.log(L / current_a) / (GAP_CONSTANT * math.sqrt(s.phi))


def capacitive_current(C, Vm, omega, t):
    return C * Vm * omega * np.cos(omega * np.asarray(t))


def _sin_power_coefficients(k: int, n: int) -> complex:
    """Coefficient of exp(i n theta) in sin(theta)**k."""
    if (n + k) % 2 or abs(n) > k:
        return 0.0
    j = (n + k) // 2
    return comb(k, j) * (-1) ** (k - j) / (2j) ** k


def harmonic_amplitudes(s: Site, delta: float, V_dc: float, Vm: float, n_max: int) -> np.ndarray:
    """Signed series coefficients I_0..I_n_max of f(V_dc + Vm sin wt).

    Odd n are coefficients of sin(n wt), even n (n > 0) of cos(n wt), with
    f(V) = L(V) exp(-1.025 delta sqrt(phi)). Exact for polynomial L.
    """
    scale = math.exp(-GAP_CONSTANT * delta * math.sqrt(s.phi))
    poly = np.polynomial.Polynomial(s.conduct)
    degree = len(s.conduct) - 1
    out = np.zeros(n_max + 1)
    for k in range(degree + 1):
        fk = poly.deriv(k)(V_dc) * scale if k else poly(V_dc) * scale
        if fk == 0:
            continue
        weight = fk * Vm**k / math.factorial(k)
        for n in range(0, min(n_max, k) + 1):
            c = _sin_power_coefficients(k, n)
            if c == 0:
                continue
            if n == 0:
                out[0] += weight * c.real if isinstance(c, complex) else weight * c
            elif n % 2:
                out[n] += weight * (-2.0 * complex(c).imag)
            else:
                out[n] += weight * (2.0 * complex(c).real)
    return out


def small_signal_limit(s: Site, delta: float, V_dc: float, n: int) -> float:
    """|I_n| / Vm**n as Vm -> 0: |f^(n)(V_dc)| / (2**(n-1) n!)."""
    scale = math.exp(-GAP_CONSTANT * delta * math.sqrt(s.phi))
    fn = np.polynomial.Polynomial(s.conduct).deriv(n)(V_dc) * scale
    return abs(fn) / (2 ** (n - 1) * math.factorial(n))
