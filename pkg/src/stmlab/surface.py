"""Procedural surfaces and JSON serialisation of :class:`SurfaceModel`."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np

from .junction import KIND_CODES, CODE_KINDS, Site, SiteKind, SurfaceModel, default_site

#: Si(100) single-layer step height, angstrom.
STEP_HEIGHT = 1.36


@dataclass
class SurfaceSpec:
    rows: int = 32
    cols: int = 32
    a: float = 0.384  # nm
    steps: int = 0  # number of step edges along x
    step_height: float = STEP_HEIGHT
    dimers: bool = False
    dimer_corrugation: float = 0.3  # angstrom
    defects: float = 0.0  # dangling-bond density per site
    vacancies: float = 0.0  # vacancy density per site
    vacancy_depth: float = 1.0  # angstrom
    phi: float = 4.0
    conduct: tuple = (0.0, 2.0e-5, 0.0, 4.0e-6)
    v_desorb: float = 2.8
    capacitance: float = 0.5e-12
    noise_sigma: float = 0.0
    i_min: float = 1e-15
    db_conduct_factor: float = 5.0
    db_phi_factor: float = 0.6
    seed: int = 0


def generate_surface(spec: SurfaceSpec | None = None, **kw) -> SurfaceModel:
    """Stepped / dimerised H-Si lattice with random dangling bonds and vacancies."""
    spec = spec or SurfaceSpec(**kw)
    rng = np.random.default_rng(spec.seed)
    site = Site(SiteKind.HSi, 0.0, spec.phi, tuple(spec.conduct), spec.v_desorb)
    s = SurfaceModel.uniform(
        spec.rows, spec.cols, spec.a, site,
        capacitance=spec.capacitance, noise_sigma=spec.noise_sigma, i_min=spec.i_min,
        db_conduct_factor=spec.db_conduct_factor, db_phi_factor=spec.db_phi_factor,
    )
    cols = np.arange(spec.cols)
    rows = np.arange(spec.rows)
    if spec.steps > 0:
        edges = np.linspace(0, spec.cols, spec.steps + 2)[1:-1]
        level = np.searchsorted(edges, cols, side="right")
        s.height += (level * spec.step_height)[None, :]
    if spec.dimers:
        # pairs of atoms bonded across the row, a trough every other pair;
        # row direction rotates by 90 degrees on each terrace
        level = np.zeros(spec.cols, dtype=int)
        if spec.steps > 0:
            level = np.searchsorted(np.linspace(0, spec.cols, spec.steps + 2)[1:-1], cols, side="right")
        along_x = (cols % 4 < 2).astype(float)
        along_y = (rows % 4 < 2).astype(float)
        for j in range(spec.cols):
            if level[j] % 2 == 0:
                s.height[:, j] += spec.dimer_corrugation * along_x[j]
            else:
                s.height[:, j] += spec.dimer_corrugation * along_y
    n = spec.rows * spec.cols
    if spec.defects > 0 or spec.vacancies > 0:
        draw = rng.random(n).reshape(spec.rows, spec.cols)
        db = draw < spec.defects
        vac = (draw >= spec.defects) & (draw < spec.defects + spec.vacancies)
        for i, j in zip(*np.nonzero(db)):
            s.desorb(i, j)
        for i, j in zip(*np.nonzero(vac)):
            s.kind[i, j] = KIND_CODES[SiteKind.Vacancy]
            s.conduct[i, j] = 0.0
            s.height[i, j] -= spec.vacancy_depth
    return s


def _site_to_dict(site: Site):
    return {
        "kind": site.kind.value,
        "height": site.height,
        "phi": site.phi,
        "conduct": list(site.conduct),
        "v_desorb": site.v_desorb,
    }


def _site_from_dict(d, base: Site | None = None) -> Site:
    base = base or default_site()
    return Site(
        kind=SiteKind(d.get("kind", base.kind.value)),
        height=float(d.get("height", base.height)),
        phi=float(d.get("phi", base.phi)),
        conduct=tuple(float(c) for c in d.get("conduct", base.conduct)),
        v_desorb=float(d.get("v_desorb", base.v_desorb)),
    )


_GLOBALS = ("capacitance", "noise_sigma", "i_min", "db_conduct_factor", "db_phi_factor")


def surface_to_dict(s: SurfaceModel) -> dict:
    out = {"a": s.a, "rows": s.shape[0], "cols": s.shape[1]}
    for k in _GLOBALS:
        out[k] = getattr(s, k)
    out["arrays"] = {
        "kind": [[CODE_KINDS[int(k)].value for k in row] for row in s.kind],
        "height": s.height.tolist(),
        "phi": s.phi.tolist(),
        "conduct": s.conduct.tolist(),
        "v_desorb": s.v_desorb.tolist(),
    }
    return out


def surface_from_dict(d: dict) -> SurfaceModel:
    """Build a surface from one of three layouts.

    ``generator``: a :class:`SurfaceSpec` dict. ``arrays``: dense per-site
    arrays. Otherwise ``rows``/``cols`` with an optional ``default`` site,
    rectangular ``regions`` and per-site ``sites`` overrides.
    """
    if "generator" in d:
        return generate_surface(SurfaceSpec(**d["generator"]))
    glob = {k: d[k] for k in _GLOBALS if k in d}
    if "arrays" in d:
        arr = d["arrays"]
        kind = np.array([[KIND_CODES[SiteKind(k)] for k in row] for row in arr["kind"]], dtype=np.int8)
        return SurfaceModel(
            a=float(d["a"]), kind=kind, height=np.array(arr["height"], float), phi=np.array(arr["phi"], float),
            conduct=np.array(arr["conduct"], float), v_desorb=np.array(arr["v_desorb"], float), **glob,
        )
    base = _site_from_dict(d.get("default", {}))
    s = SurfaceModel.uniform(int(d["rows"]), int(d["cols"]), float(d.get("a", 0.384)), base, **glob)
    for reg in d.get("regions", []):
        i0, i1 = reg["rows"]
        j0, j1 = reg["cols"]
        site = _site_from_dict(reg, base)
        for i in range(i0, i1):
            for j in range(j0, j1):
                s.set_site(i, j, site)
    for o in d.get("sites", []):
        s.set_site(int(o["i"]), int(o["j"]), _site_from_dict(o, base))
    return s


def save_surface(s: SurfaceModel, path):
    with open(path, "w") as fh:
        json.dump(surface_to_dict(s), fh, sort_keys=True)


def load_surface(path) -> SurfaceModel:
    with open(path) as fh:
        return surface_from_dict(json.load(fh))


def spec_to_dict(spec: SurfaceSpec) -> dict:
    d = asdict(spec)
    d["conduct"] = list(d["conduct"])
    return d
