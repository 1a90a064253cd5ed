"""Scenario files: JSON Schema validation with line-anchored errors, and a
runner that wires surface, plant, controller and experiment together and
writes the artifacts."""
from __future__ import annotations

import copy
import dataclasses
import json
import math
import os
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import jsonschema
import numpy as np

from . import control, litho, scan as scan_mod, spectroscopy, sysid
from .control import PIGains
from .io import Artifacts
from .junction import CrashError, SurfaceModel
from .loop import Loop
from .plant import PlantConfig, ValidationError
from .surface import SurfaceSpec, generate_surface, save_surface, surface_from_dict, surface_to_dict

SCHEMA_VERSION = 1
EXPERIMENTS = ("approach", "scan", "sysid", "design", "sts", "cits", "ultrafast", "hdl", "fcl", "vmfcl")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_CRASH = 3
EXIT_INTERNAL = 4


class ScenarioError(ValueError):
    """Invalid scenario; ``line`` points into the source file when known."""

    def __init__(self, msg, line: int | None = None, path: str | None = None):
        self.line = line
        self.path = path
        loc = f"line {line}: " if line else ""
        super().__init__(f"{loc}{msg}")


# -- experiment parameter sets --------------------------------------------------
@dataclass
class SysIDParams:
    inject: str = "U1"
    f_start: float = 100.0
    f_stop: float = 4500.0
    points: int = 30
    amplitude: float = 0.02
    settle: float = 0.02
    orders: list = field(default_factory=lambda: [2, 4, 6])
    x: float | None = None
    y: float | None = None


@dataclass
class DesignParams:
    f_min: float = 50.0
    hinf_db: float = 3.0
    omega_c_hz: list = field(default_factory=lambda: [5000.0, 10000.0, 20000.0])
    from_sysid: bool = False  # design on a fitted model of a measured FRF
    fit_order: int = 6
    x: float | None = None
    y: float | None = None


@dataclass
class STSParams:
    v_start: float = -2.5
    v_end: float = 2.5
    rate: float = 10.0
    points: int = 101
    x: float | None = None
    y: float | None = None


@dataclass
class ApproachParams:
    u_max: float = 4.0
    coarse_step: float = 150.0
    slew: float = 2000.0
    detect: float = 0.1e-9
    band: list = field(default_factory=lambda: [0.1, 0.9])
    max_steps: int = 50
    settle: float = 0.02
    x: float | None = None
    y: float | None = None
    start_gap: float = 500.0


@dataclass
class ScanParams(scan_mod.ScanConfig):
    adaptive: bool = False
    adapter_amplitude: float = 0.02
    adapter_f_m: float = 1500.0


@dataclass
class UltrafastParams(spectroscopy.UltrafastConfig):
    slices: list = field(default_factory=list)


@dataclass
class HDLParams(litho.HDLConfig):
    write: str = "line"  # "line" | "fe"
    path: list = field(default_factory=list)
    fe_voltage: float = 7.0
    adaptive: bool = False


@dataclass
class DSPParams:
    lockin_order: int = 4
    lockin_cutoff: float = 500.0
    notch_count: int = 4
    notch_q: float = 5.0


PARAMS = {
    "approach": ApproachParams,
    "scan": ScanParams,
    "sysid": SysIDParams,
    "design": DesignParams,
    "sts": STSParams,
    "cits": spectroscopy.CITSConfig,
    "ultrafast": UltrafastParams,
    "hdl": HDLParams,
    "fcl": litho.FCLConfig,
    "vmfcl": litho.VMFCLConfig,
}


# -- schema ---------------------------------------------------------------------------
def _type_schema(annot: str):
    a = str(annot).replace(" ", "")
    nullable = "None" in a.split("|")
    base = [t for t in a.split("|") if t != "None"][0]
    m = {
        "float": {"type": "number"},
        "int": {"type": "integer"},
        "bool": {"type": "boolean"},
        "str": {"type": "string"},
        "tuple": {"type": "array"},
        "list": {"type": "array"},
        "dict": {"type": "object"},
    }.get(base.split("[")[0], {})
    if nullable and "type" in m:
        m = {"type": [m["type"], "null"]}
    return m


def _dataclass_schema(cls, extra: dict | None = None):
    props = {f.name: _type_schema(f.type) for f in dataclasses.fields(cls)}
    if extra:
        props.update(extra)
    return {"type": "object", "properties": props, "additionalProperties": False}


def build_schema() -> dict:
    """The published scenario schema (also shipped as ``scenario.schema.json``)."""
    experiment_cases = []
    for name, cls in PARAMS.items():
        sch = _dataclass_schema(cls, {"type": {"const": name}})
        sch["required"] = ["type"]
        experiment_cases.append({"if": {"properties": {"type": {"const": name}}}, "then": sch})
    plant = _dataclass_schema(PlantConfig)
    plant["properties"]["modes"] = {
        "type": "array",
        "items": {"type": "array", "items": {"type": "number"}, "minItems": 3, "maxItems": 3},
    }
    gen = _dataclass_schema(SurfaceSpec)
    site = {
        "type": "object",
        "properties": {
            "kind": {"enum": ["HSi", "DanglingBond", "Vacancy"]},
            "height": {"type": "number"},
            "phi": {"type": "number", "exclusiveMinimum": 0},
            "conduct": {"type": "array", "items": {"type": "number"}, "maxItems": 8},
            "v_desorb": {"type": "number"},
        },
    }
    return {
        "$schema": "https://json-schema.org/draft/2020-12/schema",
        "$id": "stmlab/scenario.schema.json",
        "title": "stmlab scenario",
        "type": "object",
        "required": ["experiment"],
        "additionalProperties": False,
        "properties": {
            "version": {"const": SCHEMA_VERSION},
            "name": {"type": "string", "pattern": "^[A-Za-z0-9_.-]+$"},
            "description": {"type": "string"},
            "seed": {"type": "integer", "minimum": 0},
            "fs": {"type": "number", "exclusiveMinimum": 0},
            "out": {"type": "string"},
            "surface": {
                "type": "object",
                "properties": {
                    "file": {"type": "string"},
                    "generator": gen,
                    "arrays": {"type": "object"},
                    "rows": {"type": "integer", "minimum": 1},
                    "cols": {"type": "integer", "minimum": 1},
                    "a": {"type": "number", "exclusiveMinimum": 0},
                    "default": site,
                    "regions": {
                        "type": "array",
                        "items": {
                            "allOf": [site],
                            "type": "object",
                            "required": ["rows", "cols"],
                            "properties": {
                                "rows": {"type": "array", "items": {"type": "integer"}, "minItems": 2, "maxItems": 2},
                                "cols": {"type": "array", "items": {"type": "integer"}, "minItems": 2, "maxItems": 2},
                            },
                        },
                    },
                    "sites": {"type": "array", "items": {"allOf": [site], "required": ["i", "j"]}},
                    "capacitance": {"type": "number", "minimum": 0},
                    "noise_sigma": {"type": "number", "minimum": 0},
                    "i_min": {"type": "number", "exclusiveMinimum": 0},
                    "db_conduct_factor": {"type": "number", "exclusiveMinimum": 0},
                    "db_phi_factor": {"type": "number", "exclusiveMinimum": 0},
                },
                "additionalProperties": False,
            },
            "plant": plant,
            "controller": {
                "type": "object",
                "properties": {
                    "gains": {
                        "type": "object",
                        "required": ["k_i", "omega_c_hz"],
                        "properties": {
                            "k_i": {"type": "number", "exclusiveMinimum": 0},
                            "omega_c_hz": {"type": "number", "exclusiveMinimum": 0},
                        },
                        "additionalProperties": False,
                    },
                    "design": _dataclass_schema(DesignParams),
                    "u_clamp": {"type": "number", "exclusiveMinimum": 0},
                },
                "additionalProperties": False,
            },
            "dsp": _dataclass_schema(DSPParams),
            "experiment": {
                "type": "object",
                "required": ["type"],
                "properties": {"type": {"enum": list(EXPERIMENTS)}},
                "allOf": experiment_cases,
            },
        },
    }


def schema_path() -> Path:
    return Path(str(resources.files("stmlab") / "scenario.schema.json"))


def load_schema() -> dict:
    with open(schema_path()) as fh:
        return json.load(fh)


# -- line anchoring --------------------------------------------------------------------
def _ws(text, i):
    while i < len(text) and text[i] in " \t\r\n":
        i += 1
    return i


def json_positions(text: str) -> dict:
    """Map every JSON path (tuple of keys / indices) to its character offset."""
    dec = json.JSONDecoder()
    pos: dict = {}

    def value(i, path):
        i = _ws(text, i)
        pos[path] = i
        c = text[i]
        if c == "{":
            i = _ws(text, i + 1)
            if text[i] == "}":
                return i + 1
            while True:
                i = _ws(text, i)
                key, i = json.decoder.scanstring(text, i + 1)
                pos[path + (key,)] = i
                i = _ws(text, i)
                i = value(i + 1, path + (key,))
                i = _ws(text, i)
                if text[i] == ",":
                    i += 1
                    continue
                return i + 1
        if c == "[":
            i = _ws(text, i + 1)
            if text[i] == "]":
                return i + 1
            k = 0
            while True:
                i = value(i, path + (k,))
                i = _ws(text, i)
                k += 1
                if text[i] == ",":
                    i += 1
                    continue
                return i + 1
        _, end = dec.raw_decode(text, i)
        return end

    value(0, ())
    return pos


def line_of(text: str, path) -> int:
    pos = json_positions(text)
    path = tuple(path)
    while path not in pos and path:
        path = path[:-1]
    return text.count("\n", 0, pos.get(path, 0)) + 1


def parse(text: str, source: str = "<scenario>") -> dict:
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ScenarioError(f"{source}: invalid JSON: {exc.msg}", exc.lineno, source) from None
    validator = jsonschema.Draft202012Validator(load_schema())
    errors = sorted(validator.iter_errors(data), key=lambda e: (len(e.absolute_path), list(map(str, e.absolute_path))))
    if errors:
        # the deepest error is usually the most specific one
        err = max(errors, key=lambda e: len(e.absolute_path))
        where = "/".join(str(p) for p in err.absolute_path) or "<root>"
        raise ScenarioError(f"{source}: {where}: {err.message}", line_of(text, err.absolute_path), source)
    return data


def load(path) -> dict:
    with open(path) as fh:
        text = fh.read()
    d = parse(text, str(path))
    d.setdefault("_source", str(path))
    d["_text"] = text
    return d


# -- overrides -------------------------------------------------------------------------------
def apply_override(d: dict, key: str, value):
    """Set a dotted path, e.g. ``experiment.speed``; values are parsed as JSON when possible."""
    if isinstance(value, str):
        try:
            value = json.loads(value)
        except json.JSONDecodeError:
            pass
    cur = d
    parts = key.split(".")
    for p in parts[:-1]:
        cur = cur.setdefault(p, {})
    cur[parts[-1]] = value
    return d


def revalidate(d: dict, source="<scenario>") -> dict:
    clean = {k: v for k, v in d.items() if not k.startswith("_")}
    text = json.dumps(clean, indent=1, sort_keys=True)
    return parse(text, source)


# -- construction -------------------------------------------------------------------------
def resolve_seed(d: dict, cli_seed: int | None = None) -> int:
    """Flag beats file beats STMLAB_SEED beats 0."""
    if cli_seed is not None:
        return int(cli_seed)
    if "seed" in d:
        return int(d["seed"])
    env = os.environ.get("STMLAB_SEED")
    if env not in (None, ""):
        try:
            return int(env)
        except ValueError:
            raise ScenarioError(f"STMLAB_SEED must be an integer, got {env!r}") from None
    return 0


def build_surface(d: dict, seed: int, base_dir: Path | None = None) -> SurfaceModel:
    sd = copy.deepcopy(d.get("surface", {"rows": 32, "cols": 32}))
    if "file" in sd:
        p = Path(sd.pop("file"))
        if not p.is_absolute() and base_dir is not None:
            p = base_dir / p
        with open(p) as fh:
            sd = {**json.load(fh), **sd}
    if "generator" in sd:
        sd["generator"].setdefault("seed", seed)
    return surface_from_dict(sd)


def build_params(d: dict):
    exp = dict(d["experiment"])
    kind = exp.pop("type")
    cls = PARAMS[kind]
    try:
        return kind, cls(**exp)
    except (TypeError, ValueError) as exc:
        raise ScenarioError(f"experiment: {exc}", line_of(d.get("_text", ""), ("experiment",)) if d.get("_text") else None) from None


def build_loop(d: dict, surface: SurfaceModel, seed: int, fs: float | None) -> Loop:
    plant = PlantConfig.from_dict(d.get("plant", {}))
    fs = float(fs if fs is not None else d.get("fs", 1e5))
    ctrl = d.get("controller", {})
    loop = Loop(surface, plant, fs=fs, seed=seed, u_clamp=float(ctrl.get("u_clamp", 10.0)))
    if "gains" in ctrl:
        g = ctrl["gains"]
        loop.set_gains(PIGains(float(g["k_i"]), 2 * math.pi * float(g["omega_c_hz"])))
    elif "design" in ctrl:
        dp = DesignParams(**ctrl["design"])
        x, y = _centre(surface, dp.x, dp.y)
        region = control.design_region(
            lambda f: loop.plant_frf(f, x, y), 2 * np.pi * np.asarray(dp.omega_c_hz, float), dp.f_min, dp.hinf_db, loop.fs,
            control.default_grid(loop.fs),
        )
        loop.set_gains(region.best())
    return loop


def _centre(surface, x, y):
    w, h = surface.extent
    return (w / 2 if x is None else x), (h / 2 if y is None else y)


# -- running ---------------------------------------------------------------------------------
@dataclass
class RunResult:
    code: int
    artifacts: Artifacts | None
    message: str = ""
    summary: dict = field(default_factory=dict)


def run(d: dict, out=None, seed: int | None = None, fs: float | None = None) -> RunResult:
    """Run a validated scenario dict. Artifacts go to ``out`` (or the file's ``out``)."""
    seed = resolve_seed(d, seed)
    name = d.get("name") or Path(d.get("_source", "scenario")).stem
    out = Path(out or d.get("out") or "out")
    base_dir = Path(d["_source"]).parent if "_source" in d else None
    try:
        kind, params = build_params(d)
        surface = build_surface(d, seed, base_dir)
        loop = build_loop(d, surface, seed, fs)
    except ScenarioError:
        raise
    except (ValidationError, ValueError, TypeError, KeyError) as exc:
        raise ScenarioError(f"{type(exc).__name__}: {exc}") from None
    art = Artifacts(out, name)
    summary: dict = {"experiment": kind, "seed": seed, "fs": loop.fs}
    initial = surface.copy()
    code = EXIT_OK
    msg = ""
    try:
        code = RUNNERS[kind](loop, params, d, art, summary)
    except CrashError as exc:
        code, msg = EXIT_CRASH, str(exc)
    except (scan_mod.ScanConfigError, control.ControlError, sysid.SysIDError, spectroscopy.SpectroscopyError,
            litho.LithoError, ValidationError) as exc:
        raise ScenarioError(f"{type(exc).__name__}: {exc}") from None
    finally:
        summary["crashed"] = bool(loop.state.crashed) or code == EXIT_CRASH
        summary["sim_time"] = loop.time
        if kind in ("hdl", "fcl", "vmfcl"):
            art.json("_surface_initial.json", surface_to_dict(initial))
            art.json("_surface_final.json", surface_to_dict(loop.surface))
        art.json("_summary.json", summary)
        art.manifest({"scenario": name, "schema_version": SCHEMA_VERSION, "seed": seed})
    return RunResult(code, art, msg, summary)


def _images(art: Artifacts, res, primary=("topo",)):
    for (ch, direction), img in sorted(res.images.items()):
        suffix = f"_{ch}" if direction == "forward" else f"_{ch}_{direction}"
        meta = {"channel": ch, "direction": direction, "unit": img.unit}
        art.pgm(suffix + ".pgm", img.data, meta)
        if ch == "err" and direction == "forward":
            art.image_csv("_err.csv", img.data)


def _run_scan(loop, p: ScanParams, d, art, summary):
    cfg = scan_mod.ScanConfig(**{f.name: getattr(p, f.name) for f in dataclasses.fields(scan_mod.ScanConfig)})
    adapter = None
    if p.adaptive:
        scan_mod.configure_loop(loop, cfg)
        loop.engage(*cfg.origin)
        adapter = control.GainAdapter(loop, loop.gains, amplitude=p.adapter_amplitude, f_m=p.adapter_f_m)
        adapter.calibrate()
    res = scan_mod.scan(loop, cfg, adapter=adapter)
    _images(art, res)
    summary.update({
        "completed": res.completed,
        "events": [dataclasses.asdict(e) for e in res.events],
        "duration": res.duration,
        "gain_history": res.gain_history,
    })
    if res.crashed:
        return EXIT_CRASH
    return EXIT_OK


def _run_approach(loop, p: ApproachParams, d, art, summary):
    cfg = scan_mod.ApproachConfig(p.u_max, p.coarse_step, p.slew, p.detect, tuple(p.band), p.max_steps, p.settle)
    x, y = _centre(loop.surface, p.x, p.y)
    r = scan_mod.approach(loop, cfg, x, y, p.start_gap)
    summary.update({"success": r.success, "coarse_steps": r.coarse_steps, "extensions": r.extensions,
                    "extension": r.extension, "in_band": r.in_band})
    art.json("_approach.json", {"log": r.log, "state": dataclasses.asdict(r.state)})
    return EXIT_CRASH if loop.state.crashed else EXIT_OK


def _run_sysid(loop, p: SysIDParams, d, art, summary):
    x, y = _centre(loop.surface, p.x, p.y)
    loop.engage(x, y)
    f = np.geomspace(p.f_start, p.f_stop, p.points)
    frf = sysid.measure_closed_loop_frf(loop, p.inject, f, p.amplitude, p.settle)
    path = art.path("_frf.csv")
    frf.to_csv(path)
    art.add(path)
    fits = sysid.fit_sweep(frf, p.orders)
    reports = [ft.report() for ft in fits]
    art.json("_fit.json", reports)
    summary.update({"points": len(frf.f), "partial": bool(frf.partial), "rmse_db": [r["rmse_db"] for r in reports]})
    return EXIT_CRASH if loop.state.crashed else EXIT_OK


def _run_design(loop, p: DesignParams, d, art, summary):
    x, y = _centre(loop.surface, p.x, p.y)
    G = lambda f: loop.plant_frf(f, x, y)
    if p.from_sysid:
        loop.engage(x, y)
        frf = sysid.measure_closed_loop_frf(loop, "U1")
        G = sysid.fit_rational(frf, p.fit_order).system
    region = control.design_region(G, 2 * np.pi * np.asarray(p.omega_c_hz, float), p.f_min, p.hinf_db, loop.fs,
                                   control.default_grid(loop.fs))
    path = art.path("_region.csv")
    region.to_csv(path)
    art.add(path)
    best = region.best()
    summary.update({"best": {"k_i": best.k_i, "omega_c": best.omega_c}, "nonempty": region.nonempty.tolist()})
    return EXIT_OK


def _run_sts(loop, p: STSParams, d, art, summary):
    x, y = _centre(loop.surface, p.x, p.y)
    loop.engage(x, y)
    c = spectroscopy.single_point_iv(loop, p.v_start, p.v_end, p.rate, p.points)
    art.csv("_iv.csv", {"V": c.V, "I": c.I, "dIdV": c.didv()})
    summary.update({"points": len(c), "gap": c.gap})
    return EXIT_CRASH if loop.state.crashed else EXIT_OK


def _run_cits(loop, p, d, art, summary):
    res = spectroscopy.cits(loop, p)
    path = art.path("_iv.csv")
    res.to_csv(path)
    art.add(path)
    summary.update({"acquisition_time": res.acquisition_time, "pixels": list(res.shape)})
    return EXIT_CRASH if loop.state.crashed else EXIT_OK


def _run_ultrafast(loop, p: UltrafastParams, d, art, summary):
    cfg = spectroscopy.UltrafastConfig(**{f.name: getattr(p, f.name) for f in dataclasses.fields(spectroscopy.UltrafastConfig)})
    res = spectroscopy.ultrafast_iv(loop, cfg)
    path = art.path("_iv.csv")
    res.iv.to_csv(path)
    art.add(path)
    art.pgm("_topo.pgm", res.topo.data, {"channel": "topo", "unit": "A"})
    art.pgm("_I1.pgm", res.I1.data, {"channel": "I1", "unit": "A"})
    art.pgm("_Q1.pgm", res.Q1.data, {"channel": "Q1", "unit": "A"})
    for v in p.slices:
        img = res.slice(float(v))
        art.pgm(f"_slice_{float(v):+.3f}V.pgm", img.data, {"channel": "current", "unit": "A", "V": float(v)})
    summary.update({"acquisition_time": res.acquisition_time, "cap_estimate": res.cap_estimate})
    return EXIT_CRASH if loop.state.crashed else EXIT_OK


def _litho_out(art, res, summary):
    path = art.path("_events.jsonl")
    res.log.to_jsonl(path)
    art.add(path)
    summary.update({
        "completed": res.completed,
        "desorbed": [list(s) for s in res.log.sites],
        "events": [e.to_dict() for e in res.log.events],
        "instability": res.instability,
    })
    if res.telemetry and len(res.telemetry.get("t", ())):
        path = art.path("_telemetry.csv")
        litho.write_telemetry_csv(path, res.telemetry)
        art.add(path)
    return EXIT_CRASH if res.crashed else EXIT_OK


def _run_hdl(loop, p: HDLParams, d, art, summary):
    if p.write == "fe":
        log = litho.fe_write(loop, p.path, p.fe_voltage)
        return _litho_out(art, litho.LithoResult(log, True, False), summary)
    cfg = litho.HDLConfig(**{f.name: getattr(p, f.name) for f in dataclasses.fields(litho.HDLConfig)})
    adapter = None
    if p.path:
        x0, y0 = p.path[0]
        loop.set_modulation(cfg.vm, cfg.f_mod)
        from .dsp import LockInConfig, NotchBank

        loop.set_lockin(LockInConfig(cfg.f_mod, (1,), 4, cfg.lockin_cutoff))
        loop.set_notch(NotchBank.harmonics_of(cfg.f_mod, 4, 5.0, loop.fs))
        loop.set_bias(cfg.imaging_bias)
        loop.set_setpoint(cfg.imaging_setpoint, "didv")
        loop.engage(x0, y0)
        if p.adaptive:
            loop.set_bias(cfg.bias)
            loop.set_setpoint(cfg.setpoint, "didv")
            adapter = control.GainAdapter(loop, loop.gains)
            adapter.calibrate()
    res = litho.hdl_line(loop, p.path, cfg, adapter=adapter)
    return _litho_out(art, res, summary)


def _run_fcl(loop, p, d, art, summary):
    return _litho_out(art, litho.fcl(loop, p), summary)


def _run_vmfcl(loop, p, d, art, summary):
    return _litho_out(art, litho.vmfcl(loop, p), summary)


RUNNERS = {
    "approach": _run_approach,
    "scan": _run_scan,
    "sysid": _run_sysid,
    "design": _run_design,
    "sts": _run_sts,
    "cits": _run_cits,
    "ultrafast": _run_ultrafast,
    "hdl": _run_hdl,
    "fcl": _run_fcl,
    "vmfcl": _run_vmfcl,
}


def run_file(path, out=None, seed=None, fs=None, overrides=()) -> RunResult:
    d = load(path)
    if overrides:
        for k, v in overrides:
            apply_override(d, k, v)
        src = d.get("_source")
        d = revalidate(d, str(path))
        d["_source"] = src
    return run(d, out, seed, fs)


def write_schema(path=None):
    path = Path(path) if path else schema_path()
    with open(path, "w") as fh:
        json.dump(build_schema(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


def save_generated_surface(spec: SurfaceSpec, path):
    s = generate_surface(spec)
    save_surface(s, path)
    return s
