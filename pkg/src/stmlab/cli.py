"""Command-line entry point.

    stmlab run SCENARIO.json
    stmlab scan|sysid|design-pi|sts|hdl [--config FILE] [flags] [--set key=value ...]
    stmlab surface-gen [--rows N --cols N --steps N --dimers --defects P ...]

Global flags: --seed, --out, --fs. STMLAB_SEED is used when neither the
flag nor the scenario gives a seed.
"""
from __future__ import annotations

import argparse
import sys
import traceback
from pathlib import Path

from . import scenario as sc
from .io import Artifacts
from .surface import SurfaceSpec, generate_surface, surface_to_dict

# subcommand -> experiment type it drives by default
SUBCOMMANDS = {"scan": "scan", "sysid": "sysid", "design-pi": "design", "sts": "sts", "hdl": "hdl"}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(2, f"{self.prog}: error: {message}\n")


def _global(p, top=False):
    # on subparsers a default would overwrite a value given before the subcommand
    d = None if top else argparse.SUPPRESS
    p.add_argument("--seed", type=int, default=d, help="RNG seed (overrides the scenario and STMLAB_SEED)")
    p.add_argument("--out", default=d, help="output directory")
    p.add_argument("--fs", type=float, default=d, help="loop sample rate, Hz")


def _kv(s):
    if "=" not in s:
        raise argparse.ArgumentTypeError(f"expected key=value, got {s!r}")
    k, v = s.split("=", 1)
    return k.strip(), v


def build_parser():
    p = _Parser(prog="stmlab", description="STM feedback-loop simulator")
    _global(p, top=True)
    sub = p.add_subparsers(dest="cmd", required=True, parser_class=_Parser)

    r = sub.add_parser("run", help="run a scenario file")
    r.add_argument("scenario")
    r.add_argument("--set", dest="overrides", action="append", type=_kv, default=[], metavar="KEY=VALUE")
    _global(r)

    for name in SUBCOMMANDS:
        s = sub.add_parser(name, help=f"{SUBCOMMANDS[name]} experiment")
        s.add_argument("--config", default=None, help="scenario file to start from")
        s.add_argument("--set", dest="overrides", action="append", type=_kv, default=[], metavar="KEY=VALUE")
        _global(s)
    s = sub.choices["scan"]
    s.add_argument("--mode", choices=["constant_current", "constant_height", "constant_didv"])
    s.add_argument("--pixels", type=int, nargs=2, metavar=("ROWS", "COLS"))
    s.add_argument("--extent", type=float, nargs=2, metavar=("W", "H"))
    s.add_argument("--speed", type=float)
    s.add_argument("--bias", type=float)
    s.add_argument("--setpoint", type=float)
    s.add_argument("--vm", type=float)
    s.add_argument("--fmod", type=float)
    s.add_argument("--notch", action="store_true", default=None)
    s.add_argument("--adaptive", action="store_true", default=None)

    s = sub.choices["sysid"]
    s.add_argument("--inject", choices=["U1", "U2", "D1", "D2"])
    s.add_argument("--fstart", type=float)
    s.add_argument("--fstop", type=float)
    s.add_argument("--points", type=int)
    s.add_argument("--amplitude", type=float)
    s.add_argument("--orders", type=int, nargs="+")

    s = sub.choices["design-pi"]
    s.add_argument("--fmin", type=float)
    s.add_argument("--hinf", type=float)
    s.add_argument("--wc", type=float, nargs="+", metavar="HZ", help="omega_c grid in Hz")
    s.add_argument("--from-sysid", action="store_true", default=None)

    s = sub.choices["sts"]
    s.add_argument("--mode", choices=["single", "cits", "ultrafast"], default=None)
    s.add_argument("--vm", type=float)
    s.add_argument("--fmod", type=float)
    s.add_argument("--vdc", type=float)
    s.add_argument("--pixels", type=int, nargs=2, metavar=("ROWS", "COLS"))
    s.add_argument("--extent", type=float, nargs=2, metavar=("W", "H"))
    s.add_argument("--vstart", type=float)
    s.add_argument("--vend", type=float)
    s.add_argument("--rate", type=float)

    s = sub.choices["hdl"]
    s.add_argument("--mode", choices=["line", "fe", "fcl", "vmfcl"], default=None)
    s.add_argument("--targets", default=None, help="JSON job file with a target list")
    s.add_argument("--path", type=float, nargs="+", metavar="XY", help="polyline x0 y0 x1 y1 ... in nm")
    s.add_argument("--bias", type=float)
    s.add_argument("--setpoint", type=float)
    s.add_argument("--speed", type=float)

    g = sub.add_parser("surface-gen", help="write a procedural surface JSON")
    _global(g)
    g.add_argument("--rows", type=int, default=32)
    g.add_argument("--cols", type=int, default=32)
    g.add_argument("--a", type=float, default=0.384)
    g.add_argument("--steps", type=int, default=0)
    g.add_argument("--dimers", action="store_true")
    g.add_argument("--defects", type=float, default=0.0)
    g.add_argument("--vacancies", type=float, default=0.0)
    g.add_argument("--phi", type=float, default=4.0)
    g.add_argument("--name", default="surface")
    return p


def _flag_overrides(args) -> list[tuple[str, object]]:
    """Translate subcommand flags into dotted scenario overrides."""
    o = []

    def put(key, val):
        if val is not None:
            o.append((key, val))

    c = args.cmd
    if c == "scan":
        put("experiment.mode", args.mode)
        put("experiment.pixels", args.pixels)
        put("experiment.extent", args.extent)
        put("experiment.speed", args.speed)
        put("experiment.bias", args.bias)
        put("experiment.setpoint", args.setpoint)
        put("experiment.vm", args.vm)
        put("experiment.f_mod", args.fmod)
        put("experiment.notch", args.notch)
        put("experiment.adaptive", args.adaptive)
    elif c == "sysid":
        put("experiment.inject", args.inject)
        put("experiment.f_start", args.fstart)
        put("experiment.f_stop", args.fstop)
        put("experiment.points", args.points)
        put("experiment.amplitude", args.amplitude)
        put("experiment.orders", args.orders)
    elif c == "design-pi":
        put("experiment.f_min", args.fmin)
        put("experiment.hinf_db", args.hinf)
        put("experiment.omega_c_hz", args.wc)
        put("experiment.from_sysid", args.from_sysid)
    elif c == "sts":
        if args.mode == "ultrafast":
            put("experiment.vm", args.vm)
            put("experiment.f_mod", args.fmod)
            put("experiment.v_dc", args.vdc)
        put("experiment.pixels", args.pixels)
        put("experiment.extent", args.extent)
        if args.mode in (None, "single"):
            put("experiment.v_start", args.vstart)
            put("experiment.v_end", args.vend)
            put("experiment.rate", args.rate)
    elif c == "hdl":
        if args.targets:
            from .litho import load_targets

            put("experiment.targets", [list(t) if not isinstance(t, dict) else t for t in load_targets(args.targets)])
        if args.path:
            xy = args.path
            if len(xy) % 2:
                raise sc.ScenarioError("--path needs an even number of coordinates")
            put("experiment.path", [[xy[k], xy[k + 1]] for k in range(0, len(xy), 2)])
        put("experiment.bias", args.bias)
        put("experiment.setpoint", args.setpoint)
        if args.mode in (None, "line"):
            put("experiment.speed", args.speed)
        if args.mode == "fe":
            put("experiment.write", "fe")
    return o


def _experiment_type(args):
    t = SUBCOMMANDS[args.cmd]
    if args.cmd == "sts" and args.mode in ("cits", "ultrafast"):
        t = args.mode
    if args.cmd == "hdl" and args.mode in ("fcl", "vmfcl"):
        t = args.mode
    return t


def _subcommand_scenario(args) -> dict:
    if args.config:
        d = sc.load(args.config)
    else:
        d = {"version": sc.SCHEMA_VERSION, "name": args.cmd.replace("-", "_"), "experiment": {"type": _experiment_type(args)}}
    want = _experiment_type(args)
    if d["experiment"].get("type") != want and not args.config:
        d["experiment"] = {"type": want}
    for k, v in _flag_overrides(args):
        sc.apply_override(d, k, v)
    for k, v in args.overrides:
        sc.apply_override(d, k, v)
    src = d.get("_source")
    d = sc.revalidate(d, src or f"<{args.cmd}>")
    if src:
        d["_source"] = src
    return d


def _surface_gen(args) -> int:
    seed = sc.resolve_seed({}, args.seed)
    spec = SurfaceSpec(rows=args.rows, cols=args.cols, a=args.a, steps=args.steps, dimers=args.dimers,
                       defects=args.defects, vacancies=args.vacancies, phi=args.phi, seed=seed)
    s = generate_surface(spec)
    art = Artifacts(args.out or "out", args.name)
    art.json("_surface.json", surface_to_dict(s))
    art.pgm("_height.pgm", s.height, {"channel": "height", "unit": "A"})
    art.manifest({"seed": seed})
    print(art.path("_surface.json"))
    return sc.EXIT_OK


def _report(res: sc.RunResult):
    if res.artifacts is not None:
        print(res.artifacts.path("_manifest.json"))
    if res.code == sc.EXIT_CRASH:
        print(f"crash during run: {res.message or 'tip crashed'}", file=sys.stderr)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.cmd == "surface-gen":
            return _surface_gen(args)
        if args.cmd == "run":
            res = sc.run_file(args.scenario, args.out, args.seed, args.fs, args.overrides)
        else:
            res = sc.run(_subcommand_scenario(args), args.out, args.seed, args.fs)
        _report(res)
        return res.code
    except sc.ScenarioError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return sc.EXIT_CONFIG
    except FileNotFoundError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return sc.EXIT_CONFIG
    except Exception:  # pragma: no cover - reported, not swallowed
        traceback.print_exc()
        return sc.EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
