import glob
import json
import os
import time
from pathlib import Path

import numpy as np
import pytest

from stmlab import cli, control
from stmlab import scenario as sc
from stmlab.loop import Loop
from stmlab.surface import surface_from_dict

ROOT = Path(__file__).resolve().parents[1]
SCENARIOS = sorted(glob.glob(str(ROOT / "scenarios" / "*.json")))


def _manifest(out, name):
    return json.loads((Path(out) / f"{name}_manifest.json").read_text())


def test_shipped_schema_is_current():
    assert sc.load_schema() == json.loads(json.dumps(sc.build_schema()))


@pytest.mark.parametrize("path", SCENARIOS, ids=lambda p: Path(p).stem)
def test_shipped_scenarios_run(path, tmp_path):
    t0 = time.perf_counter()
    code = cli.main(["run", path, "--out", str(tmp_path)])
    assert time.perf_counter() - t0 < 60
    assert code == 0
    m = _manifest(tmp_path, sc.load(path)["name"])
    assert m["files"] and all((tmp_path / e["file"]).exists() for e in m["files"])


def test_determinism_same_seed(tmp_path):
    path = ROOT / "scenarios" / "constant_didv.json"
    cli.main(["run", str(path), "--out", str(tmp_path / "a"), "--seed", "5"])
    cli.main(["run", str(path), "--out", str(tmp_path / "b"), "--seed", "5"])
    name = sc.load(path)["name"]
    assert (tmp_path / "a" / f"{name}_manifest.json").read_bytes() == (tmp_path / "b" / f"{name}_manifest.json").read_bytes()


def test_cli_and_library_parity(tmp_path):
    path = ROOT / "scenarios" / "sts_single.json"
    cli.main(["run", str(path), "--out", str(tmp_path / "cli")])
    sc.run_file(path, out=tmp_path / "lib")
    name = sc.load(path)["name"]
    assert _manifest(tmp_path / "cli", name) == _manifest(tmp_path / "lib", name)


def test_design_pi_matches_api(tmp_path):
    path = ROOT / "scenarios" / "design_pi.json"
    assert cli.main(["run", str(path), "--out", str(tmp_path)]) == 0
    d = sc.load(path)
    lp = Loop(surface_from_dict(d["surface"]))
    x, y = [v / 2 for v in lp.surface.extent]
    region = control.design_region(lambda f: lp.plant_frf(f, x, y), 2 * np.pi * np.array(d["experiment"]["omega_c_hz"]),
                                   50.0, 3.0, lp.fs, control.default_grid(lp.fs))
    region.to_csv(tmp_path / "api.csv")
    assert (tmp_path / "design_pi_region.csv").read_bytes() == (tmp_path / "api.csv").read_bytes()


def test_design_pi_subcommand_defaults(tmp_path):
    args = cli.build_parser().parse_args(["design-pi"])
    d = cli._subcommand_scenario(args)
    p = sc.build_params(d)[1]
    assert (p.f_min, p.hinf_db) == (50.0, 3.0)
    assert cli.main(["design-pi", "--fmin", "50", "--hinf", "3", "--out", str(tmp_path)]) == 0


def test_sts_ultrafast_flags():
    args = cli.build_parser().parse_args(["sts", "--mode", "ultrafast", "--vm", "2.5", "--fmod", "2000"])
    kind, p = sc.build_params(cli._subcommand_scenario(args))
    assert kind == "ultrafast" and (p.vm, p.f_mod) == (2.5, 2000.0)


def test_flags_override_file(tmp_path):
    path = ROOT / "scenarios" / "constant_current.json"
    args = cli.build_parser().parse_args(["scan", "--config", str(path), "--speed", "7", "--set", "experiment.bias=-2.0"])
    _, p = sc.build_params(cli._subcommand_scenario(args))
    assert (p.speed, p.bias) == (7.0, -2.0)


def test_unknown_flag_is_usage_error(capsys):
    with pytest.raises(SystemExit) as e:
        cli.main(["scan", "--bogus", "1"])
    assert e.value.code == 2
    assert "usage" in capsys.readouterr().err


def test_schema_error_is_line_anchored(tmp_path, capsys):
    p = tmp_path / "bad.json"
    p.write_text('{\n  "version": 1,\n  "name": "bad",\n  "experiment": {\n    "type": "scan",\n    "speed": "fast"\n  }\n}\n')
    with pytest.raises(sc.ScenarioError) as e:
        sc.load(p)
    assert e.value.line == 6
    assert cli.main(["run", str(p)]) == 2
    assert "line 6" in capsys.readouterr().err


def test_invalid_json_and_missing_file(tmp_path):
    p = tmp_path / "broken.json"
    p.write_text('{\n  "version": 1,\n  "name": \n}')
    with pytest.raises(sc.ScenarioError) as e:
        sc.load(p)
    assert e.value.line == 4
    assert cli.main(["run", str(tmp_path / "nope.json")]) == 2


def test_crash_exit_code_flushes_artifacts(tmp_path):
    p = tmp_path / "crash.json"
    p.write_text(json.dumps({
        "version": 1, "name": "crash",
        "surface": {"generator": {"rows": 16, "cols": 16, "steps": 1, "step_height": 8.0}},
        "experiment": {"type": "scan", "mode": "constant_height", "extent": [5.0, 1.0], "origin": [0.2, 2.0],
                       "pixels": [2, 16], "speed": 5.0},
    }))
    assert cli.main(["run", str(p), "--out", str(tmp_path)]) == 3
    s = json.loads((tmp_path / "crash_summary.json").read_text())
    assert s["crashed"]
    assert (tmp_path / "crash_topo.pgm").exists()


def test_internal_error_exit_code(tmp_path, monkeypatch):
    def boom(*a):
        raise RuntimeError("boom")

    monkeypatch.setitem(sc.RUNNERS, "sts", boom)
    assert cli.main(["run", str(ROOT / "scenarios" / "sts_single.json"), "--out", str(tmp_path)]) == 4


def test_seed_priority(monkeypatch):
    monkeypatch.setenv("STMLAB_SEED", "11")
    assert sc.resolve_seed({}) == 11
    assert sc.resolve_seed({"seed": 3}) == 3
    assert sc.resolve_seed({"seed": 3}, 5) == 5
    monkeypatch.delenv("STMLAB_SEED")
    assert sc.resolve_seed({}) == 0
    monkeypatch.setenv("STMLAB_SEED", "x")
    with pytest.raises(sc.ScenarioError):
        sc.resolve_seed({})


def test_surface_gen_reproducible(tmp_path):
    argv = ["surface-gen", "--dimers", "--defects", "0.02", "--seed", "7", "--rows", "16", "--cols", "16"]
    cli.main(argv + ["--out", str(tmp_path / "a")])
    cli.main(argv + ["--out", str(tmp_path / "b")])
    a = (tmp_path / "a" / "surface_surface.json").read_bytes()
    assert a == (tmp_path / "b" / "surface_surface.json").read_bytes()


def test_surface_gen_uses_env_seed(tmp_path, monkeypatch):
    monkeypatch.setenv("STMLAB_SEED", "7")
    cli.main(["surface-gen", "--defects", "0.1", "--rows", "16", "--cols", "16", "--out", str(tmp_path / "env")])
    cli.main(["surface-gen", "--defects", "0.1", "--rows", "16", "--cols", "16", "--seed", "7", "--out", str(tmp_path / "flag")])
    assert (tmp_path / "env" / "surface_surface.json").read_bytes() == (tmp_path / "flag" / "surface_surface.json").read_bytes()
