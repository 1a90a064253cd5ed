import numpy as np
import pytest

from stmlab.junction import SurfaceModel
from stmlab.loop import Loop


def fourier_coefficients(f, V_dc, Vm, n_max, m=4096):
    """Trapezoidal Fourier series of f(V_dc + Vm sin theta): (a0, sin_n, cos_n)."""
    th = 2 * np.pi * np.arange(m) / m
    y = f(V_dc + Vm * np.sin(th))
    out = np.zeros(n_max + 1)
    out[0] = y.mean()
    for n in range(1, n_max + 1):
        out[n] = 2 * np.mean(y * (np.sin(n * th) if n % 2 else np.cos(n * th)))
    return out


@pytest.fixture
def uniform_loop():
    return Loop(SurfaceModel.uniform(16, 16))


# -- acceptance reporting ------------------------------------------------------------
_ACCEPTANCE: dict = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(n): acceptance criterion number n")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    m = item.get_closest_marker("acceptance")
    if m is None or rep.when != "call" and not rep.failed:
        return
    n = m.args[0]
    ok = rep.passed if rep.when == "call" else False
    prev = _ACCEPTANCE.get(n, (True, item.originalname, 0.0))
    _ACCEPTANCE[n] = (prev[0] and ok, item.originalname, prev[2] + rep.duration)


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_ACCEPTANCE):
        ok, name, dur = _ACCEPTANCE[n]
        terminalreporter.write_line(f"ACCEPTANCE {n:2d}: {'PASS' if ok else 'FAIL'}  {name}  ({dur:.1f} s)")
