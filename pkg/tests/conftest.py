import numpy as np
import pytest

from levyipde import levy
from levyipde.coefficients import ModelCoefficients
from levyipde.registry import Coefficient, Dims, make


def spec(value):
    return value if isinstance(value, dict) else {"name": "constant", "value": value}


def model(b=0.1, sigma=0.2, beta="mark", g="linear", h="zero", gamma="zero", dims=None):
    """One-equation model from registry names; numbers mean constants."""
    dims = dims or Dims()

    def coef(slot, v, i=0):
        if isinstance(v, Coefficient):
            return v
        if isinstance(v, str):
            v = {"name": v}
        return make(slot, spec(v) if slot in ("b", "sigma") else v, dims, i)

    return ModelCoefficients(
        dims, coef("b", b), coef("sigma", sigma), coef("beta", beta),
        [coef("gamma", gamma)], [coef("g", g)], [coef("h", h)],
    )


def custom(slot, fn, **flags):
    return Coefficient(slot, "custom", {}, fn, **flags)


@pytest.fixture(scope="session")
def lam():
    return levy.power_law(0.5)


@pytest.fixture
def rng():
    return np.random.default_rng(2024)


# -- acceptance reporting: one line per criterion in the terminal summary

ACCEPTANCE = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or rep.when != "call":
        return
    number, title = marker.args
    detail = dict(item.user_properties).get("detail", "")
    if rep.failed and call.excinfo is not None and not detail:
        detail = str(call.excinfo.value).splitlines()[0]
    ACCEPTANCE[number] = (title, rep.passed, detail)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        title, passed, detail = ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number:2d} {'PASS' if passed else 'FAIL'}  {title}: {detail}")
