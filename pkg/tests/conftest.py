import os

import numpy as np
import pytest

import pseudohyp.lyapunov as _lyap
from pseudohyp.systems import REFERENCE_PARAMS, builtin_system

# one line per acceptance criterion, printed in the terminal summary
CRITERIA: dict = {}

# every lorenz4d spectrum computed in this process, as (params, exponents)
LORENZ4D_SPECTRA: list = []

_spectrum = _lyap.lyapunov_spectrum


def _recording_spectrum(model, *args, **kwargs):
    result = _spectrum(model, *args, **kwargs)
    if model.name == "lorenz4d":
        LORENZ4D_SPECTRA.append((dict(model.params), np.array(result.exponents)))
    return result


# installed before any test module (or pseudohyp.sweep / pseudohyp.cli) binds the name
_lyap.lyapunov_spectrum = _recording_spectrum


def record_criterion(number: int, passed: bool, detail: str) -> None:
    CRITERIA[number] = (passed, detail)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(CRITERIA):
        passed, detail = CRITERIA[k]
        terminalreporter.write_line(f"criterion {k:2d}: {'PASS' if passed else 'FAIL'}  {detail}")


def pytest_collection_modifyitems(config, items):
    # the trace-identity criterion inspects spectra from the whole session
    last = [it for it in items if it.name.startswith("test_criterion_03")]
    items[:] = [it for it in items if it not in last] + last
    if os.environ.get("PSEUDOHYP_FULLSCALE") == "1":
        return
    skip = pytest.mark.skip(reason="full-scale run; set PSEUDOHYP_FULLSCALE=1")
    for item in items:
        if "fullscale" in item.keywords:
            item.add_marker(skip)


@pytest.fixture(scope="session")
def lorenz3d():
    return builtin_system("lorenz3d", REFERENCE_PARAMS["lorenz3d"])


@pytest.fixture(scope="session")
def lorenz4d():
    return builtin_system("lorenz4d", REFERENCE_PARAMS["lorenz4d"])


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# spectra at the default budgets (transient 1e3, span 1e4) are shared across modules
@pytest.fixture(scope="session")
def spectrum_lorenz3d(lorenz3d):
    return _lyap.lyapunov_spectrum(lorenz3d, [0.1, 0.1, 20.0])


@pytest.fixture(scope="session")
def spectrum_lorenz4d(lorenz4d):
    return _lyap.lyapunov_spectrum(lorenz4d, [0.1, 0.1, 20.0, 0.1])
