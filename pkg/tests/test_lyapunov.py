import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import pseudohyp.lyapunov as lyap
from pseudohyp.lyapunov import LyapunovSpectrum, check_necessary_conditions
from pseudohyp.systems import REFERENCE_PARAMS, affine_flow, builtin_system

pytestmark = pytest.mark.property

GOLDEN = math.log((3 + math.sqrt(5)) / 2)


def spectrum(*args, **kwargs):
    # looked up at call time so the session recorder in conftest sees every run
    return lyap.lyapunov_spectrum(*args, **kwargs)


def test_lorenz3d_reference_values(spectrum_lorenz3d):
    L = spectrum_lorenz3d.exponents
    assert abs(L[0] - 0.906) < 0.02 and abs(L[1]) < 0.02
    # volume contraction rate of the classical system is -(sigma + 1 + b)
    assert abs(spectrum_lorenz3d.sum + (10 + 1 + 8 / 3)) < 1e-3


def test_lorenz4d_reference_values(spectrum_lorenz4d):
    assert np.all(np.abs(spectrum_lorenz4d.exponents - [2.19, 0.0, -1.96, -16.56]) < 0.1)


def test_sorted_and_history_converges(spectrum_lorenz3d, spectrum_lorenz4d):
    for s in (spectrum_lorenz3d, spectrum_lorenz4d):
        assert np.all(np.diff(s.exponents) <= 0)
        h = s.convergence_history
        assert np.all(np.abs(h[-1] - h[-2]) < 1e-2)
        assert np.array_equal(h[-1], s.exponents)
        assert s.sum <= 1e-2


def test_x0_invariance(lorenz3d, spectrum_lorenz3d):
    other = spectrum(lorenz3d, [5.0, -3.0, 30.0])
    assert np.all(np.abs(other.exponents - spectrum_lorenz3d.exponents) < 0.02)


def test_anosov_exponents():
    m = builtin_system("anosov_linear")
    s = spectrum(m, [0.1234, 0.5678], 100, 20000)
    assert np.all(np.abs(s.exponents - [GOLDEN, -GOLDEN]) < 1e-6)


@pytest.mark.parametrize("b,M", [(0.1, 1.7), (-0.3, 1.4)])
def test_henon_sum_is_log_det(b, M):
    s = spectrum(builtin_system("henon2d", {"b": b, "M": M}), [0.1, 0.1], 1000, 20000)
    assert abs(s.sum - math.log(abs(b))) < 1e-6


def test_henon3d_sum_is_log_det():
    s = spectrum(builtin_system("henon3d", REFERENCE_PARAMS["henon3d"]), [0.1, 0.1, 0.1], 1000, 20000)
    assert abs(s.sum - math.log(0.7)) < 1e-6


def test_diagonal_flow_is_exact():
    s = spectrum(affine_flow(np.diag([-1.0, -3.0])), [1.0, 1.0], 1.0, 10.0, 0.5)
    assert np.allclose(s.exponents, [-1.0, -3.0], atol=1e-6)


def test_qr_positive_diagonal(rng):
    for _ in range(50):
        M = rng.standard_normal((4, 4))
        Q, R = lyap._qr_positive(M.copy())
        assert np.all(np.diag(R) > 0)
        assert np.allclose(Q @ R, M, atol=1e-12)
        assert np.allclose(Q.T @ Q, np.eye(4), atol=1e-12)


def test_divergent_base_trajectory():
    from pseudohyp.integrate import IntegrationError
    with pytest.raises(IntegrationError):
        spectrum(affine_flow([[1.0]]), [1.0], 0.0, 100.0, 0.5)


def test_bad_interval(lorenz3d):
    with pytest.raises(ValueError):
        spectrum(lorenz3d, [1, 1, 1], 0.0, 1.0, 2.0)


def test_necessary_condition_examples():
    r = check_necessary_conditions(np.array([1.0, 0.0, -1.0]), 2, is_flow=True)
    assert r.passed and r.sum_first_k == 1.0 and r.gap == 1.0
    ref = np.array([2.19, 0.0, -1.96, -16.56])
    r = check_necessary_conditions(ref, 3, is_flow=True)
    assert r.passed and abs(r.sum_first_k - 0.23) < 1e-12 and abs(r.gap - 14.6) < 1e-12
    with pytest.raises(ValueError):
        check_necessary_conditions(ref, 4, is_flow=True)


def test_uncoupled_lorenz4d_fails():
    # mu = 0: w decouples with exponent -b, and the first three sum to about -1.761
    m = builtin_system("lorenz4d", {"sigma": 10, "r": 28, "b": 8 / 3, "mu": 0})
    s = spectrum(m, [0.1, 0.1, 20.0, 0.0], 200.0, 2000.0)
    assert abs(s.exponents[2] + 8 / 3) < 1e-6
    r = check_necessary_conditions(s, 3, is_flow=True)
    assert not r.passed and abs(r.sum_first_k + 1.761) < 0.03


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-20, 20), min_size=2, max_size=6), st.data())
def test_verdict_matches_definition(vals, data):
    exps = np.array(sorted(vals, reverse=True))
    k = data.draw(st.integers(1, len(exps) - 1))
    flow = data.draw(st.booleans())
    r = check_necessary_conditions(LyapunovSpectrum(exps, np.zeros((1, exps.size)), 1.0), k, is_flow=flow)
    expect = exps[:k].sum() > 0 and exps[k - 1] > exps[k]
    if flow and k == exps.size - 1:
        expect = expect and abs(exps[1]) < lyap.TOL_ZERO
    assert r.passed == expect
