import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pseudohyp.systems import (REFERENCE_PARAMS, SYSTEM_NAMES, ModelError, apply_symmetry, builtin_system,
                               equilibrium_eigenvalues)

pytestmark = pytest.mark.property

coord = st.floats(-20, 20, allow_nan=False)


def fd_jacobian(model, x, h=1e-6):
    n = model.dimension
    J = np.empty((n, n))
    for j in range(n):
        e = np.zeros(n)
        e[j] = h
        J[:, j] = (model.eval(x + e) - model.eval(x - e)) / (2 * h)
    return J


@pytest.mark.parametrize("name", ["lorenz3d", "lorenz4d", "henon2d", "henon3d", "lozi"])
@settings(max_examples=30, deadline=None)
@given(data=st.data())
def test_jacobian_matches_finite_differences(name, data):
    model = builtin_system(name, REFERENCE_PARAMS[name])
    x = np.array([data.draw(coord) for _ in range(model.dimension)])
    if name == "lozi" and abs(x[0]) < 1e-3:
        x[0] = 0.5  # the Jacobian jumps across x = 0
    J = model.jacobian(x)
    F = fd_jacobian(model, x)
    assert np.linalg.norm(J - F) <= 1e-5 * max(1.0, np.linalg.norm(J))


def test_anosov_perturbed_jacobian():
    model = builtin_system("anosov_perturbed", {"eps": 0.6})
    for x in ([0.1234, 0.5678], [0.3, 0.2], [0.77, 0.05]):
        x = np.array(x)
        # derivative of the wrapped map away from the wrap seam
        J = fd_jacobian(model, x, 1e-7)
        assert np.allclose(model.jacobian(x), J, rtol=1e-5, atol=1e-5)


def test_origin_is_equilibrium(lorenz4d):
    assert np.array_equal(lorenz4d.eval(np.zeros(4)), np.zeros(4))


def test_anosov_linear_eval():
    m = builtin_system("anosov_linear")
    assert np.allclose(m.eval([0.5, 0.5]), [0.5, 0.0])


def test_torus_outputs_in_unit_interval(rng):
    for name in ("anosov_linear", "anosov_perturbed"):
        m = builtin_system(name, REFERENCE_PARAMS[name])
        for _ in range(200):
            y = m.eval(rng.random(2))
            assert np.all((0 <= y) & (y < 1))


@settings(max_examples=50, deadline=None)
@given(x=st.floats(-5, 5), y=st.floats(-5, 5))
def test_constant_determinants(x, y):
    assert math.isclose(np.linalg.det(builtin_system("henon2d", REFERENCE_PARAMS["henon2d"]).jacobian([x, y])), 0.1,
                        rel_tol=1e-12)
    if abs(x) > 1e-9:
        assert math.isclose(np.linalg.det(builtin_system("lozi", REFERENCE_PARAMS["lozi"]).jacobian([x, y])), -0.5,
                            rel_tol=1e-12)
    h3 = builtin_system("henon3d", REFERENCE_PARAMS["henon3d"])
    assert math.isclose(np.linalg.det(h3.jacobian([x, y, x - y])), 0.7, rel_tol=1e-12)
    assert math.isclose(np.linalg.det(builtin_system("anosov_linear").jacobian([0.3, 0.4])), 1.0, rel_tol=1e-12)


def test_lozi_jacobian_right_limit():
    m = builtin_system("lozi", REFERENCE_PARAMS["lozi"])
    assert np.allclose(m.jacobian([0.0, 0.3]), m.jacobian([1e-9, 0.3]))


@settings(max_examples=50, deadline=None)
@given(st.lists(coord, min_size=4, max_size=4))
def test_lorenz4d_trace_identity(x):
    m = builtin_system("lorenz4d", REFERENCE_PARAMS["lorenz4d"])
    p = m.params
    assert math.isclose(np.trace(m.jacobian(x)), -(p["sigma"] + 1 + 2 * p["b"]), rel_tol=1e-14)


@pytest.mark.parametrize("name", ["lorenz3d", "lorenz4d"])
@settings(max_examples=50, deadline=None)
@given(data=st.data())
def test_equivariance(name, data):
    m = builtin_system(name, REFERENCE_PARAMS[name])
    x = np.array([data.draw(coord) for _ in range(m.dimension)])
    assert np.linalg.norm(m.eval(apply_symmetry(m, x)) - apply_symmetry(m, m.eval(x))) < 1e-12


def test_symmetry_examples(lorenz4d):
    assert np.array_equal(apply_symmetry(lorenz4d, [1, 2, 3, 4]), [-1, -2, 3, 4])
    x = np.array([0.3, -1.7, 2.2, 9.1])
    assert np.array_equal(apply_symmetry(lorenz4d, apply_symmetry(lorenz4d, x)), x)
    x = np.ones(4)
    assert np.allclose(lorenz4d.eval(apply_symmetry(lorenz4d, x)), apply_symmetry(lorenz4d, lorenz4d.eval(x)),
                       rtol=0, atol=1e-14)
    with pytest.raises(ModelError):
        apply_symmetry(builtin_system("henon2d", REFERENCE_PARAMS["henon2d"]), [0, 0])


def test_registry_errors():
    with pytest.raises(ModelError, match="unknown system"):
        builtin_system("nosuch")
    with pytest.raises(ModelError, match="missing"):
        builtin_system("lorenz3d", {"r": 28, "sigma": 10})
    with pytest.raises(ModelError, match="finite"):
        builtin_system("lorenz3d", {"r": float("nan"), "sigma": 10, "b": 1})
    assert set(SYSTEM_NAMES) == {"lorenz3d", "lorenz4d", "henon2d", "lozi", "anosov_linear", "anosov_perturbed",
                                 "henon3d"}


def test_models_are_immutable(lorenz4d):
    with pytest.raises(ValueError):
        lorenz4d.packed[0] = 1.0
    other = lorenz4d.with_params(mu=15.0)
    assert other.params["mu"] == 15.0 and lorenz4d.params["mu"] == 7.0


def _check_eigen_invariants(model, info):
    J = model.jacobian(info.location)
    n = model.dimension
    for lam in info.eigenvalues:
        assert abs(np.linalg.det(J - lam * np.eye(n))) < 1e-8 * max(1.0, abs(lam)) ** n
    v = info.unstable_eigenvector
    if v is not None:
        assert abs(np.linalg.norm(v) - 1) < 1e-12
        assert np.linalg.norm(J @ v - info.eigenvalues[0].real * v) < 1e-8 * max(1, abs(info.eigenvalues[0]))


@pytest.mark.parametrize("r,mu", [(28, 7), (25, 7), (25, 15), (1, 7), (0.5, 3)])
def test_closed_form_eigenvalues(r, mu):
    m = builtin_system("lorenz4d", {"sigma": 10, "r": r, "b": 8 / 3, "mu": mu})
    closed = equilibrium_eigenvalues(m)
    numeric = equilibrium_eigenvalues(m, numeric=True)
    assert np.allclose(np.array(closed.eigenvalues), np.array(numeric.eigenvalues), rtol=0, atol=1e-10)
    _check_eigen_invariants(m, closed)
    _check_eigen_invariants(m, numeric)


def test_eigenvalue_examples():
    m = builtin_system("lorenz4d", {"sigma": 10, "r": 28, "b": 8 / 3, "mu": 7})
    ev = equilibrium_eigenvalues(m).eigenvalues
    assert abs(ev[0] - 11.83) < 0.01 and abs(ev[3] - (-22.83)) < 0.01
    assert {ev[1], ev[2]} == {complex(-8 / 3, 7), complex(-8 / 3, -7)}
    m1 = m.with_params(r=1.0)
    assert abs(equilibrium_eigenvalues(m1).eigenvalues[0]) < 1e-14
    m25 = m.with_params(r=25.0)
    assert math.isclose(equilibrium_eigenvalues(m25).eigenvalues[0].real, (math.sqrt(1081) - 11) / 2,
                        rel_tol=1e-15)
    # frozen from an independent extended-precision evaluation of the closed form
    assert abs(equilibrium_eigenvalues(m25).eigenvalues[0].real - 10.939282222773596) < 1e-12


def test_equilibrium_errors(lorenz4d):
    with pytest.raises(ModelError, match="not an equilibrium"):
        equilibrium_eigenvalues(lorenz4d, location=[1, 1, 1, 1])
    with pytest.raises(ModelError):
        equilibrium_eigenvalues(builtin_system("henon2d", REFERENCE_PARAMS["henon2d"]))
