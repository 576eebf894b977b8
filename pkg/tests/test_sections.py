import math

import numpy as np
import pytest

from pseudohyp.sections import (COLORS, MINUS, NO_RETURN, OUTSIDE, PLUS, RESIDUAL_TOL, SectionError, SectionSpec,
                                _boundary_mask, attractor_section_trace, builtin_section, find_crossings,
                                nth_return_containment, nth_returns, plane_section, section_grid,
                                separatrix_start, separatrix_trajectory, stable_manifold_boundary,
                                symmetric_window, write_crossings_csv)
from pseudohyp.integrate import OK
from pseudohyp.systems import affine_flow, apply_symmetry, builtin_system, equilibrium_eigenvalues

pytestmark = pytest.mark.property

SIGMA = builtin_section("lorenz4d_sigma")
PARABOLA = affine_flow([[0.0, 1.0], [0.0, 0.0]], [0.0, 1.0])   # x1' = x2, x2' = 1


def test_builtin_section_examples():
    p = np.array([20.0, 0.0, math.sqrt(2650), -20.0])
    assert abs(SIGMA.G(p)) < 1e-10 and SIGMA.window_of(p) == PLUS
    q = np.array([-20.0, 0.0, math.sqrt(2650), -20.0])
    assert abs(SIGMA.G(q)) < 1e-10 and SIGMA.window_of(q) == MINUS
    o = np.array([0.0, 0.0, 1.0, 0.0])
    assert SIGMA.G(o) == -551 and SIGMA.window_of(o) == OUTSIDE
    plane = builtin_section("lorenz_plane", r=28)
    assert plane.G([0, 0, 27, 0][:3]) == 0.0 and plane.window_of([1.0, 0, 27]) == PLUS
    with pytest.raises(ValueError):
        builtin_section("nosuch")
    with pytest.raises(ValueError):
        builtin_section("lorenz_plane")


def test_linear_crossing():
    m = affine_flow(np.zeros((2, 2)), [1.0, 0.0])
    ev = find_crossings(m, [-1.0, 0.0], plane_section(0, 0.0, 2), 1).crossings
    assert len(ev) == 1
    assert abs(ev[0].t - 1.0) < 1e-12 and np.allclose(ev[0].state, [0, 0], atol=1e-12)


def test_close_pair_inside_one_step_is_found():
    # x1(t) = t^2/2 - t has its minimum -1/2 at t = 1; the plane sits 1e-4 above it
    r = find_crossings(PARABOLA, [0.0, -1.0], plane_section(0, -0.5 + 1e-4, 2), 2, direction=0)
    t = [e.t for e in r.crossings]
    root = math.sqrt(2e-4)
    assert np.allclose(t, [1 - root, 1 + root], atol=1e-10)


def test_grazing_is_reported_not_counted():
    # exact tangency at the minimum
    r = find_crossings(PARABOLA, [0.0, -1.0], plane_section(0, -0.5, 2), 1, direction=0, budget=5, strict=False)
    assert r.status == NO_RETURN and r.crossings == []
    assert len(r.grazings) == 1 and abs(r.grazings[0].t - 1.0) < 1e-6
    # shallow crossings below the transversality threshold
    r = find_crossings(PARABOLA, [0.0, -1.0], plane_section(0, -0.5 + 1e-8, 2), 1, direction=0, budget=5,
                       graze_tol=1e-3, strict=False)
    assert r.crossings == [] and len(r.grazings) == 2
    with pytest.raises(SectionError):
        find_crossings(PARABOLA, [0.0, -1.0], plane_section(0, -0.5, 2), 1, direction=0, budget=5)


def test_input_errors(lorenz4d):
    with pytest.raises(ValueError):
        find_crossings(lorenz4d, [1, 1, 1, 1], SIGMA, 0)
    with pytest.raises(ValueError):
        find_crossings(lorenz4d, [1, 1, 1], SIGMA, 1)
    with pytest.raises(ValueError):
        find_crossings(builtin_system("henon2d", {"b": 0.1, "M": 1.7}), [0, 0], plane_section(0, 0, 2), 1)


@pytest.fixture(scope="module")
def crossings(lorenz4d):
    return find_crossings(lorenz4d, [0.1, 0.1, 20.0, 0.1], SIGMA, 1500).crossings


def test_crossing_invariants(lorenz4d, crossings):
    assert len(crossings) == 1500
    for e in crossings:
        x = e.state
        assert e.residual < RESIDUAL_TOL and abs(SIGMA.G(x)) < RESIDUAL_TOL
        assert abs(np.dot(SIGMA.grad(x), lorenz4d.eval(x))) > 1e-8
        assert x[2] >= 0 and 9 * x[0] ** 2 - x[3] ** 2 - 550 >= 0
        assert e.window == {PLUS: "plus", MINUS: "minus", OUTSIDE: "outside"}[SIGMA.window_of(x)]
    assert np.all(np.diff([e.t for e in crossings]) > 0)


def test_grid_parameterisation():
    pts, valid, axes = section_grid(SIGMA, PLUS, (5, 4, 3))
    assert pts.shape == (5, 4, 3, 4) and [a.size for a in axes] == [5, 4, 3]
    on = pts[valid]
    assert np.max(np.abs([SIGMA.G(p) for p in on])) < 1e-9 and np.all(on[:, 2] > 0)
    assert np.all(~valid[pts[..., 0] ** 2 * 9 - pts[..., 3] ** 2 - 550 <= 0])
    one, ok, _ = section_grid(SIGMA, MINUS, (1, 1, 1))
    assert np.allclose(one[0, 0, 0, [0, 1, 3]], [-20, 0, -35]) and ok.all()


def test_containment_trivial_cases(lorenz4d):
    r = nth_return_containment(lorenz4d, SIGMA, (3, 3, 3), 0)
    assert r.all_inside and r.checked + r.skipped == 54 and r.violations == []
    r = nth_return_containment(lorenz4d, SIGMA, (1, 1, 1), 10)
    assert r.all_inside and r.checked == 2


def test_return_rate_and_worker_independence(lorenz4d):
    starts = np.concatenate([section_grid(SIGMA, w, (6, 6, 6))[0][section_grid(SIGMA, w, (6, 6, 6))[1]]
                             for w in (PLUS, MINUS)])
    a = nth_returns(lorenz4d, SIGMA, starts, 10, workers=1, chunk=50)
    b = nth_returns(lorenz4d, SIGMA, starts, 10, workers=2, chunk=50)
    for x, y in zip(a, b):
        assert np.array_equal(x, y)
    assert np.mean(a[1] == OK) >= 0.999


def test_separatrix_symmetry_and_offsets(lorenz4d):
    start = separatrix_start(lorenz4d)
    assert start[0] > 0 and np.linalg.norm(start) == pytest.approx(1e-6)
    plus = separatrix_trajectory(lorenz4d, span=20.0)
    minus = separatrix_trajectory(lorenz4d, branch="minus", span=20.0)
    # the vector field commutes with S in floating point, so the branches are exact images
    assert np.array_equal(apply_symmetry(lorenz4d, plus.states.T).T, minus.states)
    m6 = find_crossings(lorenz4d, separatrix_start(lorenz4d, offset=1e-6), SIGMA, 1).crossings[0]
    m7 = find_crossings(lorenz4d, separatrix_start(lorenz4d, offset=1e-7), SIGMA, 1).crossings[0]
    assert m6.window == "plus"
    assert np.linalg.norm(m6.state - m7.state) < 1e-3


def test_separatrix_needs_real_positive_eigenvalue():
    m = builtin_system("lorenz4d", {"sigma": 10, "r": 0.5, "b": 8 / 3, "mu": 7})
    with pytest.raises(ValueError):
        separatrix_start(m, equilibrium_eigenvalues(m))
    with pytest.raises(ValueError):
        separatrix_start(builtin_system("lorenz4d", {"sigma": 10, "r": 25, "b": 8 / 3, "mu": 7}), branch="up")


def test_boundary_labels_are_symmetric(lorenz4d):
    res = stable_manifold_boundary(lorenz4d, SIGMA, (7, 7, 7))
    lp, lm = res.labels
    # S flips x and y; the plus grid maps onto the minus grid with both axes reversed
    img = lm[::-1, ::-1, :]
    both = (lp >= 0) & (img >= 0)
    assert both.sum() > 100 and np.all(lp[both] == 1 - img[both])
    for p in res.points[PLUS][res.valid[PLUS]][:20]:
        assert symmetric_window(SIGMA, lorenz4d, p) == MINUS


def test_uniform_labels_give_empty_boundary():
    rot = affine_flow([[0.0, -1.0], [1.0, 0.0]])
    ring = SectionSpec("ring", np.array([0.0, 1.0]), np.zeros(2), 1.0, positive_axis=1,
                       windows=((np.array([1.0, -np.inf]), np.array([2.0, np.inf])),), direction=1)
    res = stable_manifold_boundary(rot, ring, (9,))
    assert np.all(res.labels[0] == 1) and res.boundary.shape == (0, 2)
    lab = np.zeros((4, 4), dtype=np.int64)
    lab[2:, :] = 1
    lab[0, 0] = -1
    mask = _boundary_mask(lab)
    assert mask[1:3].all() and not mask[0].any() and not mask[3].any()


def test_trace_colors(lorenz4d):
    x0 = separatrix_start(lorenz4d)
    tr = attractor_section_trace(lorenz4d, SIGMA, x0, 3000, 100)
    assert np.array_equal(tr.next_window[:-1], tr.window[1:])
    assert np.array_equal(tr.prev_window[1:], tr.window[:-1])
    assert set(tr.colors) == {"green", "black", "red", "blue"}
    assert COLORS[(MINUS, PLUS)] == "green" and COLORS[(PLUS, MINUS)] == "red"
    mirror = attractor_section_trace(lorenz4d, SIGMA, apply_symmetry(lorenz4d, x0), 3000, 100)
    swap = {"green": "red", "red": "green", "black": "blue", "blue": "black"}
    assert [swap[c] for c in tr.colors] == mirror.colors
    with pytest.raises(ValueError):
        attractor_section_trace(lorenz4d, SIGMA, x0, 10, 9)


def test_crossings_csv(tmp_path, crossings):
    write_crossings_csv(crossings[:5], tmp_path / "c.csv", ["red"] * 5)
    lines = (tmp_path / "c.csv").read_text().splitlines()
    assert lines[0] == "k,t,x,y,z,w,window,color" and len(lines) == 6
    row = lines[1].split(",")
    assert float(row[1]) == crossings[0].t and row[-1] == "red"
