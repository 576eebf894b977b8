import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image

from pseudohyp.continuity import (MIN_BIN_PAIRS, ContinuityCloud, Verdict, build_cloud, classify_cloud,
                                  export_cloud_plot, pair_metrics, phi_levels, render_cloud, sample_pairs,
                                  write_cloud_csv, write_verdict_json)
from pseudohyp.integrate import integrate_trajectory
from pseudohyp.tangent_fields import TangentFields, build_fields

pytestmark = pytest.mark.property


def circle_fields(m, vec_of_angle, seed=0):
    """Samples on the unit circle with a field given as a function of the polar angle."""
    t = np.random.default_rng(seed).uniform(0, 2 * np.pi, m)
    states = np.column_stack([np.cos(t), np.sin(t)])
    u = np.array([vec_of_angle(a, k) for k, a in enumerate(t)])
    return TangentFields(np.arange(1, m + 1), states, u, u.copy())


def test_constant_field_has_zero_angles():
    f = circle_fields(2000, lambda a, k: [0.6, 0.8])
    c = build_cloud(f, "ess", 20_000, seed=1)
    assert np.all(c.phi == 0.0)
    assert classify_cloud(c).verdict is Verdict.CONTINUOUS


def test_antipodal_field_angles():
    f = circle_fields(2000, lambda a, k: [0.6, 0.8] if k % 2 else [-0.6, -0.8])
    c = build_cloud(f, "ncu", 20_000, seed=1)
    assert set(np.unique(np.round(c.phi, 12))) <= {0.0, round(math.pi, 12)}
    assert classify_cloud(c).verdict is Verdict.NONORIENTABLE


def test_smooth_and_broken_synthetic_fields():
    smooth = circle_fields(20_000, lambda a, k: [math.cos(a), math.sin(a)])
    assert classify_cloud(build_cloud(smooth, "ess", 200_000, seed=0)).verdict is Verdict.CONTINUOUS
    rng = np.random.default_rng(5)
    noise = rng.uniform(0, np.pi, 20_000)
    broken = circle_fields(20_000, lambda a, k: [math.cos(noise[k]), math.sin(noise[k])])
    assert classify_cloud(build_cloud(broken, "ess", 200_000, seed=0)).verdict is Verdict.DISCONTINUOUS


def test_sparse_cloud_is_inconclusive():
    c = ContinuityCloud(np.array([1.0, 2.0, 3.0]), np.array([0.0, 1.0, 2.0]), "ess", 10_000, 0)
    assert classify_cloud(c).verdict is Verdict.INCONCLUSIVE


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 400), st.integers(0, 2**32 - 1))
def test_cloud_ranges_and_no_self_pairs(m, seed):
    rng = np.random.default_rng(seed)
    ii, jj = sample_pairs(m, 1000, rng)
    assert np.all(ii != jj) and ii.min() >= 0 and max(ii.max(), jj.max()) < m
    states = rng.standard_normal((m, 3))
    vecs = rng.standard_normal((m, 3))
    vecs /= np.linalg.norm(vecs, axis=1)[:, None]
    rho, phi = pair_metrics(states, vecs, ii, jj)
    assert np.all(rho >= 0) and np.all((phi >= 0) & (phi <= math.pi))
    # swapping i and j gives the same pair metrics
    rho2, phi2 = pair_metrics(states, vecs, jj, ii)
    assert np.array_equal(rho, rho2) and np.array_equal(phi, phi2)


def test_torus_metric_wraps():
    states = np.array([[0.01, 0.5], [0.99, 0.5]])
    vecs = np.array([[1.0, 0.0], [1.0, 0.0]])
    rho, _ = pair_metrics(states, vecs, np.array([0]), np.array([1]), torus=True)
    assert abs(rho[0] - 0.02) < 1e-12
    rho, _ = pair_metrics(states, vecs, np.array([0]), np.array([1]), torus=False)
    assert abs(rho[0] - 0.98) < 1e-12


def test_small_inputs_use_every_pair_once():
    f = circle_fields(100, lambda a, k: [1.0, 0.0])
    c = build_cloud(f, "ess", 10_000)
    assert len(c) == 100 * 99 // 2
    with pytest.raises(ValueError):
        build_cloud(f, "ess", 9_999)
    with pytest.raises(ValueError):
        build_cloud(f, "nope", 10_000)


@pytest.fixture(scope="module")
def lorenz_fields(lorenz3d):
    tr = integrate_trajectory(lorenz3d, [0.1, 0.1, 20.0], 100.0, 600.0, 0.01)
    return build_fields(lorenz3d, tr, 5000, 5000, seed=1)


def test_determinism(lorenz_fields):
    a = build_cloud(lorenz_fields, "ess", 200_000, seed=4)
    b = build_cloud(lorenz_fields, "ess", 200_000, seed=4)
    assert np.array_equal(a.rho, b.rho) and np.array_equal(a.phi, b.phi)
    va, vb = classify_cloud(a), classify_cloud(b)
    assert json.dumps(va.as_dict()) == json.dumps(vb.as_dict())


def test_lorenz3d_gap(lorenz_fields):
    for tag in ("ess", "ncu"):
        c = build_cloud(lorenz_fields, tag, 1_000_000, seed=2)
        v = classify_cloud(c)
        assert v.verdict is Verdict.CONTINUOUS
        close = c.phi[c.rho < 0.05]
        assert close.size > 100 and close.min() < 1e-3
        first = np.nonzero(v.bin_counts >= MIN_BIN_PAIRS)[0][0]
        assert v.bin_phi_robust[first] < 0.2


def test_render_examples(tmp_path):
    c = ContinuityCloud(np.linspace(0.1, 1.0, 50), np.zeros(50), "ess", 10_000, 0)
    img = render_cloud(c, width=80, height=60)
    dark = np.nonzero((img == 0).all(axis=2))
    assert set(dark[0].tolist()) == {59}
    p = export_cloud_plot(c, classify_cloud(c), tmp_path / "c.png")
    assert Image.open(p).size == (800, 600)
    q = export_cloud_plot(c, classify_cloud(c), tmp_path / "d.png")
    assert p.read_bytes() == q.read_bytes()
    empty = ContinuityCloud(np.empty(0), np.empty(0), "ess", 10_000, 0)
    with pytest.raises(ValueError):
        render_cloud(empty)
    with pytest.raises(ValueError):
        classify_cloud(empty)


def test_outputs(tmp_path):
    f = circle_fields(500, lambda a, k: [math.cos(a), math.sin(a)])
    c = build_cloud(f, "ess", 10_000, seed=0)
    write_cloud_csv(c, tmp_path / "cloud.csv")
    lines = (tmp_path / "cloud.csv").read_text().splitlines()
    assert lines[0] == "rho,phi" and len(lines) == len(c) + 1
    back = np.loadtxt(tmp_path / "cloud.csv", delimiter=",", skiprows=1)
    assert np.array_equal(back[:, 0], c.rho) and np.array_equal(back[:, 1], c.phi)
    v = classify_cloud(c)
    write_verdict_json(v, tmp_path / "v.json")
    d = json.loads((tmp_path / "v.json").read_text())
    assert d["verdict"] == v.label and d["thresholds"]["phi_gap"] == 0.3
    assert len(d["bins"]["counts"]) == 64


def test_phi_levels_counts_bands():
    rng = np.random.default_rng(0)
    phi = np.concatenate([np.full(500, 0.2), np.full(300, 1.5), np.full(200, 2.9)]) + rng.normal(0, 0.003, 1000)
    c = ContinuityCloud(np.full(1000, 1e-3), np.clip(phi, 0, np.pi), "ess", 10_000, 0)
    n, levels = phi_levels(c)
    assert n == 3 and np.allclose(np.sort(levels), [0.2, 1.5, 2.9], atol=0.05)
    assert phi_levels(ContinuityCloud(np.ones(5), np.zeros(5), "ess", 10_000, 0))[0] == 0
