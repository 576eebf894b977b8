import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image

from pseudohyp.continuity import Verdict
from pseudohyp.kneading import Axis, kneading_diagram
from pseudohyp.sweep import (REGIME_COLORS, JournalMismatch, Regime, SweepJob, classify_regime, run_cell,
                             run_sweep)

pytestmark = pytest.mark.property

L4_FIXED = {"sigma": 10.0, "b": 8 / 3}


def test_classify_examples():
    assert classify_regime([-0.5, -1, -2, -3]).regime is Regime.STABLE_EQUILIBRIUM
    assert classify_regime([0.0, -1, -2, -3]).regime is Regime.LIMIT_CYCLE
    assert classify_regime([2.19, 0.0, -1.96, -16.56]).regime is Regime.STRANGE_SUM_POS
    assert classify_regime([1.2, 0.0, -2.2, -15.3]).regime is Regime.STRANGE_SUM_NEG
    assert classify_regime([0.004, 0.001, -2, -3]).regime is Regime.UNRESOLVED
    assert classify_regime([np.nan, 0, 0, 0]).regime is Regime.UNRESOLVED
    assert classify_regime([-0.5, -1, -2, -3]).exponents == (-0.5, -1.0, -2.0, -3.0)


@settings(max_examples=300, deadline=None)
@given(st.lists(st.floats(-5, 5), min_size=4, max_size=4), st.floats(1e-4, 0.1))
def test_classification_is_total_and_matches_rules(vals, tol):
    e = sorted(vals, reverse=True)
    lab = classify_regime(e, tol).regime
    s3 = sum(e[:3])
    rules = {
        Regime.STABLE_EQUILIBRIUM: e[0] < -tol,
        Regime.LIMIT_CYCLE: abs(e[0]) <= tol and e[1] < -tol,
        Regime.STRANGE_SUM_NEG: e[0] > tol and s3 < -tol,
        Regime.STRANGE_SUM_POS: e[0] > tol and s3 > tol,
    }
    hits = [r for r, ok in rules.items() if ok]
    assert len(hits) <= 1
    assert lab is (hits[0] if hits else Regime.UNRESOLVED)


def test_job_validation_and_json(tmp_path):
    job = SweepJob("lorenz4d", (("r", 20, 30, 3), ("mu", 0, 10, 2)), L4_FIXED, out_dir=str(tmp_path))
    assert isinstance(job.axes[0], Axis)
    path = tmp_path / "job.json"
    path.write_text(job.to_json())
    back = SweepJob.from_json(path)
    assert back == job and back.checksum() == job.checksum()
    assert job.params_at(2, 1) == {**L4_FIXED, "r": 30.0, "mu": 10.0}
    # the output location does not change the configuration checksum
    assert SweepJob.from_dict({**job.config(), "out_dir": "elsewhere"}).checksum() == job.checksum()
    with pytest.raises(ValueError):
        SweepJob("lorenz4d", (("r", 20, 30, 1), ("mu", 0, 10, 2)), L4_FIXED)
    with pytest.raises(ValueError):
        SweepJob("lorenz4d", (("r", 20, np.inf, 3), ("mu", 0, 10, 2)), L4_FIXED)
    with pytest.raises(ValueError, match="missing"):
        SweepJob("lorenz4d", (("r", 20, 30, 3), ("mu", 0, 10, 2)), {"sigma": 10.0})
    with pytest.raises(ValueError):
        SweepJob("nosuch", (("r", 20, 30, 3), ("mu", 0, 10, 2)), L4_FIXED)
    with pytest.raises(ValueError):
        SweepJob("lorenz4d", (("r", 20, 30, 3), ("mu", 0, 10, 2)), L4_FIXED, task="dance")


def _points_ab(out):
    # (25, 3) and (25, 7) are the two labelled points of the (r, mu) diagram
    return SweepJob("lorenz4d", (("r", 25.0, 25.5, 2), ("mu", 3.0, 7.0, 2)), L4_FIXED, out_dir=str(out))


@pytest.fixture(scope="module")
def ab_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("ab")
    return out, run_sweep(_points_ab(out))


def test_points_a_and_b(ab_run):
    out, res = ab_run
    labels = res.labels()
    assert labels[0, 0] == "StrangeSumNeg" and labels[0, 1] == "StrangeSumPos"
    ex = res.exponents()
    assert np.all(np.abs(ex.sum(axis=-1) + 10 + 2 * 8 / 3 + 1) < 5e-2)
    img = np.asarray(Image.open(out / "diagram.png"))
    # mu grows upwards, r to the right
    assert tuple(img[1, 0]) == REGIME_COLORS[Regime.STRANGE_SUM_NEG]
    assert tuple(img[0, 0]) == REGIME_COLORS[Regime.STRANGE_SUM_POS]
    lines = (out / "grid.csv").read_text().splitlines()
    assert lines[0] == "p1,p2,L1,L2,L3,L4,label" and len(lines) == 5
    assert json.loads((out / "job.json").read_text())["system"] == "lorenz4d"


def test_resume_matches_uninterrupted(ab_run, tmp_path):
    out, _ = ab_run
    job = _points_ab(tmp_path)
    part = run_sweep(job, max_cells=3)
    assert not part.complete and not (tmp_path / "grid.csv").exists()
    lines = (tmp_path / "journal.csv").read_text().splitlines()
    assert lines[0] == f"# checksum {job.checksum()}" and len(lines) == 4
    full = run_sweep(job)
    assert full.complete
    assert (tmp_path / "grid.csv").read_bytes() == (out / "grid.csv").read_bytes()
    assert (tmp_path / "diagram.png").read_bytes() == (out / "diagram.png").read_bytes()


def test_checksum_mismatch_refuses(tmp_path):
    job = SweepJob("lorenz3d", (("r", 27, 28, 2), ("sigma", 9, 10, 2)), {"b": 8 / 3}, task="kneading", q=8,
                   out_dir=str(tmp_path))
    run_sweep(job, max_cells=1)
    other = SweepJob("lorenz3d", (("r", 27, 28, 2), ("sigma", 9, 10, 2)), {"b": 8 / 3}, task="kneading", q=9,
                     out_dir=str(tmp_path))
    with pytest.raises(JournalMismatch):
        run_sweep(other)
    fresh = run_sweep(other, resume=False)
    assert fresh.complete


def _divergent(out):
    return SweepJob("lorenz4d", (("sigma", -3.0, 10.0, 2), ("b", 0.5, 8 / 3, 2)), {"r": 25.0, "mu": 7.0},
                    span=200.0, transient=50.0, out_dir=str(out))


def test_divergent_corner_is_isolated(tmp_path):
    res = run_sweep(_divergent(tmp_path / "a"), workers=1)
    labels = res.labels()
    assert res.complete
    assert labels[0, 0] == Regime.ESCAPED.value and "error" in res.cells[(0, 0)]
    others = [labels[i, j] for i, j in ((0, 1), (1, 0), (1, 1))]
    assert Regime.ESCAPED.value not in others and Regime.UNRESOLVED.value not in others
    for (i, j), c in res.cells.items():
        if (i, j) != (0, 0):
            p = res.job.params_at(i, j)
            assert abs(sum(c["exponents"]) + p["sigma"] + 2 * p["b"] + 1) < 5e-2
    par = run_sweep(_divergent(tmp_path / "b"), workers=2)
    assert (tmp_path / "a" / "grid.csv").read_bytes() == (tmp_path / "b" / "grid.csv").read_bytes()
    assert par.cells.keys() == res.cells.keys()


def test_kneading_task_matches_diagram(tmp_path):
    axes = (("r", 27.5, 28.5, 3), ("sigma", 9.5, 10.5, 2))
    job = SweepJob("lorenz3d", axes, {"b": 8 / 3}, task="kneading", q=10, out_dir=str(tmp_path))
    res = run_sweep(job)
    d = kneading_diagram("lorenz3d", [Axis(*a) for a in axes], q=10, fixed={"b": 8 / 3})
    for (i, j), c in res.cells.items():
        assert c["D"] == d.D[i, j]
    assert (tmp_path / "grid.csv").read_text().splitlines()[0] == "p1,p2,D,bits"


def test_continuity_task_cell():
    job = SweepJob("henon3d", (("M1", 0.044, 0.045, 2), ("M2", 0.77, 0.771, 2)), {"B": 0.7}, task="continuity",
                   span=25_000, transient=1000, seed=1)
    cell = run_cell(job, 0, 0)
    names = {v.value for v in Verdict}
    assert cell["ess"] in names and cell["ncu"] in names
    assert cell["label"] == f"{cell['ess']}/{cell['ncu']}"
