"""Parameter-plane sweeps: regime classification, resumable journals, diagrams."""
from __future__ import annotations

import enum
import hashlib
import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor, as_completed
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Optional

import numpy as np

from .integrate import ESCAPED, NOT_FINITE, IntegrationError
from .kneading import Axis
from .lyapunov import TOL_ZERO, lyapunov_spectrum
from .systems import PARAM_ORDER, SYSTEM_NAMES, ModelError, builtin_system

log = logging.getLogger(__name__)

SWEEP_SPAN = 2e3
SWEEP_TRANSIENT = 2e2
TASKS = ("spectrum", "kneading", "continuity")


class Regime(str, enum.Enum):
    STABLE_EQUILIBRIUM = "StableEquilibrium"
    LIMIT_CYCLE = "LimitCycle"
    STRANGE_SUM_NEG = "StrangeSumNeg"
    STRANGE_SUM_POS = "StrangeSumPos"
    ESCAPED = "Escaped"
    UNRESOLVED = "Unresolved"


REGIME_COLORS = {
    Regime.STABLE_EQUILIBRIUM: (0, 160, 0),
    Regime.LIMIT_CYCLE: (0, 0, 220),
    Regime.STRANGE_SUM_NEG: (240, 220, 0),
    Regime.STRANGE_SUM_POS: (220, 0, 0),
    Regime.ESCAPED: (0, 0, 0),
    Regime.UNRESOLVED: (128, 128, 128),
}


@dataclass(frozen=True)
class RegimeLabel:
    regime: Regime
    exponents: tuple

    @property
    def label(self) -> str:
        return self.regime.value


def classify_regime(spectrum, tol_zero: float = TOL_ZERO) -> RegimeLabel:
    """Attractor type from a flow spectrum (sorted descending)."""
    exps = np.asarray(getattr(spectrum, "exponents", spectrum), dtype=float)
    snap = tuple(float(v) for v in exps)
    if exps.size < 2 or not np.all(np.isfinite(exps)):
        return RegimeLabel(Regime.UNRESOLVED, snap)
    l1, l2 = exps[0], exps[1]
    s3 = float(np.sum(exps[:3]))
    if l1 < -tol_zero:
        r = Regime.STABLE_EQUILIBRIUM
    elif abs(l1) <= tol_zero and l2 < -tol_zero:
        r = Regime.LIMIT_CYCLE
    elif l1 > tol_zero and s3 < -tol_zero:
        r = Regime.STRANGE_SUM_NEG
    elif l1 > tol_zero and s3 > tol_zero:
        r = Regime.STRANGE_SUM_POS
    else:
        r = Regime.UNRESOLVED
    return RegimeLabel(r, snap)


@dataclass(frozen=True)
class SweepJob:
    """A two-parameter sweep. ``axes`` are ``(name, lo, hi, count)`` tuples."""

    system: str
    axes: tuple
    fixed: Mapping[str, float]
    task: str = "spectrum"
    x0: Optional[tuple] = None
    span: float = SWEEP_SPAN
    transient: float = SWEEP_TRANSIENT
    renorm_interval: Optional[float] = None
    tol_zero: float = TOL_ZERO
    q: int = 16
    seed: int = 0
    out_dir: str = "sweep_out"

    def __post_init__(self):
        if self.system not in SYSTEM_NAMES:
            raise ValueError(f"unknown system {self.system!r}")
        if self.task not in TASKS:
            raise ValueError(f"task must be one of {TASKS}")
        axes = tuple(a if isinstance(a, Axis) else Axis(*a) for a in self.axes)
        if len(axes) != 2:
            raise ValueError("need exactly two axes")
        for a in axes:
            if a.count < 2:
                raise ValueError("resolutions must be >= 2")
            if not (np.isfinite(a.lo) and np.isfinite(a.hi)):
                raise ValueError("axis ranges must be finite")
        object.__setattr__(self, "axes", axes)
        object.__setattr__(self, "fixed", dict(self.fixed))
        names = {a.name for a in axes} | set(self.fixed)
        missing = set(PARAM_ORDER[self.system]) - names
        if missing:
            raise ValueError(f"fixed parameters missing: {sorted(missing)}")
        if self.x0 is not None:
            object.__setattr__(self, "x0", tuple(float(v) for v in self.x0))

    def config(self) -> dict:
        d = asdict(self)
        d["axes"] = [[a.name, a.lo, a.hi, a.count] for a in self.axes]
        d.pop("out_dir")
        return d

    def checksum(self) -> str:
        return hashlib.sha256(json.dumps(self.config(), sort_keys=True).encode()).hexdigest()[:16]

    def to_json(self) -> str:
        d = self.config()
        d["out_dir"] = self.out_dir
        return json.dumps(d, indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: Mapping) -> "SweepJob":
        d = dict(d)
        d["axes"] = tuple(tuple(a) if not isinstance(a, Mapping) else (a["name"], a["lo"], a["hi"], a["count"])
                          for a in d["axes"])
        return cls(**d)

    @classmethod
    def from_json(cls, path) -> "SweepJob":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def params_at(self, i: int, j: int) -> dict:
        a1, a2 = self.axes
        return {**self.fixed, a1.name: float(a1.values[i]), a2.name: float(a2.values[j])}


def _default_x0(system: str):
    return {"lorenz3d": (0.1, 0.1, 20.0), "lorenz4d": (0.1, 0.1, 20.0, 0.1)}.get(system)


def _cell_spectrum(job: SweepJob, model) -> dict:
    x0 = job.x0 or _default_x0(job.system) or tuple([0.1] * model.dimension)
    try:
        spec = lyapunov_spectrum(model, x0, job.transient, job.span, job.renorm_interval)
    except IntegrationError as exc:
        regime = Regime.ESCAPED if getattr(exc, "status", None) in (ESCAPED, NOT_FINITE) else Regime.UNRESOLVED
        return {"exponents": [float("nan")] * model.dimension, "label": regime.value, "error": str(exc)}
    lab = classify_regime(spec, job.tol_zero)
    return {"exponents": [float(v) for v in spec.exponents], "label": lab.label}


def _cell_kneading(job: SweepJob, model) -> dict:
    from .kneading import KneadingError, bits_string, kneading_sequence, kneading_value
    try:
        bits = kneading_sequence(model, None, job.q)
    except (KneadingError, ValueError) as exc:
        return {"D": -1, "bits": "", "label": "failed", "error": str(exc)}
    return {"D": kneading_value(bits), "bits": bits_string(bits), "label": "ok"}


def _cell_continuity(job: SweepJob, model) -> dict:
    from .continuity import build_cloud, classify_cloud
    from .integrate import integrate_trajectory, iterate_map
    from .tangent_fields import build_fields
    x0 = job.x0 or _default_x0(job.system) or tuple([0.1] * model.dimension)
    try:
        if model.is_flow:
            tr = integrate_trajectory(model, x0, job.transient, job.span, 0.01)
        else:
            tr = iterate_map(model, x0, int(job.transient), int(job.span))
        f = build_fields(model, tr, seed=job.seed)
        verdicts = [classify_cloud(build_cloud(f, tag, seed=job.seed)).label for tag in ("ess", "ncu")]
    except (IntegrationError, ValueError) as exc:
        return {"ess": "", "ncu": "", "label": "failed", "error": str(exc)}
    return {"ess": verdicts[0], "ncu": verdicts[1], "label": "/".join(verdicts)}


_TASK_FN = {"spectrum": _cell_spectrum, "kneading": _cell_kneading, "continuity": _cell_continuity}


def run_cell(job: SweepJob, i: int, j: int) -> dict:
    """One cell; never raises for numerical failures."""
    try:
        model = builtin_system(job.system, job.params_at(i, j))
    except ModelError as exc:
        return {"label": Regime.UNRESOLVED.value, "error": str(exc)}
    return _TASK_FN[job.task](job, model)


def _cell_worker(args):
    job_dict, i, j = args
    return i, j, run_cell(SweepJob.from_dict(job_dict), i, j)


@dataclass
class SweepResult:
    job: SweepJob
    cells: dict = field(repr=False)

    @property
    def shape(self) -> tuple:
        return (self.job.axes[0].count, self.job.axes[1].count)

    @property
    def complete(self) -> bool:
        return len(self.cells) == self.shape[0] * self.shape[1]

    def labels(self) -> np.ndarray:
        out = np.empty(self.shape, dtype=object)
        for (i, j), c in self.cells.items():
            out[i, j] = c["label"]
        return out

    def exponents(self) -> np.ndarray:
        n = builtin_system(self.job.system, self.job.params_at(0, 0)).dimension
        out = np.full(self.shape + (n,), np.nan)
        for (i, j), c in self.cells.items():
            if "exponents" in c:
                out[i, j] = c["exponents"]
        return out

    def image(self) -> np.ndarray:
        n1, n2 = self.shape
        img = np.full((n2, n1, 3), 255, dtype=np.uint8)
        for (i, j), c in self.cells.items():
            if self.job.task == "spectrum":
                rgb = REGIME_COLORS[Regime(c["label"])]
            elif self.job.task == "kneading":
                from .kneading import kneading_color
                rgb = (0, 0, 0) if c.get("D", -1) < 0 else kneading_color(c["D"], self.job.q)
            else:
                rgb = (0, 160, 0) if c["label"] == "Continuous/Continuous" else (220, 0, 0)
            img[n2 - 1 - j, i] = rgb
        return img

    def write_csv(self, path) -> None:
        a1, a2 = self.job.axes
        v1, v2 = a1.values, a2.values
        with open(path, "w") as fh:
            if self.job.task == "spectrum":
                n = self.exponents().shape[-1]
                fh.write(",".join(["p1", "p2", *(f"L{k + 1}" for k in range(n)), "label"]) + "\n")
            elif self.job.task == "kneading":
                fh.write("p1,p2,D,bits\n")
            else:
                fh.write("p1,p2,ess,ncu,label\n")
            for i, j in sorted(self.cells):
                c = self.cells[(i, j)]
                head = [f"{v1[i]:.17g}", f"{v2[j]:.17g}"]
                if self.job.task == "spectrum":
                    row = head + [f"{v:.17g}" for v in c.get("exponents", [np.nan] * n)] + [c["label"]]
                elif self.job.task == "kneading":
                    row = head + [str(c.get("D", -1)), c.get("bits", "")]
                else:
                    row = head + [c.get("ess", ""), c.get("ncu", ""), c["label"]]
                fh.write(",".join(row) + "\n")


class JournalMismatch(RuntimeError):
    pass


class Journal:
    """Append-only ``i,j,status`` lines under a ``# checksum`` header. Cell
    payloads go to a companion JSON-lines file written before the journal
    line, so a journal entry always has its payload."""

    def __init__(self, out_dir, checksum: str):
        self.dir = Path(out_dir)
        self.path = self.dir / "journal.csv"
        self.cells_path = self.dir / "cells.jsonl"
        self.checksum = checksum

    def load(self) -> dict:
        if not self.path.exists():
            return {}
        with open(self.path) as fh:
            lines = fh.read().splitlines()
        if not lines or lines[0] != f"# checksum {self.checksum}":
            raise JournalMismatch(f"{self.path} belongs to a different job configuration; refusing to resume")
        done = set()
        for line in lines[1:]:
            parts = line.split(",")
            if len(parts) == 3:
                done.add((int(parts[0]), int(parts[1])))
        cells = {}
        if self.cells_path.exists():
            with open(self.cells_path) as fh:
                for line in fh:
                    try:
                        rec = json.loads(line)
                    except json.JSONDecodeError:
                        continue  # torn final line
                    key = (rec["i"], rec["j"])
                    if key in done:
                        cells[key] = rec["cell"]
        return cells

    def start(self) -> None:
        self.dir.mkdir(parents=True, exist_ok=True)
        if not self.path.exists():
            with open(self.path, "w") as fh:
                fh.write(f"# checksum {self.checksum}\n")

    def record(self, i: int, j: int, cell: dict) -> None:
        with open(self.cells_path, "a") as fh:
            fh.write(json.dumps({"i": i, "j": j, "cell": cell}) + "\n")
            fh.flush()
        with open(self.path, "a") as fh:
            fh.write(f"{i},{j},{'error' if 'error' in cell else 'ok'}\n")
            fh.flush()


def run_sweep(job: SweepJob, workers: Optional[int] = None, resume: bool = True,
              max_cells: Optional[int] = None, write_outputs: bool = True) -> SweepResult:
    """Run (or resume) all cells of ``job`` and write ``grid.csv``, ``diagram.png``
    and ``job.json`` into ``job.out_dir``.

    ``max_cells`` stops after that many new cells, leaving a resumable journal.
    Results do not depend on ``workers`` or completion order.
    """
    from .continuity import save_image
    journal = Journal(job.out_dir, job.checksum())
    cells = journal.load() if resume else {}
    if not resume and journal.path.exists():
        journal.path.unlink()
        if journal.cells_path.exists():
            journal.cells_path.unlink()
    journal.start()
    n1, n2 = job.axes[0].count, job.axes[1].count
    todo = [(i, j) for i in range(n1) for j in range(n2) if (i, j) not in cells]
    if max_cells is not None:
        todo = todo[:max_cells]
    if workers is None:
        env = os.environ.get("PSEUDOHYP_THREADS")
        workers = int(env) if env else 1
    payload = json.loads(job.to_json())
    if workers > 1 and len(todo) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futs = [pool.submit(_cell_worker, (payload, i, j)) for i, j in todo]
            for fut in as_completed(futs):
                i, j, cell = fut.result()
                journal.record(i, j, cell)
                cells[(i, j)] = cell
    else:
        for i, j in todo:
            cell = run_cell(job, i, j)
            journal.record(i, j, cell)
            cells[(i, j)] = cell
    res = SweepResult(job, cells)
    if write_outputs and res.complete:
        out = Path(job.out_dir)
        res.write_csv(out / "grid.csv")
        save_image(res.image(), out / "diagram.png")
        (out / "job.json").write_text(job.to_json() + "\n")
    return res
