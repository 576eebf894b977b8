"""Kneading sequences of the right separatrix and two-parameter kneading diagrams."""
from __future__ import annotations

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np
from numba import njit

from .integrate import DEFAULT_ATOL, DEFAULT_RTOL, ESCAPE_BOUND, OK, TrajectoryRecord, _check_state
from .sections import (_STATUS, EV_XMAX, MAX_STEP, PLUS, SectionSpec, builtin_section, default_workers,
                       find_crossings, scan_events, separatrix_start)
from .systems import SystemModel, builtin_system

log = logging.getLogger(__name__)

DEFAULT_Q = 16
ZOOM_Q = 30
SEPARATRIX_OFFSET = 1e-6
TIME_BUDGET = 500.0
AMBIGUOUS_X2 = 1e-6
GREEN_SEED = 20_201

# per-point status codes in diagrams
KN_OK = 0
KN_AMBIGUOUS = 1
KN_SHORT = 2
KN_FAILED = 3
STATUS_NAMES = {KN_OK: "ok", KN_AMBIGUOUS: "ambiguous", KN_SHORT: "too few maxima", KN_FAILED: "failed"}


class KneadingError(RuntimeError):
    pass


class AmbiguousKneading(KneadingError):
    """A maximum of x^2 fell below the noise floor."""


@njit(cache=True)
def _maxima(code, p, n, x0, count, total, max_step, rtol, atol, escape, out_t, out_x):
    """First ``count`` maxima of x_0^2 along the orbit of ``x0``; returns (found, status)."""
    sp = np.zeros(2 * n + 1)
    lo = np.empty((0, n))
    hi = np.empty((0, n))
    ev_x = np.empty((out_t.shape[0], n))
    ev_win = np.empty(out_t.shape[0], dtype=np.int64)
    ev_res = np.empty(out_t.shape[0])
    ev_kind = np.empty(out_t.shape[0], dtype=np.int64)
    rec, cnt, status, t, y = scan_events(code, p, n, x0, 0.0, EV_XMAX, sp, -1, lo, hi, -1, count, False,
                                         total, total, max_step, rtol, atol, escape, 0.0, out_t, ev_x, ev_win,
                                         ev_res, ev_kind)
    for k in range(rec):
        out_x[k] = ev_x[k, 0]
    return cnt, status


@njit(cache=True)
def _kneading_batch(code, params, starts, q, total, max_step, rtol, atol, escape, floor, bits, status):
    n = starts.shape[1]
    out_t = np.empty(q + 1)
    out_x = np.empty(q + 1)
    for k in range(starts.shape[0]):
        cnt, st = _maxima(code, params[k], n, starts[k], q + 1, total, max_step, rtol, atol, escape, out_t, out_x)
        if cnt < q + 1:
            status[k] = KN_SHORT if st == 5 or st == OK else KN_FAILED
            continue
        status[k] = KN_OK
        for j in range(q):
            x = out_x[j + 1]
            if x * x < floor:
                status[k] = KN_AMBIGUOUS
            bits[k, j] = 1 if x > 0.0 else 0


def _start_of(model, start, branch, offset):
    if start is None:
        return separatrix_start(model, branch=branch, offset=offset)
    if isinstance(start, TrajectoryRecord):
        return np.asarray(start.states[0], dtype=float)
    return _check_state(model, start)


def x_maxima(model: SystemModel, start, count: int, budget: float = TIME_BUDGET, rtol: float = DEFAULT_RTOL,
             atol: float = DEFAULT_ATOL, max_step: float = MAX_STEP) -> tuple[np.ndarray, np.ndarray, int]:
    """Times and x-values of the first ``count`` maxima of x^2 (fewer on failure) and the scan status."""
    x0 = _check_state(model, start)
    out_t = np.empty(count)
    out_x = np.empty(count)
    cnt, st = _maxima(model.code, model.packed, model.dimension, x0, int(count), float(budget), float(max_step),
                      rtol, atol, ESCAPE_BOUND, out_t, out_x)
    return out_t[:cnt].copy(), out_x[:cnt].copy(), int(st)


def kneading_sequence(model: SystemModel, traj=None, q: int = DEFAULT_Q, mode: str = "maxima",
                      section: Optional[SectionSpec] = None, branch: str = "plus",
                      offset: float = SEPARATRIX_OFFSET, budget: float = TIME_BUDGET,
                      rtol: float = DEFAULT_RTOL, atol: float = DEFAULT_ATOL) -> np.ndarray:
    """Bits ``s_1 .. s_q`` of the separatrix itinerary.

    ``traj`` may be a separatrix :class:`TrajectoryRecord` (its first state is
    used as the start, since maxima are refined on the dense output), an
    explicit start state, or ``None`` for the separatrix of the origin.

    ``mode="maxima"`` marks ``s_j = 1`` when x > 0 at the (j+1)-th maximum of
    x^2. ``mode="section"`` uses the window of the (j+1)-th window crossing of
    ``section`` instead. The leading symbol ``s_0`` is dropped.
    """
    if q < 1:
        raise ValueError("q must be >= 1")
    x0 = _start_of(model, traj, branch, offset)
    if mode == "maxima":
        _, xs, st = x_maxima(model, x0, q + 1, budget, rtol, atol)
        if xs.size < q + 1:
            raise KneadingError(f"only {xs.size} maxima of x^2 within {budget:g} time units "
                                f"({_STATUS.get(st, st)})")
        xs = xs[1:]
        if np.any(xs * xs < AMBIGUOUS_X2):
            j = int(np.flatnonzero(xs * xs < AMBIGUOUS_X2)[0]) + 1
            raise AmbiguousKneading(f"maximum {j} has x^2 < {AMBIGUOUS_X2:g}")
        return (xs > 0).astype(np.uint8)
    if mode == "section":
        if section is None:
            section = default_section(model)
        res = find_crossings(model, x0, section, q + 1, window_only=True, budget=budget, rtol=rtol, atol=atol,
                             strict=False)
        cr = res.crossings
        if len(cr) < q + 1:
            raise KneadingError(f"only {len(cr)} window crossings within the budget")
        return np.array([1 if c.window == "plus" else 0 for c in cr[1:q + 1]], dtype=np.uint8)
    raise ValueError("mode must be 'maxima' or 'section'")


def default_section(model: SystemModel) -> SectionSpec:
    if model.name == "lorenz3d":
        return builtin_section("lorenz_plane", r=model.params["r"])
    if model.name == "lorenz4d":
        return builtin_section("lorenz4d_sigma")
    raise ValueError(f"no default section for {model.name}")


def kneading_cross_check(model: SystemModel, q: int = DEFAULT_Q, section: Optional[SectionSpec] = None,
                         **kwargs) -> dict:
    """Compare the maxima rule with the section-window rule; reports the first
    disagreeing position (1-based) or ``None``."""
    a = kneading_sequence(model, None, q, mode="maxima", **kwargs)
    b = kneading_sequence(model, None, q, mode="section", section=section, **kwargs)
    diff = np.flatnonzero(a != b)
    return {"maxima": bits_string(a), "section": bits_string(b),
            "first_disagreement": int(diff[0]) + 1 if diff.size else None}


def kneading_value(bits) -> int:
    """Exact ``D = sum_i s_i 2^(q-i)``."""
    d = 0
    for s in bits:
        s = int(s)
        if s not in (0, 1):
            raise ValueError("bits must be 0 or 1")
        d = 2 * d + s
    return d


def bits_string(bits) -> str:
    return "".join(str(int(b)) for b in bits)


def kneading_color(D: int, q: int, seed: int = GREEN_SEED) -> tuple[int, int, int]:
    """RGB for a kneading value. The lower half of ``[0, 2^q - 1]`` maps to red,
    the upper half to blue, each as ``floor(255 * D_half / (half_range - 1))``;
    green is drawn from a generator keyed by ``(seed, D)``."""
    D = int(D)
    top = (1 << q) - 1
    if not 0 <= D <= top:
        raise ValueError(f"D must lie in [0, {top}]")
    half = 1 << (q - 1)
    denom = max(half - 1, 1)
    green = int(np.random.default_rng([seed, D]).integers(0, 256))
    if 2 * D < top:
        return (255 * D // denom, green, 0)
    return (0, green, 255 * (D - half) // denom)


@dataclass(frozen=True)
class KneadingRecord:
    bits: np.ndarray
    param_point: tuple

    @property
    def q(self) -> int:
        return int(self.bits.size)

    @property
    def D(self) -> int:
        return kneading_value(self.bits)

    @property
    def rgb(self) -> tuple:
        return kneading_color(self.D, self.q)


@dataclass(frozen=True)
class Axis:
    name: str
    lo: float
    hi: float
    count: int

    @property
    def values(self) -> np.ndarray:
        return np.linspace(self.lo, self.hi, self.count)

    @classmethod
    def parse(cls, text: str) -> "Axis":
        """``name=lo:hi:count``."""
        try:
            name, rng = text.split("=", 1)
            lo, hi, cnt = rng.split(":")
            return cls(name.strip(), float(lo), float(hi), int(cnt))
        except ValueError as exc:
            raise ValueError(f"bad axis {text!r}; expected name=lo:hi:count") from exc


@dataclass(frozen=True)
class KneadingDiagram:
    """``D[i, j]`` at ``(p1[i], p2[j])``; -1 where the point failed."""

    system: str
    axes: tuple
    fixed: Mapping[str, float]
    q: int
    D: np.ndarray
    bits: np.ndarray = field(repr=False)
    status: np.ndarray = field(repr=False)

    @property
    def failures(self) -> int:
        return int(np.count_nonzero(self.status != KN_OK))

    def image(self, seed: int = GREEN_SEED) -> np.ndarray:
        """RGB raster with p1 to the right and p2 upwards; failures are black."""
        n1, n2 = self.D.shape
        img = np.zeros((n2, n1, 3), dtype=np.uint8)
        cache = {}
        for i in range(n1):
            for j in range(n2):
                d = int(self.D[i, j])
                if d < 0:
                    continue
                if d not in cache:
                    cache[d] = kneading_color(d, self.q, seed)
                img[n2 - 1 - j, i] = cache[d]
        return img

    def write_csv(self, path) -> None:
        a1, a2 = self.axes
        with open(path, "w") as fh:
            fh.write("p1,p2,D,bits\n")
            for i, v1 in enumerate(a1.values):
                for j, v2 in enumerate(a2.values):
                    if self.status[i, j] == KN_OK:
                        b = bits_string(self.bits[i, j])
                    else:
                        b = STATUS_NAMES[int(self.status[i, j])].replace(" ", "-")
                    fh.write(f"{v1:.17g},{v2:.17g},{int(self.D[i, j])},{b}\n")

    def metadata(self) -> dict:
        return {"system": self.system, "q": self.q, "fixed": dict(self.fixed),
                "axes": [{"name": a.name, "lo": a.lo, "hi": a.hi, "count": a.count} for a in self.axes],
                "failures": self.failures}


def _diagram_chunk(args):
    code, params, starts, q, budget, rtol, atol = args
    m = starts.shape[0]
    bits = np.zeros((m, q), dtype=np.uint8)
    status = np.zeros(m, dtype=np.int64)
    _kneading_batch(code, params, starts, q, budget, MAX_STEP, rtol, atol, ESCAPE_BOUND, AMBIGUOUS_X2, bits,
                    status)
    return bits, status


def kneading_diagram(system: str, axes: Sequence[Axis], q: int = DEFAULT_Q,
                     fixed: Optional[Mapping[str, float]] = None, offset: float = SEPARATRIX_OFFSET,
                     budget: float = TIME_BUDGET, rtol: float = DEFAULT_RTOL, atol: float = DEFAULT_ATOL,
                     workers: Optional[int] = None, chunk: int = 200) -> KneadingDiagram:
    """Kneading values over a two-parameter grid.

    Every grid point gets its own model and plus-branch separatrix. Points
    whose separatrix start cannot be built, or whose maxima are too few or
    ambiguous, are logged and stored with ``D = -1``.
    """
    if len(axes) != 2:
        raise ValueError("need exactly two axes")
    a1, a2 = axes
    if a1.count < 2 or a2.count < 2:
        raise ValueError("resolutions must be >= 2")
    if not all(np.isfinite([a1.lo, a1.hi, a2.lo, a2.hi])):
        raise ValueError("axis ranges must be finite")
    fixed = dict(fixed or {})
    base = builtin_system(system, {**fixed, a1.name: a1.lo, a2.name: a2.lo})
    n = base.dimension
    n1, n2 = a1.count, a2.count
    params = np.empty((n1 * n2, base.packed.size))
    starts = np.zeros((n1 * n2, n))
    status = np.zeros(n1 * n2, dtype=np.int64)
    ok = np.ones(n1 * n2, dtype=bool)
    for i, v1 in enumerate(a1.values):
        for j, v2 in enumerate(a2.values):
            k = i * n2 + j
            m = base.with_params(**{a1.name: float(v1), a2.name: float(v2)})
            params[k] = m.packed
            try:
                starts[k] = separatrix_start(m, offset=offset)
            except ValueError as exc:
                ok[k] = False
                status[k] = KN_FAILED
                log.warning("kneading point (%g, %g): %s", v1, v2, exc)
    idx = np.flatnonzero(ok)
    workers = default_workers() if workers is None else max(1, int(workers))
    jobs = [(base.code, params[idx[s:s + chunk]], starts[idx[s:s + chunk]], int(q), float(budget), rtol, atol)
            for s in range(0, idx.size, chunk)]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(_diagram_chunk, jobs))
    else:
        parts = [_diagram_chunk(j) for j in jobs]
    bits = np.zeros((n1 * n2, q), dtype=np.uint8)
    if parts:
        bits[idx] = np.concatenate([p[0] for p in parts])
        status[idx] = np.concatenate([p[1] for p in parts])
    weights = (1 << np.arange(q - 1, -1, -1, dtype=np.int64))
    D = np.where(status == KN_OK, bits.astype(np.int64) @ weights, -1)
    bad = np.flatnonzero(status != KN_OK)
    if bad.size:
        log.warning("%d of %d kneading points failed or were ambiguous", bad.size, status.size)
    return KneadingDiagram(system, (a1, a2), fixed, int(q), D.reshape(n1, n2), bits.reshape(n1, n2, q),
                           status.reshape(n1, n2))


def change_density(D: np.ndarray, axis: int = 0) -> float:
    """Fraction of adjacent valid cell pairs along ``axis`` whose D differ."""
    D = np.moveaxis(np.asarray(D), axis, 0)
    a, b = D[1:], D[:-1]
    valid = (a >= 0) & (b >= 0)
    if not valid.any():
        return float("nan")
    return float(np.count_nonzero((a != b) & valid) / np.count_nonzero(valid))


def run_lengths(D: np.ndarray, axis: int = 0) -> np.ndarray:
    """Lengths of maximal runs of equal D along ``axis`` (each line separately)."""
    D = np.moveaxis(np.asarray(D), axis, -1)
    out = []
    for line in D.reshape(-1, D.shape[-1]):
        cuts = np.flatnonzero(line[1:] != line[:-1]) + 1
        edges = np.concatenate([[0], cuts, [line.size]])
        out.append(np.diff(edges))
    return np.concatenate(out) if out else np.empty(0, dtype=np.int64)
