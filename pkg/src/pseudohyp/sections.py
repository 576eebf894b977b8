"""Poincare sections: crossing detection, return maps and grid checks on a section."""
from __future__ import annotations

import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from numba import njit

from .integrate import (DEFAULT_ATOL, DEFAULT_RTOL, ESCAPE_BOUND, ESCAPED, MODE_STATE, NOT_FINITE, OK,
                        STEP_UNDERFLOW, IntegrationError, TrajectoryRecord, _check_state, _norm, advance,
                        aug_rhs, dense, initial_step, integrate_trajectory)
from .systems import EquilibriumInfo, SystemModel, apply_symmetry, equilibrium_eigenvalues, evaluate, jacobian

# event function kinds
EV_SURFACE = 0   # G = sum a_i x_i^2 + sum b_i x_i - c
EV_XMAX = 1      # g = x_0 * dx_0/dt, half the derivative of x_0^2

NO_RETURN = 5
OVERFLOW = 6

RETURN_BUDGET = 200.0
GRAZE_TOL = 1e-8
RESIDUAL_TOL = 1e-9
MIN_GAP = 1e-9
MAX_STEP = 1.0

PLUS, MINUS, OUTSIDE = 0, 1, -1
WINDOW_NAMES = {PLUS: "plus", MINUS: "minus", OUTSIDE: "outside"}
# colour of a trace point keyed by (next window, previous window)
COLORS = {(MINUS, PLUS): "green", (MINUS, MINUS): "black", (PLUS, MINUS): "red", (PLUS, PLUS): "blue"}


class SectionError(RuntimeError):
    pass


@dataclass(frozen=True)
class SectionSpec:
    """Hypersurface ``G(x) = sum a_i x_i^2 + sum b_i x_i - c = 0`` with optional
    positivity of one coordinate and box windows.

    ``windows`` holds ``(lo, hi)`` arrays; the first is ``plus`` and the second
    ``minus``. Without windows every crossing is labelled ``plus``.
    """

    name: str
    quad: np.ndarray
    lin: np.ndarray
    const: float
    positive_axis: int = -1
    windows: tuple = ()
    direction: int = 0

    @property
    def dimension(self) -> int:
        return self.quad.shape[0]

    def packed(self) -> np.ndarray:
        return np.concatenate([self.quad, self.lin, [self.const]]).astype(np.float64)

    def window_arrays(self) -> tuple[np.ndarray, np.ndarray]:
        n = self.dimension
        lo = np.array([w[0] for w in self.windows], dtype=np.float64).reshape(-1, n)
        hi = np.array([w[1] for w in self.windows], dtype=np.float64).reshape(-1, n)
        return lo, hi

    def G(self, x) -> float:
        x = np.asarray(x, dtype=float)
        return float(np.dot(self.quad, x * x) + np.dot(self.lin, x) - self.const)

    def grad(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return 2.0 * self.quad * x + self.lin

    def on_domain(self, x) -> bool:
        return self.positive_axis < 0 or x[self.positive_axis] > 0

    def window_of(self, x) -> int:
        if not self.windows:
            return PLUS
        x = np.asarray(x, dtype=float)
        for k, (lo, hi) in enumerate(self.windows):
            if np.all(x >= lo) and np.all(x <= hi):
                return k
        return OUTSIDE


def plane_section(axis: int, value: float, dimension: int, name: Optional[str] = None, windows=(),
                  direction: int = 0) -> SectionSpec:
    lin = np.zeros(dimension)
    lin[axis] = 1.0
    return SectionSpec(name or f"x{axis}={value:g}", np.zeros(dimension), lin, float(value),
                       windows=tuple(windows), direction=direction)


def builtin_section(name: str, r: Optional[float] = None) -> SectionSpec:
    """``lorenz_plane`` (needs ``r``; plane ``z = r - 1`` split by the sign of x) or
    ``lorenz4d_sigma`` (the quadric ``9x^2 - w^2 - 550 - z^2 = 0`` with ``z > 0``)."""
    inf = np.inf
    if name == "lorenz_plane":
        if r is None:
            raise ValueError("lorenz_plane needs r")
        plus = (np.array([0.0, -inf, -inf]), np.array([inf, inf, inf]))
        minus = (np.array([-inf, -inf, -inf]), np.array([0.0, inf, inf]))
        return plane_section(2, r - 1.0, 3, name=f"lorenz_plane(r={r:g})", windows=(plus, minus), direction=-1)
    if name == "lorenz4d_sigma":
        plus = (np.array([10.0, -20.0, -inf, -60.0]), np.array([30.0, 20.0, inf, -10.0]))
        minus = (np.array([-30.0, -20.0, -inf, -60.0]), np.array([-10.0, 20.0, inf, -10.0]))
        return SectionSpec("lorenz4d_sigma", np.array([9.0, 0.0, -1.0, -1.0]), np.zeros(4), 550.0,
                           positive_axis=2, windows=(plus, minus), direction=-1)
    raise ValueError(f"unknown section {name!r}; known: lorenz_plane, lorenz4d_sigma")


# --------------------------------------------------------------------------
# compiled event scanner
# --------------------------------------------------------------------------

@njit(cache=True)
def _event_value(kind, sp, code, p, x, f):
    n = x.shape[0]
    if kind == EV_SURFACE:
        s = -sp[2 * n]
        for i in range(n):
            s += sp[i] * x[i] * x[i] + sp[n + i] * x[i]
        return s
    evaluate(code, p, x, f)
    return x[0] * f[0]


@njit(cache=True)
def _event_rate(kind, sp, code, p, x, f, J):
    n = x.shape[0]
    evaluate(code, p, x, f)
    if kind == EV_SURFACE:
        s = 0.0
        for i in range(n):
            s += (2.0 * sp[i] * x[i] + sp[n + i]) * f[i]
        return s
    jacobian(code, p, x, J)
    s = 0.0
    for j in range(n):
        s += J[0, j] * f[j]
    return f[0] * f[0] + x[0] * s


@njit(cache=True)
def _window(x, lo, hi):
    nw = lo.shape[0]
    if nw == 0:
        return 0
    for k in range(nw):
        inside = True
        for a in range(x.shape[0]):
            if x[a] < lo[k, a] or x[a] > hi[k, a]:
                inside = False
                break
        if inside:
            return k
    return -1


@njit(cache=True)
def _surface_rate(sp, x, f):
    n = x.shape[0]
    s = 0.0
    for i in range(n):
        s += (2.0 * sp[i] * x[i] + sp[n + i]) * f[i]
    return s


@njit(cache=True)
def _refine(kind, sp, code, p, y, K, h, a, b, ga, f, J, xt):
    """Bisect the sign change of the event on ``[a, b]`` (fractions of the step)
    to a 1e-12 time bracket, then take one Newton step. Returns theta, g, rate."""
    while (b - a) * abs(h) > 1e-12:
        mid = 0.5 * (a + b)
        if mid <= a or mid >= b:
            break
        dense(y, K, h, mid, xt)
        gm = _event_value(kind, sp, code, p, xt, f)
        if (gm < 0.0) == (ga < 0.0) and gm != 0.0:
            a = mid
            ga = gm
        else:
            b = mid
    theta = 0.5 * (a + b)
    dense(y, K, h, theta, xt)
    g = _event_value(kind, sp, code, p, xt, f)
    rate = _event_rate(kind, sp, code, p, xt, f, J)
    if rate != 0.0 and h != 0.0:
        th2 = theta - g / (rate * h)
        if a <= th2 <= b:
            theta = th2
            dense(y, K, h, theta, xt)
            g = _event_value(kind, sp, code, p, xt, f)
            rate = _event_rate(kind, sp, code, p, xt, f, J)
    return theta, g, rate


@njit(cache=True)
def _extremum(kind, sp, code, p, y, K, h, r0, f, J, xt):
    """Fraction of the step where the event rate changes sign (rate ``r0`` at 0)."""
    a = 0.0
    b = 1.0
    while (b - a) * abs(h) > 1e-12:
        mid = 0.5 * (a + b)
        if mid <= a or mid >= b:
            break
        dense(y, K, h, mid, xt)
        rm = _event_rate(kind, sp, code, p, xt, f, J)
        if (rm < 0.0) == (r0 < 0.0) and rm != 0.0:
            a = mid
        else:
            b = mid
    return 0.5 * (a + b)


@njit(cache=True)
def scan_events(code, p, n, x0, t0, kind, sp, pos_axis, lo, hi, direction, n_target, window_only,
                budget, total, max_step, rtol, atol, escape, graze_tol, ev_t, ev_x, ev_win, ev_res, ev_kind):
    """Integrate from ``x0`` and record sign changes of an event function.

    Each bracketed root is refined by bisection on the dense interpolant to a
    1e-12 time bracket followed by one Newton step. For surfaces a step whose
    end values share a sign but whose rate flips is split at the extremum of
    G, so a pair of close crossings inside one step is not lost; an extremum
    touching the surface within ``RESIDUAL_TOL`` without crossing is a
    grazing event. Accepted events with ``|rate| < graze_tol`` are stored
    with ``ev_kind = 1`` (grazing) and not counted. ``budget`` bounds the
    time between counted events and ``total`` the whole scan. Returns
    ``(recorded, counted, status, t, y)``.
    """
    cap = ev_t.shape[0]
    y = x0.copy()
    K = np.empty((7, n))
    ynew = np.empty(n)
    ytmp = np.empty(n)
    f1 = np.empty(n)
    f = np.empty(n)
    J = np.empty((n, n))
    xt = np.empty(n)
    br_a = np.empty(2)
    br_b = np.empty(2)
    br_g = np.empty(2)
    t = t0
    rec = 0
    cnt = 0
    if n_target <= 0:
        return rec, cnt, OK, t, y
    aug_rhs(code, p, n, MODE_STATE, y, K[0], J)
    h = initial_step(code, p, n, MODE_STATE, t, y, K[0], 1.0, rtol, atol, ytmp, f1, J)
    g_old = _event_value(kind, sp, code, p, y, f)
    t_last = t0
    while True:
        t_lim = min(t_last + budget, t0 + total)
        t_end = min(t + max_step, t_lim)
        h_used, h_next, status, reached = advance(code, p, n, MODE_STATE, t, y, h, t_end, K, ynew, ytmp, J,
                                                  rtol, atol)
        if status != OK:
            return rec, cnt, status, t, y
        t_new = t_end if reached else t + h_used
        g_new = _event_value(kind, sp, code, p, ynew, f)
        nb = 0
        touch = -1.0
        if (g_old < 0.0) != (g_new < 0.0) or g_new == 0.0:
            br_a[0] = 0.0
            br_b[0] = 1.0
            br_g[0] = g_old
            nb = 1
        elif kind == EV_SURFACE and g_old != 0.0:
            # K[0] and K[6] hold the vector field at the step ends
            r0 = _surface_rate(sp, y, K[0])
            r1 = _surface_rate(sp, ynew, K[6])
            if (r0 < 0.0) != (r1 < 0.0) and (r0 < 0.0) == (g_old > 0.0):
                te = _extremum(kind, sp, code, p, y, K, h_used, r0, f, J, xt)
                ge = _event_value(kind, sp, code, p, xt, f)
                if abs(ge) < RESIDUAL_TOL:
                    # indistinguishable from tangency at the residual tolerance
                    touch = te
                elif (ge < 0.0) != (g_old < 0.0):
                    br_a[0] = 0.0
                    br_b[0] = te
                    br_g[0] = g_old
                    br_a[1] = te
                    br_b[1] = 1.0
                    br_g[1] = ge
                    nb = 2
        if touch >= 0.0:
            dense(y, K, h_used, touch, xt)
            ts = t + touch * h_used
            if ts - t0 > MIN_GAP and (pos_axis < 0 or xt[pos_axis] > 0.0) and rec < cap:
                ev_t[rec] = ts
                ev_x[rec, :] = xt
                ev_win[rec] = _window(xt, lo, hi)
                ev_res[rec] = abs(_event_value(kind, sp, code, p, xt, f))
                ev_kind[rec] = 1
                rec += 1
        for k in range(nb):
            ga = br_g[k]
            if ga == 0.0:
                continue
            if not ((direction >= 0 and ga < 0.0) or (direction <= 0 and ga > 0.0)):
                continue
            theta, g, rate = _refine(kind, sp, code, p, y, K, h_used, br_a[k], br_b[k], ga, f, J, xt)
            ts = t + theta * h_used
            valid = ts - t0 > MIN_GAP
            if pos_axis >= 0 and xt[pos_axis] <= 0.0:
                valid = False
            if valid:
                grazing = abs(rate) < graze_tol
                win = _window(xt, lo, hi)
                counted = (not grazing) and ((not window_only) or win >= 0)
                if rec < cap and (counted or grazing):
                    ev_t[rec] = ts
                    ev_x[rec, :] = xt
                    ev_win[rec] = win
                    ev_res[rec] = abs(g)
                    ev_kind[rec] = 1 if grazing else 0
                    rec += 1
                if counted:
                    cnt += 1
                    t_last = ts
                    if cnt >= n_target:
                        return rec, cnt, OK, ts, xt.copy()
        y[:] = ynew
        K[0, :] = K[6, :]
        t = t_new
        h = h_next
        g_old = g_new
        nrm = _norm(y)
        if not math.isfinite(nrm):
            return rec, cnt, NOT_FINITE, t, y
        if nrm > escape:
            return rec, cnt, ESCAPED, t, y
        if reached and t >= t_lim:
            return rec, cnt, NO_RETURN, t, y


_STATUS = {OK: "ok", STEP_UNDERFLOW: "step-size underflow", ESCAPED: "escaped", NOT_FINITE: "non-finite",
           NO_RETURN: "no return within the time budget", OVERFLOW: "event buffer overflow"}


@dataclass(frozen=True)
class CrossingEvent:
    t: float
    state: np.ndarray
    window: str
    residual: float
    grazing: bool = False


@dataclass(frozen=True)
class ScanResult:
    events: list
    status: int
    t_final: float

    @property
    def crossings(self) -> list:
        return [e for e in self.events if not e.grazing]

    @property
    def grazings(self) -> list:
        return [e for e in self.events if e.grazing]


def _scan(model, x0, section, n, window_only, budget, total, rtol, atol, escape, graze_tol, max_step, direction,
          kind=EV_SURFACE, extra=64, t0=0.0):
    lo, hi = section.window_arrays()
    cap = n + extra
    ev_t = np.empty(cap)
    ev_x = np.empty((cap, model.dimension))
    ev_win = np.empty(cap, dtype=np.int64)
    ev_res = np.empty(cap)
    ev_kind = np.empty(cap, dtype=np.int64)
    rec, cnt, status, t, _ = scan_events(model.code, model.packed, model.dimension, x0, float(t0), kind,
                                         section.packed(), section.positive_axis, lo, hi, int(direction),
                                         int(n), bool(window_only), float(budget), float(total), float(max_step),
                                         rtol, atol, float(escape), float(graze_tol), ev_t, ev_x, ev_win, ev_res,
                                         ev_kind)
    events = [CrossingEvent(float(ev_t[k]), ev_x[k].copy(), WINDOW_NAMES[int(ev_win[k])], float(ev_res[k]),
                            bool(ev_kind[k])) for k in range(rec)]
    return ScanResult(events, int(status), float(t))


def find_crossings(model: SystemModel, x0, section: SectionSpec, n: int, direction: Optional[int] = None,
                   window_only: bool = False, budget: float = RETURN_BUDGET, rtol: float = DEFAULT_RTOL,
                   atol: float = DEFAULT_ATOL, escape: float = ESCAPE_BOUND, graze_tol: float = GRAZE_TOL,
                   max_step: float = MAX_STEP, strict: bool = True) -> ScanResult:
    """The first ``n`` crossings of ``section`` along the orbit of ``x0``.

    ``direction`` (+1 rising G, -1 falling, 0 both) defaults to the section's
    own. Crossings are counted towards ``n`` only inside a window when
    ``window_only`` is set. ``budget`` bounds the time between counted
    crossings. With ``strict`` a failure raises :class:`SectionError`.
    """
    if not model.is_flow:
        raise ValueError("crossings need a flow")
    if n < 1:
        raise ValueError("n must be >= 1")
    if section.dimension != model.dimension:
        raise ValueError("section and model dimensions differ")
    x0 = _check_state(model, x0)
    direction = section.direction if direction is None else direction
    res = _scan(model, x0, section, n, window_only, budget, np.inf, rtol, atol, escape, graze_tol, max_step,
                direction)
    if strict and res.status != OK:
        raise SectionError(f"{_STATUS.get(res.status, res.status)} at t={res.t_final:.6g} after "
                           f"{len(res.crossings)} crossings")
    return res


# --------------------------------------------------------------------------
# grids on the lorenz4d section
# --------------------------------------------------------------------------

def section_grid(section: SectionSpec, window: int, counts: Sequence[int]) -> tuple[np.ndarray, np.ndarray, tuple]:
    """Grid over the free box coordinates of a window, solving G = 0 for the
    positive coordinate.

    Returns ``(points, valid, axes)`` where ``points`` has shape ``counts + (n,)``
    and ``valid`` marks grid nodes where the surface exists. The solved axis
    must carry the positivity constraint and have no linear term.
    """
    lo, hi = section.window_arrays()
    ax = section.positive_axis
    if ax < 0 or section.lin[ax] != 0.0 or section.quad[ax] == 0.0:
        raise ValueError("grid needs a section solved for a positive coordinate")
    free = [a for a in range(section.dimension) if a != ax]
    if len(counts) != len(free):
        raise ValueError(f"need {len(free)} grid counts")
    axes = []
    for a, c in zip(free, counts):
        c = int(c)
        if c < 1:
            raise ValueError("grid counts must be >= 1")
        axes.append(np.array([(lo[window, a] + hi[window, a]) / 2]) if c == 1
                    else np.linspace(lo[window, a], hi[window, a], c))
    mesh = np.meshgrid(*axes, indexing="ij")
    pts = np.zeros(tuple(int(c) for c in counts) + (section.dimension,))
    rest = -section.const
    for a, m in zip(free, mesh):
        pts[..., a] = m
        rest = rest + section.quad[a] * m * m + section.lin[a] * m
    sq = -rest / section.quad[ax]
    valid = sq > 0
    pts[..., ax] = np.sqrt(np.where(valid, sq, 0.0))
    return pts, valid, tuple(axes)


@njit(cache=True)
def _nth_return_batch(code, p, n, starts, kind, sp, pos_axis, lo, hi, direction, n_ret, budget, max_step,
                      rtol, atol, escape, graze_tol, out_x, out_status, out_win, out_t):
    ev_t = np.empty(1)
    ev_x = np.empty((1, n))
    ev_win = np.empty(1, dtype=np.int64)
    ev_res = np.empty(1)
    ev_kind = np.empty(1, dtype=np.int64)
    for k in range(starts.shape[0]):
        rec, cnt, status, t, y = scan_events(code, p, n, starts[k], 0.0, kind, sp, pos_axis, lo, hi, direction,
                                             n_ret, False, budget, np.inf, max_step, rtol, atol, escape, graze_tol,
                                             ev_t, ev_x, ev_win, ev_res, ev_kind)
        out_status[k] = status
        out_t[k] = t
        out_x[k, :] = y
        out_win[k] = _window(y, lo, hi) if status == OK else -2


def _batch_worker(args):
    (code, packed, n, starts, sp, pos_axis, lo, hi, direction, n_ret, budget, max_step, rtol, atol, escape,
     graze_tol) = args
    m = starts.shape[0]
    out_x = np.empty((m, n))
    out_status = np.empty(m, dtype=np.int64)
    out_win = np.empty(m, dtype=np.int64)
    out_t = np.empty(m)
    _nth_return_batch(code, packed, n, starts, EV_SURFACE, sp, pos_axis, lo, hi, direction, n_ret, budget,
                      max_step, rtol, atol, escape, graze_tol, out_x, out_status, out_win, out_t)
    return out_x, out_status, out_win, out_t


def default_workers() -> int:
    env = os.environ.get("PSEUDOHYP_THREADS")
    if env:
        return max(1, int(env))
    return 1


def nth_returns(model: SystemModel, section: SectionSpec, starts: np.ndarray, n: int,
                budget: float = RETURN_BUDGET, rtol: float = DEFAULT_RTOL, atol: float = DEFAULT_ATOL,
                escape: float = ESCAPE_BOUND, graze_tol: float = GRAZE_TOL, max_step: float = MAX_STEP,
                workers: Optional[int] = None, chunk: int = 256):
    """The ``n``-th return of every start to the hypersurface (windows ignored for
    counting). Returns ``(end_states, status, window_index, times)``; the
    window index is -1 outside and -2 on failure. Results do not depend on
    ``workers``.
    """
    starts = np.ascontiguousarray(np.asarray(starts, dtype=np.float64).reshape(-1, model.dimension))
    lo, hi = section.window_arrays()
    workers = default_workers() if workers is None else max(1, int(workers))
    jobs = [(model.code, np.asarray(model.packed), model.dimension, starts[i:i + chunk], section.packed(),
             section.positive_axis, lo, hi, section.direction, int(n), float(budget), float(max_step), rtol, atol,
             float(escape), float(graze_tol)) for i in range(0, starts.shape[0], chunk)]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(_batch_worker, jobs))
    else:
        parts = [_batch_worker(j) for j in jobs]
    if not parts:
        return (np.empty((0, model.dimension)), np.empty(0, dtype=np.int64), np.empty(0, dtype=np.int64),
                np.empty(0))
    return tuple(np.concatenate([pt[i] for pt in parts]) for i in range(4))


@dataclass(frozen=True)
class ContainmentReport:
    all_inside: bool
    checked: int
    skipped: int
    violations: list = field(default_factory=list)

    @property
    def failures(self) -> int:
        return sum(1 for v in self.violations if v["reason"] != "outside")

    def as_dict(self) -> dict:
        return {"all_inside": self.all_inside, "checked": self.checked, "skipped": self.skipped,
                "violations": self.violations}


def nth_return_containment(model: SystemModel, section: SectionSpec, grid: Sequence[int], n: int,
                           **kwargs) -> ContainmentReport:
    """Check that the ``n``-th return of every grid point of every window lands
    back in a window. Grid nodes off the surface are skipped and counted;
    failures to return are reported as violations with their reason."""
    checked = 0
    skipped = 0
    starts = []
    for w in range(len(section.windows)):
        pts, valid, _ = section_grid(section, w, grid)
        skipped += int(np.count_nonzero(~valid))
        starts.append(pts[valid])
    starts = np.concatenate(starts) if starts else np.empty((0, model.dimension))
    checked = starts.shape[0]
    if n == 0:
        return ContainmentReport(True, checked, skipped, [])
    ends, status, win, _ = nth_returns(model, section, starts, n, **kwargs)
    violations = []
    for k in np.flatnonzero((status != OK) | (win < 0)):
        reason = "outside" if status[k] == OK else _STATUS.get(int(status[k]), str(status[k]))
        violations.append({"start": starts[k].tolist(), "end": ends[k].tolist(), "reason": reason})
    return ContainmentReport(not violations, checked, skipped, violations)


UNKNOWN = -1


@dataclass(frozen=True)
class BoundaryResult:
    """Per-window label grids (1: first return has x > 0, 0: x < 0, -1 unknown)."""

    labels: tuple
    points: tuple
    valid: tuple
    axes: tuple
    boundary: np.ndarray

    @property
    def cell(self) -> np.ndarray:
        return np.array([a[1] - a[0] if a.size > 1 else 0.0 for a in self.axes[0]])


def _boundary_mask(lab: np.ndarray) -> np.ndarray:
    mask = np.zeros(lab.shape, dtype=bool)
    for ax in range(lab.ndim):
        a = np.swapaxes(lab, 0, ax)
        m = np.swapaxes(mask, 0, ax)
        diff = (a[1:] != a[:-1]) & (a[1:] >= 0) & (a[:-1] >= 0)
        m[1:] |= diff
        m[:-1] |= diff
    return mask


def stable_manifold_boundary(model: SystemModel, section: SectionSpec, grid: Sequence[int],
                             **kwargs) -> BoundaryResult:
    """Label grid points by the sign of x at the first return and extract the
    nodes whose neighbours carry the other label."""
    labels, points, valid, axes, bnd = [], [], [], [], []
    for w in range(len(section.windows)):
        pts, ok, ax = section_grid(section, w, grid)
        lab = np.full(ok.shape, UNKNOWN, dtype=np.int64)
        ends, status, _, _ = nth_returns(model, section, pts[ok], 1, **kwargs)
        lab_ok = np.where(status == OK, (ends[:, 0] > 0).astype(np.int64), UNKNOWN)
        lab_ok[(status == OK) & (ends[:, 0] == 0.0)] = UNKNOWN
        lab[ok] = lab_ok
        labels.append(lab)
        points.append(pts)
        valid.append(ok)
        axes.append(ax)
        bnd.append(pts[_boundary_mask(lab)])
    boundary = np.concatenate(bnd) if bnd else np.empty((0, model.dimension))
    return BoundaryResult(tuple(labels), tuple(points), tuple(valid), tuple(axes), boundary)


def separatrix_start(model: SystemModel, eq: Optional[EquilibriumInfo] = None, branch: str = "plus",
                     offset: float = 1e-6) -> np.ndarray:
    if branch not in ("plus", "minus"):
        raise ValueError("branch must be 'plus' or 'minus'")
    eq = equilibrium_eigenvalues(model) if eq is None else eq
    v = eq.unstable_eigenvector
    if v is None or not eq.eigenvalues[0].real > 0:
        raise ValueError("the equilibrium has no real simple positive leading eigenvalue")
    v = np.asarray(v, dtype=float)
    sgn = 1.0 if v[0] >= 0 else -1.0
    if branch == "minus":
        sgn = -sgn
    return np.asarray(eq.location, dtype=float) + sgn * offset * v


def separatrix_trajectory(model: SystemModel, eq: Optional[EquilibriumInfo] = None, branch: str = "plus",
                          offset: float = 1e-6, span: float = 50.0, sample_dt: float = 0.01,
                          **kwargs) -> TrajectoryRecord:
    """Forward orbit from ``eq + offset * v`` along the unstable eigenvector, with
    the sign chosen so that the x-offset is positive on the ``plus`` branch."""
    x0 = separatrix_start(model, eq, branch, offset)
    return integrate_trajectory(model, x0, 0.0, span, sample_dt, **kwargs)


@dataclass(frozen=True)
class SectionTrace:
    """Window crossings with the window of their predecessor and successor."""

    times: np.ndarray
    states: np.ndarray
    window: np.ndarray
    prev_window: np.ndarray
    next_window: np.ndarray

    def __len__(self) -> int:
        return self.times.shape[0]

    @property
    def colors(self) -> list:
        return [COLORS[(int(nx), int(pv))] for nx, pv in zip(self.next_window, self.prev_window)]


def attractor_section_trace(model: SystemModel, section: SectionSpec, x0, n_crossings: int, discard: int,
                            **kwargs) -> SectionTrace:
    """Window crossings ``discard .. n_crossings - 1`` of the orbit of ``x0``;
    the first and last collected crossings are used only as neighbours."""
    if n_crossings <= discard + 2:
        raise ValueError("need n_crossings > discard + 2")
    res = find_crossings(model, x0, section, n_crossings, window_only=True, **kwargs)
    cr = res.crossings
    win = np.array([PLUS if c.window == "plus" else MINUS for c in cr])
    sl = slice(max(discard, 1), len(cr) - 1)
    idx = np.arange(len(cr))[sl]
    return SectionTrace(times=np.array([cr[k].t for k in idx]), states=np.array([cr[k].state for k in idx]),
                        window=win[idx], prev_window=win[idx - 1], next_window=win[idx + 1])


def trace_boundary_overlap(trace_states: np.ndarray, boundary: np.ndarray, cell: np.ndarray,
                           axes: Sequence[int]) -> int:
    """Boundary nodes with a trace point inside their grid cell (half a cell in
    each direction of the listed coordinates)."""
    from scipy.spatial import cKDTree
    if trace_states.size == 0 or boundary.size == 0:
        return 0
    cell = np.asarray(cell, dtype=float)
    scale = np.where(cell > 0, cell, 1.0)
    a = np.asarray(trace_states)[:, axes] / scale
    b = np.asarray(boundary)[:, axes] / scale
    tree = cKDTree(a)
    hits = tree.query_ball_point(b, r=0.5, p=np.inf, return_length=True)
    return int(np.count_nonzero(hits))


def write_crossings_csv(events, path, color: Optional[Sequence[str]] = None) -> None:
    """CSV ``k,t,<state...>,window,color``."""
    with open(path, "w") as fh:
        if not events:
            fh.write("k,t,window,color\n")
            return
        n = len(events[0].state)
        names = ["x", "y", "z", "w"][:n] if n <= 4 else [f"x{i}" for i in range(n)]
        fh.write(",".join(["k", "t", *names, "window", "color"]) + "\n")
        for k, e in enumerate(events):
            c = color[k] if color is not None else ""
            fh.write(",".join([str(k), f"{e.t:.17g}", *(f"{v:.17g}" for v in e.state), e.window, c]) + "\n")


def symmetric_window(section: SectionSpec, model: SystemModel, x) -> int:
    """Window of the symmetry image of ``x``."""
    return section.window_of(apply_symmetry(model, x))
