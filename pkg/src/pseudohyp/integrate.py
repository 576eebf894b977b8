"""Trajectory, variational and adjoint integration.

Flows use an adaptive Dormand-Prince 5(4) pair with its free fourth-order
continuous extension; maps are iterated exactly. All hot loops are compiled
with numba and operate on an *augmented* state ``[x, v_1, ..., v_k]`` where
each ``v_i`` obeys either the variational equation ``v' = DF(x) v`` or the
adjoint equation ``v' = -DF(x)^T v``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numba import njit

from .systems import SystemModel, evaluate, jacobian

MODE_STATE = 0
MODE_VARIATIONAL = 1
MODE_ADJOINT = 2
MODE_MIXED = 3  # first vector variational, second adjoint

DEFAULT_RTOL = 1e-10
DEFAULT_ATOL = 1e-12
ESCAPE_BOUND = 1e4
RENORM_LOW = 1e-150
RENORM_HIGH = 1e150
MAX_CONDITION = 1e12

# status codes returned by the kernels
OK = 0
STEP_UNDERFLOW = 1
ESCAPED = 2
NOT_FINITE = 3
SINGULAR = 4
_STATUS_TEXT = {
    STEP_UNDERFLOW: "step-size underflow",
    ESCAPED: "trajectory escaped the bounding ball",
    NOT_FINITE: "non-finite values",
    SINGULAR: "numerically singular Jacobian",
}


class IntegrationError(RuntimeError):
    """A kernel stopped early; ``time`` or ``index`` locate the failure."""

    def __init__(self, reason: str, time: float | None = None, index: int | None = None,
                 status: int | None = None):
        where = []
        if time is not None:
            where.append(f"t={time:.6g}")
        if index is not None:
            where.append(f"index={index}")
        super().__init__(reason + (f" ({', '.join(where)})" if where else ""))
        self.reason = reason
        self.time = time
        self.index = index
        self.status = status


def _raise(status: int, time=None, index=None):
    raise IntegrationError(_STATUS_TEXT.get(status, f"status {status}"), time=time, index=index,
                           status=status)


# --------------------------------------------------------------------------
# Dormand-Prince tableau
# --------------------------------------------------------------------------

_C = np.array([0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0])
_A = np.array([
    [0, 0, 0, 0, 0, 0],
    [1 / 5, 0, 0, 0, 0, 0],
    [3 / 40, 9 / 40, 0, 0, 0, 0],
    [44 / 45, -56 / 15, 32 / 9, 0, 0, 0],
    [19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729, 0, 0],
    [9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656, 0],
])
_B = np.array([35 / 384, 0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84])
_E = np.array([-71 / 57600, 0, 71 / 16695, -71 / 1920, 17253 / 339200, -22 / 525, 1 / 40])
# continuous extension: y(t + th*h) = y + h * sum_j K_j * (P_j . [th, th^2, th^3, th^4])
_P = np.array([
    [1, -8048581381 / 2820520608, 8663915743 / 2820520608, -12715105075 / 11282082432],
    [0, 0, 0, 0],
    [0, 131558114200 / 32700410799, -68118460800 / 10900136933, 87487479700 / 32700410799],
    [0, -1754552775 / 470086768, 14199869525 / 1410260304, -10690763975 / 1880347072],
    [0, 127303824393 / 49829197408, -318862633887 / 49829197408, 701980252875 / 199316789632],
    [0, -282668133 / 205662961, 2019193451 / 616988883, -1453857185 / 822651844],
    [0, 40617522 / 29380423, -110615467 / 29380423, 69997945 / 29380423],
])


@njit(cache=True)
def aug_rhs(code, p, n, mode, y, out, J):
    evaluate(code, p, y[:n], out[:n])
    if mode == MODE_STATE:
        return
    jacobian(code, p, y[:n], J)
    nv = (y.shape[0] - n) // n
    for v in range(nv):
        off = n + v * n
        adj = mode == MODE_ADJOINT or (mode == MODE_MIXED and v == 1)
        for a in range(n):
            s = 0.0
            if adj:
                for b in range(n):
                    s -= J[b, a] * y[off + b]
            else:
                for b in range(n):
                    s += J[a, b] * y[off + b]
            out[off + a] = s


@njit(cache=True)
def _attempt(code, p, n, mode, y, h, K, ynew, ytmp, J, rtol, atol):
    N = y.shape[0]
    for s in range(1, 6):
        for i in range(N):
            acc = 0.0
            for j in range(s):
                acc += _A[s, j] * K[j, i]
            ytmp[i] = y[i] + h * acc
        aug_rhs(code, p, n, mode, ytmp, K[s], J)
    for i in range(N):
        acc = 0.0
        for j in range(6):
            acc += _B[j] * K[j, i]
        ynew[i] = y[i] + h * acc
    aug_rhs(code, p, n, mode, ynew, K[6], J)
    errsum = 0.0
    for i in range(N):
        e = 0.0
        for j in range(7):
            e += _E[j] * K[j, i]
        sc = atol + rtol * max(abs(y[i]), abs(ynew[i]))
        r = h * e / sc
        errsum += r * r
    return math.sqrt(errsum / N)


@njit(cache=True)
def advance(code, p, n, mode, t, y, h, t_end, K, ynew, ytmp, J, rtol, atol):
    """Take one accepted step from ``t`` towards ``t_end`` without overshooting.

    ``K[0]`` must hold the derivative at ``y``. On success ``ynew`` and ``K``
    hold the step result (``K[6]`` is the derivative at ``ynew``).
    Returns ``(h_used, h_next, status, reached)``.
    """
    h_prop = h
    while True:
        remaining = t_end - t
        clipped = False
        if abs(h) >= abs(remaining):
            h = remaining
            clipped = True
        if abs(h) < 1e-14 * max(1.0, abs(t)) and not clipped:
            return h, h, STEP_UNDERFLOW, False
        err = _attempt(code, p, n, mode, y, h, K, ynew, ytmp, J, rtol, atol)
        if err <= 1.0:
            if err == 0.0:
                fac = 10.0
            else:
                fac = min(10.0, 0.9 * err ** -0.2)
            h_next = h * fac
            if clipped and abs(h_prop) > abs(h_next):
                h_next = h_prop
            return h, h_next, OK, clipped
        if not math.isfinite(err):
            fac = 0.2
        else:
            fac = max(0.2, 0.9 * err ** -0.2)
        h = h * fac
        h_prop = h
        if abs(h) < 1e-14 * max(1.0, abs(t)):
            return h, h, STEP_UNDERFLOW, False


@njit(cache=True)
def initial_step(code, p, n, mode, t, y, f0, direction, rtol, atol, ytmp, f1, J):
    N = y.shape[0]
    d0 = 0.0
    d1 = 0.0
    for i in range(N):
        sc = atol + abs(y[i]) * rtol
        d0 += (y[i] / sc) ** 2
        d1 += (f0[i] / sc) ** 2
    d0 = math.sqrt(d0 / N)
    d1 = math.sqrt(d1 / N)
    if d0 < 1e-5 or d1 < 1e-5:
        h0 = 1e-6
    else:
        h0 = 0.01 * d0 / d1
    for i in range(N):
        ytmp[i] = y[i] + h0 * direction * f0[i]
    aug_rhs(code, p, n, mode, ytmp, f1, J)
    d2 = 0.0
    for i in range(N):
        sc = atol + abs(y[i]) * rtol
        d2 += ((f1[i] - f0[i]) / sc) ** 2
    d2 = math.sqrt(d2 / N) / h0
    if max(d1, d2) <= 1e-15:
        h1 = max(1e-6, h0 * 1e-3)
    else:
        h1 = (0.01 / max(d1, d2)) ** 0.2
    return min(100.0 * h0, h1) * direction


@njit(cache=True)
def dense(y_old, K, h, theta, out):
    N = y_old.shape[0]
    t2 = theta * theta
    t3 = t2 * theta
    t4 = t3 * theta
    for i in range(N):
        acc = 0.0
        for j in range(7):
            kj = K[j, i]
            if kj != 0.0:
                acc += kj * (_P[j, 0] * theta + _P[j, 1] * t2 + _P[j, 2] * t3 + _P[j, 3] * t4)
        out[i] = y_old[i] + h * acc


@njit(cache=True)
def _norm(v):
    s = 0.0
    for i in range(v.shape[0]):
        s += v[i] * v[i]
    return math.sqrt(s)


@njit(cache=True)
def _renormalize_vectors(y, K0, n, lognorm):
    nv = (y.shape[0] - n) // n
    for v in range(nv):
        off = n + v * n
        nrm = _norm(y[off:off + n])
        if nrm < RENORM_LOW or nrm > RENORM_HIGH:
            for a in range(n):
                y[off + a] /= nrm
                K0[off + a] /= nrm
            lognorm[v] += math.log(nrm)


@njit(cache=True)
def propagate_aug(code, p, n, mode, y0, t0, t1, rtol, atol, renorm):
    """Integrate the augmented state from ``t0`` to ``t1`` (either direction).

    Returns ``(y1, lognorm, status, t_fail)``; ``lognorm`` accumulates the
    logarithms of mid-step renormalisations when ``renorm`` is set.
    """
    N = y0.shape[0]
    y = y0.copy()
    K = np.empty((7, N))
    ynew = np.empty(N)
    ytmp = np.empty(N)
    f1 = np.empty(N)
    J = np.empty((n, n))
    nv = (N - n) // n
    lognorm = np.zeros(max(nv, 1))
    if t1 == t0:
        return y, lognorm, OK, t0
    direction = 1.0 if t1 > t0 else -1.0
    aug_rhs(code, p, n, mode, y, K[0], J)
    h = initial_step(code, p, n, mode, t0, y, K[0], direction, rtol, atol, ytmp, f1, J)
    t = t0
    while True:
        h_used, h_next, status, reached = advance(code, p, n, mode, t, y, h, t1, K, ynew, ytmp, J, rtol, atol)
        if status != OK:
            return y, lognorm, status, t
        y[:] = ynew
        K[0, :] = K[6, :]
        t = t1 if reached else t + h_used
        h = h_next
        for i in range(N):
            if not math.isfinite(y[i]):
                return y, lognorm, NOT_FINITE, t
        if renorm and nv > 0:
            _renormalize_vectors(y, K[0], n, lognorm)
        if reached:
            return y, lognorm, OK, t


# --------------------------------------------------------------------------
# sampled trajectories
# --------------------------------------------------------------------------

@njit(cache=True)
def _sample_flow(code, p, n, x0, transient, m, dt, rtol, atol, escape, out):
    y = x0.copy()
    K = np.empty((7, n))
    ynew = np.empty(n)
    ytmp = np.empty(n)
    f1 = np.empty(n)
    J = np.empty((n, n))
    t = 0.0
    t_final = transient + (m - 1) * dt
    k = 0
    while k < m and transient + k * dt <= t:
        out[k, :] = y
        k += 1
    if k >= m:
        return OK, t, k
    aug_rhs(code, p, n, MODE_STATE, y, K[0], J)
    h = initial_step(code, p, n, MODE_STATE, t, y, K[0], 1.0, rtol, atol, ytmp, f1, J)
    while k < m:
        h_used, h_next, status, reached = advance(code, p, n, MODE_STATE, t, y, h, t_final, K, ynew, ytmp, J, rtol, atol)
        if status != OK:
            return status, t, k
        t_new = t_final if reached else t + h_used
        while k < m:
            tk = transient + k * dt
            if tk > t_new:
                break
            if reached and k == m - 1:
                out[k, :] = ynew
            else:
                dense(y, K, h_used, (tk - t) / h_used, out[k])
            k += 1
        y[:] = ynew
        K[0, :] = K[6, :]
        t = t_new
        h = h_next
        nrm = _norm(y)
        if not math.isfinite(nrm):
            return NOT_FINITE, t, k
        if nrm > escape:
            return ESCAPED, t, k
    return OK, t, k


@njit(cache=True)
def _rk4_sample_flow(code, p, n, x0, transient, m, dt, substeps, escape, out):
    y = x0.copy()
    k1 = np.empty(n)
    k2 = np.empty(n)
    k3 = np.empty(n)
    k4 = np.empty(n)
    tmp = np.empty(n)
    n_tr = int(round(transient / dt))
    h = dt / substeps
    total = n_tr + m - 1
    if n_tr == 0:
        out[0, :] = y
    for step in range(total):
        for _ in range(substeps):
            evaluate(code, p, y, k1)
            for i in range(n):
                tmp[i] = y[i] + 0.5 * h * k1[i]
            evaluate(code, p, tmp, k2)
            for i in range(n):
                tmp[i] = y[i] + 0.5 * h * k2[i]
            evaluate(code, p, tmp, k3)
            for i in range(n):
                tmp[i] = y[i] + h * k3[i]
            evaluate(code, p, tmp, k4)
            for i in range(n):
                y[i] += h * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]) / 6.0
        nrm = _norm(y)
        if not math.isfinite(nrm):
            return NOT_FINITE, (step + 1) * dt, step
        if nrm > escape:
            return ESCAPED, (step + 1) * dt, step
        idx = step + 1 - n_tr
        if idx >= 0:
            out[idx, :] = y
    return OK, total * dt, m


@njit(cache=True)
def _iterate(code, p, n, x0, transient, m, escape, out):
    x = x0.copy()
    nxt = np.empty(n)
    for s in range(transient):
        evaluate(code, p, x, nxt)
        x[:] = nxt
        nrm = _norm(x)
        if not math.isfinite(nrm) or nrm > escape:
            return ESCAPED, s
    for s in range(m):
        evaluate(code, p, x, nxt)
        x[:] = nxt
        nrm = _norm(x)
        if not math.isfinite(nrm) or nrm > escape:
            return ESCAPED, transient + s
        out[s, :] = x
    return OK, -1


# --------------------------------------------------------------------------
# tangent passes
# --------------------------------------------------------------------------

@njit(cache=True, nogil=True)
def _flow_pass(code, p, n, mode, states, times, seed, backward, rtol, atol, out):
    """Transport a unit vector sample-to-sample, restarting from stored states."""
    m = states.shape[0]
    N = 2 * n
    y = np.empty(N)
    K = np.empty((7, N))
    ynew = np.empty(N)
    ytmp = np.empty(N)
    f1 = np.empty(N)
    J = np.empty((n, n))
    lognorm = np.zeros(1)
    nrm = _norm(seed)
    s = m - 1 if backward else 0
    for a in range(n):
        out[s, a] = seed[a] / nrm
    h = 0.0
    for _ in range(m - 1):
        s_next = s - 1 if backward else s + 1
        y[:n] = states[s]
        y[n:] = out[s]
        t = times[s]
        t_end = times[s_next]
        aug_rhs(code, p, n, mode, y, K[0], J)
        if h == 0.0:
            direction = -1.0 if backward else 1.0
            h = initial_step(code, p, n, mode, t, y, K[0], direction, rtol, atol, ytmp, f1, J)
        while True:
            h_used, h_next, status, reached = advance(code, p, n, mode, t, y, h, t_end, K, ynew, ytmp, J, rtol, atol)
            if status != OK:
                return status, s
            y[:] = ynew
            K[0, :] = K[6, :]
            t = t_end if reached else t + h_used
            h = h_next
            _renormalize_vectors(y, K[0], n, lognorm)
            if reached:
                break
        nrm = _norm(y[n:])
        if not (nrm > 0.0 and math.isfinite(nrm)):
            return NOT_FINITE, s_next
        for a in range(n):
            out[s_next, a] = y[n + a] / nrm
        s = s_next
    return OK, -1


@njit(cache=True)
def _condition(J):
    _, sv, _ = np.linalg.svd(J)
    if sv[-1] == 0.0:
        return np.inf
    return sv[0] / sv[-1]


@njit(cache=True, nogil=True)
def _map_pass(code, p, n, states, seed, kind, max_cond, out):
    """kind 0: backward u_{s-1} ~ DF(x_{s-1})^{-1} u_s
    kind 1: adjoint w_{s+1} ~ DF(x_s)^{-T} w_s
    kind 2: forward v_{s+1} ~ DF(x_s) v_s"""
    m = states.shape[0]
    J = np.empty((n, n))
    nrm = _norm(seed)
    s = m - 1 if kind == 0 else 0
    for a in range(n):
        out[s, a] = seed[a] / nrm
    for _ in range(m - 1):
        if kind == 0:
            jacobian(code, p, states[s - 1], J)
            if _condition(J) > max_cond:
                return SINGULAR, s - 1
            v = np.linalg.solve(J, out[s].copy())
            s_next = s - 1
        elif kind == 1:
            jacobian(code, p, states[s], J)
            if _condition(J) > max_cond:
                return SINGULAR, s
            v = np.linalg.solve(J.T.copy(), out[s].copy())
            s_next = s + 1
        else:
            jacobian(code, p, states[s], J)
            v = J @ out[s].copy()
            s_next = s + 1
        nrm = _norm(v)
        if not (nrm > 0.0 and math.isfinite(nrm)):
            return NOT_FINITE, s_next
        for a in range(n):
            out[s_next, a] = v[a] / nrm
        s = s_next
    return OK, -1


# --------------------------------------------------------------------------
# Python API
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class TrajectoryRecord:
    """Equally spaced samples of one trajectory after the transient."""

    times: np.ndarray
    states: np.ndarray
    sample_dt: float
    transient_discarded: float
    is_flow: bool = True

    def __len__(self) -> int:
        return self.states.shape[0]


@dataclass(frozen=True)
class DenseSegment:
    """One accepted Dormand-Prince step with its continuous extension."""

    t_a: float
    t_b: float
    y_a: np.ndarray
    stages: np.ndarray

    def __call__(self, t: float) -> np.ndarray:
        h = self.t_b - self.t_a
        out = np.empty_like(self.y_a)
        dense(self.y_a, self.stages, h, (t - self.t_a) / h, out)
        return out


def dense_segments(model: SystemModel, x0, t_end: float, rtol: float = DEFAULT_RTOL,
                   atol: float = DEFAULT_ATOL) -> list[DenseSegment]:
    """Accepted steps of a forward integration, each with its interpolant.

    Meant for inspection and tests; the compiled drivers use the same
    interpolant internally.
    """
    n = model.dimension
    y = np.array(x0, dtype=np.float64)
    K = np.empty((7, n))
    ynew = np.empty(n)
    ytmp = np.empty(n)
    f1 = np.empty(n)
    J = np.empty((n, n))
    aug_rhs(model.code, model.packed, n, MODE_STATE, y, K[0], J)
    h = initial_step(model.code, model.packed, n, MODE_STATE, 0.0, y, K[0], 1.0, rtol, atol, ytmp, f1, J)
    t = 0.0
    segments = []
    while True:
        h_used, h, status, reached = advance(model.code, model.packed, n, MODE_STATE, t, y, h, t_end,
                                             K, ynew, ytmp, J, rtol, atol)
        if status != OK:
            _raise(status, time=t)
        t_new = t_end if reached else t + h_used
        segments.append(DenseSegment(t, t_new, y.copy(), K.copy()))
        y = ynew.copy()
        K[0] = K[6]
        t = t_new
        if reached:
            return segments


def _check_state(model: SystemModel, x0) -> np.ndarray:
    x0 = np.array(x0, dtype=np.float64)
    if x0.shape != (model.dimension,):
        raise ValueError(f"initial state must have length {model.dimension}")
    if not np.all(np.isfinite(x0)):
        raise ValueError("initial state is not finite")
    return x0


def integrate_trajectory(model: SystemModel, x0, transient: float, span: float, sample_dt: float,
                         rtol: float = DEFAULT_RTOL, atol: float = DEFAULT_ATOL,
                         escape: float = ESCAPE_BOUND, method: str = "dopri5",
                         rk4_substeps: int = 10) -> TrajectoryRecord:
    """Sample a flow trajectory on a uniform grid after discarding a transient.

    The grid is ``transient + k * sample_dt`` for ``k = 0 .. m-1`` with
    ``m = round(span / sample_dt)``. ``method="rk4"`` switches to fixed-step
    classical RK4 with ``rk4_substeps`` steps per sample, for cross-checks.
    """
    if not model.is_flow:
        raise ValueError(f"{model.name} is a map; use iterate_map")
    if not (sample_dt > 0 and span > 0 and transient >= 0):
        raise ValueError("need sample_dt > 0, span > 0 and transient >= 0")
    x0 = _check_state(model, x0)
    m = int(round(span / sample_dt))
    if m < 2:
        raise ValueError("span must cover at least two samples")
    states = np.empty((m, model.dimension))
    if method == "dopri5":
        status, t, k = _sample_flow(model.code, model.packed, model.dimension, x0, float(transient), m,
                                    float(sample_dt), rtol, atol, escape, states)
    elif method == "rk4":
        if abs(transient / sample_dt - round(transient / sample_dt)) > 1e-9:
            raise ValueError("rk4 needs a transient that is a multiple of sample_dt")
        status, t, k = _rk4_sample_flow(model.code, model.packed, model.dimension, x0, float(transient), m,
                                        float(sample_dt), int(rk4_substeps), escape, states)
    else:
        raise ValueError(f"unknown method {method!r}")
    if status != OK:
        _raise(status, time=t)
    times = transient + sample_dt * np.arange(m)
    return TrajectoryRecord(times=times, states=states, sample_dt=float(sample_dt),
                            transient_discarded=float(transient), is_flow=True)


def iterate_map(model: SystemModel, x0, transient: int, count: int,
                escape: float = ESCAPE_BOUND) -> TrajectoryRecord:
    """Record iterates ``transient + 1 .. transient + count`` of ``x0``; the
    sample at time ``s`` is ``F^(transient + s)(x0)``."""
    if model.is_flow:
        raise ValueError(f"{model.name} is a flow; use integrate_trajectory")
    if count < 1:
        raise ValueError("count must be >= 1")
    x0 = _check_state(model, x0)
    states = np.empty((count, model.dimension))
    status, idx = _iterate(model.code, model.packed, model.dimension, x0, int(transient), int(count),
                           escape, states)
    if status != OK:
        _raise(status, index=idx)
    times = np.arange(1, count + 1, dtype=np.float64)
    return TrajectoryRecord(times=times, states=states, sample_dt=1.0,
                            transient_discarded=float(transient), is_flow=False)


def _unit_seed(seed, n) -> np.ndarray:
    seed = np.array(seed, dtype=np.float64)
    if seed.shape != (n,) or not np.all(np.isfinite(seed)) or not np.any(seed):
        raise ValueError("seed must be a finite non-zero vector of the model dimension")
    return seed / np.linalg.norm(seed)


def _flow_pass_py(model, traj, seed, mode, backward, rtol, atol):
    if not model.is_flow:
        raise ValueError(f"{model.name} is a map; use propagate_map_tangent")
    n = model.dimension
    out = np.empty_like(traj.states)
    status, idx = _flow_pass(model.code, model.packed, n, mode, traj.states, traj.times,
                             _unit_seed(seed, n), backward, rtol, atol, out)
    if status != OK:
        _raise(status, index=idx)
    return out


def propagate_variational_backward(model: SystemModel, traj: TrajectoryRecord, u_m,
                                   rtol: float = DEFAULT_RTOL, atol: float = DEFAULT_ATOL) -> np.ndarray:
    """Unit vectors ``u_s`` obtained by transporting ``u_m`` backwards along the samples.

    Each interval restarts the base trajectory from the stored state, so the
    backward-unstable directions of ``x`` never accumulate.
    """
    return _flow_pass_py(model, traj, u_m, MODE_VARIATIONAL, True, rtol, atol)


def propagate_adjoint_forward(model: SystemModel, traj: TrajectoryRecord, w_0,
                              rtol: float = DEFAULT_RTOL, atol: float = DEFAULT_ATOL) -> np.ndarray:
    """Unit vectors ``w_s`` from the adjoint equation, renormalised at samples."""
    return _flow_pass_py(model, traj, w_0, MODE_ADJOINT, False, rtol, atol)


def propagate_variational_forward(model: SystemModel, traj: TrajectoryRecord, v_0,
                                  rtol: float = DEFAULT_RTOL, atol: float = DEFAULT_ATOL) -> np.ndarray:
    """Unit vectors approximating the most-expanding direction (flows or maps)."""
    if not model.is_flow:
        return propagate_map_tangent(model, traj, "forward_for_eu", v_0)
    return _flow_pass_py(model, traj, v_0, MODE_VARIATIONAL, False, rtol, atol)


_MAP_DIRECTIONS = {"backward_for_ess": 0, "forward_adjoint_for_ncu": 1, "forward_for_eu": 2}


def propagate_map_tangent(model: SystemModel, traj: TrajectoryRecord, direction: str, seed,
                          max_condition: float = MAX_CONDITION) -> np.ndarray:
    """Tangent transport along a map orbit.

    ``backward_for_ess`` solves with the Jacobian at the preceding iterate, so
    ``DF(x_{s-1}) u_{s-1}`` is parallel to ``u_s``; ``forward_adjoint_for_ncu``
    applies the inverse transpose of ``DF(x_s)``.
    """
    if model.is_flow:
        raise ValueError(f"{model.name} is a flow")
    if direction not in _MAP_DIRECTIONS:
        raise ValueError(f"direction must be one of {sorted(_MAP_DIRECTIONS)}")
    n = model.dimension
    out = np.empty_like(traj.states)
    status, idx = _map_pass(model.code, model.packed, n, traj.states, _unit_seed(seed, n),
                            _MAP_DIRECTIONS[direction], max_condition, out)
    if status != OK:
        _raise(status, index=idx)
    return out


def propagate(model: SystemModel, x0, vectors, t0: float, t1: float, mode: int = MODE_VARIATIONAL,
              rtol: float = DEFAULT_RTOL, atol: float = DEFAULT_ATOL, renormalize: bool = False):
    """Carry a state and tangent (or adjoint) vectors from ``t0`` to ``t1``.

    Returns ``(x1, vectors1, log_scales)`` where ``log_scales`` holds the
    logarithm of any mid-step renormalisation applied to each vector.
    """
    n = model.dimension
    vecs = np.atleast_2d(np.asarray(vectors, dtype=np.float64))
    y0 = np.concatenate([_check_state(model, x0), vecs.ravel()])
    y1, lognorm, status, t = propagate_aug(model.code, model.packed, n, mode, y0, float(t0), float(t1),
                                           rtol, atol, renormalize)
    if status != OK:
        _raise(status, time=t)
    return y1[:n], y1[n:].reshape(vecs.shape), lognorm[: vecs.shape[0]]
