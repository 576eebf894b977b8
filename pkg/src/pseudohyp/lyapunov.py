"""Lyapunov spectra by QR re-orthonormalisation of a tangent frame."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from numba import njit

from .integrate import (DEFAULT_ATOL, DEFAULT_RTOL, ESCAPE_BOUND, ESCAPED, MODE_VARIATIONAL, NOT_FINITE, OK,
                        _check_state, _norm, _raise, advance, aug_rhs, initial_step)
from .systems import SystemModel, evaluate, jacobian

TOL_ZERO = 5e-3
FLOW_RENORM_INTERVAL = 0.5
FLOW_TRANSIENT = 1e3
FLOW_SPAN = 1e4


@njit(cache=True)
def _qr_positive(M):
    Q, R = np.linalg.qr(M)
    n = M.shape[1]
    for i in range(n):
        if R[i, i] < 0.0:
            for a in range(Q.shape[0]):
                Q[a, i] = -Q[a, i]
            for b in range(n):
                R[i, b] = -R[i, b]
    return Q, R


@njit(cache=True)
def _spectrum_flow(code, p, n, x0, n_tr, n_ep, interval, rtol, atol, escape, hist):
    N = n + n * n
    y = np.zeros(N)
    y[:n] = x0
    for v in range(n):
        y[n + v * n + v] = 1.0
    K = np.empty((7, N))
    ynew = np.empty(N)
    ytmp = np.empty(N)
    f1 = np.empty(N)
    J = np.empty((n, n))
    M = np.empty((n, n))
    sums = np.zeros(n)
    aug_rhs(code, p, n, MODE_VARIATIONAL, y, K[0], J)
    h = initial_step(code, p, n, MODE_VARIATIONAL, 0.0, y, K[0], 1.0, rtol, atol, ytmp, f1, J)
    t = 0.0
    for e in range(n_tr + n_ep):
        t_end = (e + 1) * interval
        while True:
            h_used, h_next, status, reached = advance(code, p, n, MODE_VARIATIONAL, t, y, h, t_end,
                                                      K, ynew, ytmp, J, rtol, atol)
            if status != OK:
                return status, t, sums
            y[:] = ynew
            K[0, :] = K[6, :]
            t = t_end if reached else t + h_used
            h = h_next
            if reached:
                break
        nrm = _norm(y[:n])
        if not math.isfinite(nrm):
            return NOT_FINITE, t, sums
        if nrm > escape:
            return ESCAPED, t, sums
        for v in range(n):
            for a in range(n):
                M[a, v] = y[n + v * n + a]
        Q, R = _qr_positive(M)
        for v in range(n):
            for a in range(n):
                y[n + v * n + a] = Q[a, v]
        aug_rhs(code, p, n, MODE_VARIATIONAL, y, K[0], J)
        if e >= n_tr:
            k = e - n_tr
            for i in range(n):
                if not (R[i, i] > 0.0):
                    return NOT_FINITE, t, sums
                sums[i] += math.log(R[i, i])
                hist[k, i] = sums[i] / ((k + 1) * interval)
    return OK, t, sums


@njit(cache=True)
def _spectrum_map(code, p, n, x0, transient, count, every, escape, hist):
    x = x0.copy()
    nxt = np.empty(n)
    J = np.empty((n, n))
    Q = np.eye(n)
    sums = np.zeros(n)
    total = transient + count
    k = 0
    for s in range(total):
        jacobian(code, p, x, J)
        Q = J @ np.ascontiguousarray(Q)
        evaluate(code, p, x, nxt)
        x[:] = nxt
        nrm = _norm(x)
        if not math.isfinite(nrm) or nrm > escape:
            return ESCAPED, s, sums
        if (s + 1) % every == 0 or s == total - 1:
            Q, R = _qr_positive(Q)
            if s >= transient:
                for i in range(n):
                    if not (R[i, i] > 0.0):
                        return NOT_FINITE, s, sums
                    sums[i] += math.log(R[i, i])
                    hist[k, i] = sums[i] / (s + 1 - transient)
                k += 1
    return OK, total, sums


@dataclass(frozen=True)
class LyapunovSpectrum:
    """Exponents sorted descending, with running estimates per renormalisation."""

    exponents: np.ndarray
    convergence_history: np.ndarray = field(repr=False)
    total_time: float

    @property
    def sum(self) -> float:
        return float(np.sum(self.exponents))

    def as_dict(self) -> dict:
        return {"exponents": [float(v) for v in self.exponents], "sum": self.sum,
                "total_time": self.total_time}


def lyapunov_spectrum(model: SystemModel, x0, transient: float | None = None, span: float | None = None,
                      renorm_interval: float | None = None, rtol: float = DEFAULT_RTOL,
                      atol: float = DEFAULT_ATOL, escape: float = ESCAPE_BOUND) -> LyapunovSpectrum:
    """Full spectrum along the trajectory from ``x0``.

    For flows ``transient``, ``span`` and ``renorm_interval`` are times
    (defaults 1e3, 1e4, 0.5); for maps they are iteration counts (defaults
    1e3, 1e5, 1). The frame is already evolved and re-orthonormalised during
    the transient, so the accumulated sums start from an aligned frame.
    """
    x0 = _check_state(model, x0)
    n = model.dimension
    if model.is_flow:
        transient = FLOW_TRANSIENT if transient is None else transient
        span = FLOW_SPAN if span is None else span
        interval = FLOW_RENORM_INTERVAL if renorm_interval is None else renorm_interval
        if not (0 < interval < span):
            raise ValueError("need 0 < renorm_interval < span")
        n_tr = int(round(transient / interval))
        n_ep = int(round(span / interval))
        hist = np.zeros((n_ep, n))
        status, t, sums = _spectrum_flow(model.code, model.packed, n, x0, n_tr, n_ep, float(interval),
                                         rtol, atol, escape, hist)
        if status != OK:
            _raise(status, time=t)
        total = n_ep * interval
    else:
        transient = 1000 if transient is None else int(transient)
        count = 100_000 if span is None else int(span)
        every = 1 if renorm_interval is None else int(renorm_interval)
        if count < 1 or every < 1:
            raise ValueError("need span >= 1 and renorm_interval >= 1")
        hist = np.zeros(((count + every - 1) // every, n))
        status, s, sums = _spectrum_map(model.code, model.packed, n, x0, int(transient), count, every,
                                        escape, hist)
        if status != OK:
            _raise(status, index=s)
        total = float(count)
    exps = sums / total
    # stable descending order; QR already yields descending order generically
    order = sorted(range(n), key=lambda i: -exps[i])
    return LyapunovSpectrum(exponents=exps[order], convergence_history=hist[:, order], total_time=float(total))


@dataclass(frozen=True)
class NecessaryConditionReport:
    k: int
    sum_first_k: float
    gap: float
    verdict: str
    tol_sum: float
    tol_gap: float
    tol_zero: float
    neutral_ok: bool | None = None

    @property
    def passed(self) -> bool:
        return self.verdict == "pass"

    def as_dict(self) -> dict:
        return dict(k=self.k, sum_first_k=self.sum_first_k, gap=self.gap, verdict=self.verdict,
                    tol_sum=self.tol_sum, tol_gap=self.tol_gap, tol_zero=self.tol_zero,
                    neutral_ok=self.neutral_ok)


def check_necessary_conditions(spectrum: LyapunovSpectrum | np.ndarray, k: int, is_flow: bool,
                               tol_sum: float = 0.0, tol_gap: float = 0.0,
                               tol_zero: float = TOL_ZERO) -> NecessaryConditionReport:
    """Volume expansion of the leading ``k`` directions and domination.

    ``sum(L_1..L_k) > tol_sum`` and ``L_k - L_{k+1} > tol_gap``. For flows
    with ``k = n - 1`` the neutral (flow-direction) exponent ``L_2`` must also
    vanish within ``tol_zero``.
    """
    exps = np.asarray(getattr(spectrum, "exponents", spectrum), dtype=np.float64)
    n = exps.size
    if not 1 <= k < n:
        raise ValueError(f"k must satisfy 1 <= k < {n}")
    s = float(np.sum(exps[:k]))
    gap = float(exps[k - 1] - exps[k])
    ok = s > tol_sum and gap > tol_gap
    neutral = None
    if is_flow and k == n - 1 and n >= 2:
        neutral = bool(abs(exps[1]) < tol_zero)
        ok = ok and neutral
    return NecessaryConditionReport(k=k, sum_first_k=s, gap=gap, verdict="pass" if ok else "fail",
                                    tol_sum=tol_sum, tol_gap=tol_gap, tol_zero=tol_zero, neutral_ok=neutral)
