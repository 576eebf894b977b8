"""Oriented strong-stable and centre-unstable-normal fields along an orbit."""
from __future__ import annotations

import logging
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Iterator, Optional

import numpy as np

from .integrate import (DEFAULT_ATOL, DEFAULT_RTOL, TrajectoryRecord, propagate_adjoint_forward,
                        propagate_map_tangent, propagate_variational_backward, propagate_variational_forward)
from .systems import SystemModel

log = logging.getLogger(__name__)

MIN_TRIM = 10_000
TRIM_FRACTION = 0.05


def angle(a, b) -> np.ndarray:
    """Angle in [0, pi] between oriented unit vectors (row-wise)."""
    c = np.sum(np.asarray(a) * np.asarray(b), axis=-1)
    return np.arccos(np.clip(c, -1.0, 1.0))


@dataclass(frozen=True)
class TangentFieldSample:
    index: int
    state: np.ndarray
    u: np.ndarray
    w: np.ndarray


@dataclass(frozen=True)
class TangentFields:
    """Columnar storage for a run of :class:`TangentFieldSample`.

    ``index`` holds 1-based trajectory indices. ``eu`` is present only when
    the unstable direction was requested.
    """

    index: np.ndarray
    states: np.ndarray
    u: np.ndarray
    w: np.ndarray
    torus: bool = False
    is_flow: bool = True
    eu: Optional[np.ndarray] = None

    def __len__(self) -> int:
        return self.index.shape[0]

    def __getitem__(self, k: int) -> TangentFieldSample:
        return TangentFieldSample(int(self.index[k]), self.states[k], self.u[k], self.w[k])

    def __iter__(self) -> Iterator[TangentFieldSample]:
        for k in range(len(self)):
            yield self[k]

    def field(self, tag: str) -> np.ndarray:
        if tag == "ess":
            return self.u
        if tag == "ncu":
            return self.w
        if tag == "eu":
            if self.eu is None:
                raise ValueError("fields were built without the unstable direction")
            return self.eu
        raise ValueError(f"unknown field {tag!r}")

    def select(self, keep: np.ndarray) -> "TangentFields":
        return TangentFields(self.index[keep], self.states[keep], self.u[keep], self.w[keep],
                             torus=self.torus, is_flow=self.is_flow,
                             eu=None if self.eu is None else self.eu[keep])


def default_trim(m: int) -> int:
    return max(MIN_TRIM, int(TRIM_FRACTION * m))


def random_unit(rng: np.random.Generator, n: int) -> np.ndarray:
    v = rng.standard_normal(n)
    return v / np.linalg.norm(v)


def decimate_orientation(samples):
    """Keep every second sample (positions 2, 4, ... of the sequence)."""
    if isinstance(samples, TangentFields):
        return samples.select(np.arange(1, len(samples), 2))
    return list(samples)[1::2]


def _passes(model, traj, u_seed, w_seed, eu_seed, rtol, atol):
    if model.is_flow:
        jobs = {
            "u": lambda: propagate_variational_backward(model, traj, u_seed, rtol, atol),
            "w": lambda: propagate_adjoint_forward(model, traj, w_seed, rtol, atol),
        }
        if eu_seed is not None:
            jobs["eu"] = lambda: propagate_variational_forward(model, traj, eu_seed, rtol, atol)
    else:
        jobs = {
            "u": lambda: propagate_map_tangent(model, traj, "backward_for_ess", u_seed),
            "w": lambda: propagate_map_tangent(model, traj, "forward_adjoint_for_ncu", w_seed),
        }
        if eu_seed is not None:
            jobs["eu"] = lambda: propagate_map_tangent(model, traj, "forward_for_eu", eu_seed)
    # the kernels release the GIL, so the passes overlap on multi-core hosts
    with ThreadPoolExecutor(max_workers=len(jobs)) as pool:
        futures = {k: pool.submit(f) for k, f in jobs.items()}
        return {k: f.result() for k, f in futures.items()}


def build_fields(model: SystemModel, traj: TrajectoryRecord, m1: Optional[int] = None,
                 m2: Optional[int] = None, seed: int = 0, u_seed=None, w_seed=None,
                 with_eu: bool = False, decimate: Optional[bool] = None,
                 rtol: float = DEFAULT_RTOL, atol: float = DEFAULT_ATOL) -> TangentFields:
    """Transport ``u`` backwards from the last sample and ``w`` forwards from the
    first, then keep the window ``m1 <= s <= m - m2`` (1-based).

    Unspecified seeds are drawn from ``numpy.random.default_rng(seed)``. For
    maps flagged as orientation-flipping only even indices are kept.
    """
    m = len(traj)
    n = model.dimension
    m1 = default_trim(m) if m1 is None else int(m1)
    m2 = default_trim(m) if m2 is None else int(m2)
    if m1 < 1 or m2 < 0 or m1 + m2 >= m:
        raise ValueError(f"need 1 <= m1 and m1 + m2 < m (m1={m1}, m2={m2}, m={m})")
    rng = np.random.default_rng(seed)
    u_seed = random_unit(rng, n) if u_seed is None else np.asarray(u_seed, dtype=float)
    w_seed = random_unit(rng, n) if w_seed is None else np.asarray(w_seed, dtype=float)
    eu_seed = random_unit(rng, n) if with_eu else None
    vecs = _passes(model, traj, u_seed, w_seed, eu_seed, rtol, atol)

    index = np.arange(1, m + 1)
    keep = (index >= m1) & (index <= m - m2)
    if decimate is None:
        decimate = (not model.is_flow) and model.flips_orientation
    if decimate:
        keep &= index % 2 == 0
    return TangentFields(index=index[keep], states=traj.states[keep], u=vecs["u"][keep], w=vecs["w"][keep],
                         torus=model.torus, is_flow=model.is_flow,
                         eu=vecs["eu"][keep] if with_eu else None)


@dataclass(frozen=True)
class SeedReport:
    max_angle_u: float
    max_angle_w: float
    outliers: tuple


def _aligned_max_angle(a: np.ndarray, b: np.ndarray) -> float:
    # orientation is a global choice, so a single sign flip is allowed
    if np.dot(a[0], b[0]) < 0:
        b = -b
    return float(np.max(angle(a, b)))


def seed_convergence_check(model: SystemModel, traj: TrajectoryRecord, n_seeds: int = 3, rng_seed: int = 0,
                           m1: Optional[int] = None, m2: Optional[int] = None, extra_seeds=(),
                           outlier_angle: float = 1e-3, **kwargs) -> SeedReport:
    """Rebuild the fields from several seeds and report the largest disagreement.

    A seed whose field disagrees with the majority by more than
    ``outlier_angle`` somewhere in the window (for instance one lying exactly
    in an invariant complement) is excluded with a warning.
    """
    if n_seeds < 2:
        raise ValueError("need at least two seeds")
    rng = np.random.default_rng(rng_seed)
    n = model.dimension
    seeds = [(random_unit(rng, n), random_unit(rng, n)) for _ in range(n_seeds)]
    for s in extra_seeds:
        s = np.asarray(s, dtype=float)
        seeds.append((s, s))
    runs = [build_fields(model, traj, m1, m2, u_seed=u, w_seed=w, **kwargs) for u, w in seeds]
    k = len(runs)
    du = np.zeros((k, k))
    dw = np.zeros((k, k))
    for i in range(k):
        for j in range(i + 1, k):
            du[i, j] = du[j, i] = _aligned_max_angle(runs[i].u, runs[j].u)
            dw[i, j] = dw[j, i] = _aligned_max_angle(runs[i].w, runs[j].w)
    agree = (du < outlier_angle) & (dw < outlier_angle)
    votes = agree.sum(axis=1)
    outliers = tuple(int(i) for i in range(k) if votes[i] * 2 <= k)
    good = [i for i in range(k) if i not in outliers]
    if outliers and len(good) >= 2:
        warnings.warn(f"excluded {len(outliers)} seed(s) that did not converge with the majority "
                      f"(measure-zero initial vectors): {list(outliers)}", RuntimeWarning, stacklevel=2)
    else:
        good = list(range(k))
        outliers = ()
    sub = np.ix_(good, good)
    return SeedReport(max_angle_u=float(du[sub].max()), max_angle_w=float(dw[sub].max()), outliers=outliers)
