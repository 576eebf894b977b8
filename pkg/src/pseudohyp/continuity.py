"""(rho, phi) continuity clouds for oriented tangent fields and their classification."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Optional

import numpy as np
from numba import njit, prange
from scipy.spatial import cKDTree

from .tangent_fields import TangentFields

DEFAULT_PAIR_BUDGET = 10_000_000
MIN_PAIR_BUDGET = 10_000
PHI_GAP = 0.3
RHO_LIMIT_FRACTION = 0.01
RHO_BINS = 64
# continuity envelope phi <= SLOPE * rho / rho_limit + PHI_FLOOR, rho in units of rho_limit
ENVELOPE_SLOPE = 1.0
PHI_FLOOR = 0.3
# envelope bins need this many pairs; their robust maximum ignores this fraction
MIN_BIN_PAIRS = 30
OUTLIER_FRACTION = 0.01
# close pairs enumerated exhaustively, as a fraction of the diameter
NEAR_FRACTION = 1e-3
NEAR_MIN_PAIRS = 50_000
# the small-rho set: rho below SMALL_FRACTION * rho_limit, widened to SMALL_MIN_PAIRS pairs
SMALL_FRACTION = 0.1
SMALL_MIN_PAIRS = 50_000
# pairs in the small-rho set needed to call a band (middle or near pi) occupied
MIN_BAND_PAIRS = 5
LEVEL_RHO = 0.01
LEVEL_WIDTH = 0.05


class Verdict(str, Enum):
    CONTINUOUS = "Continuous"
    DISCONTINUOUS = "Discontinuous"
    NONORIENTABLE = "NonorientableCandidate"
    INCONCLUSIVE = "Inconclusive"


@njit(cache=True, parallel=True)
def _pair_kernel(states, vecs, ii, jj, torus, rho, phi):
    n = states.shape[1]
    for k in prange(ii.shape[0]):
        i = ii[k]
        j = jj[k]
        d2 = 0.0
        c = 0.0
        for a in range(n):
            d = states[i, a] - states[j, a]
            if torus:
                d = d - math.floor(d + 0.5)
            d2 += d * d
            c += vecs[i, a] * vecs[j, a]
        rho[k] = math.sqrt(d2)
        phi[k] = math.acos(min(1.0, max(-1.0, c)))


@dataclass(frozen=True)
class ContinuityCloud:
    rho: np.ndarray
    phi: np.ndarray
    field_tag: str
    pair_budget: int
    seed: int

    def __len__(self) -> int:
        return self.rho.shape[0]

    @property
    def diameter(self) -> float:
        return float(self.rho.max()) if len(self) else 0.0


def pair_metrics(states: np.ndarray, vecs: np.ndarray, ii: np.ndarray, jj: np.ndarray,
                 torus: bool = False) -> tuple[np.ndarray, np.ndarray]:
    """Distance and oriented angle for the index pairs ``(ii[k], jj[k])``."""
    states = np.ascontiguousarray(states, dtype=np.float64)
    vecs = np.ascontiguousarray(vecs, dtype=np.float64)
    ii = np.ascontiguousarray(ii, dtype=np.int64)
    jj = np.ascontiguousarray(jj, dtype=np.int64)
    rho = np.empty(ii.shape[0])
    phi = np.empty(ii.shape[0])
    _pair_kernel(states, vecs, ii, jj, bool(torus), rho, phi)
    return rho, phi


def sample_pairs(m: int, count: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Uniform random ordered pairs with ``i != j`` from ``range(m)``."""
    ii = rng.integers(0, m, size=count)
    jj = (ii + rng.integers(1, m, size=count)) % m
    return ii, jj


def _near_pairs(states, torus, radius, limit, min_pairs, budget, rng):
    """All index pairs closer than ``radius``; the radius grows geometrically up to
    ``limit`` until at least ``min_pairs`` pairs qualify."""
    m = states.shape[0]
    tree = cKDTree(states, boxsize=1.0 if torus else None)
    while radius < limit and (tree.count_neighbors(tree, radius) - m) // 2 < min_pairs:
        radius = min(limit, radius * 1.25)
    pairs = tree.query_pairs(radius, output_type="ndarray")
    if pairs.shape[0] > budget:
        pairs = pairs[np.sort(rng.choice(pairs.shape[0], budget, replace=False))]
    return pairs[:, 0], pairs[:, 1]


def build_cloud(samples: TangentFields, field_tag: str = "ess", pair_budget: int = DEFAULT_PAIR_BUDGET,
                seed: int = 0, torus: Optional[bool] = None, near_fraction: float = NEAR_FRACTION,
                near_min_pairs: int = NEAR_MIN_PAIRS) -> ContinuityCloud:
    """Sample ``pair_budget`` random pairs of field samples, plus every close pair.

    Uniform random pairs reach small distances only rarely, so in addition all
    pairs closer than ``near_fraction`` times the diameter are enumerated with
    a KD-tree (the radius grows until ``near_min_pairs`` pairs are found, but
    never beyond the default ``rho_limit``). At most ``pair_budget`` close pairs
    are kept. ``near_fraction=0`` disables this. When fewer than
    ``pair_budget`` distinct pairs exist every pair is used once. Map runs only
    pair samples with even trajectory index.
    """
    if pair_budget < MIN_PAIR_BUDGET:
        raise ValueError(f"pair_budget must be at least {MIN_PAIR_BUDGET}")
    if field_tag not in ("ess", "ncu", "eu"):
        raise ValueError(f"unknown field {field_tag!r}")
    if not samples.is_flow:
        samples = samples.select(samples.index % 2 == 0)
    m = len(samples)
    if m < 2:
        raise ValueError("need at least two samples")
    vecs = samples.field(field_tag)
    torus = samples.torus if torus is None else torus
    rng = np.random.default_rng(seed)
    total = m * (m - 1) // 2
    if total <= pair_budget:
        ii, jj = np.triu_indices(m, 1)
        near_fraction = 0.0
    else:
        ii, jj = sample_pairs(m, pair_budget, rng)
    rho, phi = pair_metrics(samples.states, vecs, ii, jj, torus)
    if near_fraction > 0.0:
        diameter = float(rho.max())
        ni, nj = _near_pairs(np.asarray(samples.states, dtype=np.float64), torus, near_fraction * diameter,
                             RHO_LIMIT_FRACTION * diameter, near_min_pairs, pair_budget, rng)
        nrho, nphi = pair_metrics(samples.states, vecs, ni, nj, torus)
        rho = np.concatenate([rho, nrho])
        phi = np.concatenate([phi, nphi])
    return ContinuityCloud(rho=rho, phi=phi, field_tag=field_tag, pair_budget=int(pair_budget), seed=int(seed))


@dataclass(frozen=True)
class ContinuityVerdict:
    """Classification plus the bin statistics it was derived from."""

    verdict: Verdict
    bin_edges: np.ndarray
    bin_counts: np.ndarray
    bin_phi_max: np.ndarray
    bin_phi_robust: np.ndarray
    small_rho: float
    small_count: int
    small_middle: int
    small_pi: int
    small_phi_max: float
    envelope_ok: bool
    thresholds: dict = field(default_factory=dict)

    @property
    def label(self) -> str:
        return self.verdict.value

    def as_dict(self) -> dict:
        def clean(a):
            return [None if not math.isfinite(v) else float(v) for v in np.asarray(a, dtype=float)]
        return {
            "verdict": self.verdict.value,
            "thresholds": self.thresholds,
            "small_rho": self.small_rho,
            "small_count": self.small_count,
            "small_middle": self.small_middle,
            "small_pi": self.small_pi,
            "small_phi_max": self.small_phi_max,
            "envelope_ok": self.envelope_ok,
            "bins": {"edges": clean(self.bin_edges), "counts": [int(c) for c in self.bin_counts],
                     "phi_max": clean(self.bin_phi_max), "phi_robust": clean(self.bin_phi_robust)},
        }


def _bin_stats(rho, phi, edges, q):
    nb = edges.size - 1
    which = np.searchsorted(edges, rho, side="right") - 1
    inside = (which >= 0) & (which < nb)
    which = which[inside]
    ph = phi[inside]
    counts = np.bincount(which, minlength=nb)
    pmax = np.full(nb, np.nan)
    prob = np.full(nb, np.nan)
    order = np.argsort(which, kind="stable")
    splits = np.split(ph[order], np.cumsum(counts)[:-1])
    for b, vals in enumerate(splits):
        if vals.size:
            pmax[b] = vals.max()
            prob[b] = np.quantile(vals, q)
    return counts, pmax, prob


def classify_cloud(cloud: ContinuityCloud, rho_bins: int = RHO_BINS, phi_gap: float = PHI_GAP,
                   rho_limit: Optional[float] = None, envelope_slope: float = ENVELOPE_SLOPE,
                   phi_floor: float = PHI_FLOOR, small_fraction: float = SMALL_FRACTION,
                   small_min_pairs: int = SMALL_MIN_PAIRS, min_band_pairs: int = MIN_BAND_PAIRS,
                   min_bin_pairs: int = MIN_BIN_PAIRS,
                   outlier_fraction: float = OUTLIER_FRACTION) -> ContinuityVerdict:
    """Classify a cloud from its behaviour as rho -> 0.

    Bins are log-spaced over ``[rho_limit * 1e-4, diameter]`` (closer pairs
    join the first bin). The *small-rho set* holds the pairs with
    ``rho < small_fraction * rho_limit``, widened to the ``small_min_pairs``
    closest pairs when sparse, never past ``rho_limit``.

    * Continuous: every bin below ``rho_limit`` with ``min_bin_pairs`` pairs has
      its ``1 - outlier_fraction`` quantile under
      ``envelope_slope * rho / rho_limit + phi_floor``, and every angle in the
      small-rho set is below ``phi_gap``.
    * Discontinuous: at least ``min_band_pairs`` small-rho angles lie in
      ``(phi_gap, pi - phi_gap)``.
    * NonorientableCandidate: small-rho angles sit only near 0 and near pi,
      with at least ``min_band_pairs`` of them near pi.
    * Inconclusive otherwise, including clouds with fewer than
      ``min_bin_pairs`` pairs below ``rho_limit``.
    """
    if len(cloud) == 0:
        raise ValueError("empty cloud")
    diameter = cloud.diameter
    if rho_limit is None:
        rho_limit = RHO_LIMIT_FRACTION * diameter
    thresholds = dict(rho_bins=int(rho_bins), phi_gap=float(phi_gap), rho_limit=float(rho_limit),
                      envelope_slope=float(envelope_slope), phi_floor=float(phi_floor),
                      small_fraction=float(small_fraction), small_min_pairs=int(small_min_pairs),
                      min_band_pairs=int(min_band_pairs), min_bin_pairs=int(min_bin_pairs),
                      outlier_fraction=float(outlier_fraction), diameter=diameter)
    lo = rho_limit * 1e-4
    hi = max(diameter, rho_limit * 1.0001)
    if lo <= 0.0:
        lo, hi = 1e-300, 1.0
    edges = np.geomspace(lo, hi, rho_bins + 1)
    edges[0] = 0.0
    rho, phi = cloud.rho, cloud.phi
    counts, pmax, prob = _bin_stats(rho, phi, edges, 1.0 - outlier_fraction)

    below = rho < rho_limit
    n_below = int(np.count_nonzero(below))
    if n_below < min_bin_pairs:
        return ContinuityVerdict(Verdict.INCONCLUSIVE, edges, counts, pmax, prob, float("nan"), n_below,
                                 0, 0, float("nan"), False, thresholds)
    small_rho = small_fraction * rho_limit
    if np.count_nonzero(rho < small_rho) < small_min_pairs:
        near = np.sort(rho[below])
        k = min(small_min_pairs, near.size) - 1
        small_rho = max(small_rho, float(np.nextafter(near[k], np.inf)))
    small = phi[rho < small_rho]
    n_mid = int(np.count_nonzero((small > phi_gap) & (small < math.pi - phi_gap)))
    n_pi = int(np.count_nonzero(small >= math.pi - phi_gap))
    small_max = float(small.max())

    mids = np.sqrt(np.maximum(edges[:-1], lo) * edges[1:])
    check = (mids < rho_limit) & (counts >= min_bin_pairs)
    envelope = envelope_slope * mids / rho_limit + phi_floor
    within = bool(np.all(prob[check] < envelope[check]))

    if within and small_max < phi_gap:
        verdict = Verdict.CONTINUOUS
    elif n_mid >= min_band_pairs:
        verdict = Verdict.DISCONTINUOUS
    elif n_pi >= min_band_pairs:
        verdict = Verdict.NONORIENTABLE
    else:
        verdict = Verdict.INCONCLUSIVE
    return ContinuityVerdict(verdict, edges, counts, pmax, prob, small_rho, int(small.size), n_mid, n_pi,
                             small_max, within, thresholds)


def phi_levels(cloud: ContinuityCloud, rho_max: float = LEVEL_RHO, width: float = LEVEL_WIDTH,
               mass: float = 0.95) -> tuple[int, np.ndarray]:
    """Fewest phi-levels whose ``width`` neighbourhoods hold ``mass`` of the pairs with ``rho < rho_max``.

    Levels are picked greedily from a histogram with bins of size ``width``,
    each level covering its own bin and both neighbours' nearer halves.
    Returns ``(count, levels)``; count is 0 when no pair qualifies.
    """
    sel = cloud.phi[cloud.rho < rho_max]
    if sel.size == 0:
        return 0, np.empty(0)
    fine = width / 4
    nb = int(math.ceil(math.pi / fine)) + 1
    hist = np.bincount(np.minimum((sel / fine).astype(np.int64), nb - 1), minlength=nb).astype(float)
    covered = np.zeros(nb, dtype=bool)
    levels = []
    reach = int(round(width / fine))
    need = mass * sel.size
    got = 0.0
    while got < need and len(levels) < nb:
        win = np.convolve(np.where(covered, 0.0, hist), np.ones(2 * reach + 1), mode="same")
        c = int(np.argmax(win))
        lo, hi = max(0, c - reach), min(nb, c + reach + 1)
        got += float(np.sum(hist[lo:hi][~covered[lo:hi]]))
        covered[lo:hi] = True
        levels.append((c + 0.5) * fine)
    return len(levels), np.array(levels)


def write_cloud_csv(cloud: ContinuityCloud, path) -> None:
    data = np.column_stack([cloud.rho, cloud.phi])
    np.savetxt(path, data, delimiter=",", header="rho,phi", comments="", fmt="%.17g")


def write_verdict_json(verdict: ContinuityVerdict, path) -> None:
    Path(path).write_text(json.dumps(verdict.as_dict(), indent=2))


def render_cloud(cloud: ContinuityCloud, verdict: Optional[ContinuityVerdict] = None, width: int = 800,
                 height: int = 600, rho_max: Optional[float] = None) -> np.ndarray:
    """Rasterise a cloud into an RGB array, phi on the vertical axis in ``[0, pi]``.

    Points are black on white; bin maxima from ``verdict`` are overlaid in red.
    """
    if len(cloud) == 0:
        raise ValueError("empty cloud")
    rho_max = cloud.diameter if rho_max is None else rho_max
    rho_max = rho_max if rho_max > 0 else 1.0
    img = np.full((height, width, 3), 255, dtype=np.uint8)

    def to_px(r, p):
        col = np.clip((r / rho_max * (width - 1)).astype(np.int64), 0, width - 1)
        row = np.clip(((1.0 - p / math.pi) * (height - 1)).round().astype(np.int64), 0, height - 1)
        return row, col

    row, col = to_px(cloud.rho, cloud.phi)
    img[row, col] = 0
    if verdict is not None:
        mids = 0.5 * (verdict.bin_edges[:-1] + verdict.bin_edges[1:])
        ok = np.isfinite(verdict.bin_phi_max)
        r2, c2 = to_px(mids[ok], verdict.bin_phi_max[ok])
        img[r2, c2] = (220, 0, 0)
    return img


def save_image(img: np.ndarray, path) -> Path:
    """Write PNG through Pillow, or binary PPM when Pillow is unavailable."""
    path = Path(path)
    try:
        from PIL import Image
    except ImportError:
        path = path.with_suffix(".ppm")
        h, w, _ = img.shape
        with open(path, "wb") as fh:
            fh.write(f"P6\n{w} {h}\n255\n".encode())
            fh.write(np.ascontiguousarray(img, dtype=np.uint8).tobytes())
        return path
    Image.fromarray(img, mode="RGB").save(path, format="PNG")
    return path


def export_cloud_plot(cloud: ContinuityCloud, verdict: Optional[ContinuityVerdict], path, width: int = 800,
                      height: int = 600) -> Path:
    return save_image(render_cloud(cloud, verdict, width, height), path)
