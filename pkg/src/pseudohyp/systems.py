"""Registry of flows and maps with analytic Jacobians.

Every model is addressed by an integer code so that the compiled kernels in
:mod:`pseudohyp.integrate` can evaluate the right-hand side without Python
callbacks. Parameters are packed into a read-only float array in the order
given by ``PARAM_ORDER``.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from types import MappingProxyType
from typing import Mapping, Optional, Sequence

import numpy as np
from numba import njit


class Kind(str, enum.Enum):
    FLOW = "flow"
    MAP = "map"


class ModelError(ValueError):
    """Unknown system name, bad parameters, or an unsupported request."""


LORENZ3D = 0
LORENZ4D = 1
HENON2D = 2
LOZI = 3
ANOSOV_LINEAR = 4
ANOSOV_PERTURBED = 5
HENON3D = 6
AFFINE_FLOW = 7
AFFINE_MAP = 8

# name -> (code, kind, dimension, parameter order)
_REGISTRY = {
    "lorenz3d": (LORENZ3D, Kind.FLOW, 3, ("sigma", "r", "b")),
    "lorenz4d": (LORENZ4D, Kind.FLOW, 4, ("sigma", "r", "b", "mu")),
    "henon2d": (HENON2D, Kind.MAP, 2, ("b", "M")),
    "lozi": (LOZI, Kind.MAP, 2, ("b", "M")),
    "anosov_linear": (ANOSOV_LINEAR, Kind.MAP, 2, ()),
    "anosov_perturbed": (ANOSOV_PERTURBED, Kind.MAP, 2, ("eps",)),
    "henon3d": (HENON3D, Kind.MAP, 3, ("M1", "M2", "B")),
}

PARAM_ORDER = {name: spec[3] for name, spec in _REGISTRY.items()}
SYSTEM_NAMES = tuple(_REGISTRY)

# Maps whose attractors contain saddles with negative multipliers; the
# orientation of the invariant line fields flips from one iterate to the next.
_ORIENTATION_FLIPPING = frozenset({"henon2d", "lozi", "henon3d"})
_TORUS = frozenset({"anosov_linear", "anosov_perturbed"})

# Reference parameter values, the defaults for the CLI and the test suite.
REFERENCE_PARAMS = {
    "lorenz3d": {"sigma": 10.0, "r": 28.0, "b": 8.0 / 3.0},
    "lorenz4d": {"sigma": 10.0, "r": 25.0, "b": 8.0 / 3.0, "mu": 7.0},
    "henon2d": {"b": 0.1, "M": 1.7},
    "lozi": {"b": 0.5, "M": 1.7},
    "anosov_linear": {},
    "anosov_perturbed": {"eps": 0.6},
    "henon3d": {"M1": 0.044, "M2": 0.77, "B": 0.7},
}


# --------------------------------------------------------------------------
# compiled kernels
# --------------------------------------------------------------------------

@njit(cache=True, inline="always")
def _wrap(v):
    r = v - math.floor(v)
    if r >= 1.0:
        r = 0.0
    return r


@njit(cache=True)
def evaluate(code, p, x, out):
    """Vector field (flows) or next iterate (maps) of ``x`` written into ``out``."""
    if code == LORENZ3D:
        sigma, r, b = p[0], p[1], p[2]
        out[0] = sigma * (x[1] - x[0])
        out[1] = x[0] * (r - x[2]) - x[1]
        out[2] = x[0] * x[1] - b * x[2]
    elif code == LORENZ4D:
        sigma, r, b, mu = p[0], p[1], p[2], p[3]
        out[0] = sigma * (x[1] - x[0])
        out[1] = x[0] * (r - x[2]) - x[1]
        out[2] = x[0] * x[1] - b * x[2] + mu * x[3]
        out[3] = -b * x[3] - mu * x[2]
    elif code == HENON2D:
        b, M = p[0], p[1]
        x0 = x[0]
        y0 = x[1]
        out[0] = y0
        out[1] = M - b * x0 - y0 * y0
    elif code == LOZI:
        b, M = p[0], p[1]
        x0 = x[0]
        y0 = x[1]
        out[0] = 1.0 + y0 - M * abs(x0)
        out[1] = b * x0
    elif code == ANOSOV_LINEAR:
        x0 = x[0]
        y0 = x[1]
        out[0] = _wrap(2.0 * x0 + y0)
        out[1] = _wrap(x0 + y0)
    elif code == ANOSOV_PERTURBED:
        eps = p[0]
        th = 2.0 * math.pi * x[0]
        g = math.atan2((1.0 - eps * eps) * math.sin(th),
                       2.0 * eps + (1.0 + eps * eps) * math.cos(th)) / (2.0 * math.pi)
        y0 = x[1]
        out[0] = _wrap(2.0 * g + y0)
        out[1] = _wrap(g + y0)
    elif code == HENON3D:
        M1, M2, B = p[0], p[1], p[2]
        x0 = x[0]
        y0 = x[1]
        z0 = x[2]
        out[0] = y0
        out[1] = z0
        out[2] = M1 + B * x0 + M2 * y0 - z0 * z0
    else:
        # affine: p = [A (row-major), c]
        n = x.shape[0]
        for i in range(n):
            s = p[n * n + i]
            for j in range(n):
                s += p[i * n + j] * x[j]
            out[i] = s


@njit(cache=True)
def jacobian(code, p, x, J):
    """Jacobian of :func:`evaluate` at ``x`` written into the square array ``J``."""
    if code == LORENZ3D:
        sigma, r, b = p[0], p[1], p[2]
        J[0, 0] = -sigma
        J[0, 1] = sigma
        J[0, 2] = 0.0
        J[1, 0] = r - x[2]
        J[1, 1] = -1.0
        J[1, 2] = -x[0]
        J[2, 0] = x[1]
        J[2, 1] = x[0]
        J[2, 2] = -b
    elif code == LORENZ4D:
        sigma, r, b, mu = p[0], p[1], p[2], p[3]
        J[0, 0] = -sigma
        J[0, 1] = sigma
        J[0, 2] = 0.0
        J[0, 3] = 0.0
        J[1, 0] = r - x[2]
        J[1, 1] = -1.0
        J[1, 2] = -x[0]
        J[1, 3] = 0.0
        J[2, 0] = x[1]
        J[2, 1] = x[0]
        J[2, 2] = -b
        J[2, 3] = mu
        J[3, 0] = 0.0
        J[3, 1] = 0.0
        J[3, 2] = -mu
        J[3, 3] = -b
    elif code == HENON2D:
        J[0, 0] = 0.0
        J[0, 1] = 1.0
        J[1, 0] = -p[0]
        J[1, 1] = -2.0 * x[1]
    elif code == LOZI:
        # right limit on the discontinuity line x = 0
        sgn = -1.0 if x[0] < 0.0 else 1.0
        J[0, 0] = -p[1] * sgn
        J[0, 1] = 1.0
        J[1, 0] = p[0]
        J[1, 1] = 0.0
    elif code == ANOSOV_LINEAR:
        J[0, 0] = 2.0
        J[0, 1] = 1.0
        J[1, 0] = 1.0
        J[1, 1] = 1.0
    elif code == ANOSOV_PERTURBED:
        eps = p[0]
        dg = (1.0 - eps * eps) / (1.0 + eps * eps + 2.0 * eps * math.cos(2.0 * math.pi * x[0]))
        J[0, 0] = 2.0 * dg
        J[0, 1] = 1.0
        J[1, 0] = dg
        J[1, 1] = 1.0
    elif code == HENON3D:
        J[0, 0] = 0.0
        J[0, 1] = 1.0
        J[0, 2] = 0.0
        J[1, 0] = 0.0
        J[1, 1] = 0.0
        J[1, 2] = 1.0
        J[2, 0] = p[2]
        J[2, 1] = p[1]
        J[2, 2] = -2.0 * x[2]
    else:
        n = x.shape[0]
        for i in range(n):
            for j in range(n):
                J[i, j] = p[i * n + j]


# --------------------------------------------------------------------------
# Python-level model
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class SystemModel:
    """An immutable flow or map with its packed parameter vector."""

    name: str
    kind: Kind
    dimension: int
    params: Mapping[str, float]
    code: int
    packed: np.ndarray = field(repr=False, compare=False)
    symmetries: tuple = field(default=(), repr=False, compare=False)
    torus: bool = False
    flips_orientation: bool = False

    @property
    def is_flow(self) -> bool:
        return self.kind is Kind.FLOW

    def eval(self, x) -> np.ndarray:
        x = np.ascontiguousarray(x, dtype=np.float64)
        if x.shape != (self.dimension,):
            raise ModelError(f"{self.name}: expected state of length {self.dimension}, got {x.shape}")
        out = np.empty(self.dimension)
        evaluate(self.code, self.packed, x, out)
        return out

    def jacobian(self, x) -> np.ndarray:
        x = np.ascontiguousarray(x, dtype=np.float64)
        if x.shape != (self.dimension,):
            raise ModelError(f"{self.name}: expected state of length {self.dimension}, got {x.shape}")
        J = np.empty((self.dimension, self.dimension))
        jacobian(self.code, self.packed, x, J)
        return J

    def with_params(self, **updates: float) -> "SystemModel":
        """A fresh model with some parameters replaced."""
        if self.code in (AFFINE_FLOW, AFFINE_MAP):
            raise ModelError("affine test models are not parameterised by name")
        merged = dict(self.params)
        merged.update(updates)
        return builtin_system(self.name, merged)

    def distance(self, a, b) -> np.ndarray:
        """Euclidean distance, or the wrapped metric on the unit torus."""
        d = np.abs(np.asarray(a) - np.asarray(b))
        if self.torus:
            d = np.minimum(d, 1.0 - d)
        return np.sqrt(np.sum(d * d, axis=-1))


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr = np.ascontiguousarray(arr, dtype=np.float64)
    arr.setflags(write=False)
    return arr


def builtin_system(name: str, params: Optional[Mapping[str, float]] = None) -> SystemModel:
    """Build one of the seven registered systems.

    Raises :class:`ModelError` for an unknown name, a missing or non-finite
    parameter, or an unexpected parameter name.
    """
    if name not in _REGISTRY:
        raise ModelError(f"unknown system {name!r}; choose from {', '.join(SYSTEM_NAMES)}")
    code, kind, dim, order = _REGISTRY[name]
    params = dict(params or {})
    extra = set(params) - set(order)
    if extra:
        raise ModelError(f"{name}: unexpected parameter(s) {sorted(extra)}; expected {list(order)}")
    values = []
    for key in order:
        if key not in params:
            raise ModelError(f"{name}: missing parameter {key!r}")
        v = float(params[key])
        if not math.isfinite(v):
            raise ModelError(f"{name}: parameter {key}={v} is not finite")
        values.append(v)
    symmetries: tuple = ()
    if name in ("lorenz3d", "lorenz4d"):
        s = np.eye(dim)
        s[0, 0] = s[1, 1] = -1.0
        symmetries = (_frozen(s),)
    return SystemModel(
        name=name,
        kind=kind,
        dimension=dim,
        params=MappingProxyType(dict(zip(order, values))),
        code=code,
        packed=_frozen(np.array(values, dtype=np.float64)),
        symmetries=symmetries,
        torus=name in _TORUS,
        flips_orientation=name in _ORIENTATION_FLIPPING,
    )


def affine_flow(A, c=None, name: str = "affine_flow") -> SystemModel:
    """Test model ``x' = A x + c``."""
    return _affine(AFFINE_FLOW, Kind.FLOW, A, c, name)


def affine_map(A, c=None, name: str = "affine_map") -> SystemModel:
    """Test model ``x -> A x + c``."""
    return _affine(AFFINE_MAP, Kind.MAP, A, c, name)


def _affine(code, kind, A, c, name):
    A = np.atleast_2d(np.asarray(A, dtype=np.float64))
    n = A.shape[0]
    if A.shape != (n, n):
        raise ModelError("affine model needs a square matrix")
    c = np.zeros(n) if c is None else np.asarray(c, dtype=np.float64)
    return SystemModel(
        name=name,
        kind=kind,
        dimension=n,
        params=MappingProxyType({}),
        code=code,
        packed=_frozen(np.concatenate([A.ravel(), c])),
    )


def apply_symmetry(model: SystemModel, state, index: int = 0) -> np.ndarray:
    """Image of ``state`` under the model's declared involution."""
    if not model.symmetries:
        raise ModelError(f"{model.name} declares no symmetry")
    return model.symmetries[index] @ np.asarray(state, dtype=np.float64)


# --------------------------------------------------------------------------
# equilibria
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class EquilibriumInfo:
    location: np.ndarray
    eigenvalues: tuple
    unstable_eigenvector: Optional[np.ndarray] = None


def _sort_eigen(values: Sequence[complex]) -> list:
    return sorted(values, key=lambda z: (-z.real, -z.imag))


def equilibrium_eigenvalues(model: SystemModel, location=None, numeric: bool = False) -> EquilibriumInfo:
    """Eigenvalues at an equilibrium, sorted by descending real part.

    The origin of ``lorenz4d`` has closed-form eigenvalues; other flows (or
    ``numeric=True``) fall back to a dense eigensolve at ``location``, which
    defaults to the origin.
    """
    if not model.is_flow:
        raise ModelError("equilibria are defined for flows only")
    n = model.dimension
    x = np.zeros(n) if location is None else np.asarray(location, dtype=np.float64)
    residual = float(np.linalg.norm(model.eval(x)))
    if residual > 1e-8:
        raise ModelError(f"{model.name}: |F(x)| = {residual:.3e} at the supplied point; not an equilibrium")

    if model.code == LORENZ4D and not numeric and not np.any(x):
        sigma, r, b, mu = (model.params[k] for k in ("sigma", "r", "b", "mu"))
        root = math.sqrt((sigma - 1.0) ** 2 + 4.0 * sigma * r)
        lam1 = 0.5 * (root - sigma - 1.0)
        lam4 = -0.5 * (root + sigma + 1.0)
        values = _sort_eigen([complex(lam1), complex(-b, mu), complex(-b, -mu), complex(lam4)])
        vec = None
        if lam1 > -b:
            v = np.array([sigma, sigma + lam1, 0.0, 0.0])
            vec = v / np.linalg.norm(v)
        return EquilibriumInfo(location=x, eigenvalues=tuple(values), unstable_eigenvector=vec)

    J = model.jacobian(x)
    w, V = np.linalg.eig(J)
    if not np.all(np.isfinite(w)):
        raise ModelError("eigensolve did not converge")
    order = sorted(range(n), key=lambda i: (-w[i].real, -w[i].imag))
    values = [complex(w[i]) for i in order]
    vec = None
    lead = values[0]
    simple = n == 1 or abs(values[1] - lead) > 1e-10 * max(1.0, abs(lead))
    if abs(lead.imag) == 0.0 and simple:
        v = np.real(V[:, order[0]])
        v = v / np.linalg.norm(v)
        # fix the sign by the first non-negligible component
        k = int(np.argmax(np.abs(v) > 1e-12))
        if v[k] < 0:
            v = -v
        vec = v
    return EquilibriumInfo(location=x, eigenvalues=tuple(values), unstable_eigenvector=vec)
