"""Shared domain types, small dense linear-algebra kernels and seeded sampling.

Coordinates are Cartesian: a system with ``n_points`` points in ``ambient_dim``
dimensions has ``D = n_points * ambient_dim`` coordinates, stored point-major
(``x[k*d:(k+1)*d]`` is point ``k``).
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from typing import Any, Optional, Sequence

import numpy as np
from scipy.linalg import cho_solve

__all__ = [
    "DiffContactError", "NotPositiveDefinite", "ShapeMismatch", "SingularConstraintSystem",
    "SolverNotConverged", "DegenerateActiveSet", "SamplingExhausted", "SimulationError",
    "Body", "EqualityConstraint", "ContactCandidate", "PotentialTerm", "SystemSpec",
    "PhysParams", "State", "Trajectory",
    "cholesky_spd", "solve_spd", "max_eigenvalue", "seeded_rng", "Xoshiro256",
    "spec_to_dict", "spec_from_dict", "params_to_dict", "params_from_dict", "spec_hash",
]


class DiffContactError(Exception):
    """Base class for all errors raised by this package."""


class NotPositiveDefinite(DiffContactError):
    pass


class ShapeMismatch(DiffContactError):
    pass


class SingularConstraintSystem(DiffContactError):
    pass


class SolverNotConverged(DiffContactError):
    def __init__(self, message: str, residual: float = float("nan")):
        super().__init__(message)
        self.residual = residual


class DegenerateActiveSet(DiffContactError):
    pass


class SamplingExhausted(DiffContactError):
    pass


class SimulationError(DiffContactError):
    def __init__(self, message: str, step: int):
        super().__init__(f"step {step}: {message}")
        self.step = step


# ---------------------------------------------------------------------------
# system description
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Body:
    """A point mass or an extended rigid body.

    Extended bodies list their centre of mass first, then one point per
    principal axis at unit offset. ``moments`` holds the per-unit-mass second
    moments of the body about each principal axis (``r**2/4`` per in-plane
    axis for a uniform disk).
    """

    kind: str  # "point" | "extended"
    points: tuple[int, ...]
    radius: float
    moments: tuple[float, ...] = ()
    symmetry_axis: Optional[int] = None  # 3D disks: axis normal to the disk plane

    @property
    def com(self) -> int:
        return self.points[0]


@dataclass(frozen=True)
class EqualityConstraint:
    """``||x_i - x_j||**2 - length_sq = 0``; ``j == -1`` means a fixed anchor."""

    i: int
    j: int
    length_sq: float
    anchor: tuple[float, ...] = ()


@dataclass(frozen=True)
class ContactCandidate:
    """One potential contact.

    kind:
      ``pair``    members are two body indices
      ``plane``   members is one body; half-space ``normal . p >= offset``
      ``stretch`` members are two point indices; rest length in ``rest``,
                  allowed band ``limits`` (fractions of ``rest``)
      ``bend``    members are three consecutive point indices; ``rest`` is
                  the maximum bend angle in radians
    """

    kind: str
    members: tuple[int, ...]
    class_id: int = 0
    normal: tuple[float, ...] = ()
    offset: float = 0.0
    rest: float = 0.0
    limits: tuple[float, float] = (0.8, 1.2)


@dataclass(frozen=True)
class PotentialTerm:
    """``gravity``: g * sum_b m_b * height(com_b).  ``spring``: 0.5*k*(l - rest)**2 per pair."""

    kind: str
    constant: int
    pairs: tuple[tuple[int, int], ...] = ()
    rest: float = 0.0


@dataclass(frozen=True)
class SystemSpec:
    name: str
    ambient_dim: int
    bodies: tuple[Body, ...]
    equality_constraints: tuple[EqualityConstraint, ...] = ()
    contact_candidates: tuple[ContactCandidate, ...] = ()
    potential_terms: tuple[PotentialTerm, ...] = ()
    potential_names: tuple[str, ...] = ()
    n_classes: int = 1
    dt: float = 0.01

    def __post_init__(self):
        if self.ambient_dim not in (2, 3):
            raise ValueError("ambient_dim must be 2 or 3")
        if self.E >= self.D:
            raise ValueError(f"{self.E} equality constraints for D={self.D}")
        n_bodies, n_pts = len(self.bodies), self.n_points
        for c in self.contact_candidates:
            if not 0 <= c.class_id < self.n_classes:
                raise ValueError(f"contact class {c.class_id} out of range")
            limit = n_bodies if c.kind in ("pair", "plane") else n_pts
            if any(not 0 <= m < limit for m in c.members):
                raise ValueError(f"contact candidate references invalid member: {c}")

    @property
    def n_points(self) -> int:
        return 1 + max(p for b in self.bodies for p in b.points)

    @property
    def D(self) -> int:
        return self.n_points * self.ambient_dim

    @property
    def E(self) -> int:
        return len(self.equality_constraints)

    @property
    def vertical_axis(self) -> int:
        return self.ambient_dim - 1


@dataclass(frozen=True, eq=False)
class PhysParams:
    """Physical parameters: masses per body, (mu, e_p) per contact class, potential constants."""

    masses: np.ndarray
    mu: np.ndarray
    e_p: np.ndarray
    potential_constants: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self):
        for name in ("masses", "mu", "e_p", "potential_constants"):
            object.__setattr__(self, name, np.atleast_1d(np.asarray(getattr(self, name), dtype=float)))
        if np.any(self.masses <= 0):
            raise ValueError("masses must be positive")
        if np.any(self.mu < 0):
            raise ValueError("mu must be nonnegative")
        if np.any((self.e_p < 0) | (self.e_p > 1)):
            raise ValueError("e_p must lie in [0, 1]")
        if self.mu.shape != self.e_p.shape:
            raise ValueError("mu and e_p need one entry per contact class")

    def replace(self, **changes) -> "PhysParams":
        kw = dict(masses=self.masses, mu=self.mu, e_p=self.e_p,
                  potential_constants=self.potential_constants)
        kw.update(changes)
        return PhysParams(**kw)


@dataclass(frozen=True, eq=False)
class State:
    x: np.ndarray
    v: np.ndarray
    t: float = 0.0

    def __post_init__(self):
        x = np.asarray(self.x, dtype=float)
        v = np.asarray(self.v, dtype=float)
        if x.shape != v.shape or x.ndim != 1:
            raise ShapeMismatch(f"x {x.shape} and v {v.shape} must be equal-length vectors")
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(v))):
            raise ValueError("non-finite state")
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "v", v)
        object.__setattr__(self, "t", float(self.t))


@dataclass
class Trajectory:
    states: list[State]
    meta: dict[str, Any] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.states)

    @property
    def xs(self) -> np.ndarray:
        return np.array([s.x for s in self.states])

    @property
    def vs(self) -> np.ndarray:
        return np.array([s.v for s in self.states])

    @property
    def times(self) -> np.ndarray:
        return np.array([s.t for s in self.states])


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

def cholesky_spd(M: np.ndarray) -> np.ndarray:
    """Lower-triangular ``L`` with ``M = L @ L.T``.

    Raises NotPositiveDefinite when a pivot falls below ``1e-12 * max(diag(M))``.
    """
    M = np.asarray(M, dtype=float)
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise ShapeMismatch(f"expected a square matrix, got {M.shape}")
    if M.shape[0] == 0:
        return M.copy()
    tol = 1e-12 * max(float(np.max(np.diag(M))), 0.0)
    try:
        L = np.linalg.cholesky(0.5 * (M + M.T))
    except np.linalg.LinAlgError as exc:
        raise NotPositiveDefinite(str(exc)) from None
    if np.any(np.diag(L) ** 2 <= tol):
        raise NotPositiveDefinite("pivot below tolerance")
    return L


def solve_spd(L: np.ndarray, B: np.ndarray) -> np.ndarray:
    """Solve ``(L L^T) X = B`` given the factor from :func:`cholesky_spd`."""
    L = np.asarray(L, dtype=float)
    B = np.asarray(B, dtype=float)
    if L.ndim != 2 or L.shape[0] != L.shape[1] or B.shape[0] != L.shape[0]:
        raise ShapeMismatch(f"factor {L.shape} incompatible with right-hand side {B.shape}")
    return cho_solve((L, True), B)


def max_eigenvalue(S: np.ndarray, rtol: float = 1e-6, max_iter: int = 10_000) -> float:
    """Upper estimate of the largest eigenvalue of a symmetric PSD matrix.

    Block power iteration on up to three vectors with a Rayleigh-Ritz step,
    stopped once the leading Ritz value changes by less than ``rtol``
    (relative), then inflated by 1%. A single start vector can sit almost
    exactly on a minor eigenvector and stall; a block cannot, and for
    n <= 3 it spans the whole space.
    """
    S = np.asarray(S, dtype=float)
    n = S.shape[0]
    if n == 0 or not np.any(S):
        return 0.0
    k = min(n, 3)
    if k == n:
        # the block spans the space, so one Rayleigh-Ritz step is exact
        return 1.01 * max(float(np.linalg.eigvalsh(S)[-1]), 0.0)
    rows = np.arange(1, n + 1)[:, None]
    X = 1.0 + 0.5 * np.sin(1.2345 * rows * np.arange(1, k + 1) + 0.1 * np.arange(k))
    X, _ = np.linalg.qr(X)
    lam = 0.0
    for _ in range(max_iter):
        Y = S @ X
        ritz = np.linalg.eigvalsh(X.T @ Y)[-1]
        X, _ = np.linalg.qr(Y)
        if abs(ritz - lam) <= rtol * abs(ritz):
            lam = ritz
            break
        lam = ritz
    return 1.01 * max(lam, 0.0)


# ---------------------------------------------------------------------------
# random numbers
# ---------------------------------------------------------------------------

_MASK64 = (1 << 64) - 1


def _rotl(x: int, k: int) -> int:
    return ((x << k) | (x >> (64 - k))) & _MASK64


class Xoshiro256:
    """xoshiro256** generator seeded through splitmix64.

    Doubles use the top 53 bits; normals use the Box-Muller transform, so
    a stream is fully determined by the seed on every platform.
    """

    def __init__(self, seed: int):
        s = int(seed) & _MASK64
        state = []
        for _ in range(4):
            s = (s + 0x9E3779B97F4A7C15) & _MASK64
            z = s
            z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
            z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
            state.append(z ^ (z >> 31))
        self._s = state
        self._spare: Optional[float] = None

    def next_uint64(self) -> int:
        s = self._s
        result = (_rotl((s[1] * 5) & _MASK64, 7) * 9) & _MASK64
        t = (s[1] << 17) & _MASK64
        s[2] ^= s[0]
        s[3] ^= s[1]
        s[1] ^= s[2]
        s[0] ^= s[3]
        s[2] ^= t
        s[3] = _rotl(s[3], 45)
        return result

    def random(self) -> float:
        return (self.next_uint64() >> 11) * (1.0 / 9007199254740992.0)

    def _standard_normal(self) -> float:
        if self._spare is not None:
            z, self._spare = self._spare, None
            return z
        u1 = 1.0 - self.random()  # (0, 1]
        u2 = self.random()
        r = math.sqrt(-2.0 * math.log(u1))
        self._spare = r * math.sin(2.0 * math.pi * u2)
        return r * math.cos(2.0 * math.pi * u2)

    def uniform(self, low=0.0, high=1.0, size=None):
        if size is None:
            return low + (high - low) * self.random()
        n = int(np.prod(size))
        u = np.array([self.random() for _ in range(n)]).reshape(size)
        return low + (high - low) * u

    def normal(self, loc=0.0, scale=1.0, size=None):
        if size is None:
            return loc + scale * self._standard_normal()
        n = int(np.prod(size))
        z = np.array([self._standard_normal() for _ in range(n)]).reshape(size)
        return loc + scale * z

    def integers(self, low: int, high: int) -> int:
        """Uniform integer in ``[low, high)``."""
        span = high - low
        if span <= 0:
            raise ValueError("empty range")
        # Lemire's multiply-shift; bias is below 2**-40 for the spans used here
        return low + ((self.next_uint64() * span) >> 64)


def seeded_rng(seed: int) -> Xoshiro256:
    return Xoshiro256(seed)


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------

def spec_to_dict(spec: SystemSpec) -> dict:
    return {
        "name": spec.name,
        "ambient_dim": spec.ambient_dim,
        "dt": spec.dt,
        "n_classes": spec.n_classes,
        "potential_names": list(spec.potential_names),
        "bodies": [
            {"kind": b.kind, "points": list(b.points), "radius": b.radius,
             "moments": list(b.moments), "symmetry_axis": b.symmetry_axis}
            for b in spec.bodies
        ],
        "equality_constraints": [
            {"i": c.i, "j": c.j, "length_sq": c.length_sq, "anchor": list(c.anchor)}
            for c in spec.equality_constraints
        ],
        "contact_candidates": [
            {"kind": c.kind, "members": list(c.members), "class_id": c.class_id,
             "normal": list(c.normal), "offset": c.offset, "rest": c.rest,
             "limits": list(c.limits)}
            for c in spec.contact_candidates
        ],
        "potential_terms": [
            {"kind": p.kind, "constant": p.constant, "pairs": [list(q) for q in p.pairs],
             "rest": p.rest}
            for p in spec.potential_terms
        ],
    }


def spec_from_dict(d: dict) -> SystemSpec:
    return SystemSpec(
        name=d["name"],
        ambient_dim=int(d["ambient_dim"]),
        dt=float(d.get("dt", 0.01)),
        n_classes=int(d.get("n_classes", 1)),
        potential_names=tuple(d.get("potential_names", ())),
        bodies=tuple(
            Body(kind=b["kind"], points=tuple(b["points"]), radius=float(b["radius"]),
                 moments=tuple(b.get("moments", ())), symmetry_axis=b.get("symmetry_axis"))
            for b in d["bodies"]
        ),
        equality_constraints=tuple(
            EqualityConstraint(i=c["i"], j=c["j"], length_sq=float(c["length_sq"]),
                               anchor=tuple(c.get("anchor", ())))
            for c in d.get("equality_constraints", ())
        ),
        contact_candidates=tuple(
            ContactCandidate(kind=c["kind"], members=tuple(c["members"]),
                             class_id=int(c.get("class_id", 0)), normal=tuple(c.get("normal", ())),
                             offset=float(c.get("offset", 0.0)), rest=float(c.get("rest", 0.0)),
                             limits=tuple(c.get("limits", (0.8, 1.2))))
            for c in d.get("contact_candidates", ())
        ),
        potential_terms=tuple(
            PotentialTerm(kind=p["kind"], constant=int(p["constant"]),
                          pairs=tuple(tuple(q) for q in p.get("pairs", ())),
                          rest=float(p.get("rest", 0.0)))
            for p in d.get("potential_terms", ())
        ),
    )


def params_to_dict(params: PhysParams) -> dict:
    return {
        "masses": params.masses.tolist(),
        "mu": params.mu.tolist(),
        "e_p": params.e_p.tolist(),
        "potential_constants": params.potential_constants.tolist(),
    }


def params_from_dict(d: dict) -> PhysParams:
    return PhysParams(masses=d["masses"], mu=d["mu"], e_p=d["e_p"],
                      potential_constants=d.get("potential_constants", []))


def spec_hash(spec: SystemSpec) -> str:
    blob = json.dumps(spec_to_dict(spec), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def as_cones_dims(dims: Sequence[int]) -> np.ndarray:
    """Start offsets of consecutive blocks of the given sizes."""
    return np.concatenate([[0], np.cumsum(dims)[:-1]]).astype(np.int64)
