"""Benchmark systems: builders, presets, collision detection and initial-condition sampling.

Six families are provided. ``BP`` is bouncing point masses in a unit box,
``BD`` bouncing disks, ``CP`` a chained pendulum above the ground, ``Gyro``
a tethered spinning disk next to a wall, ``Rope`` a spring chain with
stretch and bend limits and ``Throw`` a single disk bouncing on the ground.
Presets live as JSON files in ``presets/``.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any, Callable, Optional

import numpy as np

from .contact import ActiveContact, ActiveContactSet, tangent_basis
from .core import (Body, ContactCandidate, EqualityConstraint, PhysParams, PotentialTerm,
                   SamplingExhausted, State, SystemSpec, Xoshiro256, params_from_dict)
from .dynamics import Model, equality_constraints, equality_jacobian, project_to_manifold

__all__ = [
    "Preset", "SystemCatalogEntry", "CATALOG", "list_presets", "load_preset", "preset_from_dict",
    "build_bouncing_points", "build_bouncing_disks", "build_chained_pendulum",
    "build_gyroscope", "build_rope", "build_throw_disk", "detect_contacts", "contact_gaps",
    "sample_initial_condition", "MAX_REJECTIONS",
]

MAX_REJECTIONS = 10_000

# ---------------------------------------------------------------------------
# builders
# ---------------------------------------------------------------------------

_WALLS_2D = (((1.0, 0.0), 0), ((-1.0, 0.0), 1), ((0.0, 1.0), 0), ((0.0, -1.0), 1))


def _box_walls(lo: float, hi: float):
    """Half-spaces ``n . p >= offset`` bounding the square [lo, hi]^2."""
    for n, side in _WALLS_2D:
        yield n, (lo if side == 0 else -hi)


def build_bouncing_points(radii, box=(0.0, 1.0), name: str = "BP") -> SystemSpec:
    """n point masses in a box; class 0 is ball-ball, class 1 is ball-wall."""
    n = len(radii)
    bodies = tuple(Body("point", (k,), float(r)) for k, r in enumerate(radii))
    cands = [ContactCandidate("pair", (a, b), 0) for a in range(n) for b in range(a + 1, n)]
    cands += [ContactCandidate("plane", (a,), 1, normal=nrm, offset=off)
              for a in range(n) for nrm, off in _box_walls(*box)]
    return SystemSpec(name, 2, bodies, contact_candidates=tuple(cands), n_classes=2)


def build_bouncing_disks(radii, box=(0.0, 1.0), name: str = "BD") -> SystemSpec:
    """n uniform disks as 3-point extended bodies; classes as in ``build_bouncing_points``."""
    n = len(radii)
    bodies, cons = [], []
    for k, r in enumerate(radii):
        c, t1, t2 = 3 * k, 3 * k + 1, 3 * k + 2
        bodies.append(Body("extended", (c, t1, t2), float(r), moments=(r * r / 4, r * r / 4)))
        cons += [EqualityConstraint(t1, c, 1.0), EqualityConstraint(t2, c, 1.0),
                 EqualityConstraint(t1, t2, 2.0)]
    cands = [ContactCandidate("pair", (a, b), 0) for a in range(n) for b in range(a + 1, n)]
    cands += [ContactCandidate("plane", (a,), 1, normal=nrm, offset=off)
              for a in range(n) for nrm, off in _box_walls(*box)]
    return SystemSpec(name, 2, tuple(bodies), tuple(cons), tuple(cands), n_classes=2)


def build_chained_pendulum(lengths, radii, ground: float, name: str = "CP") -> SystemSpec:
    """Point masses on massless rods hanging from the origin; only the last bob meets the ground."""
    n = len(lengths)
    bodies = tuple(Body("point", (k,), float(r)) for k, r in enumerate(radii))
    cons = [EqualityConstraint(0, -1, float(lengths[0]) ** 2, anchor=(0.0, 0.0))]
    cons += [EqualityConstraint(k, k - 1, float(lengths[k]) ** 2) for k in range(1, n)]
    cands = (ContactCandidate("plane", (n - 1,), 0, normal=(0.0, 1.0), offset=float(ground)),)
    gravity = (PotentialTerm("gravity", 0),)
    return SystemSpec(name, 2, bodies, tuple(cons), cands, gravity, ("g",), n_classes=1)


def build_gyroscope(radius: float, thickness: float, arm: float, wall_normal, wall_offset: float,
                    name: str = "Gyro") -> SystemSpec:
    """A uniform disk tethered to the origin by its centre of mass, next to a wall.

    Four points (centre plus three unit axis tips, the third along the disk
    axis) with 6 rigidity constraints and one centre-to-pivot distance.
    """
    r, h = float(radius), float(thickness)
    body = Body("extended", (0, 1, 2, 3), r, moments=(r * r / 4, r * r / 4, h * h / 12),
                symmetry_axis=2)
    cons = [EqualityConstraint(k, 0, 1.0) for k in (1, 2, 3)]
    cons += [EqualityConstraint(a, b, 2.0) for a, b in ((1, 2), (1, 3), (2, 3))]
    cons.append(EqualityConstraint(0, -1, float(arm) ** 2, anchor=(0.0, 0.0, 0.0)))
    n = np.asarray(wall_normal, dtype=float)
    n = tuple(float(c) for c in n / np.linalg.norm(n))
    cands = (ContactCandidate("plane", (0,), 0, normal=n, offset=float(wall_offset)),)
    gravity = (PotentialTerm("gravity", 0),)
    return SystemSpec(name, 3, (body,), tuple(cons), cands, gravity, ("g",), n_classes=1)


def build_throw_disk(radius: float, ground: float = 0.0, name: str = "Throw") -> SystemSpec:
    """One uniform disk under gravity above a horizontal ground line."""
    r = float(radius)
    body = Body("extended", (0, 1, 2), r, moments=(r * r / 4, r * r / 4))
    cons = (EqualityConstraint(1, 0, 1.0), EqualityConstraint(2, 0, 1.0), EqualityConstraint(1, 2, 2.0))
    cands = (ContactCandidate("plane", (0,), 0, normal=(0.0, 1.0), offset=float(ground)),)
    gravity = (PotentialTerm("gravity", 0),)
    return SystemSpec(name, 2, (body,), cons, cands, gravity, ("g",), n_classes=1)


def build_rope(n_points: int, segment: float, stretch=(0.8, 1.2), max_bend: float = 0.2,
               name: str = "Rope") -> SystemSpec:
    """Spring chain; stretch and bend limits are one-dimensional frictionless contacts."""
    bodies = tuple(Body("point", (k,), 0.0) for k in range(n_points))
    pairs = tuple((k, k + 1) for k in range(n_points - 1))
    cands = [ContactCandidate("stretch", p, 0, rest=float(segment), limits=tuple(stretch))
             for p in pairs]
    cands += [ContactCandidate("bend", (k - 1, k, k + 1), 0, rest=float(max_bend))
              for k in range(1, n_points - 1)]
    springs = (PotentialTerm("spring", 0, pairs, rest=float(segment)),)
    return SystemSpec(name, 2, bodies, (), tuple(cands), springs, ("k",), n_classes=1)


# ---------------------------------------------------------------------------
# presets
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class Preset:
    name: str
    system: str
    geometry: dict
    spec: SystemSpec
    truth: PhysParams
    sampling: dict = field(default_factory=dict)
    raw: dict = field(default_factory=dict)


@dataclass(frozen=True)
class SystemCatalogEntry:
    name: str
    builder: Callable[..., SystemSpec]
    presets: tuple[str, ...]


def _build(system: str, geometry: dict, name: str) -> SystemSpec:
    g = geometry
    if system == "BP":
        return build_bouncing_points(g["radii"], tuple(g.get("box", (0.0, 1.0))), name)
    if system == "BD":
        return build_bouncing_disks(g["radii"], tuple(g.get("box", (0.0, 1.0))), name)
    if system == "CP":
        return build_chained_pendulum(g["lengths"], g["radii"], g["ground"], name)
    if system == "Gyro":
        return build_gyroscope(g["radius"], g["thickness"], g["arm"], g["wall_normal"],
                               g["wall_offset"], name)
    if system == "Rope":
        return build_rope(int(g["n_points"]), g["segment"], tuple(g.get("stretch", (0.8, 1.2))),
                          g.get("max_bend", 0.2), name)
    if system == "Throw":
        return build_throw_disk(g["radius"], g.get("ground", 0.0), name)
    raise ValueError(f"unknown system family {system!r}")


CATALOG = {
    "BP": SystemCatalogEntry("BP", build_bouncing_points, ("BP5-e", "BP5")),
    "BD": SystemCatalogEntry("BD", build_bouncing_disks, ("BD5",)),
    "CP": SystemCatalogEntry("CP", build_chained_pendulum, ("CP3-e", "CP3")),
    "Gyro": SystemCatalogEntry("Gyro", build_gyroscope, ("Gyro-e", "Gyro")),
    "Rope": SystemCatalogEntry("Rope", build_rope, ("Rope",)),
    "Throw": SystemCatalogEntry("Throw", build_throw_disk, ("Throw",)),
}


def _preset_dir():
    return resources.files("diffcontact") / "presets"


def list_presets() -> list[str]:
    names = [p.name[:-5] for p in _preset_dir().iterdir() if p.name.endswith(".json")]
    return sorted(names)


def preset_from_dict(d: dict, **geometry_overrides) -> Preset:
    geometry = dict(d["geometry"])
    geometry.update(geometry_overrides)
    spec = _build(d["system"], geometry, d["name"])
    if "dt" in d:
        spec = dataclasses.replace(spec, dt=float(d["dt"]))
    truth = params_from_dict(d["truth"])
    if truth.masses.size != len(spec.bodies):
        # a single mass value is broadcast over homogeneous bodies
        truth = truth.replace(masses=np.broadcast_to(truth.masses, (len(spec.bodies),)).copy())
    return Preset(d["name"], d["system"], geometry, spec, truth, dict(d.get("sampling", {})), d)


def load_preset(name_or_path, **geometry_overrides) -> Preset:
    """Load a shipped preset by name, or any preset JSON file by path."""
    p = Path(str(name_or_path))
    if p.suffix == ".json" and p.exists():
        d = json.loads(p.read_text())
    else:
        src = _preset_dir() / f"{name_or_path}.json"
        if not src.is_file():
            raise KeyError(f"unknown preset {name_or_path!r}; available: {', '.join(list_presets())}")
        d = json.loads(src.read_text())
    return preset_from_dict(d, **geometry_overrides)


# ---------------------------------------------------------------------------
# collision detection
# ---------------------------------------------------------------------------

class _Detector:
    """Vectorised gap evaluation for every candidate of a spec.

    A gap is negative exactly when the candidate is active; its magnitude
    is the penetration (metres, or radians for bend limits).
    """

    def __init__(self, spec: SystemSpec):
        self.spec = spec
        d = spec.ambient_dim
        self.d = d
        cands = spec.contact_candidates
        self.idx = {k: np.array([i for i, c in enumerate(cands) if c.kind == k], dtype=int)
                    for k in ("pair", "plane", "stretch", "bend")}
        com = np.array([b.com for b in spec.bodies], dtype=int)
        rad = np.array([b.radius for b in spec.bodies], dtype=float)
        pairs = np.array([cands[i].members for i in self.idx["pair"]], dtype=int).reshape(-1, 2)
        self.pair_a, self.pair_b = com[pairs[:, 0]], com[pairs[:, 1]]
        self.pair_r = rad[pairs[:, 0]] + rad[pairs[:, 1]]
        planes = [cands[i] for i in self.idx["plane"]]
        pb = np.array([c.members[0] for c in planes], dtype=int)
        self.plane_c = com[pb]
        self.plane_r = rad[pb]
        self.plane_n = np.array([c.normal for c in planes], dtype=float).reshape(-1, d)
        self.plane_off = np.array([c.offset for c in planes], dtype=float)
        # disk axes for 3D extended bodies (rim contact), -1 where the body is a sphere
        self.plane_axis = np.array(
            [spec.bodies[b].points[1 + spec.bodies[b].symmetry_axis]
             if spec.bodies[b].symmetry_axis is not None else -1 for b in pb], dtype=int)
        st = [cands[i] for i in self.idx["stretch"]]
        self.st_i = np.array([c.members[0] for c in st], dtype=int)
        self.st_j = np.array([c.members[1] for c in st], dtype=int)
        self.st_lo = np.array([c.limits[0] * c.rest for c in st], dtype=float)
        self.st_hi = np.array([c.limits[1] * c.rest for c in st], dtype=float)
        bd = [cands[i] for i in self.idx["bend"]]
        self.bd = np.array([c.members for c in bd], dtype=int).reshape(-1, 3)
        self.bd_max = np.array([c.rest for c in bd], dtype=float)
        self.n = len(cands)

    def gaps(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        P = x.reshape(x.shape[:-1] + (-1, self.d))
        out = np.empty(x.shape[:-1] + (self.n,))
        if self.idx["pair"].size:
            dist = np.linalg.norm(P[..., self.pair_a, :] - P[..., self.pair_b, :], axis=-1)
            out[..., self.idx["pair"]] = dist - self.pair_r
        if self.idx["plane"].size:
            c = P[..., self.plane_c, :]
            height = np.einsum("...kd,kd->...k", c, self.plane_n) - self.plane_off
            reach = np.broadcast_to(self.plane_r, height.shape).copy()
            disk = self.plane_axis >= 0
            if np.any(disk):
                axis = P[..., self.plane_axis[disk], :] - c[..., disk, :]
                axis = axis / np.linalg.norm(axis, axis=-1, keepdims=True)
                cos = np.einsum("...kd,kd->...k", axis, self.plane_n[disk])
                reach[..., disk] = self.plane_r[disk] * np.sqrt(np.maximum(0.0, 1.0 - cos ** 2))
            out[..., self.idx["plane"]] = height - reach
        if self.idx["stretch"].size:
            length = np.linalg.norm(P[..., self.st_j, :] - P[..., self.st_i, :], axis=-1)
            out[..., self.idx["stretch"]] = np.minimum(length - self.st_lo, self.st_hi - length)
        if self.idx["bend"].size:
            theta = _bend_angle(P[..., self.bd[:, 0], :], P[..., self.bd[:, 1], :],
                                P[..., self.bd[:, 2], :])
            out[..., self.idx["bend"]] = self.bd_max - np.abs(theta)
        return out


def _bend_angle(p0, p1, p2):
    a, b = p1 - p0, p2 - p1
    cross = a[..., 0] * b[..., 1] - a[..., 1] * b[..., 0]
    return np.arctan2(cross, np.sum(a * b, axis=-1))


_DETECTORS: dict[int, tuple[SystemSpec, _Detector]] = {}


def _detector(spec: SystemSpec) -> _Detector:
    hit = _DETECTORS.get(id(spec))
    if hit is not None and hit[0] is spec:
        return hit[1]
    det = _Detector(spec)
    _DETECTORS[id(spec)] = (spec, det)
    return det


def contact_gaps(spec: SystemSpec, x) -> np.ndarray:
    """Signed gap per contact candidate (negative means active); x may be batched."""
    return _detector(spec).gaps(x)


def _point_weights(spec: SystemSpec, body: Body, P, p) -> np.ndarray:
    """Affine weights w with ``p = sum_k w_k P_k`` over the body's points (rigid motion)."""
    w = np.zeros(spec.n_points)
    c = body.com
    if body.kind == "point":
        w[c] = 1.0
        return w
    rel = p - P[c]
    coef = [(rel @ (P[t] - P[c])) for t in body.points[1:]]
    w[c] = 1.0 - sum(coef)
    for t, a in zip(body.points[1:], coef):
        w[t] = a
    return w


def _rim_direction(axis, toward):
    """Unit vector in the disk plane pointing as far as possible along ``toward``."""
    u = toward - (toward @ axis) * axis
    nrm = np.linalg.norm(u)
    if nrm < 1e-12:
        return tangent_basis(axis)[0]
    return u / nrm


def detect_contacts(spec: SystemSpec, x, gaps: Optional[np.ndarray] = None) -> ActiveContactSet:
    """All active contacts at configuration x, in candidate order."""
    x = np.asarray(x, dtype=float)
    gaps = contact_gaps(spec, x) if gaps is None else gaps
    active = np.flatnonzero(gaps < 0)
    if active.size == 0:
        return ActiveContactSet([])
    d = spec.ambient_dim
    P = x.reshape(-1, d)
    out = []
    for ci in active:
        cand = spec.contact_candidates[ci]
        pen = float(-gaps[ci])
        if cand.kind == "pair":
            A, B = (spec.bodies[m] for m in cand.members)
            delta = P[A.com] - P[B.com]
            dist = np.linalg.norm(delta)
            n = delta / dist if dist > 0 else np.eye(d)[spec.vertical_axis]
            p = P[B.com] + (B.radius - 0.5 * pen) * n  # midpoint of the overlap segment
            w = _point_weights(spec, A, P, p) - _point_weights(spec, B, P, p)
            out.append(ActiveContact(int(ci), cand.class_id, d, pen, n, tangent_basis(n), w))
        elif cand.kind == "plane":
            A = spec.bodies[cand.members[0]]
            n = np.asarray(cand.normal, dtype=float)
            c = P[A.com]
            if A.symmetry_axis is not None:
                axis = P[A.points[1 + A.symmetry_axis]] - c
                axis = axis / np.linalg.norm(axis)
                p = c + A.radius * _rim_direction(axis, -n)
            else:
                p = c - A.radius * n
            w = _point_weights(spec, A, P, p)
            out.append(ActiveContact(int(ci), cand.class_id, d, pen, n, tangent_basis(n), w))
        elif cand.kind == "stretch":
            i, j = cand.members
            delta = P[j] - P[i]
            length = np.linalg.norm(delta)
            u = delta / length
            grad = np.zeros_like(P)
            grad[j], grad[i] = u, -u
            sign = -1.0 if length > cand.limits[1] * cand.rest else 1.0
            out.append(ActiveContact(int(ci), cand.class_id, 1, pen, gradient=sign * grad.ravel()))
        elif cand.kind == "bend":
            i, j, k = cand.members
            a, b = P[j] - P[i], P[k] - P[j]
            theta = float(_bend_angle(P[i], P[j], P[k]))
            da = -np.array([-a[1], a[0]]) / (a @ a)  # d theta / d a
            db = np.array([-b[1], b[0]]) / (b @ b)  # d theta / d b
            grad = np.zeros_like(P)
            grad[i] = -da
            grad[j] = da - db
            grad[k] = db
            sign = -1.0 if theta > 0 else 1.0
            out.append(ActiveContact(int(ci), cand.class_id, 1, pen, gradient=sign * grad.ravel()))
    return ActiveContactSet(out)


# ---------------------------------------------------------------------------
# initial conditions
# ---------------------------------------------------------------------------

def _speed_vector(rng: Xoshiro256, d: int, max_speed: float) -> np.ndarray:
    direction = rng.normal(size=d)
    direction /= np.linalg.norm(direction)
    return rng.uniform(0.0, max_speed) * direction


def _rot2(angle):
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[c, -s], [s, c]])


def _sample_box(preset: Preset, rng: Xoshiro256, disks: bool):
    spec, s = preset.spec, preset.sampling
    lo, hi = preset.geometry.get("box", (0.0, 1.0))
    margin = s.get("margin", 0.01)
    max_speed = s.get("max_speed", 1.0)
    P = np.zeros((spec.n_points, 2))
    V = np.zeros((spec.n_points, 2))
    for body in spec.bodies:
        r = body.radius + margin
        c = rng.uniform(lo + r, hi - r, size=2)
        vc = _speed_vector(rng, 2, max_speed)
        P[body.com], V[body.com] = c, vc
        if disks:
            R = _rot2(rng.uniform(0.0, 2 * math.pi))
            omega = rng.uniform(-s.get("max_omega", 5.0), s.get("max_omega", 5.0))
            for t, e in zip(body.points[1:], R.T):
                P[t] = c + e
                V[t] = vc + omega * np.array([-e[1], e[0]])
    return P.ravel(), V.ravel()


def _sample_pendulum(preset: Preset, rng: Xoshiro256):
    spec, s = preset.spec, preset.sampling
    lengths = preset.geometry["lengths"]
    amax, wmax = s.get("max_angle", 1.5), s.get("max_omega", 2.0)
    P = np.zeros((spec.n_points, 2))
    V = np.zeros((spec.n_points, 2))
    prev_p, prev_v = np.zeros(2), np.zeros(2)
    for k, length in enumerate(lengths):
        th = rng.uniform(-amax, amax)  # measured from the downward vertical
        om = rng.uniform(-wmax, wmax)
        u = np.array([math.sin(th), -math.cos(th)])
        du = np.array([math.cos(th), math.sin(th)])
        P[k] = prev_p + length * u
        V[k] = prev_v + length * om * du
        prev_p, prev_v = P[k], V[k]
    return P.ravel(), V.ravel()


def _random_rotation(rng: Xoshiro256) -> np.ndarray:
    q = rng.normal(size=4)
    w, x, y, z = q / np.linalg.norm(q)
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
        [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
        [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
    ])


def _sample_gyroscope(preset: Preset, rng: Xoshiro256):
    g, s = preset.geometry, preset.sampling
    arm = g["arm"]
    polar = rng.uniform(*s.get("polar", (0.2, 0.9)))
    azim = rng.uniform(0.0, 2 * math.pi)
    c = arm * np.array([math.sin(polar) * math.cos(azim), math.sin(polar) * math.sin(azim),
                        -math.cos(polar)])
    R = _random_rotation(rng)
    spin = rng.uniform(*s.get("spin", (5.0, 15.0)))
    omega = spin * R[:, 2] + rng.normal(0.0, s.get("wobble", 1.0), size=3)
    vc = np.cross(rng.normal(size=3), c)
    vc *= rng.uniform(0.0, s.get("max_speed", 2.0)) / max(np.linalg.norm(vc), 1e-12)
    P = np.vstack([c, c + R.T[0], c + R.T[1], c + R.T[2]])
    V = np.vstack([vc] + [vc + np.cross(omega, e) for e in R.T])
    return P.ravel(), V.ravel()


def _sample_rope(preset: Preset, rng: Xoshiro256):
    g, s = preset.geometry, preset.sampling
    n, seg = int(g["n_points"]), g["segment"]
    heading = rng.uniform(0.0, 2 * math.pi)
    P = np.zeros((n, 2))
    for k in range(1, n):
        heading += rng.uniform(-s.get("max_turn", 0.15), s.get("max_turn", 0.15))
        step = seg * rng.uniform(*s.get("stretch", (0.9, 1.1)))
        P[k] = P[k - 1] + step * np.array([math.cos(heading), math.sin(heading)])
    P -= P.mean(axis=0)
    base = _speed_vector(rng, 2, s.get("max_speed", 0.5))
    V = base + rng.normal(0.0, s.get("point_speed", 0.3), size=(n, 2))
    return P.ravel(), V.ravel()


def _sample_throw(preset: Preset, rng: Xoshiro256):
    s, r = preset.sampling, preset.geometry["radius"]
    ground = preset.geometry.get("ground", 0.0)
    c = np.array([rng.uniform(*s.get("x_range", (-1.0, 1.0))),
                  ground + r + rng.uniform(*s.get("height", (0.05, 1.0)))])
    vc = _speed_vector(rng, 2, s.get("max_speed", 2.0))
    omega = rng.uniform(-s.get("max_omega", 10.0), s.get("max_omega", 10.0))
    R = _rot2(rng.uniform(0.0, 2 * math.pi))
    P, V = [c], [vc]
    for e in R.T:
        P.append(c + e)
        V.append(vc + omega * np.array([-e[1], e[0]]))
    return np.ravel(P), np.ravel(V)


_SAMPLERS: dict[str, Callable[[Preset, Xoshiro256], Any]] = {
    "BP": lambda p, r: _sample_box(p, r, disks=False),
    "BD": lambda p, r: _sample_box(p, r, disks=True),
    "CP": _sample_pendulum,
    "Gyro": _sample_gyroscope,
    "Rope": _sample_rope,
    "Throw": _sample_throw,
}


def sample_initial_condition(spec: SystemSpec, rng: Xoshiro256, preset: Preset,
                             params: Optional[PhysParams] = None, min_gap: float = 0.0) -> State:
    """Rejection-sample a contact-free state on the constraint manifold.

    Positions and velocities are built structurally, then projected onto
    ``Phi = 0`` and ``J_E v = 0`` with the mass-weighted metric.
    """
    model = Model(spec, preset.truth if params is None else params)
    sampler = _SAMPLERS[preset.system]
    for _ in range(MAX_REJECTIONS):
        x, v = sampler(preset, rng)
        x, v = project_to_manifold(model, x, v)
        if spec.E and (np.max(np.abs(equality_constraints(spec, x))) > 1e-10
                       or np.max(np.abs(equality_jacobian(spec, x) @ v)) > 1e-10):
            continue
        gaps = contact_gaps(spec, x)
        if gaps.size and np.min(gaps) <= min_gap:
            continue
        return State(x, v, 0.0)
    raise SamplingExhausted(f"no contact-free state for {preset.name} after {MAX_REJECTIONS} draws")
