"""Time stepping with contacts, and dataset generation.

Each step integrates the smooth dynamics with RK4, runs collision detection
at the new configuration, and if any contact is active replaces the velocity
with the post-impact velocity from the contact model.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from .contact import DEFAULT_K_STEPS, ContactOptions, resolve_contacts
from .core import (DiffContactError, PhysParams, SamplingExhausted, SimulationError, State,
                   SystemSpec, Trajectory, params_from_dict, params_to_dict, seeded_rng,
                   spec_from_dict, spec_hash, spec_to_dict)
from .dynamics import Model, VectorField, project_to_manifold, rk4_arrays
from .systems import Preset, contact_gaps, detect_contacts, sample_initial_condition

__all__ = [
    "SimOptions", "BatchResult", "Chunk", "Dataset", "SCHEMA_VERSION",
    "simulate", "simulate_batch", "generate_dataset", "default_k_steps",
]

SCHEMA_VERSION = 1


def default_k_steps(e_p) -> tuple[int, ...]:
    """Penetration-fixing horizon per contact class."""
    return tuple(DEFAULT_K_STEPS for _ in np.atleast_1d(e_p))


@dataclass(frozen=True)
class SimOptions:
    dt: float = 0.01
    n_steps: int = 100
    mode: str = "lagrangian"  # or "hamiltonian"
    variant: str = "cm"  # "cm" or "cmr"
    epsilon: float = 0.01  # only used by cmr
    k_steps: Union[None, int, tuple[int, ...]] = None
    tol: float = 1e-10
    max_iter: int = 50_000
    accept_tol: float = 1e-6
    project: bool = False  # post-step projection onto the constraint manifold

    def __post_init__(self):
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        if self.n_steps < 1:
            raise ValueError("n_steps must be at least 1")
        if self.mode not in ("lagrangian", "hamiltonian"):
            raise ValueError(f"unknown dynamics mode {self.mode!r}")
        if self.variant not in ("cm", "cmr"):
            raise ValueError(f"unknown contact variant {self.variant!r}")
        if isinstance(self.k_steps, list):
            object.__setattr__(self, "k_steps", tuple(self.k_steps))

    @property
    def contact_options(self) -> ContactOptions:
        eps = self.epsilon if self.variant == "cmr" else 0.0
        return ContactOptions(epsilon=eps, k_steps=self.k_steps, tol=self.tol,
                              max_iter=self.max_iter, accept_tol=self.accept_tol)

    def replace(self, **changes) -> "SimOptions":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        if isinstance(d["k_steps"], tuple):
            d["k_steps"] = list(d["k_steps"])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SimOptions":
        names = {f.name for f in dataclasses.fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


@dataclass
class BatchResult:
    """Stacked rollouts: ``xs``/``vs`` have shape (B, n_steps + 1, D).

    ``contact_flags[b, i]`` records whether contacts were active at step i.
    Rows that failed hold NaN from the failing step on.
    """

    xs: np.ndarray
    vs: np.ndarray
    contact_flags: np.ndarray
    failed: np.ndarray
    fail_step: np.ndarray
    errors: dict = field(default_factory=dict)


def simulate_batch(spec: SystemSpec, params: PhysParams, x0, v0, options: SimOptions,
                   model: Optional[Model] = None) -> BatchResult:
    """Roll out B initial states in lockstep under one parameter set.

    Failures (solver, singular constraints, non-finite values) are confined
    to their row and reported in ``failed``/``fail_step``/``errors``.
    """
    x = np.array(x0, dtype=float, ndmin=2)
    v = np.array(v0, dtype=float, ndmin=2)
    B, D = x.shape
    n = options.n_steps
    model = Model(spec, params) if model is None else model
    fieldfn = VectorField(spec, params, options.mode)
    fieldfn.model = model
    copts = options.contact_options
    xs = np.full((B, n + 1, D), np.nan)
    vs = np.full((B, n + 1, D), np.nan)
    flags = np.zeros((B, n + 1), dtype=bool)
    failed = np.zeros(B, dtype=bool)
    fail_step = np.full(B, -1)
    errors: dict[int, str] = {}
    xs[:, 0], vs[:, 0] = x, v
    if spec.contact_candidates:
        flags[:, 0] = np.any(contact_gaps(spec, x) < 0, axis=-1)

    def fail(b, step, msg):
        failed[b] = True
        fail_step[b] = step
        errors[int(b)] = msg

    alive = np.arange(B)
    for step in range(1, n + 1):
        if alive.size == 0:
            break
        with np.errstate(all="ignore"):
            try:
                xa, va = rk4_arrays(fieldfn, x[alive], v[alive], options.dt)
            except (DiffContactError, np.linalg.LinAlgError):
                xa, va = _rk4_rowwise(fieldfn, x[alive], v[alive], options.dt)
        x[alive], v[alive] = xa, va
        bad = ~(np.all(np.isfinite(xa), axis=1) & np.all(np.isfinite(va), axis=1))
        for b in alive[bad]:
            fail(b, step, "non-finite state after integration")
        alive = alive[~bad]
        if spec.contact_candidates and alive.size:
            gaps = contact_gaps(spec, x[alive])
            hit = np.any(gaps < 0, axis=-1)
            flags[alive[hit], step] = True
            for b, g in zip(alive[hit], gaps[hit]):
                try:
                    contacts = detect_contacts(spec, x[b], g)
                    v[b] = resolve_contacts(model, x[b], v[b], contacts, copts, options.dt).v
                except (DiffContactError, np.linalg.LinAlgError) as exc:
                    fail(b, step, f"{type(exc).__name__}: {exc}")
            alive = alive[~failed[alive]]
        if options.project and spec.E:
            for b in alive:
                x[b], v[b] = project_to_manifold(model, x[b], v[b])
        xs[alive, step], vs[alive, step] = x[alive], v[alive]
    return BatchResult(xs, vs, flags, failed, fail_step, errors)


def _rk4_rowwise(fieldfn, x, v, dt):
    xo, vo = np.full_like(x, np.nan), np.full_like(v, np.nan)
    for b in range(x.shape[0]):
        try:
            xo[b], vo[b] = rk4_arrays(fieldfn, x[b], v[b], dt)
        except (DiffContactError, np.linalg.LinAlgError):
            pass
    return xo, vo


def simulate(spec: SystemSpec, params: PhysParams, state0: State,
             options: SimOptions = SimOptions(), seed: Optional[int] = None) -> Trajectory:
    """Single rollout; raises ``SimulationError`` carrying the failing step."""
    res = simulate_batch(spec, params, state0.x[None], state0.v[None], options)
    if res.failed[0]:
        raise SimulationError(res.errors[0], int(res.fail_step[0]))
    t = state0.t + options.dt * np.arange(options.n_steps + 1)
    states = [State(res.xs[0, i], res.vs[0, i], t[i]) for i in range(options.n_steps + 1)]
    meta = {"seed": seed, "spec_hash": spec_hash(spec), "contact_flags": res.contact_flags[0].tolist()}
    return Trajectory(states, meta)


# ---------------------------------------------------------------------------
# datasets
# ---------------------------------------------------------------------------

@dataclass
class Chunk:
    t0: float
    xs: np.ndarray  # (T, D)
    vs: np.ndarray
    has_collision: bool


@dataclass
class Dataset:
    """Short trajectory windows cut from longer rollouts of one preset."""

    preset: str
    spec: SystemSpec
    truth: PhysParams
    options: SimOptions
    chunks: list[Chunk]
    seed: int = 0
    meta: dict = field(default_factory=dict)

    @property
    def T(self) -> int:
        return self.chunks[0].xs.shape[0] if self.chunks else 0

    @property
    def x0(self) -> np.ndarray:
        return np.array([c.xs[0] for c in self.chunks])

    @property
    def v0(self) -> np.ndarray:
        return np.array([c.vs[0] for c in self.chunks])

    @property
    def xs(self) -> np.ndarray:
        return np.array([c.xs for c in self.chunks])

    @property
    def vs(self) -> np.ndarray:
        return np.array([c.vs for c in self.chunks])

    @property
    def collision_fraction(self) -> float:
        return float(np.mean([c.has_collision for c in self.chunks])) if self.chunks else 0.0

    def subset(self, idx: Sequence[int]) -> "Dataset":
        return dataclasses.replace(self, chunks=[self.chunks[i] for i in idx])

    def with_noise(self, sigma: float, seed: int = 0) -> "Dataset":
        """Copy with N(0, sigma) added to every recorded position and velocity."""
        if sigma <= 0:
            return self
        rng = seeded_rng(seed)
        chunks = []
        for c in self.chunks:
            noise = rng.normal(0.0, sigma, size=(2,) + c.xs.shape)
            chunks.append(Chunk(c.t0, c.xs + noise[0], c.vs + noise[1], c.has_collision))
        meta = dict(self.meta, noise_sigma=sigma, noise_seed=seed)
        return dataclasses.replace(self, chunks=chunks, meta=meta)

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "preset": self.preset,
            "seed": self.seed,
            "spec": spec_to_dict(self.spec),
            "truth": params_to_dict(self.truth),
            "options": self.options.to_dict(),
            "meta": self.meta,
            "chunks": [
                {"t0": c.t0, "has_collision": bool(c.has_collision),
                 "states": [[x.tolist(), v.tolist()] for x, v in zip(c.xs, c.vs)]}
                for c in self.chunks
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Dataset":
        if d.get("schema_version") != SCHEMA_VERSION:
            raise ValueError(f"unsupported dataset schema {d.get('schema_version')!r}")
        chunks = []
        for c in d["chunks"]:
            st = c["states"]
            chunks.append(Chunk(float(c["t0"]), np.array([s[0] for s in st], dtype=float),
                                np.array([s[1] for s in st], dtype=float), bool(c["has_collision"])))
        return cls(d["preset"], spec_from_dict(d["spec"]), params_from_dict(d["truth"]),
                   SimOptions.from_dict(d["options"]), chunks, int(d.get("seed", 0)),
                   dict(d.get("meta", {})))

    def dumps(self) -> str:
        # repr-based float output round-trips every double exactly
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    def save(self, path) -> None:
        Path(path).write_text(self.dumps())

    @classmethod
    def load(cls, path) -> "Dataset":
        return cls.from_dict(json.loads(Path(path).read_text()))


def _pick_window(flags: np.ndarray, T: int, want_collision: bool, rng) -> Optional[tuple[int, bool]]:
    """Start index of a T-state window whose first state is contact-free."""
    n = flags.size
    starts = [s for s in range(n - T + 1) if not flags[s]]
    hits = [s for s in starts if flags[s + 1:s + T].any()]
    misses = [s for s in starts if not flags[s + 1:s + T].any()]
    pool = hits if want_collision else misses
    if not pool:
        return None
    return pool[rng.integers(0, len(pool))], want_collision


def generate_dataset(spec: SystemSpec, params: PhysParams, options: SimOptions, n_traj: int,
                     T_chunk: int = 5, seed: int = 0, preset: Optional[Preset] = None,
                     rollout_steps: int = 100, max_attempts: int = 50) -> Dataset:
    """Cut one window per rollout, aiming for collisions in every other chunk.

    Rollout ``i`` draws from ``seeded_rng(seed ^ i)``. Even-indexed chunks ask
    for a window containing a contact, odd-indexed ones for a contact-free
    window; a rollout that cannot serve the request is redrawn, and after
    ``max_attempts`` draws any valid window is accepted.
    """
    if n_traj < 1:
        raise ValueError("n_traj must be at least 1")
    if preset is None:
        raise ValueError("a preset is needed to sample initial conditions")
    if options.k_steps is None:
        options = options.replace(k_steps=default_k_steps(params.e_p))
    roll = options.replace(n_steps=rollout_steps)
    rngs = [seeded_rng(seed ^ i) for i in range(n_traj)]
    chosen: dict[int, Chunk] = {}
    pending = list(range(n_traj))
    for attempt in range(max_attempts + 1):
        if not pending:
            break
        starts = [sample_initial_condition(spec, rngs[i], preset, params) for i in pending]
        res = simulate_batch(spec, params, [s.x for s in starts], [s.v for s in starts], roll)
        still = []
        for row, i in enumerate(pending):
            if res.failed[row]:
                still.append(i)
                continue
            flags = res.contact_flags[row]
            pick = _pick_window(flags, T_chunk, i % 2 == 0, rngs[i])
            if pick is None and attempt == max_attempts:
                pick = _pick_window(flags, T_chunk, i % 2 == 1, rngs[i])
            if pick is None:
                still.append(i)
                continue
            s, hit = pick
            chosen[i] = Chunk(s * options.dt, res.xs[row, s:s + T_chunk].copy(),
                              res.vs[row, s:s + T_chunk].copy(), hit)
        pending = still
    if pending:
        raise SamplingExhausted(f"{len(pending)} rollouts produced no usable window")
    opts = options.replace(n_steps=T_chunk - 1)
    meta = {"spec_hash": spec_hash(spec), "rollout_steps": rollout_steps, "T_chunk": T_chunk}
    name = preset.name if preset is not None else spec.name
    return Dataset(name, spec, params, opts, [chosen[i] for i in range(n_traj)], seed, meta)
