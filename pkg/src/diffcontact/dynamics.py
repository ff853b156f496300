"""Collision-free equations of motion in Cartesian coordinates.

Every kernel accepts coordinates with an optional leading batch axis
(``x.shape == (..., D)``), which the learner uses to roll out many short
trajectories in one call.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from typing import Callable

import numpy as np

from .core import PhysParams, SingularConstraintSystem, State, SystemSpec, cholesky_spd, solve_spd

__all__ = [
    "Model", "VectorField", "mass_matrix", "potential_and_gradient", "equality_constraints",
    "equality_jacobian", "jacobian_rate_times_v", "lagrangian_field", "hamiltonian_field",
    "rk4_step", "total_energy", "project_to_manifold",
]


def _solve(S, rhs):
    """Batched ``S^{-1} rhs`` for rhs of shape (..., n)."""
    try:
        out = np.linalg.solve(S, rhs[..., None])[..., 0]
    except np.linalg.LinAlgError:
        raise SingularConstraintSystem("constraint Gram matrix is singular") from None
    if not np.all(np.isfinite(out)):
        raise SingularConstraintSystem("constraint Gram matrix is singular")
    return out


class _Geometry:
    """Index arrays for the distance constraints of a spec."""

    def __init__(self, spec: SystemSpec):
        d = spec.ambient_dim
        cons = spec.equality_constraints
        self.E = len(cons)
        self.d = d
        self.n = spec.n_points
        self.i = np.array([c.i for c in cons], dtype=int)
        self.j = np.array([max(c.j, 0) for c in cons], dtype=int)
        self.anchored = np.array([c.j < 0 for c in cons], dtype=bool)
        self.anchor = np.array([c.anchor if c.j < 0 else (0.0,) * d for c in cons],
                               dtype=float).reshape(self.E, d)
        self.length_sq = np.array([c.length_sq for c in cons], dtype=float)
        self.free = ~self.anchored

    def diff(self, P):
        """x_i - x_j (or x_i - anchor) for every constraint; P has shape (..., n, d)."""
        other = np.where(self.anchored[:, None], self.anchor, P[..., self.j, :])
        return P[..., self.i, :] - other

    def scatter_rows(self, g):
        """Build (..., E, D) rows with +g at block i and -g at block j."""
        batch = g.shape[:-2]
        J = np.zeros(batch + (self.E, self.n, self.d))
        rows = np.arange(self.E)
        J[..., rows, self.i, :] = g
        fr = rows[self.free]
        J[..., fr, self.j[self.free], :] -= g[..., self.free, :]
        return J.reshape(batch + (self.E, self.n * self.d))


_GEOMETRY_CACHE: dict[int, tuple[SystemSpec, _Geometry]] = {}


def _geometry(spec: SystemSpec) -> _Geometry:
    hit = _GEOMETRY_CACHE.get(id(spec))
    if hit is not None and hit[0] is spec:
        return hit[1]
    geo = _Geometry(spec)
    _GEOMETRY_CACHE[id(spec)] = (spec, geo)
    return geo


def mass_matrix(spec: SystemSpec, params: PhysParams) -> np.ndarray:
    """Constant Cartesian inertia matrix.

    Extended bodies use the relative form of the kinetic energy,
    ``T = m|v_0|^2/2 + sum_k Phi_k |v_k - v_0|^2/2`` with ``Phi_k = m * moment_k``,
    which keeps the first point at the centre of mass.
    """
    d = spec.ambient_dim
    M = np.zeros((spec.n_points, spec.n_points))
    for body, m in zip(spec.bodies, params.masses):
        c = body.com
        if body.kind == "point":
            M[c, c] += m
            continue
        phi = m * np.asarray(body.moments, dtype=float)
        M[c, c] += m + phi.sum()
        for tip, p in zip(body.points[1:], phi):
            M[c, tip] -= p
            M[tip, c] -= p
            M[tip, tip] += p
    return np.kron(M, np.eye(d))


def potential_and_gradient(spec: SystemSpec, params: PhysParams, x):
    """Potential energy and its exact gradient; x may carry a batch axis."""
    x = np.asarray(x, dtype=float)
    d = spec.ambient_dim
    P = x.reshape(x.shape[:-1] + (spec.n_points, d))
    V = np.zeros(x.shape[:-1])
    G = np.zeros_like(P)
    consts = params.potential_constants
    for term in spec.potential_terms:
        k = consts[term.constant]
        if term.kind == "gravity":
            up = spec.vertical_axis
            for body, m in zip(spec.bodies, params.masses):
                V = V + k * m * P[..., body.com, up]
                G[..., body.com, up] += k * m
        elif term.kind == "spring":
            a = np.array([p[0] for p in term.pairs])
            b = np.array([p[1] for p in term.pairs])
            delta = P[..., b, :] - P[..., a, :]
            length = np.linalg.norm(delta, axis=-1)
            stretch = length - term.rest
            V = V + 0.5 * k * np.sum(stretch ** 2, axis=-1)
            g = np.moveaxis((k * stretch / length)[..., None] * delta, -2, 0)
            Gt = np.moveaxis(G, -2, 0)  # view; points first so add.at can scatter
            np.add.at(Gt, b, g)
            np.add.at(Gt, a, -g)
        else:
            raise ValueError(f"unknown potential term {term.kind!r}")
    return V, G.reshape(x.shape)


def equality_constraints(spec: SystemSpec, x):
    """Distance-squared residuals, shape (..., E)."""
    x = np.asarray(x, dtype=float)
    geo = _geometry(spec)
    P = x.reshape(x.shape[:-1] + (geo.n, geo.d))
    diff = geo.diff(P)
    return np.sum(diff * diff, axis=-1) - geo.length_sq


def equality_jacobian(spec: SystemSpec, x):
    """Constraint Jacobian, shape (..., E, D)."""
    x = np.asarray(x, dtype=float)
    geo = _geometry(spec)
    P = x.reshape(x.shape[:-1] + (geo.n, geo.d))
    return geo.scatter_rows(2.0 * geo.diff(P))


def jacobian_rate_times_v(spec: SystemSpec, x, v):
    """``(D_x(J_E v)) v``; for distance constraints entry k is ``2||v_i - v_j||^2``."""
    v = np.asarray(v, dtype=float)
    geo = _geometry(spec)
    V = v.reshape(v.shape[:-1] + (geo.n, geo.d))
    dv = V[..., geo.i, :] - np.where(geo.anchored[:, None], 0.0, V[..., geo.j, :])
    return 2.0 * np.sum(dv * dv, axis=-1)


class Model:
    """Spec plus parameters with the constant matrices precomputed."""

    def __init__(self, spec: SystemSpec, params: PhysParams):
        self.spec = spec
        self.params = params
        self.geo = _geometry(spec)

    @cached_property
    def M(self) -> np.ndarray:
        return mass_matrix(self.spec, self.params)

    @cached_property
    def M_factor(self) -> np.ndarray:
        return cholesky_spd(self.M)

    @cached_property
    def Minv(self) -> np.ndarray:
        Minv = solve_spd(self.M_factor, np.eye(self.spec.D))
        return 0.5 * (Minv + Minv.T)

    @cached_property
    def Minv_factor(self) -> np.ndarray:
        """L with ``M^{-1} = L L^T``."""
        return cholesky_spd(self.Minv)

    def grad_V(self, x):
        return potential_and_gradient(self.spec, self.params, x)[1]

    # -- vector fields -----------------------------------------------------

    def lagrangian_accel(self, x, v):
        Minv = self.Minv
        a_free = -self.grad_V(x) @ Minv  # Minv symmetric
        if self.geo.E == 0:
            return a_free
        J = equality_jacobian(self.spec, x)
        JMinv = J @ Minv
        S = JMinv @ np.swapaxes(J, -1, -2)
        rhs = np.einsum("...ed,...d->...e", JMinv, self.grad_V(x)) - jacobian_rate_times_v(self.spec, x, v)
        lam = _solve(S, rhs)
        return np.einsum("...ed,...e->...d", JMinv, lam) + a_free

    def hamiltonian_accel(self, x, v):
        """Acceleration from the constrained Hamiltonian flow in z = (x, p)."""
        spec, Minv = self.spec, self.Minv
        D, E = spec.D, self.geo.E
        gradV = self.grad_V(x)
        # J grad_z H = (dH/dp, -dH/dx) = (v, -grad V)
        flow = np.concatenate([v, -gradV], axis=-1)
        if E == 0:
            zdot = flow
        else:
            geo = self.geo
            P = x.reshape(x.shape[:-1] + (geo.n, geo.d))
            Vp = v.reshape(v.shape[:-1] + (geo.n, geo.d))
            JE = geo.scatter_rows(2.0 * geo.diff(P))
            dv = Vp[..., geo.i, :] - np.where(geo.anchored[:, None], 0.0, Vp[..., geo.j, :])
            R = geo.scatter_rows(2.0 * dv)  # d/dx of (J_E v) at fixed v
            batch = x.shape[:-1]
            DPsi = np.zeros(batch + (2 * E, 2 * D))
            DPsi[..., :E, :D] = JE
            DPsi[..., E:, :D] = R
            DPsi[..., E:, D:] = JE @ Minv
            # J @ DPsi^T with J = [[0, I], [-I, 0]]
            DPsiT = np.swapaxes(DPsi, -1, -2)
            JDPsiT = np.concatenate([DPsiT[..., D:, :], -DPsiT[..., :D, :]], axis=-2)
            S = DPsi @ JDPsiT
            lam = _solve(S, np.einsum("...kd,...d->...k", DPsi, flow))
            zdot = flow - np.einsum("...dk,...k->...d", JDPsiT, lam)
        return zdot[..., D:] @ Minv

    def energy(self, x, v):
        V, _ = potential_and_gradient(self.spec, self.params, x)
        return 0.5 * np.einsum("...i,ij,...j->...", v, self.M, v) + V


@dataclass
class VectorField:
    """Callable ``(x, v) -> (xdot, vdot)`` for a spec/params pair."""

    spec: SystemSpec
    params: PhysParams
    mode: str = "lagrangian"

    def __post_init__(self):
        if self.mode not in ("lagrangian", "hamiltonian"):
            raise ValueError(f"unknown dynamics mode {self.mode!r}")
        self.model = Model(self.spec, self.params)

    def __call__(self, x, v):
        if self.mode == "lagrangian":
            return v, self.model.lagrangian_accel(x, v)
        return v, self.model.hamiltonian_accel(x, v)


def lagrangian_field(spec: SystemSpec, params: PhysParams, state: State):
    return VectorField(spec, params, "lagrangian")(state.x, state.v)


def hamiltonian_field(spec: SystemSpec, params: PhysParams, state: State):
    return VectorField(spec, params, "hamiltonian")(state.x, state.v)


def rk4_arrays(field: Callable, x, v, dt: float):
    k1x, k1v = field(x, v)
    k2x, k2v = field(x + 0.5 * dt * k1x, v + 0.5 * dt * k1v)
    k3x, k3v = field(x + 0.5 * dt * k2x, v + 0.5 * dt * k2v)
    k4x, k4v = field(x + dt * k3x, v + dt * k3v)
    x_new = x + dt / 6.0 * (k1x + 2.0 * k2x + 2.0 * k3x + k4x)
    v_new = v + dt / 6.0 * (k1v + 2.0 * k2v + 2.0 * k3v + k4v)
    return x_new, v_new


def rk4_step(field: Callable, state: State, dt: float) -> State:
    """Classical four-stage Runge-Kutta step of (x, v)."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    x, v = rk4_arrays(field, state.x, state.v, dt)
    return State(x, v, state.t + dt)


def total_energy(spec: SystemSpec, params: PhysParams, state: State) -> float:
    return float(Model(spec, params).energy(state.x, state.v))


def project_to_manifold(model: Model, x, v, tol: float = 1e-13, max_iter: int = 50):
    """Mass-weighted projection of (x, v) onto ``Phi = 0`` and ``J_E v = 0``."""
    spec = model.spec
    if spec.E == 0:
        return np.array(x, dtype=float), np.array(v, dtype=float)
    x = np.array(x, dtype=float)
    Minv = model.Minv
    for _ in range(max_iter):
        phi = equality_constraints(spec, x)
        if np.max(np.abs(phi)) <= tol:
            break
        J = equality_jacobian(spec, x)
        JMinv = J @ Minv
        x = x - _solve(JMinv @ J.T, phi) @ JMinv
    J = equality_jacobian(spec, x)
    JMinv = J @ Minv
    v = np.asarray(v, dtype=float)
    v = v - _solve(JMinv @ J.T, J @ v) @ JMinv
    return x, v
