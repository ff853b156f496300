"""Impulse-based contact resolution.

Pipeline for one step with active contacts: contact Jacobian, contact-space
inverse inertia folded with the equality constraints, maximum-dissipation
compression impulse, Poisson restitution impulse with penetration
compensation, and the resulting velocity jump.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np

from . import socp
from .core import (PhysParams, SingularConstraintSystem, SolverNotConverged, State,
                   SystemSpec, cholesky_spd, solve_spd)
from .dynamics import Model, equality_jacobian

__all__ = [
    "DEFAULT_K_STEPS", "ActiveContact", "ActiveContactSet", "ContactInertia", "ContactOptions", "ContactResult",
    "tangent_basis", "contact_jacobian", "contact_inertia", "solve_compression",
    "solve_restitution", "target_velocity", "apply_impulses", "contact_step", "resolve_contacts",
]


# Penetration is removed over this many steps. A single-step target can exceed
# the reflected speed of an elastic impact (the step-boundary overlap is not
# bounded by |v_n| dt on curved relative paths) and would inject energy.
DEFAULT_K_STEPS = 4


def tangent_basis(normal) -> np.ndarray:
    """Orthonormal tangents completing ``normal`` to a frame, shape (d-1, d).

    2D: the normal rotated by +90 degrees. 3D: Gram-Schmidt of the coordinate
    axis along which the normal is smallest (ties go to the lower axis), then
    a cross product.
    """
    n = np.asarray(normal, dtype=float)
    if n.size == 2:
        return np.array([[-n[1], n[0]]])
    k = int(np.argmin(np.abs(n)))  # argmin returns the first minimum: x wins ties
    e = np.zeros(3)
    e[k] = 1.0
    t1 = e - (e @ n) * n
    t1 /= np.linalg.norm(t1)
    t2 = np.cross(n, t1)
    return np.array([t1, t2])


@dataclass(frozen=True, eq=False)
class ActiveContact:
    """One active contact.

    Frictional contacts carry ``weights``: the relative velocity of the two
    contact points is ``sum_k weights[k] * v_k`` over the points. Limit
    contacts are one-dimensional and carry the ``gradient`` of the limited
    quantity, signed so that a positive rate moves away from the violation.
    """

    candidate: int
    class_id: int
    dim: int
    penetration: float
    normal: np.ndarray = field(default_factory=lambda: np.zeros(0))
    tangents: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))
    weights: Optional[np.ndarray] = None
    gradient: Optional[np.ndarray] = None

    @property
    def is_limit(self) -> bool:
        return self.gradient is not None

    @property
    def jacobian_rows(self) -> np.ndarray:
        if self.is_limit:
            return self.gradient[None, :]
        axes = np.vstack([self.normal[None, :], self.tangents])
        return np.kron(self.weights[None, :], axes)


@dataclass(eq=False)
class ActiveContactSet:
    contacts: list[ActiveContact] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.contacts)

    def __iter__(self):
        return iter(self.contacts)

    def __bool__(self) -> bool:
        return bool(self.contacts)

    @property
    def dims(self) -> list[int]:
        return [c.dim for c in self.contacts]

    @property
    def C(self) -> int:
        return sum(self.dims)

    @property
    def max_penetration(self) -> float:
        return max((c.penetration for c in self.contacts), default=0.0)


@dataclass(eq=False)
class ContactInertia:
    A: np.ndarray
    A_factor: np.ndarray
    Mhat_inv_JCt: Optional[np.ndarray] = None

    @classmethod
    def from_matrix(cls, A) -> "ContactInertia":
        """Wrap a given positive-definite contact matrix (mainly for tests)."""
        A = np.asarray(A, dtype=float)
        return cls(A=A, A_factor=cholesky_spd(A).T)


@dataclass(frozen=True)
class ContactOptions:
    epsilon: float = 0.0
    k_steps: Union[None, int, Sequence[int]] = None  # None: DEFAULT_K_STEPS for every class
    tol: float = 1e-10
    max_iter: int = 50_000
    accept_tol: float = 1e-6


@dataclass
class ContactResult:
    v: np.ndarray
    f_compression: np.ndarray
    f_restitution: np.ndarray
    compression: socp.ImpulseSolution
    restitution: socp.ImpulseSolution
    v_C_minus: np.ndarray
    v_C_star: np.ndarray
    inertia: ContactInertia


# ---------------------------------------------------------------------------

def contact_jacobian(spec: SystemSpec, x, contacts: ActiveContactSet) -> np.ndarray:
    """Stacked (C, D) contact Jacobian; positive normal rate means separating."""
    if not contacts:
        return np.zeros((0, spec.D))
    return np.vstack([c.jacobian_rows for c in contacts])


def contact_inertia(M, J_E, J_C, Minv=None, Minv_factor=None) -> ContactInertia:
    """``A = J_C Mhat^{-1} J_C^T`` together with a factor ``B`` (``A = B^T B``).

    With ``M^{-1} = L L^T`` and the projector ``P = L^T J_E^T (J_E M^{-1} J_E^T)^{-1} J_E L``,
    ``B = (I - P) L^T J_C^T`` and ``Mhat^{-1} J_C^T = L B``.
    """
    if Minv is None:
        Minv = solve_spd(cholesky_spd(M), np.eye(np.shape(M)[0]))
    L = cholesky_spd(Minv) if Minv_factor is None else Minv_factor
    J_C = np.atleast_2d(np.asarray(J_C, dtype=float))
    B = L.T @ J_C.T
    J_E = np.asarray(J_E, dtype=float)
    if J_E.size:
        JL = J_E @ L
        S = JL @ JL.T
        try:
            B = B - JL.T @ np.linalg.solve(S, JL @ B)
        except np.linalg.LinAlgError:
            raise SingularConstraintSystem("J_E M^-1 J_E^T is singular") from None
    A = B.T @ B
    return ContactInertia(A=A, A_factor=B, Mhat_inv_JCt=L @ B)


def _factor(inertia: ContactInertia, epsilon: float) -> np.ndarray:
    if epsilon > 0:
        C = inertia.A.shape[0]
        return cholesky_spd(inertia.A + epsilon * np.eye(C)).T
    return inertia.A_factor


def _dims(mu, dims, C) -> list[int]:
    if dims is None:
        n = len(mu)
        if C % n:
            raise ValueError("cannot infer per-contact dimensions")
        return [C // n] * n
    return list(dims)


def _checked(sol: socp.ImpulseSolution, accept_tol: Optional[float], phase: str):
    if sol.converged:
        return sol
    if accept_tol is not None and sol.primal_residual <= accept_tol:
        return sol
    raise SolverNotConverged(f"{phase} solve stopped at residual {sol.primal_residual:.3e}",
                             sol.primal_residual)


def solve_compression(inertia: ContactInertia, v_C_minus, mu, dims=None, epsilon: float = 0.0,
                      tol: float = 1e-10, max_iter: int = 50_000,
                      accept_tol: Optional[float] = None) -> socp.ImpulseSolution:
    """Maximum-dissipation impulse: min 0.5 f^T (A + eps I) f + f^T v_C^- over the friction cones."""
    v = np.asarray(v_C_minus, dtype=float)
    mu = np.atleast_1d(np.asarray(mu, dtype=float))
    dims = _dims(mu, dims, v.size)
    cones = [socp.Cone(d, float(m) if d > 1 else 0.0, 0.0) for d, m in zip(dims, mu)]
    qp = socp.ConeQP(_factor(inertia, epsilon), v, cones)
    return _checked(socp.solve(qp, tol=tol, max_iter=max_iter), accept_tol, "compression")


def solve_restitution(inertia: ContactInertia, v_C_cplus, f_c, e_p, mu, v_C_star=None, dims=None,
                      epsilon: float = 0.0, tol: float = 1e-10, max_iter: int = 50_000,
                      accept_tol: Optional[float] = None) -> socp.ImpulseSolution:
    """Restitution impulse with normal parts bounded below by ``e_p * f_c_n``."""
    v = np.asarray(v_C_cplus, dtype=float)
    target = np.zeros_like(v) if v_C_star is None else np.asarray(v_C_star, dtype=float)
    mu = np.atleast_1d(np.asarray(mu, dtype=float))
    e_p = np.broadcast_to(np.asarray(e_p, dtype=float), mu.shape)
    dims = _dims(mu, dims, v.size)
    f_c = np.asarray(f_c, dtype=float)
    starts = np.concatenate([[0], np.cumsum(dims)[:-1]]).astype(int)
    cones = [socp.Cone(d, float(m) if d > 1 else 0.0, max(float(e) * float(f_c[a]), 0.0))
             for d, m, e, a in zip(dims, mu, e_p, starts)]
    qp = socp.ConeQP(_factor(inertia, epsilon), v - target, cones)
    return _checked(socp.solve(qp, tol=tol, max_iter=max_iter), accept_tol, "restitution")


def _pinv_apply(J_C, v_d):
    """``J_C^+ v_d`` with the one-sided inverse matching the shape of ``J_C``.

    When the relevant Gram matrix is numerically singular (for example more
    contact rows than coordinates while some body touches nothing) the
    minimum-norm least-squares solution is used, which is what both
    one-sided formulas reduce to whenever they are defined.
    """
    C, D = J_C.shape
    G = J_C @ J_C.T if C <= D else J_C.T @ J_C
    if np.linalg.cond(G) < 1e12:
        if C <= D:
            return J_C.T @ np.linalg.solve(G, v_d)
        return np.linalg.solve(G, J_C.T @ v_d)
    return np.linalg.lstsq(J_C, v_d, rcond=None)[0]


def target_velocity(spec: SystemSpec, x, J_E, J_C, contacts: ActiveContactSet, dt: float,
                    k_steps=1) -> np.ndarray:
    """Contact-space target velocity that removes penetration over ``k_steps`` steps.

    The desired velocity (normal: depth / (k dt), tangential: 0) is lifted to
    Cartesian space with the pseudoinverse of ``J_C``, corrected along
    ``J_E^T`` so that it respects the equality constraints, and mapped back.
    """
    J_C = np.atleast_2d(J_C)
    k = np.broadcast_to(np.asarray(k_steps, dtype=float), (len(contacts),))
    v_d = np.zeros(J_C.shape[0])
    row = 0
    for c, kk in zip(contacts, k):
        v_d[row] = c.penetration / (kk * dt)
        row += c.dim
    if not np.any(v_d):
        return v_d
    v_star = _pinv_apply(J_C, v_d)
    J_E = np.asarray(J_E, dtype=float)
    if J_E.size:
        try:
            v_E = -np.linalg.solve(J_E @ J_E.T, J_E @ v_star)
        except np.linalg.LinAlgError:
            raise SingularConstraintSystem("J_E J_E^T is singular") from None
        v_star = v_star + J_E.T @ v_E
    return J_C @ v_star


def apply_impulses(inertia: ContactInertia, v, f_total) -> np.ndarray:
    """``v + Mhat^{-1} J_C^T f``; the equality-constraint impulse is already folded in."""
    return np.asarray(v, dtype=float) + inertia.Mhat_inv_JCt @ np.asarray(f_total, dtype=float)


def _per_contact(params: PhysParams, contacts: ActiveContactSet, options: ContactOptions):
    mu = np.array([0.0 if c.is_limit else params.mu[c.class_id] for c in contacts])
    e = np.array([params.e_p[c.class_id] for c in contacts])
    ks = options.k_steps
    if ks is None:
        k = np.full(len(contacts), DEFAULT_K_STEPS)
    elif np.isscalar(ks):
        k = np.full(len(contacts), int(ks))
    else:
        k = np.array([ks[c.class_id] for c in contacts])
    return mu, e, k


def resolve_contacts(model: Model, x, v, contacts: ActiveContactSet,
                     options: ContactOptions = ContactOptions(), dt: Optional[float] = None
                     ) -> ContactResult:
    spec, params = model.spec, model.params
    dt = spec.dt if dt is None else dt
    J_C = contact_jacobian(spec, x, contacts)
    J_E = equality_jacobian(spec, x) if spec.E else np.zeros((0, spec.D))
    inertia = contact_inertia(model.M, J_E, J_C, Minv=model.Minv, Minv_factor=model.Minv_factor)
    mu, e, k = _per_contact(params, contacts, options)
    dims = contacts.dims
    solver = dict(epsilon=options.epsilon, tol=options.tol, max_iter=options.max_iter,
                  accept_tol=options.accept_tol)

    if J_E.size:
        # the equality multiplier enforces J_E v+ = 0 outright, so any drift in
        # J_E v- is removed here (M-orthogonal projection); the contact impulse
        # below lives in the null space of J_E
        JL = J_E @ model.Minv_factor
        v = np.asarray(v, dtype=float) - model.Minv_factor @ (JL.T @ np.linalg.solve(JL @ JL.T, J_E @ v))
    v_minus = J_C @ v
    comp = solve_compression(inertia, v_minus, mu, dims, **solver)
    v_cplus = v_minus + inertia.A @ comp.f
    v_star = target_velocity(spec, x, J_E, J_C, contacts, dt, k)
    rest = solve_restitution(inertia, v_cplus, comp.f, e, mu, v_star, dims, **solver)
    v_new = apply_impulses(inertia, v, comp.f + rest.f)
    return ContactResult(v=v_new, f_compression=comp.f, f_restitution=rest.f, compression=comp,
                         restitution=rest, v_C_minus=v_minus, v_C_star=v_star, inertia=inertia)


def contact_step(spec: SystemSpec, params: PhysParams, state: State, contacts: ActiveContactSet,
                 options: ContactOptions = ContactOptions(), model: Optional[Model] = None) -> State:
    """Velocity jump for the given active contacts; positions are untouched."""
    model = Model(spec, params) if model is None else model
    res = resolve_contacts(model, state.x, state.v, contacts, options)
    return State(state.x, res.v, state.t)
