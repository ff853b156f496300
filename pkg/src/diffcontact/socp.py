"""Quadratic programs over products of friction cones.

Problem::

    minimize    0.5 * ||F f||^2 + b . f
    subject to  f_i in K_i = {f_n >= lb_i, mu_i * f_n >= ||f_t||}   for every block i

solved by FISTA with adaptive restart. Each block is projected exactly onto
the second-order cone in closed form and intersected with the half-space
``f_n >= lb`` by Dykstra's alternating projections.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from numba import njit

from .core import DegenerateActiveSet, max_eigenvalue

__all__ = ["Cone", "ConeQP", "ImpulseSolution", "project_cone", "project_cone_exact",
           "solve", "sensitivity"]


@dataclass(frozen=True)
class Cone:
    dim: int
    mu: float
    lower: float = 0.0


@dataclass(eq=False)
class ConeQP:
    A_factor: np.ndarray
    linear: np.ndarray
    cones: Sequence[Cone]

    def __post_init__(self):
        self.A_factor = np.atleast_2d(np.asarray(self.A_factor, dtype=float))
        self.linear = np.asarray(self.linear, dtype=float).ravel()
        if sum(c.dim for c in self.cones) != self.linear.size:
            raise ValueError("cone dimensions do not add up to the problem size")
        if self.A_factor.shape[1] != self.linear.size:
            raise ValueError("factor and linear term disagree on the problem size")

    @property
    def quad(self) -> np.ndarray:
        Q = self.A_factor.T @ self.A_factor
        return 0.5 * (Q + Q.T)

    def objective(self, f) -> float:
        r = self.A_factor @ f
        return 0.5 * float(r @ r) + float(self.linear @ f)

    def layout(self):
        dims = np.array([c.dim for c in self.cones], dtype=np.int64)
        starts = np.concatenate([[0], np.cumsum(dims)[:-1]]).astype(np.int64)
        mus = np.array([c.mu for c in self.cones], dtype=float)
        lbs = np.array([c.lower for c in self.cones], dtype=float)
        return starts, dims, mus, lbs

    def with_linear(self, linear) -> "ConeQP":
        return ConeQP(self.A_factor, linear, self.cones)

    def with_cones(self, cones) -> "ConeQP":
        return ConeQP(self.A_factor, self.linear, cones)


@dataclass
class ImpulseSolution:
    f: np.ndarray
    iterations: int
    primal_residual: float
    converged: bool
    objective: float = float("nan")
    history: np.ndarray = field(default_factory=lambda: np.zeros(0))


# ---------------------------------------------------------------------------
# projections (compiled)
# ---------------------------------------------------------------------------

@njit(cache=True)
def _soc_project(y, mu, out):
    d = y.shape[0]
    n = y[0]
    s = 0.0
    for k in range(1, d):
        s += y[k] * y[k]
    s = np.sqrt(s)
    if mu * s <= -n:  # polar cone
        for k in range(d):
            out[k] = 0.0
        return
    if mu * n >= s:
        for k in range(d):
            out[k] = y[k]
        return
    a = (n + mu * s) / (1.0 + mu * mu)
    out[0] = a
    if s > 0.0:
        scale = mu * a / s
        for k in range(1, d):
            out[k] = scale * y[k]
    else:
        for k in range(1, d):
            out[k] = 0.0


@njit(cache=True)
def _exact_project(y, mu, lb, out):
    """Closed-form projection onto the truncated cone, used as a fallback."""
    d = y.shape[0]
    n = y[0]
    s = 0.0
    for k in range(1, d):
        s += y[k] * y[k]
    s = np.sqrt(s)
    best_n, best_s, best_dist = lb, mu * lb, np.inf  # corner
    best_dist = (n - best_n) ** 2 + (s - best_s) ** 2
    # cone face
    if mu * s <= -n:
        cn, cs = 0.0, 0.0
    elif mu * n >= s:
        cn, cs = n, s
    else:
        cn = (n + mu * s) / (1.0 + mu * mu)
        cs = mu * cn
    if cn >= lb:
        dist = (n - cn) ** 2 + (s - cs) ** 2
        if dist < best_dist:
            best_n, best_s, best_dist = cn, cs, dist
    # bound face
    if s <= mu * lb:
        dist = (n - lb) ** 2
        if dist < best_dist:
            best_n, best_s, best_dist = lb, s, dist
    out[0] = best_n
    if s > 0.0:
        for k in range(1, d):
            out[k] = y[k] * best_s / s
    else:
        for k in range(1, d):
            out[k] = 0.0


@njit(cache=True)
def _project_block(y, mu, lb, out):
    d = y.shape[0]
    if d == 1 or mu == 0.0:
        out[0] = max(y[0], lb)
        for k in range(1, d):
            out[k] = 0.0
        return
    x = y.copy()
    p = np.zeros(d)
    q = np.zeros(d)
    z = np.empty(d)
    tmp = np.empty(d)
    for _sweep in range(100):
        for k in range(d):
            tmp[k] = x[k] + p[k]
        _soc_project(tmp, mu, z)
        # the primal iterate can stall for a sweep while the corrections still
        # move, so both enter the exit test
        moved = 0.0
        for k in range(d):
            p_new = tmp[k] - z[k]
            moved = max(moved, abs(p_new - p[k]))
            p[k] = p_new
        # half-space f_n >= lb
        for k in range(d):
            tmp[k] = z[k] + q[k]
        x_new0 = max(tmp[0], lb)
        q_new0 = tmp[0] - x_new0
        moved = max(moved, abs(q_new0 - q[0]), abs(x_new0 - x[0]))
        q[0] = q_new0
        x[0] = x_new0
        for k in range(1, d):
            q[k] = 0.0
            moved = max(moved, abs(tmp[k] - x[k]))
            x[k] = tmp[k]
        if moved < 1e-12:
            for k in range(d):
                out[k] = x[k]
            return
    _exact_project(y, mu, lb, out)


@njit(cache=True)
def _project_all(y, starts, dims, mus, lbs, out):
    for i in range(starts.shape[0]):
        a = starts[i]
        b = a + dims[i]
        _project_block(y[a:b], mus[i], lbs[i], out[a:b])


@njit(cache=True)
def _objective(Q, b, f):
    return 0.5 * f @ (Q @ f) + b @ f


@njit(cache=True)
def _residual(Q, b, f, step, starts, dims, mus, lbs, work):
    g = Q @ f + b
    _project_all(f - step * g, starts, dims, mus, lbs, work)
    r = 0.0
    for k in range(f.shape[0]):
        r = max(r, abs(f[k] - work[k]))
    return r


@njit(cache=True)
def _fista(Q, b, starts, dims, mus, lbs, lam, tol, max_iter, f0, record):
    C = b.shape[0]
    step = 1.0 / lam
    f = f0.copy()
    y = f0.copy()
    f_new = np.empty(C)
    work = np.empty(C)
    t = 1.0
    best = f.copy()
    best_obj = _objective(Q, b, f)
    hist = np.empty(max_iter + 1 if record else 0)
    if record:
        hist[0] = best_obj
    for it in range(max_iter):
        r = _residual(Q, b, f, step, starts, dims, mus, lbs, work)
        if r <= tol:
            return f, it, r, True, hist[: (it + 1) if record else 0]
        g = Q @ y + b
        _project_all(y - step * g, starts, dims, mus, lbs, f_new)
        t_new = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * t * t))
        # gradient-based adaptive restart
        if (y - f_new) @ (f_new - f) > 0.0:
            t = 1.0
            t_new = 1.0
            y[:] = f_new
        else:
            y[:] = f_new + ((t - 1.0) / t_new) * (f_new - f)
        f[:] = f_new
        t = t_new
        obj = _objective(Q, b, f)
        if obj < best_obj:
            best_obj = obj
            best[:] = f
        if record:
            hist[it + 1] = best_obj
    r = _residual(Q, b, f, step, starts, dims, mus, lbs, work)
    if r <= tol:
        return f, max_iter, r, True, hist[:]
    r = _residual(Q, b, best, step, starts, dims, mus, lbs, work)
    return best, max_iter, r, r <= tol, hist[:]


# ---------------------------------------------------------------------------
# public API
# ---------------------------------------------------------------------------

def project_cone(y, mu: float, lower_bound: float = 0.0) -> np.ndarray:
    """Euclidean projection onto ``{f_n >= lower_bound, mu f_n >= ||f_t||}``."""
    y = np.asarray(y, dtype=float)
    out = np.empty_like(y)
    _project_block(y, float(mu), float(lower_bound), out)
    return out


def project_cone_exact(y, mu: float, lower_bound: float = 0.0) -> np.ndarray:
    """Closed-form projection via the (normal, tangential-norm) half-plane picture."""
    y = np.asarray(y, dtype=float)
    out = np.empty_like(y)
    if y.size == 1 or mu == 0.0:
        out[:] = 0.0
        out[0] = max(y[0], lower_bound)
        return out
    _exact_project(y, float(mu), float(lower_bound), out)
    return out


def solve(qp: ConeQP, tol: float = 1e-10, max_iter: int = 50_000,
          warm_start: Optional[np.ndarray] = None, record: bool = False) -> ImpulseSolution:
    """FISTA on ``qp``; starts from zero unless ``warm_start`` is given.

    Never raises on non-convergence: the returned solution carries the
    fixed-point residual and a ``converged`` flag.
    """
    Q = qp.quad
    lam = max(max_eigenvalue(Q), 1e-12)
    starts, dims, mus, lbs = qp.layout()
    C = qp.linear.size
    f0 = np.zeros(C) if warm_start is None else np.asarray(warm_start, dtype=float).copy()
    if warm_start is not None:
        # warm starts must be feasible for the projection-based residual to mean anything
        tmp = np.empty(C)
        _project_all(f0, starts, dims, mus, lbs, tmp)
        f0 = tmp
    f, it, r, ok, hist = _fista(Q, qp.linear, starts, dims, mus, lbs, lam, tol,
                                max_iter, f0, record)
    return ImpulseSolution(f=f.copy(), iterations=int(it), primal_residual=float(r),
                           converged=bool(ok), objective=qp.objective(f),
                           history=np.asarray(hist).copy())


def _perturbed(qp: ConeQP, wrt: str, idx: int, delta: float) -> ConeQP:
    if wrt == "linear":
        b = qp.linear.copy()
        b[idx] += delta
        return qp.with_linear(b)
    cones = list(qp.cones)
    c = cones[idx]
    if wrt == "mu":
        cones[idx] = Cone(c.dim, c.mu + delta, c.lower)
    else:
        cones[idx] = Cone(c.dim, c.mu, c.lower + delta)
    return qp.with_cones(cones)


def _fd_sensitivity(qp: ConeQP, solution: ImpulseSolution, wrt: str, tol: float) -> np.ndarray:
    if wrt == "linear":
        values = qp.linear
    elif wrt == "mu":
        values = np.array([c.mu for c in qp.cones])
    else:
        values = np.array([c.lower for c in qp.cones])
    out = np.zeros((qp.linear.size, values.size))
    for k, val in enumerate(values):
        h = 1e-5 * (1.0 + abs(val))
        lo = -h
        if wrt != "linear" and val - h < 0:
            lo = 0.0  # stay inside the domain; one-sided on the boundary
        f_plus = solve(_perturbed(qp, wrt, k, h), tol=tol, warm_start=solution.f).f
        f_minus = solve(_perturbed(qp, wrt, k, lo), tol=tol, warm_start=solution.f).f
        out[:, k] = (f_plus - f_minus) / (h - lo)
    return out


def _kkt_sensitivity(qp: ConeQP, solution: ImpulseSolution, wrt: str) -> np.ndarray:
    Q = qp.quad
    b = qp.linear
    f = solution.f
    C = f.size
    g = Q @ f + b
    scale = max(1.0, float(np.max(np.abs(f))), float(np.max(np.abs(g))))
    tau = 1e-7 * scale
    starts, dims, mus, lbs = qp.layout()

    H = Q.copy()
    rows: list[np.ndarray] = []   # active constraint gradients
    kinds: list[tuple] = []       # (kind, block)
    for i, (a, d, mu, lb) in enumerate(zip(starts, dims, mus, lbs)):
        fb, gb = f[a:a + d], g[a:a + d]
        n, t = fb[0], fb[1:]
        s = float(np.linalg.norm(t))

        def unit(k):
            e = np.zeros(C)
            e[a + k] = 1.0
            return e

        if d == 1 or mu == 0.0:
            for k in range(1, d):
                rows.append(unit(k))
                kinds.append(("tangent", i))
            if n > lb + tau:
                continue
            if gb[0] <= tau:
                raise DegenerateActiveSet(f"block {i}: weakly active normal bound")
            rows.append(-unit(0))
            kinds.append(("bound", i))
            continue
        on_bound = abs(n - lb) <= tau
        on_surface = abs(mu * n - s) <= tau
        if lb <= tau and n <= tau and s <= tau:
            # apex: gradient must lie strictly inside the dual cone
            if gb[0] - mu * np.linalg.norm(gb[1:]) <= tau:
                raise DegenerateActiveSet(f"block {i}: weakly active apex")
            for k in range(d):
                rows.append(unit(k))
                kinds.append(("apex", i))
            continue
        if on_bound:
            rows.append(-unit(0))
            kinds.append(("bound", i))
        if on_surface:
            if s <= tau:
                raise DegenerateActiveSet(f"block {i}: surface contact without tangential impulse")
            grad = np.zeros(C)
            grad[a] = -mu
            grad[a + 1:a + d] = t / s
            rows.append(grad)
            kinds.append(("surface", i))

    m = len(rows)
    G = np.array(rows).reshape(m, C)
    nu = np.zeros(m)
    if m:
        nu, *_ = np.linalg.lstsq(G.T, -g, rcond=None)
        if np.max(np.abs(G.T @ nu + g)) > 1e-6 * scale:
            raise DegenerateActiveSet("stationarity not satisfied on the detected active set")
        for (kind, i), val in zip(kinds, nu):
            if kind in ("bound", "surface") and val <= tau:
                raise DegenerateActiveSet(f"block {i}: {kind} multiplier not strictly positive")
    for (kind, i), val in zip(kinds, nu):
        if kind == "surface":
            a, d = starts[i], dims[i]
            t = f[a + 1:a + d]
            s = np.linalg.norm(t)
            that = t / s
            H[a + 1:a + d, a + 1:a + d] += val * (np.eye(d - 1) - np.outer(that, that)) / s

    K = np.zeros((C + m, C + m))
    K[:C, :C] = H
    K[:C, C:] = G.T
    K[C:, :C] = G
    if np.linalg.matrix_rank(K, tol=1e-10 * max(1.0, np.abs(K).max())) < C + m:
        raise DegenerateActiveSet("KKT matrix is singular")

    n_in = C if wrt == "linear" else len(qp.cones)
    rhs = np.zeros((C + m, n_in))
    if wrt == "linear":
        rhs[:C, :] = -np.eye(C)
    else:
        for r, ((kind, i), val) in enumerate(zip(kinds, nu)):
            if wrt == "mu":
                if kind == "surface":
                    a = starts[i]
                    rhs[a, i] += val          # d/dmu of nu * grad(surface) = -nu e_n
                    rhs[C + r, i] = f[a]      # d/dmu of (s - mu n) = -n
                elif kind in ("tangent",) and mus[i] == 0.0 and dims[i] > 1:
                    raise DegenerateActiveSet(f"block {i}: mu sensitivity at mu = 0")
            else:
                if kind == "bound":
                    rhs[C + r, i] = -1.0      # d/dlb of (lb - n) = 1
    sol = np.linalg.solve(K, rhs)
    return sol[:C]


def sensitivity(qp: ConeQP, solution: ImpulseSolution, wrt: str = "linear",
                method: str = "fd", tol: float = 1e-13) -> np.ndarray:
    """Jacobian of the optimal impulse with respect to ``linear``, ``mu`` or ``lower_bound``.

    ``method="fd"`` re-solves at central perturbations (warm-started);
    ``method="kkt"`` differentiates the KKT system on the active set and
    raises DegenerateActiveSet when strict complementarity fails.
    Columns index the perturbed input (linear entry or cone block).
    """
    if wrt not in ("linear", "mu", "lower_bound"):
        raise ValueError(f"unknown sensitivity input {wrt!r}")
    if not solution.converged:
        raise ValueError("sensitivities need a converged solution")
    if method == "fd":
        return _fd_sensitivity(qp, solution, wrt, tol)
    if method == "kkt":
        return _kkt_sensitivity(qp, solution, wrt)
    raise ValueError(f"unknown method {method!r}")
