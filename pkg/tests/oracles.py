"""Independent reference implementations used by the tests.

Nothing here imports the solver under test. The cone-QP oracle parametrises
each friction cone explicitly and searches it with a dense grid followed by
shrinking local grids.
"""

from __future__ import annotations

import itertools

import numpy as np
from scipy.optimize import minimize


def _block_params(dim):
    # (normal, radius fraction, angle); lower-dimensional blocks drop entries
    return {1: 1, 2: 2, 3: 3}[dim]


def _decode(params, blocks):
    """Map parameter rows (P, k) to impulses (P, C)."""
    cols = []
    j = 0
    for dim, mu, lb in blocks:
        n = params[:, j]
        if dim == 1:
            cols.append(n[:, None])
            j += 1
        elif dim == 2:
            tau = params[:, j + 1]
            cols.append(np.stack([n, mu * n * tau], axis=1))
            j += 2
        else:
            rho, th = params[:, j + 1], params[:, j + 2]
            cols.append(np.stack([n, mu * n * rho * np.cos(th), mu * n * rho * np.sin(th)], axis=1))
            j += 3
    return np.concatenate(cols, axis=1)


def _bounds(blocks, n_max):
    lo, hi = [], []
    for dim, mu, lb in blocks:
        lo.append(lb)
        hi.append(max(n_max, lb + n_max))
        if dim == 2:
            lo.append(-1.0)
            hi.append(1.0)
        elif dim == 3:
            lo += [0.0, -np.pi]
            hi += [1.0, np.pi]
    return np.array(lo), np.array(hi)


def cone_qp_oracle(A, b, blocks, grid=None, rounds=2000, starts_kept=8):
    """Brute-force minimiser of 0.5 f'Af + b'f over a product of friction cones.

    ``blocks`` lists ``(dim, mu, lower)`` per contact. Returns the best impulse.
    """
    A = np.asarray(A, float)
    b = np.asarray(b, float)
    blocks = [(int(d), float(m), float(l)) for d, m, l in blocks]
    # blocks with mu = 0 carry no tangential freedom
    blocks_eff = [(d if m > 0 else 1, m, l) for d, m, l in blocks]
    lam_min = max(np.linalg.eigvalsh(A).min(), 1e-3)
    n_max = 2.0 * np.linalg.norm(b) / lam_min + 2.0 * max(l for _, _, l in blocks) + 1e-3

    def expand(f_eff):
        out, j = [], 0
        for (d, m, l), (de, _, _) in zip(blocks, blocks_eff):
            part = f_eff[:, j:j + de]
            if de < d:
                part = np.concatenate([part, np.zeros((part.shape[0], d - de))], axis=1)
            out.append(part)
            j += de
        return np.concatenate(out, axis=1)

    def obj(params):
        f = expand(_decode(params, blocks_eff))
        return 0.5 * np.einsum("pi,ij,pj->p", f, A, f) + f @ b, f

    lo, hi = _bounds(blocks_eff, n_max)
    k = lo.size
    if grid is None:
        grid = {1: 2001, 2: 201, 3: 41, 4: 21}.get(k, 9)
    normal_axes = set(_normal_slots(blocks_eff))
    axes = []
    for i, (l, h) in enumerate(zip(lo, hi)):
        u = np.linspace(0.0, 1.0, grid)
        # normals are sampled densely near the bound, where the apex sits
        axes.append(l + (h - l) * (u * u if i in normal_axes else u))
    pts = np.array(list(itertools.product(*axes)))
    vals, _ = obj(pts)
    starts = pts[np.argsort(vals)[:starts_kept]]
    # a coarser stencil in high dimension; the polish does the fine work
    stencil = np.linspace(-1, 1, 7 if k <= 4 else 3)
    offs = np.array(list(itertools.product(*[stencil] * k)))
    best_f, best_val = None, np.inf
    for start in starts:
        best = start
        width = (hi - lo) / (grid - 1) * 2.0
        cur, _ = obj(best[None, :])
        for _ in range(rounds):
            cand = np.clip(best + offs * width, lo, hi)
            vals, _ = obj(cand)
            i = int(np.argmin(vals))
            if vals[i] < cur[0]:
                best, cur = cand[i], vals[i:i + 1]
            else:
                # no progress at this scale: zoom in
                width = width * 0.5
            if np.all(width < 1e-11):
                break
        val, f = obj(best[None, :])
        f, val = _polish(A, b, blocks, f[0], val[0])
        if val < best_val:
            best_val, best_f = val, f
    return best_f


def _polish(A, b, blocks, f0, val0):
    """SLSQP in impulse space with the cones as explicit inequalities.

    Two cone forms are tried: the squared one is smooth but has a vanishing
    gradient at the apex, the (slightly smoothed) convex one can leave it.
    """
    for convex in (False, True):
        f0, val0 = _polish_once(A, b, blocks, f0, val0, convex)
    return f0, val0


def _cone_constraint(j, d, mu, convex):
    """Constraint function and gradient for one cone block at offset ``j``."""
    def fun(f):
        t = f[j + 1:j + d]
        if convex:
            return mu * f[j] - np.sqrt(t @ t + 1e-28)
        return mu * mu * f[j] ** 2 - t @ t

    def jac(f):
        g = np.zeros_like(f)
        t = f[j + 1:j + d]
        if convex:
            g[j] = mu
            g[j + 1:j + d] = -t / np.sqrt(t @ t + 1e-28)
        else:
            g[j] = 2.0 * mu * mu * f[j]
            g[j + 1:j + d] = -2.0 * t
        return g

    return {"type": "ineq", "fun": fun, "jac": jac}


def _polish_once(A, b, blocks, f0, val0, convex):
    cons = []
    j = 0
    for dim, mu, lb in blocks:
        e_j = np.eye(len(f0))[j]
        cons.append({"type": "ineq", "fun": lambda f, j=j, lb=lb: f[j] - lb, "jac": lambda f, e=e_j: e})
        if dim > 1:
            cons.append(_cone_constraint(j, dim, mu, convex))
        j += dim
    res = minimize(lambda f: 0.5 * f @ A @ f + b @ f, f0, jac=lambda f: A @ f + b,
                   constraints=cons, method="SLSQP", options={"ftol": 1e-15, "maxiter": 500})
    f = res.x
    # reject polish output that leaves the feasible set
    j, ok = 0, True
    for dim, mu, lb in blocks:
        ok &= f[j] >= lb - 1e-9 and mu * f[j] >= np.linalg.norm(f[j + 1:j + dim]) - 1e-9
        j += dim
    val = 0.5 * f @ A @ f + b @ f
    return (f, val) if ok and val < val0 else (f0, val0)


def _normal_slots(blocks):
    j = 0
    for dim, _, _ in blocks:
        yield j
        j += dim


def soc_projection_2d(y, mu):
    """Closed-form projection of (n, t) onto {mu n >= |t|} by cases."""
    n, t = float(y[0]), float(y[1])
    s = abs(t)
    if mu * n >= s:
        return np.array([n, t])
    if mu * s <= -n:
        return np.zeros(2)
    a = (n + mu * s) / (1 + mu * mu)
    return np.array([a, np.sign(t) * mu * a])
