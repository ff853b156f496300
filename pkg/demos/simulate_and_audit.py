"""Roll out the elastic presets and audit energy and constraints.

Also shows one impulse solve on its own: a unit mass hitting the ground
at (n, t) velocity (-1, 2) with friction 0.3.

    python demos/simulate_and_audit.py
"""

import numpy as np

from diffcontact.core import cholesky_spd, seeded_rng
from diffcontact.dynamics import Model, equality_constraints
from diffcontact.sim import SimOptions, simulate_batch
from diffcontact.socp import Cone, ConeQP, solve
from diffcontact.systems import contact_gaps, load_preset, sample_initial_condition


def audit(name, n_roll=5, steps=100):
    p = load_preset(name)
    rng = seeded_rng(0)
    starts = [sample_initial_condition(p.spec, rng, p) for _ in range(n_roll)]
    res = simulate_batch(p.spec, p.truth, [s.x for s in starts], [s.v for s in starts],
                         SimOptions(n_steps=steps))
    m = Model(p.spec, p.truth)
    E = np.array([[m.energy(x, v) for x, v in zip(xs, vs)] for xs, vs in zip(res.xs, res.vs)])
    drift = np.max(np.abs(E - E[:, :1]) / np.abs(E[:, :1]))
    phi = max(np.max(np.abs(equality_constraints(p.spec, x)), initial=0.0)
              for xs in res.xs for x in xs)
    pen = np.maximum(0.0, -contact_gaps(p.spec, res.xs)).max()
    print(f"{name:7s} contact steps {int(res.contact_flags.sum()):4d}  "
          f"|dE|/E {drift:.1e}  |phi| {phi:.1e}  max penetration {pen:.1e}")


def single_impulse():
    qp = ConeQP(cholesky_spd(np.eye(2)).T, [-1.0, 2.0], [Cone(2, 0.3)])
    sol = solve(qp)
    print(f"impulse for v=(-1, 2), mu=0.3: f = {np.round(sol.f, 5)} "
          f"after {sol.iterations} iterations (on the cone boundary: "
          f"{abs(0.3 * sol.f[0] - abs(sol.f[1])) < 1e-8})")


if __name__ == "__main__":
    single_impulse()
    for name in ("BP5-e", "CP3-e", "Gyro-e", "BP5", "CP3"):
        audit(name)
