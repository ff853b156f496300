"""Recover physical parameters of the three-link pendulum from its own rollouts.

Generates a small chunked dataset at the true parameters, then fits the
friction, restitution and masses from a random start with AdamW on
finite-difference gradients. Scale up with ``--chunks`` and ``--epochs``.

    python demos/fit_parameters.py --chunks 40 --epochs 60
"""

import argparse

import numpy as np

from diffcontact.learn import FitOptions, fit
from diffcontact.sim import SimOptions, generate_dataset
from diffcontact.systems import load_preset


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--preset", default="CP3")
    ap.add_argument("--chunks", type=int, default=40)
    ap.add_argument("--epochs", type=int, default=60)
    ap.add_argument("--noise", type=float, default=0.0)
    args = ap.parse_args()

    p = load_preset(args.preset)
    ds = generate_dataset(p.spec, p.truth, SimOptions(), args.chunks, seed=1, preset=p)
    if args.noise > 0:
        ds = ds.with_noise(args.noise, seed=3)
    print(f"{args.preset}: {len(ds.chunks)} chunks, {ds.collision_fraction:.0%} with a collision")

    def progress(epoch, loss, theta):
        if epoch % 10 == 0:
            print(f"  epoch {epoch:4d}  loss {loss:.4g}")

    rep = fit(ds, 0, args.epochs, FitOptions(lr=0.05, lr_final=1e-3), callback=progress)
    print("learned vs truth")
    print("  mu         ", np.round(rep.mu, 4), p.truth.mu)
    print("  e_P        ", np.round(rep.e_p, 4), p.truth.e_p)
    print("  mass ratios", np.round(rep.mass_ratios, 4), p.truth.masses[1:] / p.truth.masses[0])


if __name__ == "__main__":
    main()
