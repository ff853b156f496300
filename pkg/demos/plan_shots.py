"""Plan through contact with finite-difference gradients.

Billiards: choose where and how fast to play the white ball so the blue
ball ends at the target. Throw: choose the spin that makes a thrown disk
bounce straight up.

    python demos/plan_shots.py
"""

import numpy as np

from diffcontact.plan import billiards_task, plan, plan_objective, throw_vertical_task


def billiards(iters=200):
    task = billiards_task()
    res = plan(task, [0.0, 0.0, 0.5, 0.0], iters=iters, tol=0.05 ** 2 / 4)
    print(f"billiards: final distance {np.sqrt(res.best_loss):.4f} after {len(res.losses)} "
          f"iterations, decision {np.round(res.decision, 3)}")


def throw_vertical(iters=60):
    task = throw_vertical_task()
    res = plan(task, [1.0], iters=iters, lr=0.05)
    print(f"throw_vertical: spin {res.decision[0]:.3f} |v|/r, objective {res.best_loss:.3g} "
          f"(zero spin gives {plan_objective(task, [0.0]):.3g})")


if __name__ == "__main__":
    billiards()
    throw_vertical()
