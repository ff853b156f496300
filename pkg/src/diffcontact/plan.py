"""Gradient-based planning on a known or learned simulator.

A task fixes a base initial state and a linear map from a small decision
vector into that state. The objective is evaluated on a rollout and
minimised with Adam using finite-difference gradients; finite-difference
probes share one parameter set, so they run as rows of a single batch.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .core import PhysParams, SimulationError, SystemSpec
from .learn import OptState, fd_gradient, optimizer_step
from .sim import SimOptions, simulate_batch
from .systems import build_bouncing_points, build_throw_disk

__all__ = ["PlanTask", "PlanResult", "plan_objective", "plan", "billiards_task",
           "throw_hit_task", "throw_vertical_task", "make_task", "TASK_KINDS"]

TASK_KINDS = ("billiards", "throw_hit", "throw_vertical")


@dataclass(frozen=True, eq=False)
class PlanTask:
    """A planning problem.

    The initial state is ``[x0; v0] + basis @ decision``. ``tracked`` is the
    point whose trajectory the objective reads. For ``throw_vertical`` the
    target is the x coordinate of the vertical line.
    """

    kind: str
    spec: SystemSpec
    params: PhysParams
    x0: np.ndarray
    v0: np.ndarray
    basis: np.ndarray  # (2 * D, k)
    target: np.ndarray
    horizon: int
    tracked: int
    options: SimOptions = SimOptions()
    decision_names: tuple[str, ...] = ()

    def __post_init__(self):
        if self.kind not in TASK_KINDS:
            raise ValueError(f"unknown task kind {self.kind!r}")
        D = self.spec.D
        if self.basis.ndim != 2 or self.basis.shape[0] != 2 * D:
            raise ValueError("decision basis must map into the (x, v) state")
        if not 0 <= self.tracked < self.spec.n_points:
            raise ValueError("tracked point out of range")

    @property
    def n_decision(self) -> int:
        return self.basis.shape[1]

    def initial_states(self, decisions):
        dec = np.atleast_2d(np.asarray(decisions, dtype=float))
        z = np.concatenate([self.x0, self.v0]) + dec @ self.basis.T
        D = self.spec.D
        return z[:, :D], z[:, D:]

    def rollout(self, decisions):
        x, v = self.initial_states(decisions)
        return simulate_batch(self.spec, self.params, x, v, self.options.replace(n_steps=self.horizon))


def _tracked_path(task: PlanTask, xs):
    d = task.spec.ambient_dim
    return xs[..., task.tracked * d:(task.tracked + 1) * d]


def _objectives(task: PlanTask, xs) -> np.ndarray:
    path = _tracked_path(task, xs)  # (B, T + 1, d)
    if task.kind in ("billiards", "throw_hit"):
        return np.sum((path[:, -1] - task.target) ** 2, axis=-1)
    half = task.horizon // 2
    return np.sum((path[:, half:, 0] - task.target[0]) ** 2, axis=-1)


def plan_objective_many(task: PlanTask, decisions) -> np.ndarray:
    res = task.rollout(decisions)
    if res.failed.any():
        b = int(np.flatnonzero(res.failed)[0])
        raise SimulationError(res.errors.get(b, "rollout failed"), int(res.fail_step[b]))
    return _objectives(task, res.xs)


def plan_objective(task: PlanTask, decision, spec: Optional[SystemSpec] = None,
                   params: Optional[PhysParams] = None) -> float:
    """Objective of one decision; ``spec``/``params`` override the task's own."""
    if spec is not None or params is not None:
        task = PlanTask(task.kind, spec or task.spec, params or task.params, task.x0, task.v0,
                        task.basis, task.target, task.horizon, task.tracked, task.options,
                        task.decision_names)
    return float(plan_objective_many(task, decision)[0])


@dataclass
class PlanResult:
    task: PlanTask
    decision: np.ndarray
    best_loss: float
    losses: list[float]
    best_losses: list[float]
    decisions: list[np.ndarray] = field(default_factory=list)

    def losses_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["iter", "loss", "best_loss"])
        for k, (l, b) in enumerate(zip(self.losses, self.best_losses)):
            w.writerow([k, repr(float(l)), repr(float(b))])
        return buf.getvalue()

    def save(self, out_dir) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        x, v = self.task.initial_states(self.decision)
        info = {"kind": self.task.kind, "decision": self.decision.tolist(),
                "decision_names": list(self.task.decision_names), "best_loss": self.best_loss,
                "target": self.task.target.tolist(), "horizon": self.task.horizon,
                "x0": x[0].tolist(), "v0": v[0].tolist()}
        (out / "plan_decision.json").write_text(json.dumps(info, sort_keys=True, indent=2))
        (out / "plan_losses.csv").write_text(self.losses_csv())
        res = self.task.rollout(self.decision)
        traj = {"dt": self.task.options.dt, "xs": res.xs[0].tolist(), "vs": res.vs[0].tolist(),
                "tracked": self.task.tracked}
        (out / "plan_rollout.json").write_text(json.dumps(traj, separators=(",", ":")))


def plan(task: PlanTask, init_decision, iters: int = 200, lr: float = 1e-2,
         h_scale: float = 1e-5, tol: float = 0.0) -> PlanResult:
    """Adam on finite-difference gradients; returns the best decision seen.

    Stops early once the best objective drops to ``tol`` or below.
    """
    if iters < 1:
        raise ValueError("iters must be at least 1")
    dec = np.array(init_decision, dtype=float).reshape(task.n_decision)
    state = OptState.zeros(task.n_decision, lr=lr)
    losses, best_losses, trail = [], [], []
    best_dec, best = dec.copy(), math.inf
    for _ in range(iters):
        # the centre point rides along with the probes in one batch
        centre = {}

        def batch(probes):
            vals = plan_objective_many(task, [dec] + list(probes))
            centre["f"] = float(vals[0])
            return vals[1:]

        grad = fd_gradient(dec, h_scale=h_scale, batch_fn=batch)
        f = centre["f"]
        losses.append(f)
        trail.append(dec.copy())
        if f < best:
            best, best_dec = f, dec.copy()
        best_losses.append(best)
        if best <= tol:
            break
        state, dec = optimizer_step(state, dec, grad)
    return PlanResult(task, best_dec, best, losses, best_losses, trail)


# ---------------------------------------------------------------------------
# task builders
# ---------------------------------------------------------------------------

def billiards_task(radius: float = 0.05, horizon: int = 256, target=(1.6, 1.3),
                   white=(0.5, 1.0), blue=(1.0, 1.05), box=(0.0, 2.0), e_p: float = 1.0,
                   dt: float = 0.01) -> PlanTask:
    """White cue ball and blue object ball on a walled table.

    Decision: white ball position offset and initial velocity (4 numbers,
    all zero means the white ball rests at ``white``). Objective: squared
    distance of the blue ball to ``target`` at the final step.
    """
    spec = build_bouncing_points([radius, radius], box, name="Billiards")
    params = PhysParams(masses=np.ones(2), mu=np.zeros(2), e_p=np.full(2, float(e_p)))
    x0 = np.array([*white, *blue], dtype=float)
    basis = np.zeros((8, 4))
    basis[0, 0] = basis[1, 1] = 1.0  # white position
    basis[4, 2] = basis[5, 3] = 1.0  # white velocity
    return PlanTask("billiards", spec, params, x0, np.zeros(4), basis, np.asarray(target, float),
                    horizon, 1, SimOptions(dt=dt), ("dx", "dy", "vx", "vy"))


def _disk_state(c, v, omega):
    P = np.array([c, [c[0] + 1.0, c[1]], [c[0], c[1] + 1.0]], dtype=float)
    V = np.array([v, [v[0], v[1] + omega], [v[0] - omega, v[1]]], dtype=float)
    return P.ravel(), V.ravel()


_SPIN = np.array([0.0, 0.0, 0.0, 1.0, -1.0, 0.0])  # d(v)/d(omega) for the tips above


def _throw_params(mu: float, e_p: float, g: float) -> PhysParams:
    return PhysParams(masses=np.ones(1), mu=np.array([mu]), e_p=np.array([e_p]),
                      potential_constants=np.array([g]))


def throw_hit_task(radius: float = 0.1, horizon: int = 80, start=(0.0, 1.0),
                   target=(1.1, 0.43), mu: float = 0.5, e_p: float = 0.6, g: float = 9.8,
                   dt: float = 0.01) -> PlanTask:
    """Throw a disk from a fixed point so it lands on ``target`` after bouncing.

    Decision: initial centre velocity (vx, vy), in m/s. Objective: squared
    distance of the centre to ``target`` at the final step.
    """
    spec = build_throw_disk(radius, 0.0)
    x0, v0 = _disk_state(start, (0.0, 0.0), 0.0)
    basis = np.zeros((12, 2))
    basis[6:, 0] = np.tile([1.0, 0.0], 3)
    basis[6:, 1] = np.tile([0.0, 1.0], 3)
    return PlanTask("throw_hit", spec, _throw_params(mu, e_p, g), x0, v0, basis,
                    np.asarray(target, float), horizon, 0, SimOptions(dt=dt), ("vx", "vy"))


def throw_vertical_task(radius: float = 0.1, horizon: int = 160, start=(0.0, 0.6),
                        velocity=(1.0, 0.0), mu: float = 0.5, e_p: float = 0.6, g: float = 9.8,
                        dt: float = 0.01) -> PlanTask:
    """Spin a thrown disk so it bounces straight up.

    Position and centre velocity are fixed, so the flight up to the first
    bounce is fixed too; the vertical line passes through the first contact.
    Decision: spin in units of ``|v| / radius`` (counter-clockwise positive).
    Objective: summed squared horizontal offset from the line over the second
    half of the horizon.
    """
    spec = build_throw_disk(radius, 0.0)
    x0, v0 = _disk_state(start, velocity, 0.0)
    scale = math.hypot(*velocity) / radius
    basis = np.zeros((12, 1))
    basis[6:, 0] = scale * _SPIN
    params = _throw_params(mu, e_p, g)
    # free flight to the ground: c_y(t) = y0 + vy t - g t^2 / 2 = radius
    y0, vy = start[1], velocity[1]
    t_hit = (vy + math.sqrt(vy * vy + 2.0 * g * (y0 - radius))) / g
    line = start[0] + velocity[0] * t_hit
    return PlanTask("throw_vertical", spec, params, x0, v0, basis, np.array([line, 0.0]),
                    horizon, 0, SimOptions(dt=dt), ("spin",))


def make_task(kind: str, **kw) -> PlanTask:
    builders = {"billiards": billiards_task, "throw_hit": throw_hit_task,
                "throw_vertical": throw_vertical_task}
    if kind not in builders:
        raise KeyError(f"unknown task {kind!r}; available: {', '.join(TASK_KINDS)}")
    return builders[kind](**kw)
