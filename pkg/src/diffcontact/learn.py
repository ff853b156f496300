"""System identification by gradient descent through the simulator.

Physical parameters are stored as an unconstrained vector ``theta``. Masses
and potential constants are log-parametrised, friction goes through a ReLU
and restitution through a hard sigmoid, so every ``theta`` decodes to valid
parameters. Gradients are central finite differences of the rollout loss.
"""

from __future__ import annotations

import csv
import dataclasses
import io
import json
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .core import PhysParams, SystemSpec, params_to_dict, seeded_rng
from .sim import Dataset, SimOptions, simulate_batch

__all__ = [
    "ParamLayout", "ParamVector", "decode", "encode", "initial_theta",
    "LossResult", "trajectory_loss", "fd_gradient", "OptState", "optimizer_step",
    "FitOptions", "FitReport", "fit", "FAILED_CHUNK_LOSS",
]

FAILED_CHUNK_LOSS = 1e6


@dataclass(frozen=True)
class ParamLayout:
    n_masses: int
    n_classes: int
    n_potential: int

    @classmethod
    def for_spec(cls, spec: SystemSpec) -> "ParamLayout":
        return cls(len(spec.bodies), spec.n_classes, len(spec.potential_names))

    @property
    def size(self) -> int:
        return self.n_masses + 2 * self.n_classes + self.n_potential

    @property
    def masses(self) -> slice:
        return slice(0, self.n_masses)

    @property
    def mu(self) -> slice:
        a = self.n_masses
        return slice(a, a + self.n_classes)

    @property
    def e_p(self) -> slice:
        a = self.n_masses + self.n_classes
        return slice(a, a + self.n_classes)

    @property
    def potential(self) -> slice:
        a = self.n_masses + 2 * self.n_classes
        return slice(a, a + self.n_potential)

    def names(self) -> list[str]:
        out = [f"log_m{k + 1}" for k in range(self.n_masses)]
        out += [f"mu{k}" for k in range(self.n_classes)]
        out += [f"e{k}" for k in range(self.n_classes)]
        out += [f"log_V{k}" for k in range(self.n_potential)]
        return out


def hard_sigmoid(z):
    return np.clip(0.25 * np.asarray(z, dtype=float) + 0.5, 0.0, 1.0)


def decode(theta, layout: ParamLayout) -> PhysParams:
    theta = np.asarray(theta, dtype=float)
    return PhysParams(masses=np.exp(theta[layout.masses]),
                      mu=np.maximum(0.0, theta[layout.mu]),
                      e_p=hard_sigmoid(theta[layout.e_p]),
                      potential_constants=np.exp(theta[layout.potential]))


def encode(params: PhysParams) -> np.ndarray:
    """Inverse of ``decode`` on its range (e_p = 0 or 1 map to the saturation corners)."""
    return np.concatenate([np.log(params.masses), params.mu, 4.0 * params.e_p - 2.0,
                           np.log(params.potential_constants)])


def initial_theta(layout: ParamLayout, seed: int = 0, scale: float = 0.01,
                  truth: Optional[PhysParams] = None, fixed: Sequence[str] = ()) -> np.ndarray:
    """Default start: unit masses, mu = 0.1, e_p = 0.5, potential constants 1, plus N(0, scale).

    Slices named in ``fixed`` (``"masses"``, ``"mu"``, ``"e_p"``, ``"potential"``)
    start at the truth instead, for experiments that hold them known.
    """
    theta = np.zeros(layout.size)
    theta[layout.mu] = 0.1
    theta += seeded_rng(seed).normal(0.0, scale, size=layout.size)
    if fixed:
        if truth is None:
            raise ValueError("fixed slices need the truth parameters")
        t = encode(truth)
        for name in fixed:
            sl = getattr(layout, name)
            theta[sl] = t[sl]
    return theta


@dataclass
class ParamVector:
    theta: np.ndarray
    layout: ParamLayout

    def decode(self) -> PhysParams:
        return decode(self.theta, self.layout)


# ---------------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------------

@dataclass
class LossResult:
    loss: float
    per_chunk: np.ndarray
    rel_err: np.ndarray  # relative L1 per chunk
    failed: np.ndarray


def _rollout_loss(params: PhysParams, dataset: Dataset, options: SimOptions) -> LossResult:
    xs_true, vs_true = dataset.xs, dataset.vs
    opts = options.replace(n_steps=dataset.T - 1)
    res = simulate_batch(dataset.spec, params, xs_true[:, 0], vs_true[:, 0], opts)
    pred = np.concatenate([res.xs[:, 1:], res.vs[:, 1:]], axis=-1)
    true = np.concatenate([xs_true[:, 1:], vs_true[:, 1:]], axis=-1)
    diff = np.abs(pred - true).sum(axis=(1, 2))
    scale = np.abs(true).sum(axis=(1, 2))
    per_chunk = np.where(res.failed, FAILED_CHUNK_LOSS, diff)
    rel = np.where(res.failed, np.inf, diff / (scale + 1e-12))
    # fixed summation order over chunks keeps the loss bitwise reproducible
    total = math.fsum(per_chunk.tolist())
    return LossResult(total, per_chunk, rel, res.failed)


def trajectory_loss(theta, dataset: Dataset, options: Optional[SimOptions] = None,
                    layout: Optional[ParamLayout] = None, details: bool = False):
    """Summed L1 error of T-1 step rollouts from every chunk's first state.

    Chunks whose rollout fails contribute ``FAILED_CHUNK_LOSS``.
    """
    layout = ParamLayout.for_spec(dataset.spec) if layout is None else layout
    options = dataset.options if options is None else options
    out = _rollout_loss(decode(theta, layout), dataset, options)
    return out if details else out.loss


def fd_gradient(theta, loss_fn: Optional[Callable] = None, h_scale: float = 1e-5,
                batch_fn: Optional[Callable] = None) -> np.ndarray:
    """Central differences with ``h_i = h_scale * (1 + |theta_i|)``.

    ``batch_fn`` (list of thetas -> list of losses) lets callers evaluate
    all perturbations together, e.g. in parallel.
    """
    theta = np.asarray(theta, dtype=float)
    h = h_scale * (1.0 + np.abs(theta))
    probes = []
    for i in range(theta.size):
        for sign in (1.0, -1.0):
            t = theta.copy()
            t[i] += sign * h[i]
            probes.append(t)
    if batch_fn is not None:
        vals = np.asarray(batch_fn(probes), dtype=float)
    else:
        vals = np.array([loss_fn(t) for t in probes], dtype=float)
    vals = vals.reshape(theta.size, 2)
    # use the realised step so rounding in theta +/- h does not bias the slope
    steps = np.array([probes[2 * i][i] - probes[2 * i + 1][i] for i in range(theta.size)])
    return (vals[:, 0] - vals[:, 1]) / steps


# ---------------------------------------------------------------------------
# optimiser
# ---------------------------------------------------------------------------

@dataclass
class OptState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0

    @classmethod
    def zeros(cls, n: int, **kw) -> "OptState":
        return cls(np.zeros(n), np.zeros(n), **kw)


def optimizer_step(state: OptState, theta, grad, lr: Optional[float] = None):
    """One AdamW update; returns the new state and the new theta."""
    theta = np.asarray(theta, dtype=float)
    grad = np.asarray(grad, dtype=float)
    lr = state.lr if lr is None else lr
    t = state.t + 1
    m = state.beta1 * state.m + (1.0 - state.beta1) * grad
    v = state.beta2 * state.v + (1.0 - state.beta2) * grad * grad
    m_hat = m / (1.0 - state.beta1 ** t)
    v_hat = v / (1.0 - state.beta2 ** t)
    new = theta - lr * state.weight_decay * theta  # decoupled decay
    new = new - lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return dataclasses.replace(state, m=m, v=v, t=t), new


# ---------------------------------------------------------------------------
# fitting
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FitOptions:
    lr: float = 1e-3
    lr_final: Optional[float] = None  # geometric decay from lr to lr_final over the epochs
    weight_decay: float = 0.0
    h_scale: float = 1e-5
    patience: int = 50
    min_improvement: float = 1e-10
    workers: int = 1
    variant: Optional[str] = None  # override the dataset's contact variant
    epsilon: Optional[float] = None
    fixed: tuple[str, ...] = ()
    init_scale: float = 0.01

    def lr_at(self, epoch: int, epochs: int) -> float:
        if self.lr_final is None or epochs <= 1:
            return self.lr
        frac = min(epoch / (epochs - 1), 1.0)
        return self.lr * (self.lr_final / self.lr) ** frac

    def sim_options(self, base: SimOptions) -> SimOptions:
        changes = {}
        if self.variant is not None:
            changes["variant"] = self.variant
        if self.epsilon is not None:
            changes["epsilon"] = self.epsilon
        return base.replace(**changes) if changes else base


@dataclass
class FitReport:
    theta: np.ndarray
    params: PhysParams
    final_loss: float
    losses: list[float]
    rel_errs: list[float]
    layout: ParamLayout
    epochs_run: int
    stopped_early: bool = False
    interrupted: bool = False

    @property
    def mass_ratios(self) -> np.ndarray:
        return self.params.masses[1:] / self.params.masses[0]

    @property
    def mu(self) -> np.ndarray:
        return self.params.mu

    @property
    def e_p(self) -> np.ndarray:
        return self.params.e_p

    def to_dict(self) -> dict:
        return {
            "final_loss": self.final_loss,
            "epochs_run": self.epochs_run,
            "stopped_early": self.stopped_early,
            "interrupted": self.interrupted,
            "theta": self.theta.tolist(),
            "theta_names": self.layout.names(),
            "params": params_to_dict(self.params),
            "mass_ratios": self.mass_ratios.tolist(),
            "mu": self.mu.tolist(),
            "e_p": self.e_p.tolist(),
        }

    def losses_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", "loss", "rel_err"])
        for k, (l, r) in enumerate(zip(self.losses, self.rel_errs)):
            w.writerow([k, repr(float(l)), repr(float(r))])
        return buf.getvalue()

    def save(self, out_dir) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "fit_report.json").write_text(json.dumps(self.to_dict(), sort_keys=True, indent=2))
        (out / "fit_losses.csv").write_text(self.losses_csv())


# worker-process state for parallel loss evaluation
_WORKER: dict = {}


def _worker_init(dataset_dict: dict, options_dict: dict, layout: ParamLayout):
    _WORKER["dataset"] = Dataset.from_dict(dataset_dict)
    _WORKER["options"] = SimOptions.from_dict(options_dict)
    _WORKER["layout"] = layout


def _worker_loss(theta) -> float:
    return trajectory_loss(theta, _WORKER["dataset"], _WORKER["options"], _WORKER["layout"])


class LossEvaluator:
    """Evaluates the training loss for many thetas, optionally across processes."""

    def __init__(self, dataset: Dataset, options: SimOptions, layout: ParamLayout,
                 workers: int = 1):
        self.dataset, self.options, self.layout = dataset, options, layout
        self.workers = max(1, int(workers))
        self._pool = None
        if self.workers > 1:
            import multiprocessing as mp
            ctx = mp.get_context("fork") if hasattr(os, "fork") else mp.get_context()
            self._pool = ProcessPoolExecutor(self.workers, mp_context=ctx, initializer=_worker_init,
                                             initargs=(dataset.to_dict(), options.to_dict(), layout))

    def __call__(self, theta) -> float:
        return trajectory_loss(theta, self.dataset, self.options, self.layout)

    def details(self, theta) -> LossResult:
        return trajectory_loss(theta, self.dataset, self.options, self.layout, details=True)

    def many(self, thetas) -> list[float]:
        if self._pool is None:
            return [self(t) for t in thetas]
        return list(self._pool.map(_worker_loss, thetas))

    def close(self):
        if self._pool is not None:
            self._pool.shutdown()
            self._pool = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def fit(dataset: Dataset, init_seed: int = 0, epochs: int = 500,
        options: FitOptions = FitOptions(), theta0=None,
        callback: Optional[Callable[[int, float, np.ndarray], None]] = None) -> FitReport:
    """Full-batch AdamW on the rollout loss with finite-difference gradients.

    Stops early when the best loss improved by less than
    ``options.min_improvement`` over the last ``options.patience`` epochs.
    The report carries the best parameters seen; a keyboard interrupt
    returns the partial report.
    """
    if not dataset.chunks:
        raise ValueError("empty dataset")
    layout = ParamLayout.for_spec(dataset.spec)
    sim_opts = options.sim_options(dataset.options)
    theta = (initial_theta(layout, init_seed, options.init_scale, dataset.truth, options.fixed)
             if theta0 is None else np.array(theta0, dtype=float))
    free = np.ones(layout.size, dtype=bool)
    for name in options.fixed:
        free[getattr(layout, name)] = False
    state = OptState.zeros(layout.size, lr=options.lr, weight_decay=options.weight_decay)
    losses, rels = [], []
    best_theta, best_loss = theta.copy(), np.inf
    stopped = interrupted = False
    with LossEvaluator(dataset, sim_opts, layout, options.workers) as ev:
        try:
            for epoch in range(epochs):
                res = ev.details(theta)
                losses.append(res.loss)
                rels.append(float(np.mean(res.rel_err[np.isfinite(res.rel_err)]))
                            if np.any(np.isfinite(res.rel_err)) else float("inf"))
                if res.loss < best_loss:
                    best_loss, best_theta = res.loss, theta.copy()
                if callback is not None:
                    callback(epoch, res.loss, theta)
                if epoch >= options.patience:
                    earlier = min(losses[: epoch - options.patience + 1])
                    if earlier - best_loss < options.min_improvement:
                        stopped = True
                        break
                grad = np.zeros(layout.size)
                idx = np.flatnonzero(free)
                sub = fd_gradient(theta[idx], h_scale=options.h_scale,
                                  batch_fn=lambda ts: ev.many([_embed(theta, idx, t) for t in ts]))
                grad[idx] = sub
                state, new = optimizer_step(state, theta, grad, lr=options.lr_at(epoch, epochs))
                theta = np.where(free, new, theta)
        except KeyboardInterrupt:
            interrupted = True
    return FitReport(best_theta, decode(best_theta, layout), float(best_loss), losses, rels, layout,
                     len(losses), stopped, interrupted)


def _embed(theta, idx, sub):
    out = theta.copy()
    out[idx] = sub
    return out
