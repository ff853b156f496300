"""Command-line entry point: simulate, generate, fit, eval and plan.

Every command writes plain JSON/CSV into ``--out``. A JSON file passed
with ``--config`` overrides the built-in defaults and explicit flags
override the config. Exit codes: 2 for configuration errors, 3 for
simulation failures, 4 for missing input files.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import json
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .core import DiffContactError, SimulationError, params_from_dict, seeded_rng, spec_hash
from .dynamics import Model, equality_constraints
from .learn import FitOptions, ParamLayout, decode, encode, fit, trajectory_loss
from .plan import TASK_KINDS, make_task, plan
from .sim import SCHEMA_VERSION, Dataset, SimOptions, generate_dataset, simulate
from .systems import contact_gaps, load_preset, sample_initial_condition

EXIT_CONFIG, EXIT_SIMULATION, EXIT_MISSING = 2, 3, 4


class ConfigError(Exception):
    pass


class MissingInput(Exception):
    pass


DEFAULTS = {
    "simulate": {"preset": "BP5-e", "seed": 0, "dt": None, "steps": 100, "variant": "cm",
                 "epsilon": 0.01, "mode": "lagrangian", "project": False, "out": "."},
    "generate": {"preset": "CP3", "seed": 0, "dt": None, "n_traj": 200, "chunk_len": 5,
                 "rollout_steps": 100, "variant": "cm", "epsilon": 0.01, "out": "."},
    "fit": {"dataset": None, "seed": 0, "epochs": 500, "lr": 1e-3, "lr_final": None,
            "variant": None, "epsilon": None, "noise_sigma": 0.0, "threads": 1, "out": "."},
    "eval": {"dataset": None, "report": None, "truth": False, "variant": None, "epsilon": None,
             "out": "."},
    "plan": {"task": "billiards", "iters": 200, "lr": 1e-2, "report": None, "init": None,
             "out": "."},
}

HELP_EPILOG = """\
output files:
  simulate  trajectory.json; energy.csv with columns
            t, E, phi_inf (max |constraint residual|), penetration_max
  generate  dataset.json
  fit       fit_report.json; fit_losses.csv with columns epoch, loss, rel_err
  eval      eval.json (learned vs truth per contact class, mass ratios);
            eval_chunks.csv with columns chunk, rel_err, has_collision
  plan      plan_decision.json; plan_losses.csv with columns iter, loss, best_loss;
            plan_rollout.json
exit codes: 2 configuration error, 3 simulation failure, 4 missing input
"""


def _add_common(p, *names):
    S = argparse.SUPPRESS
    opts = {
        "preset": dict(help="preset name or path to a preset JSON"),
        "seed": dict(type=int),
        "dt": dict(type=float, help="integration step (default: the preset's)"),
        "steps": dict(type=int, help="number of steps"),
        "epochs": dict(type=int),
        "variant": dict(choices=("cm", "cmr"), help="contact model variant"),
        "epsilon": dict(type=float, help="CMr regularisation"),
        "noise_sigma": dict(type=float, help="Gaussian noise added to the dataset at load"),
        "threads": dict(type=int, help="maximum worker processes"),
        "out": dict(help="output directory"),
    }
    for n in names:
        p.add_argument("--" + n.replace("_", "-"), dest=n, default=S, **opts[n])
    p.add_argument("--config", default=S, help="JSON file of option overrides")


def build_parser() -> argparse.ArgumentParser:
    S = argparse.SUPPRESS
    parser = argparse.ArgumentParser(prog="diffcontact", epilog=HELP_EPILOG,
                                     formatter_class=argparse.RawDescriptionHelpFormatter,
                                     description="Differentiable contact simulation and system identification.")
    sub = parser.add_subparsers(dest="command", required=True)
    fmt = argparse.RawDescriptionHelpFormatter

    p = sub.add_parser("simulate", help="roll out one sampled initial condition",
                       epilog=HELP_EPILOG, formatter_class=fmt)
    _add_common(p, "preset", "seed", "dt", "steps", "variant", "epsilon", "out")
    p.add_argument("--mode", choices=("lagrangian", "hamiltonian"), default=S)
    p.add_argument("--project", action="store_const", const=True, default=S,
                   help="project onto the constraint manifold after every step")

    p = sub.add_parser("generate", help="generate a chunked training dataset",
                       epilog=HELP_EPILOG, formatter_class=fmt)
    _add_common(p, "preset", "seed", "dt", "variant", "epsilon", "out")
    p.add_argument("--n-traj", dest="n_traj", type=int, default=S)
    p.add_argument("--chunk-len", dest="chunk_len", type=int, default=S)
    p.add_argument("--rollout-steps", dest="rollout_steps", type=int, default=S)

    p = sub.add_parser("fit", help="fit physical parameters to a dataset",
                       epilog=HELP_EPILOG, formatter_class=fmt)
    _add_common(p, "seed", "epochs", "variant", "epsilon", "noise_sigma", "threads", "out")
    p.add_argument("--dataset", default=S)
    p.add_argument("--lr", type=float, default=S)
    p.add_argument("--lr-final", dest="lr_final", type=float, default=S)

    p = sub.add_parser("eval", help="compare fitted parameters with the truth on held-out data",
                       epilog=HELP_EPILOG, formatter_class=fmt)
    _add_common(p, "variant", "epsilon", "out")
    p.add_argument("--dataset", default=S)
    p.add_argument("--report", default=S, help="fit_report.json to evaluate")
    p.add_argument("--truth", action="store_const", const=True, default=S,
                   help="evaluate the dataset's true parameters instead of a report")

    p = sub.add_parser("plan", help="gradient-based planning task",
                       epilog=HELP_EPILOG, formatter_class=fmt)
    _add_common(p, "out")
    p.add_argument("--task", choices=TASK_KINDS, default=S)
    p.add_argument("--iters", type=int, default=S)
    p.add_argument("--lr", type=float, default=S)
    p.add_argument("--report", default=S, help="plan with parameters from a fit_report.json")
    p.add_argument("--init", type=float, nargs="+", default=S, help="initial decision vector")
    return parser


def resolve_config(args: argparse.Namespace) -> dict:
    cfg = dict(DEFAULTS[args.command])
    given = vars(args).copy()
    given.pop("command")
    path = given.pop("config", None)
    if path is not None:
        try:
            override = json.loads(Path(path).read_text())
        except FileNotFoundError as exc:
            raise MissingInput(f"config file not found: {path}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
        if not isinstance(override, dict):
            raise ConfigError("config file must hold a JSON object")
        unknown = set(override) - set(cfg)
        if unknown:
            raise ConfigError(f"unknown config keys for {args.command}: {', '.join(sorted(unknown))}")
        cfg.update(override)
    cfg.update(given)
    cfg["command"] = args.command
    return cfg


def _preset(name):
    try:
        return load_preset(name)
    except KeyError as exc:
        raise ConfigError(exc.args[0]) from exc


def _sim_options(cfg, preset, **kw) -> SimOptions:
    dt = cfg["dt"] if cfg.get("dt") is not None else preset.spec.dt
    try:
        return SimOptions(dt=dt, variant=cfg["variant"], epsilon=cfg["epsilon"], **kw)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def _write_csv(path: Path, header, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([repr(float(c)) if isinstance(c, (float, np.floating)) else c for c in r])
    path.write_text(buf.getvalue())


def _out_dir(cfg) -> Path:
    out = Path(cfg["out"])
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ConfigError(f"cannot create output directory {out}: {exc}") from exc
    return out


def cmd_simulate(cfg: dict) -> int:
    preset = _preset(cfg["preset"])
    if cfg["steps"] < 1:
        raise ConfigError("--steps must be at least 1")
    opts = _sim_options(cfg, preset, n_steps=cfg["steps"], mode=cfg["mode"], project=cfg["project"])
    spec, params = preset.spec, preset.truth
    state0 = sample_initial_condition(spec, seeded_rng(cfg["seed"]), preset, params)
    traj = simulate(spec, params, state0, opts, seed=cfg["seed"])
    out = _out_dir(cfg)
    xs, vs = traj.xs, traj.vs
    doc = {"schema_version": SCHEMA_VERSION, "preset": preset.name, "seed": cfg["seed"],
           "spec_hash": spec_hash(spec), "options": opts.to_dict(), "t": traj.times.tolist(),
           "xs": xs.tolist(), "vs": vs.tolist(), "contact_flags": traj.meta["contact_flags"]}
    (out / "trajectory.json").write_text(json.dumps(doc, sort_keys=True, separators=(",", ":")))
    E = Model(spec, params).energy(xs, vs)
    phi = (np.max(np.abs(equality_constraints(spec, xs)), axis=-1) if spec.E
           else np.zeros(len(xs)))
    gaps = contact_gaps(spec, xs)
    pen = np.maximum(0.0, -gaps.min(axis=-1)) if gaps.size else np.zeros(len(xs))
    _write_csv(out / "energy.csv", ["t", "E", "phi_inf", "penetration_max"],
               zip(traj.times, E, phi, pen))
    return 0


def cmd_generate(cfg: dict) -> int:
    preset = _preset(cfg["preset"])
    if cfg["n_traj"] < 1 or cfg["chunk_len"] < 2:
        raise ConfigError("need --n-traj >= 1 and --chunk-len >= 2")
    opts = _sim_options(cfg, preset)
    ds = generate_dataset(preset.spec, preset.truth, opts, cfg["n_traj"], cfg["chunk_len"],
                          cfg["seed"], preset, cfg["rollout_steps"])
    _out_dir(cfg)
    ds.save(Path(cfg["out"]) / "dataset.json")
    return 0


def _load_dataset(path) -> Dataset:
    if path is None:
        raise ConfigError("--dataset is required")
    try:
        return Dataset.load(path)
    except FileNotFoundError as exc:
        raise MissingInput(f"dataset not found: {path}") from exc
    except (ValueError, KeyError) as exc:
        raise ConfigError(f"cannot read dataset {path}: {exc}") from exc


def _load_report(path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except FileNotFoundError as exc:
        raise MissingInput(f"fit report not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"fit report {path} is not valid JSON: {exc}") from exc


def cmd_fit(cfg: dict) -> int:
    ds = _load_dataset(cfg["dataset"])
    if cfg["noise_sigma"]:
        ds = ds.with_noise(cfg["noise_sigma"], cfg["seed"])
    try:
        opts = FitOptions(lr=cfg["lr"], lr_final=cfg["lr_final"], workers=max(1, cfg["threads"]),
                          variant=cfg["variant"], epsilon=cfg["epsilon"])
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    report = fit(ds, cfg["seed"], cfg["epochs"], opts)
    report.save(_out_dir(cfg))
    return 0


def cmd_eval(cfg: dict) -> int:
    ds = _load_dataset(cfg["dataset"])
    layout = ParamLayout.for_spec(ds.spec)
    if cfg["truth"]:
        theta, source = encode(ds.truth), "truth"
    elif cfg["report"] is not None:
        theta, source = np.asarray(_load_report(cfg["report"])["theta"], float), cfg["report"]
        if theta.size != layout.size:
            raise ConfigError("report parameters do not match the dataset's system")
    else:
        raise ConfigError("eval needs --report or --truth")
    opts = ds.options
    if cfg["variant"] is not None:
        opts = opts.replace(variant=cfg["variant"])
    if cfg["epsilon"] is not None:
        opts = opts.replace(epsilon=cfg["epsilon"])
    res = trajectory_loss(theta, ds, opts, layout, details=True)
    learned = decode(theta, layout)
    truth = ds.truth
    classes = [{"class": k, "mu": float(learned.mu[k]), "mu_truth": float(truth.mu[k]),
                "e_p": float(learned.e_p[k]), "e_p_truth": float(truth.e_p[k])}
               for k in range(layout.n_classes)]
    rel = res.rel_err
    finite = rel[np.isfinite(rel)]
    doc = {"schema_version": SCHEMA_VERSION, "preset": ds.preset, "source": source,
           "loss": res.loss, "n_chunks": len(ds.chunks), "n_failed": int(res.failed.sum()),
           "rel_err_mean": float(finite.mean()) if finite.size else None,
           "rel_err_median": float(np.median(finite)) if finite.size else None,
           "rel_err_max": float(finite.max()) if finite.size else None,
           "contact_classes": classes,
           "mass_ratios": (learned.masses[1:] / learned.masses[0]).tolist(),
           "mass_ratios_truth": (truth.masses[1:] / truth.masses[0]).tolist(),
           "potential_constants": learned.potential_constants.tolist(),
           "potential_constants_truth": truth.potential_constants.tolist()}
    out = _out_dir(cfg)
    (out / "eval.json").write_text(json.dumps(doc, sort_keys=True, indent=2))
    _write_csv(out / "eval_chunks.csv", ["chunk", "rel_err", "has_collision"],
               ((k, float(r), int(c.has_collision)) for k, (r, c) in enumerate(zip(rel, ds.chunks))))
    return 0


_PLAN_INIT = {"billiards": [0.0, 0.0, 0.5, 0.0], "throw_hit": [1.0, 0.0], "throw_vertical": [0.0]}


def cmd_plan(cfg: dict) -> int:
    task = make_task(cfg["task"])
    if cfg["report"] is not None:
        rep = _load_report(cfg["report"])
        params = params_from_dict(rep["params"])
        if (params.masses.size != task.params.masses.size or params.mu.size != task.params.mu.size
                or params.potential_constants.size != task.params.potential_constants.size):
            raise ConfigError("report parameters do not match the planning system")
        task = dataclasses.replace(task, params=params)
    init = cfg["init"] if cfg["init"] is not None else _PLAN_INIT[task.kind]
    if len(init) != task.n_decision:
        raise ConfigError(f"--init needs {task.n_decision} numbers for {task.kind}")
    if cfg["iters"] < 1:
        raise ConfigError("--iters must be at least 1")
    res = plan(task, init, cfg["iters"], cfg["lr"])
    res.save(_out_dir(cfg))
    return 0


COMMANDS = {"simulate": cmd_simulate, "generate": cmd_generate, "fit": cmd_fit,
            "eval": cmd_eval, "plan": cmd_plan}


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = resolve_config(args)
        return COMMANDS[cfg["command"]](cfg)
    except ConfigError as exc:
        print(f"diffcontact: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except MissingInput as exc:
        print(f"diffcontact: error: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except SimulationError as exc:
        print(f"diffcontact: simulation failed at {exc}", file=sys.stderr)
        return EXIT_SIMULATION
    except DiffContactError as exc:
        print(f"diffcontact: simulation failed: {exc}", file=sys.stderr)
        return EXIT_SIMULATION


if __name__ == "__main__":
    sys.exit(main())
