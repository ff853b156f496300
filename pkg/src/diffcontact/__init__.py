"""Differentiable rigid-body contact simulation, system identification and planning."""

from .core import (Body, ContactCandidate, DegenerateActiveSet, DiffContactError,
                   EqualityConstraint, NotPositiveDefinite, PhysParams, PotentialTerm,
                   SamplingExhausted, ShapeMismatch, SimulationError, SingularConstraintSystem,
                   SolverNotConverged, State, SystemSpec, Trajectory, seeded_rng)
from .dynamics import Model, rk4_step, total_energy
from .contact import ContactOptions, contact_step, resolve_contacts
from .sim import Dataset, SimOptions, generate_dataset, simulate, simulate_batch
from .systems import detect_contacts, list_presets, load_preset, sample_initial_condition
from .learn import FitOptions, FitReport, decode, encode, fit, trajectory_loss
from .plan import PlanTask, make_task, plan, plan_objective

__version__ = "0.1.0"

__all__ = [
    "Body", "ContactCandidate", "DegenerateActiveSet", "DiffContactError", "EqualityConstraint",
    "NotPositiveDefinite", "PhysParams", "PotentialTerm", "SamplingExhausted", "ShapeMismatch",
    "SimulationError", "SingularConstraintSystem", "SolverNotConverged", "State", "SystemSpec",
    "Trajectory", "seeded_rng", "Model", "rk4_step", "total_energy", "ContactOptions",
    "contact_step", "resolve_contacts", "Dataset", "SimOptions", "generate_dataset", "simulate",
    "simulate_batch", "detect_contacts", "list_presets", "load_preset", "sample_initial_condition",
    "FitOptions", "FitReport", "decode", "encode", "fit", "trajectory_loss", "PlanTask",
    "make_task", "plan", "plan_objective",
]
