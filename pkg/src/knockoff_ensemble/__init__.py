"""Knockoff feature selection driven by importance ensembles over a network's training path."""

from .datagen import Dataset, SimConfig, load_csv, simulate
from .ensemble import EnsembleSpec, build_ensemble
from .errors import KnockoffEnsembleError
from .knockoff import KnockoffAugmentedData, make_knockoffs
from .pipeline import ExperimentConfig, run_experiment, stability_experiment
from .selection import SelectionReport, knockoff_select
from .trainer import GridSpec, TrajectoryStore, run_grid

__all__ = [
    "Dataset",
    "EnsembleSpec",
    "ExperimentConfig",
    "GridSpec",
    "KnockoffAugmentedData",
    "KnockoffEnsembleError",
    "SelectionReport",
    "SimConfig",
    "TrajectoryStore",
    "build_ensemble",
    "knockoff_select",
    "load_csv",
    "make_knockoffs",
    "run_experiment",
    "run_grid",
    "simulate",
    "stability_experiment",
]
