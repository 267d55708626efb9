"""Continual federated density estimation with masked autoencoders."""
from .config import Hyperparams, ScenarioConfig, TaskSpec
from .data import BinaryDataset, build_scenario, load_binary_csv, load_idx, synth_binary
from .decomposition import (DecomposedClientParams, compose_weights, confedmade_loss,
                            fedweit_loss, snapshot_task)
from .estimator import ContinualFederatedMADE, MADEDensity
from .made import MadeConfig, MadeModel
from .methods import METHODS
from .metrics import LossMatrix, RunReport, avg_forgetting
from .runner import run_scenario

__version__ = "0.1.0"

__all__ = [
    "BinaryDataset", "ContinualFederatedMADE", "DecomposedClientParams", "Hyperparams",
    "LossMatrix", "MADEDensity", "METHODS", "MadeConfig", "MadeModel", "RunReport",
    "ScenarioConfig", "TaskSpec", "avg_forgetting", "build_scenario", "compose_weights",
    "confedmade_loss", "fedweit_loss", "load_binary_csv", "load_idx", "run_scenario",
    "snapshot_task", "synth_binary",
]
