"""Simulation of in-situ frequency locking for microring photon-pair sources."""

from ringlock.environment import NoiseKind, NoiseSpec
from ringlock.harness import Scenario, ScenarioName, load_config, run_scenario
from ringlock.lock import LockConfig, LockMode, dynamic_lock, static_align
from ringlock.resonator import DeviceModel, analytic_alignment, default_device
from ringlock.simplex import SimplexConfig, fit_curve, minimize

__version__ = "0.1.0"

__all__ = [
    "DeviceModel",
    "LockConfig",
    "LockMode",
    "NoiseKind",
    "NoiseSpec",
    "Scenario",
    "ScenarioName",
    "SimplexConfig",
    "analytic_alignment",
    "default_device",
    "dynamic_lock",
    "fit_curve",
    "load_config",
    "minimize",
    "run_scenario",
    "static_align",
]
