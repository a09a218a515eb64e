"""
Mean-field control of regime-switching jump diffusions: measure metrics,
particle simulation, control search, HJB diagnostics and convergence
experiments.
"""

from __future__ import annotations

from .control import FeedbackControl, OptimConfig, hamiltonian_sup, optimize_control, pre_hamiltonian
from .experiments import ExperimentConfig, fit_rate, load_config, run_poc, run_value_convergence
from .hjb_analysis import CheckReport, CylindricalPolynomial, hjb_residual, remainder_terms
from .measure_metric import DiscreteMeasure, Polynomial, build_basis, dhat, make_weights, metric_d
from .model import ModelSpec, make_model, validate_assumptions
from .regime_chain import GeneratorMatrix, RegimePath, sample_path, transition_matrix
from .simulate import SimConfig, coupled_poc_run, simulate_meanfield, simulate_nagent

__version__ = "0.1.0"

__all__ = [
    "CheckReport",
    "CylindricalPolynomial",
    "DiscreteMeasure",
    "ExperimentConfig",
    "FeedbackControl",
    "GeneratorMatrix",
    "ModelSpec",
    "OptimConfig",
    "Polynomial",
    "RegimePath",
    "SimConfig",
    "build_basis",
    "coupled_poc_run",
    "dhat",
    "fit_rate",
    "hamiltonian_sup",
    "hjb_residual",
    "load_config",
    "make_model",
    "make_weights",
    "metric_d",
    "optimize_control",
    "pre_hamiltonian",
    "remainder_terms",
    "run_poc",
    "run_value_convergence",
    "sample_path",
    "simulate_meanfield",
    "simulate_nagent",
    "transition_matrix",
    "validate_assumptions",
]
