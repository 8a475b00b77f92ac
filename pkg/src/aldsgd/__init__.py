"""Decentralized SGD with leader-assisted averaging over rotating, budgeted topologies."""

from .config import ExperimentConfig, load_config
from .engine import MetricsLog, run_experiment, theorem2_bound
from .mixing import BudgetSchedule
from .objectives import ProblemSpec, make_problem
from .protocol import HyperParams, preset
from .spectral import alpha_range, estimate_rho, lambda_zeta
from .topology import Graph, build_graph, make_dynamic_set

__version__ = "0.1.0"

__all__ = [
    "BudgetSchedule",
    "ExperimentConfig",
    "Graph",
    "HyperParams",
    "MetricsLog",
    "ProblemSpec",
    "alpha_range",
    "build_graph",
    "estimate_rho",
    "lambda_zeta",
    "load_config",
    "make_dynamic_set",
    "make_problem",
    "preset",
    "run_experiment",
    "theorem2_bound",
]
