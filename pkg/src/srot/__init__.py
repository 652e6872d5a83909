"""Optimal transport with classifier-based outlier reweighting."""

from .errors import SrotError
from .measures import ContaminatedDataset, DiscreteMeasure, make_rng
from .solvers import (SIMPLEX_BACKEND, CostMatrix, SolverConfig, TransportPlan, cost_matrix,
                      partial_ot, rot, sinkhorn, sinkhorn_unbalanced, solve_exact, truncated_ot)
from .classifier import TrainConfig, init_model, train
from .reweighting import SrotConfig, detect_outliers, hard_weights, soft_cost, srot_hard, srot_soft
from .flows import LossSpec, euler_flow

__version__ = "0.1.0"
