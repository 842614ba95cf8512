"""Window solvers: staged elimination, its dense reference, and the driver."""

from .assemble import (FactorSet, SolverOptions, VarLayout, apply_increment,
                       assemble, evaluate_cost, refresh_dependent_depths,
                       restore_states, snapshot_states)
from .dense import build_constrained, build_normal_equations, dense_solve
from .elimination import (PredictionJacobian, back_substitute,
                          eliminate_prediction, eliminate_scalars,
                          scalar_back_substitute, schur_eliminate, solve_full,
                          transport_back_substitute, transport_reparam)
from .gn import GnReport, gauss_newton
from .plan import StagePlan, TreePlan, build_plan
from .tree import SolveReport, TreeSolver

__all__ = [
    "FactorSet", "SolverOptions", "VarLayout", "apply_increment", "assemble",
    "evaluate_cost", "refresh_dependent_depths", "restore_states",
    "snapshot_states", "build_constrained", "build_normal_equations",
    "dense_solve", "PredictionJacobian", "back_substitute",
    "eliminate_prediction", "eliminate_scalars", "scalar_back_substitute",
    "schur_eliminate", "solve_full", "transport_back_substitute",
    "transport_reparam", "GnReport", "gauss_newton", "StagePlan", "TreePlan",
    "build_plan", "SolveReport", "TreeSolver",
]
