"""Damped Gauss-Newton driver over a window graph.

Each iteration takes one staged solve, then retracts the increment with
step halving until the objective does not increase. Chained depth entries
are recomputed exactly inside the retraction, so a carry-over that leaves
the valid depth range simply rejects the step.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from ..errors import DivergedSolve, NonPositiveDepth
from ..state import WindowGraph
from .assemble import (SolverOptions, assemble, apply_increment,
                       evaluate_cost, restore_states, snapshot_states)
from .plan import build_plan
from .tree import SolveReport, TreeSolver


@dataclass
class GnReport:
    iterations: int = 0
    initial_cost: float = 0.0
    final_cost: float = 0.0
    converged: bool = False
    costs: List[float] = field(default_factory=list)
    steps: List[SolveReport] = field(default_factory=list)


def gauss_newton(graph: WindowGraph, opts: Optional[SolverOptions] = None,
                 solver: Optional[TreeSolver] = None) -> GnReport:
    """Optimize the window in place; returns the iteration record.

    A persistent solver can be passed in so its stage caches survive across
    windows; otherwise a throwaway one is created.
    """
    opts = opts or (solver.opts if solver is not None else SolverOptions())
    own = solver is None
    if own:
        solver = TreeSolver(opts)
    fset = assemble(graph, opts)
    plan = build_plan(graph, fset)
    cost = evaluate_cost(graph, fset)
    report = GnReport(initial_cost=cost, final_cost=cost, costs=[cost])
    try:
        for it in range(opts.max_iterations):
            snap = snapshot_states(graph)
            delta, step = solver.solve(graph, fset, plan)
            report.steps.append(step)
            step_inf = max((float(np.max(np.abs(np.atleast_1d(v))))
                            for v in delta.values()), default=0.0)
            if step_inf < opts.step_tol:
                # at the minimum to machine precision; cost comparisons
                # below this level are float jitter
                report.converged = True
                break
            scale = 1.0
            accepted = False
            new_cost = cost
            for _ in range(opts.max_step_halvings + 1):
                try:
                    apply_increment(
                        graph, {k: v * scale for k, v in delta.items()}, opts)
                    new_cost = evaluate_cost(graph, fset)
                except NonPositiveDepth:
                    restore_states(graph, snap)
                    scale *= 0.5
                    continue
                if new_cost <= cost:
                    accepted = True
                    break
                restore_states(graph, snap)
                scale *= 0.5
            if not accepted:
                if it == 0:
                    raise DivergedSolve(
                        "first iteration increased the objective at every "
                        "step scale")
                break
            report.iterations = it + 1
            rel = (cost - new_cost) / max(cost, 1e-300)
            cost = new_cost
            report.costs.append(cost)
            if rel < opts.rel_decrease:
                report.converged = True
                break
    finally:
        if own:
            solver.close()
    report.final_cost = cost
    return report
