"""Reference solver: one dense normal-equation system over the whole window.

Slow but structurally trivial, this is the ground truth the staged solver is
checked against. Two formulations are provided:

* factor mode — every carry-over link is a weighted scalar residual
  (``generic`` solver mode);
* constrained mode — chained entries are eliminated exactly by the chain
  rule, leaving only root entries as coordinates (``zero_cov`` solver mode).
"""

from __future__ import annotations

from typing import Dict, Tuple

import numpy as np

from .. import kernels
from ..errors import DimensionMismatch
from ..factors import StateKey, key_dim, prior_delta
from ..state import WindowGraph
from .assemble import (FactorSet, SolverOptions, VarLayout, eval_imu,
                       eval_links, eval_visual)
from .elimination import solve_full


def _scatter_imu(H, b, layout: VarLayout, r, jac) -> None:
    keys = [k for k in jac if k in layout]
    cols = np.concatenate([np.arange(layout.slice(k).start, layout.slice(k).stop)
                           for k in keys])
    J = np.concatenate([jac[k] for k in keys], axis=1)
    H[np.ix_(cols, cols)] += J.T @ J
    b[cols] += -J.T @ r


def _add_prior(H, b, layout: VarLayout, graph: WindowGraph, fset: FactorSet):
    prior = fset.prior
    if prior is None:
        return
    cols = []
    for k in prior.keys:
        if k not in layout:
            raise DimensionMismatch(f"prior key {k} missing from the system")
        s = layout.slice(k)
        cols.extend(range(s.start, s.stop))
    cols = np.asarray(cols)
    d = prior_delta(prior, graph)
    H[np.ix_(cols, cols)] += prior.H
    b[cols] += prior.b - prior.H @ d


def build_normal_equations(graph: WindowGraph, fset: FactorSet,
                           opts: SolverOptions
                           ) -> Tuple[np.ndarray, np.ndarray]:
    """Factor-mode (H, b) over the full variable layout."""
    layout = fset.layout
    H = np.zeros((layout.dim, layout.dim))
    b = np.zeros(layout.dim)
    if fset.v_host.size:
        r, J, valid = eval_visual(fset, graph, with_jac=True)
        idx3 = np.stack([
            np.array([layout.offsets[("pose", int(k))] for k in fset.v_host]),
            np.array([layout.offsets[("pose", int(k))] for k in fset.v_target]),
            np.array([layout.offsets[fset.depth_keys[i]] for i in fset.v_depth]),
        ], axis=1).astype(np.int64)
        w = np.full(r.shape[0], fset.v_weight)
        kernels.accumulate_h_b(H, b, J, r, idx3, w, valid)
    if fset.l_host.size:
        if fset.l_weight is None:
            raise DimensionMismatch(
                "constrained links cannot enter a factor-mode system")
        _, r, J, valid = eval_links(fset, graph, with_jac=True)
        for i in range(fset.l_host.size):
            if not valid[i]:
                continue
            cols = np.concatenate([
                np.arange(6) + layout.offsets[("pose", int(fset.l_host[i]))],
                np.arange(6) + layout.offsets[("pose", int(fset.l_target[i]))],
                [layout.offsets[fset.depth_keys[fset.l_parent[i]]],
                 layout.offsets[fset.depth_keys[fset.l_child[i]]]],
            ])
            row = np.concatenate([J[i], [-1.0]])
            H[np.ix_(cols, cols)] += fset.l_weight * np.outer(row, row)
            b[cols] += -fset.l_weight * row * r[i]
    for (r, jac) in eval_imu(fset, graph, with_jac=True):
        _scatter_imu(H, b, layout, r, jac)
    _add_prior(H, b, layout, graph, fset)
    return H, b


def _chain_rows(graph: WindowGraph, fset: FactorSet, free: VarLayout
                ) -> Dict[StateKey, np.ndarray]:
    """Per-entry gradient rows w.r.t. the free variables (constrained mode)."""
    rows: Dict[StateKey, np.ndarray] = {}
    for k in fset.depth_keys:
        if k in free:
            row = np.zeros(free.dim)
            row[free.offsets[k]] = 1.0
            rows[k] = row
    if fset.l_host.size:
        _, _, J, valid = eval_links(fset, graph, with_jac=True)
        order = np.argsort(fset.l_target, kind="stable")
        for i in order:
            if not valid[i]:
                raise DimensionMismatch("invalid carry-over in constrained build")
            parent = fset.depth_keys[fset.l_parent[i]]
            child = fset.depth_keys[fset.l_child[i]]
            row = J[i, 12] * rows[parent].copy()
            hs = free.slice(("pose", int(fset.l_host[i])))
            ts = free.slice(("pose", int(fset.l_target[i])))
            row[hs] += J[i, 0:6]
            row[ts] += J[i, 6:12]
            rows[child] = row
    return rows


def build_constrained(graph: WindowGraph, fset: FactorSet, opts: SolverOptions):
    """Constrained-mode (H, b) over the free variables plus the chain rows."""
    dependent = set()
    for i in range(fset.l_child.size):
        dependent.add(fset.depth_keys[fset.l_child[i]])
    free = VarLayout([k for k in fset.layout.keys if k not in dependent])
    rows = _chain_rows(graph, fset, free)
    H = np.zeros((free.dim, free.dim))
    b = np.zeros(free.dim)
    if fset.v_host.size:
        r, J, valid = eval_visual(fset, graph, with_jac=True)
        for i in range(fset.v_host.size):
            if not valid[i]:
                continue
            dkey = fset.depth_keys[fset.v_depth[i]]
            Jrow = np.zeros((2, free.dim))
            hs = free.slice(("pose", int(fset.v_host[i])))
            ts = free.slice(("pose", int(fset.v_target[i])))
            Jrow[:, hs] += J[i, :, 0:6]
            Jrow[:, ts] += J[i, :, 6:12]
            Jrow += J[i, :, 12:13] * rows[dkey][None, :]
            H += fset.v_weight * Jrow.T @ Jrow
            b += -fset.v_weight * Jrow.T @ r[i]
    for (r, jac) in eval_imu(fset, graph, with_jac=True):
        _scatter_imu(H, b, free, r, jac)
    _add_prior(H, b, free, graph, fset)
    return H, b, free, rows


def dense_solve(graph: WindowGraph, fset: FactorSet, opts: SolverOptions
                ) -> Dict[StateKey, np.ndarray]:
    """Solve the whole window densely; returns increments for every key."""
    if opts.mode == "generic":
        H, b = build_normal_equations(graph, fset, opts)
        delta = solve_full(H, b)
        return {k: delta[fset.layout.slice(k)] for k in fset.layout.keys}
    H, b, free, rows = build_constrained(graph, fset, opts)
    delta = solve_full(H, b)
    out = {k: delta[free.slice(k)] for k in free.keys}
    for k in fset.layout.keys:
        if k not in out:
            out[k] = np.array([rows[k] @ delta])
    return out
