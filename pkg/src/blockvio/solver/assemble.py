"""Problem assembly: window graph -> batched factor arrays and state updates.

The solvers never walk the graph directly; :func:`assemble` flattens it once
per structure change into index arrays aligned with the kernel batch layout,
and the evaluation helpers gather current state values into those arrays.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from .. import geometry as geo
from .. import kernels
from ..errors import NonPositiveDepth, NoValidReference
from ..factors import (ImuFactor, PriorFactor, StateKey, key_dim,
                       imu_residual, prior_delta)
from ..state import WindowGraph, reference_frame_index

ROOT_STAGE = 1 << 30


@dataclass
class SolverOptions:
    """Knobs shared by the tree and dense solvers."""

    mode: str = "zero_cov"            # "zero_cov" | "generic"
    sigma_v: float = 1.0 / 460.0      # image-residual stdev (normalized plane)
    sigma_d: float = 1e-5             # carry-over stdev, generic mode only
    tau: float = 1e-3                 # stage linearization-reuse threshold
    threads: int = 1
    chunk: int = 64                   # fixed branch-chunk size (determinism)
    max_iterations: int = 10
    max_step_halvings: int = 5
    rel_decrease: float = 1e-8
    step_tol: float = 1e-10           # increment below this means converged

    def __post_init__(self):
        if self.mode not in ("zero_cov", "generic"):
            raise ValueError(f"unknown solver mode {self.mode!r}")


class VarLayout:
    """Ordered state keys with dense offsets."""

    def __init__(self, keys: List[StateKey]):
        self.keys = list(keys)
        self.offsets: Dict[StateKey, int] = {}
        off = 0
        for k in self.keys:
            self.offsets[k] = off
            off += key_dim(k)
        self.dim = off

    def slice(self, key: StateKey) -> slice:
        off = self.offsets[key]
        return slice(off, off + key_dim(key))

    def __contains__(self, key: StateKey) -> bool:
        return key in self.offsets


def stage_of_key(key: StateKey, graph: WindowGraph) -> int:
    kind = key[0]
    if kind in ("pose", "vel", "bias"):
        return graph.layout.block_of(key[1])
    if kind == "depth":
        return graph.layout.block_of(key[2])
    return ROOT_STAGE


@dataclass
class FactorSet:
    """Flattened window problem: batch arrays plus per-factor metadata."""

    layout: VarLayout
    stages: Dict[StateKey, int]
    num_stages: int
    mode: str
    # observation batch
    v_host: np.ndarray
    v_target: np.ndarray
    v_depth: np.ndarray               # row -> index into depth_keys
    v_f: np.ndarray
    v_u: np.ndarray
    v_stage: np.ndarray
    v_weight: float
    depth_keys: List[StateKey]
    # carry-over links (parent entry -> next entry of the same feature)
    l_parent: np.ndarray              # index into depth_keys
    l_child: np.ndarray               # index into depth_keys
    l_host: np.ndarray                # frame of the parent entry
    l_target: np.ndarray              # frame of the child entry
    l_f: np.ndarray
    l_stage: np.ndarray
    l_weight: Optional[float]         # None in zero_cov mode
    # inertial factors and the prior
    imu: List[ImuFactor] = field(default_factory=list)
    imu_stage: List[int] = field(default_factory=list)
    prior: Optional[PriorFactor] = None
    prior_stage: int = ROOT_STAGE

    def depth_key_index(self) -> Dict[StateKey, int]:
        return {k: i for i, k in enumerate(self.depth_keys)}


def _variables(graph: WindowGraph) -> List[StateKey]:
    keys: List[StateKey] = []
    for kf in graph.frames:
        k = kf.frame_index
        keys.extend([("pose", k), ("vel", k), ("bias", k)])
    depth_keys = []
    for tid in sorted(graph.tracks):
        track = graph.tracks[tid]
        for ref in sorted(track.depth_entries):
            depth_keys.append(("depth", tid, ref))
    depth_keys.sort(key=lambda k: (k[2], k[1]))
    keys.extend(depth_keys)
    keys.extend([("scale",), ("qiv",)])
    return keys


def assemble(graph: WindowGraph, opts: SolverOptions) -> FactorSet:
    """Flatten the current window structure into batch arrays."""
    layout = VarLayout(_variables(graph))
    stages = {k: stage_of_key(k, graph) for k in layout.keys}
    num_stages = max(1, graph.num_blocks())

    depth_keys = [k for k in layout.keys if k[0] == "depth"]
    dindex = {k: i for i, k in enumerate(depth_keys)}

    v_host, v_target, v_depth, v_f, v_u = [], [], [], [], []
    l_parent, l_child, l_host, l_target, l_f = [], [], [], [], []
    for tid in sorted(graph.tracks):
        track = graph.tracks[tid]
        if not track.depth_entries:
            continue
        for k in sorted(track.observations):
            try:
                host = reference_frame_index(track, k, graph.layout)
            except NoValidReference:
                continue
            dkey = ("depth", tid, host)
            if dkey not in dindex:
                continue  # not anchored yet; joins once the entry exists
            v_host.append(host)
            v_target.append(k)
            v_depth.append(dindex[dkey])
            v_f.append(geo.back_project(track.observations[host]))
            v_u.append(np.asarray(track.observations[k], dtype=float))
        for ref in sorted(track.depth_entries):
            entry = track.depth_entries[ref]
            parent = entry.predicted_from
            if parent is None:
                continue
            pkey = ("depth", tid, parent)
            if pkey not in dindex:
                continue
            l_parent.append(dindex[pkey])
            l_child.append(dindex[("depth", tid, ref)])
            l_host.append(parent)
            l_target.append(ref)
            l_f.append(geo.back_project(track.observations[parent]))

    def arr(x, dtype=np.int64):
        return np.asarray(x, dtype=dtype) if x else np.zeros(0, dtype=dtype)

    v_host_a = arr(v_host)
    v_target_a = arr(v_target)
    block = graph.layout.block_of
    # a factor is owned by the earliest stage of any variable it touches;
    # the fallback reference can host at a frame later than the target
    v_stage = (np.array([min(block(h), block(t))
                         for h, t in zip(v_host, v_target)], dtype=np.int64)
               if v_host else np.zeros(0, dtype=np.int64))
    l_host_a = arr(l_host)
    l_stage = (np.array([min(block(h), block(t))
                         for h, t in zip(l_host, l_target)], dtype=np.int64)
               if l_host else np.zeros(0, dtype=np.int64))

    fset = FactorSet(
        layout=layout, stages=stages, num_stages=num_stages, mode=opts.mode,
        v_host=v_host_a, v_target=v_target_a, v_depth=arr(v_depth),
        v_f=arr(v_f, float).reshape(-1, 3), v_u=arr(v_u, float).reshape(-1, 2),
        v_stage=v_stage, v_weight=1.0 / opts.sigma_v ** 2,
        depth_keys=depth_keys,
        l_parent=arr(l_parent), l_child=arr(l_child), l_host=l_host_a,
        l_target=arr(l_target), l_f=arr(l_f, float).reshape(-1, 3),
        l_stage=l_stage,
        l_weight=None if opts.mode == "zero_cov" else 1.0 / opts.sigma_d ** 2,
    )
    for fac in graph.imu_factors:
        fset.imu.append(fac)
        fset.imu_stage.append(block(fac.i))
    if graph.prior is not None:
        fset.prior = graph.prior
        fset.prior_stage = min(stages.get(k, ROOT_STAGE) for k in graph.prior.keys)
    return fset


# ---------------------------------------------------------------------------
# state gathering and batched evaluation


def gather_states(fset: FactorSet, graph: WindowGraph):
    """Current per-frame pose arrays and depth values in batch order."""
    n = len(graph.frames)
    q = np.empty((n, 4))
    p = np.empty((n, 3))
    for i, kf in enumerate(graph.frames):
        q[i] = kf.pose.q
        p[i] = kf.pose.p
    lam = np.array([graph.tracks[k[1]].depth_entries[k[2]].inverse_depth
                    for k in fset.depth_keys], dtype=float)
    return q, p, lam


def eval_visual(fset: FactorSet, graph: WindowGraph, with_jac: bool):
    q, p, lam = gather_states(fset, graph)
    hi = fset.v_host - 1
    ti = fset.v_target - 1
    args = (q[hi], p[hi], q[ti], p[ti], lam[fset.v_depth], fset.v_f, fset.v_u)
    if with_jac:
        return kernels.visual_eval_jac(*args)
    r, valid = kernels.visual_eval(*args)
    return r, None, valid


def eval_links(fset: FactorSet, graph: WindowGraph, with_jac: bool = True):
    """Carry-over maps: predicted value, residual vs child, gradient."""
    q, p, lam = gather_states(fset, graph)
    hi = fset.l_host - 1
    ti = fset.l_target - 1
    pred, J, valid = kernels.predict_eval_jac(
        q[hi], p[hi], q[ti], p[ti], lam[fset.l_parent], fset.l_f)
    r = pred - lam[fset.l_child]
    r[valid == 0] = 0.0
    return pred, r, (J if with_jac else None), valid


def eval_imu(fset: FactorSet, graph: WindowGraph, with_jac: bool):
    out = []
    for fac in fset.imu:
        out.append(imu_residual(graph.frame(fac.i), graph.frame(fac.j),
                                graph.global_state, fac.pre,
                                with_jacobians=with_jac))
    return out


def evaluate_cost(graph: WindowGraph, fset: FactorSet) -> float:
    """Total quadratic objective at the current states."""
    cost = 0.0
    if fset.v_host.size:
        r, _, _ = eval_visual(fset, graph, with_jac=False)
        cost += fset.v_weight * float(np.sum(r * r))
    if fset.l_weight is not None and fset.l_host.size:
        _, r, _, _ = eval_links(fset, graph, with_jac=False)
        cost += fset.l_weight * float(np.sum(r * r))
    for r, _ in eval_imu(fset, graph, with_jac=False):
        cost += float(r @ r)
    if fset.prior is not None:
        d = prior_delta(fset.prior, graph)
        cost += float(d @ fset.prior.H @ d - 2.0 * fset.prior.b @ d)
    return cost


# ---------------------------------------------------------------------------
# state updates


def snapshot_states(graph: WindowGraph):
    frames = [(kf.pose.copy(), kf.velocity.copy(), kf.gyro_bias.copy(),
               kf.accel_bias.copy()) for kf in graph.frames]
    depths = {(tid, ref): e.inverse_depth
              for tid, tr in graph.tracks.items()
              for ref, e in tr.depth_entries.items()}
    return frames, graph.global_state.copy(), depths


def restore_states(graph: WindowGraph, snap) -> None:
    frames, g, depths = snap
    for kf, (pose, vel, bg, ba) in zip(graph.frames, frames):
        kf.pose, kf.velocity, kf.gyro_bias, kf.accel_bias = (
            pose.copy(), vel.copy(), bg.copy(), ba.copy())
    graph.global_state = g.copy()
    for (tid, ref), lam in depths.items():
        graph.tracks[tid].depth_entries[ref].inverse_depth = lam


def refresh_dependent_depths(graph: WindowGraph) -> None:
    """Recompute chained entries exactly from their parents (zero_cov)."""
    for tid in sorted(graph.tracks):
        track = graph.tracks[tid]
        for ref in sorted(track.depth_entries):
            entry = track.depth_entries[ref]
            parent = entry.predicted_from
            if parent is None or parent not in track.depth_entries:
                continue
            lam_p = track.depth_entries[parent].inverse_depth
            f = geo.back_project(track.observations[parent])[None, :]
            kf_p = graph.frame(parent)
            kf_c = graph.frame(ref)
            pred, _, ok = kernels.predict_eval_jac(
                kf_p.pose.q[None], kf_p.pose.p[None],
                kf_c.pose.q[None], kf_c.pose.p[None],
                np.array([lam_p]), f)
            if not ok[0]:
                raise NonPositiveDepth(
                    f"carry-over of feature {tid} at frame {ref} left the "
                    "valid depth range")
            entry.inverse_depth = float(pred[0])


def apply_increment(graph: WindowGraph, delta: Dict[StateKey, np.ndarray],
                    opts: SolverOptions) -> None:
    """Retract the solution increment onto the graph states, in place.

    In zero_cov mode only root entries take their increment directly; the
    chained entries are recomputed exactly afterwards.
    """
    for kf in graph.frames:
        k = kf.frame_index
        d = delta.get(("pose", k))
        if d is not None:
            kf.pose = geo.boxplus(kf.pose, d)
        d = delta.get(("vel", k))
        if d is not None:
            kf.velocity = kf.velocity + d
        d = delta.get(("bias", k))
        if d is not None:
            kf.gyro_bias = kf.gyro_bias + d[0:3]
            kf.accel_bias = kf.accel_bias + d[3:6]
    d = delta.get(("scale",))
    if d is not None:
        graph.global_state.scale += float(np.asarray(d).ravel()[0])
    d = delta.get(("qiv",))
    if d is not None:
        graph.global_state.q_iv = geo.quat_normalize(
            geo.quat_mul(graph.global_state.q_iv, geo.quat_exp(d)))
    zero_cov = opts.mode == "zero_cov"
    for tid, track in graph.tracks.items():
        for ref, entry in track.depth_entries.items():
            if zero_cov and entry.predicted_from is not None:
                continue
            d = delta.get(("depth", tid, ref))
            if d is not None:
                entry.inverse_depth += float(np.asarray(d).ravel()[0])
    if zero_cov:
        refresh_dependent_depths(graph)
