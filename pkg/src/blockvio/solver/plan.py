"""Stage planning: fronts, elimination tiers, and carries per block.

The window factors form a chain over blocks: every factor is accumulated at
the earliest block any of its variables belongs to, each stage eliminates
exactly its own variables, and whatever they couple to is carried into the
next stage. Stage order and the group order inside a stage are fixed, so a
plan built from the same structure is always identical.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from ..factors import StateKey
from ..state import WindowGraph
from .assemble import ROOT_STAGE, FactorSet, VarLayout


@dataclass
class StagePlan:
    """One supernode: its working front and ordered elimination groups."""

    stage: int
    front_keys: List[StateKey]
    scalar_depths: List[StateKey]         # uncoupled, batched scalar pivots
    joint_depths: List[StateKey]          # coupled through carry or prior
    inner_frames: List[StateKey]          # non-first frame states of the block
    transports: List[int]                 # link rows, parent entries this stage
    first_frame: List[StateKey]           # block-first frame states
    carry_keys: List[StateKey]
    vis_rows: np.ndarray
    link_rows: np.ndarray
    imu_idx: List[int]
    has_prior: bool

    def eliminated_keys(self) -> List[StateKey]:
        out = list(self.scalar_depths) + list(self.joint_depths)
        out += list(self.inner_frames) + list(self.first_frame)
        return out


@dataclass
class TreePlan:
    stages: List[StagePlan]
    root_core_keys: List[StateKey]        # solved densely after root groups


def _prior_at(fset: FactorSet, stage: int, num: int) -> bool:
    """A prior over shared states only is owned by the root stage."""
    return fset.prior_stage == stage or (stage == num
                                         and fset.prior_stage == ROOT_STAGE)


def build_plan(graph: WindowGraph, fset: FactorSet) -> TreePlan:
    layout = fset.layout
    stages = fset.stages
    num = fset.num_stages
    block = graph.layout.block_of
    first_of_block = graph.layout.block_first

    def factor_keys_at(stage: int) -> List[StateKey]:
        keys: List[StateKey] = []
        rows = np.nonzero(fset.v_stage == stage)[0]
        for i in rows:
            keys.append(("pose", int(fset.v_host[i])))
            keys.append(("pose", int(fset.v_target[i])))
            keys.append(fset.depth_keys[fset.v_depth[i]])
        for i in np.nonzero(fset.l_stage == stage)[0]:
            keys.append(("pose", int(fset.l_host[i])))
            keys.append(("pose", int(fset.l_target[i])))
            keys.append(fset.depth_keys[fset.l_parent[i]])
            keys.append(fset.depth_keys[fset.l_child[i]])
        for j, fac in enumerate(fset.imu):
            if fset.imu_stage[j] == stage:
                keys.extend(fac.keys())
        if fset.prior is not None and _prior_at(fset, stage, num):
            keys.extend(fset.prior.keys)
        return keys

    def ordered(keys) -> List[StateKey]:
        uniq = sorted(set(keys), key=lambda k: layout.offsets[k])
        return uniq

    carry: List[StateKey] = []
    plans: List[StagePlan] = []
    prior_depths = set()
    if fset.prior is not None:
        prior_depths = {k for k in fset.prior.keys if k[0] == "depth"}

    for s in range(1, num + 1):
        stage_vars = [k for k in layout.keys
                      if stages[k] == s or (s == num and stages[k] == ROOT_STAGE)]
        touched = factor_keys_at(s)
        front = ordered(stage_vars + [k for k in touched if stages[k] > s
                                      and stages[k] != ROOT_STAGE]
                        + [k for k in touched if stages[k] == ROOT_STAGE]
                        + carry)
        front_set = set(front)
        for k in stage_vars:
            assert k in front_set
        carry_set = set(carry)

        link_rows = np.nonzero(fset.l_stage == s)[0]
        transport_parents = {fset.depth_keys[fset.l_parent[i]] for i in link_rows}
        depths_here = [k for k in stage_vars if k[0] == "depth"]
        scalar, joint = [], []
        for k in depths_here:
            if k in transport_parents:
                continue
            if k in carry_set or k in prior_depths:
                joint.append(k)
            else:
                scalar.append(k)
        bf = first_of_block(s)
        frames_here = sorted({k[1] for k in stage_vars if k[0] == "pose"})
        inner = [(kind, f) for f in frames_here if f != bf
                 for kind in ("pose", "vel", "bias")]
        first = ([(kind, bf) for kind in ("pose", "vel", "bias")]
                 if bf in frames_here else [])
        if s == num:
            # the root keeps its frames and shared states for the dense core
            inner, first = [], []

        plan = StagePlan(
            stage=s, front_keys=front,
            scalar_depths=ordered(scalar), joint_depths=ordered(joint),
            inner_frames=inner, transports=list(link_rows),
            first_frame=first,
            carry_keys=[],
            vis_rows=np.nonzero(fset.v_stage == s)[0],
            link_rows=link_rows,
            imu_idx=[j for j in range(len(fset.imu)) if fset.imu_stage[j] == s],
            has_prior=fset.prior is not None and _prior_at(fset, s, num),
        )
        if s == num:
            eliminated = set(plan.scalar_depths) | set(plan.joint_depths)
            # parents of root-stage links stay in the core (no later stage)
            plan.carry_keys = []
            core = [k for k in front if k not in eliminated]
            plans.append(plan)
            return TreePlan(stages=plans, root_core_keys=core)
        eliminated = set(plan.eliminated_keys())
        eliminated |= {fset.depth_keys[fset.l_parent[i]] for i in link_rows}
        plan.carry_keys = [k for k in front if k not in eliminated]
        carry = plan.carry_keys
        plans.append(plan)
    raise AssertionError("unreachable: plan must end at the root stage")
