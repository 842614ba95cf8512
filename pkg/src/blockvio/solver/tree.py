"""Staged window solver: one supernode per keyframe block, eliminated in order.

Each stage assembles a dense front over its block's variables, the boundary
states they couple to, and whatever the previous stage carried in. Groups are
eliminated in a fixed order:

1. fresh depth entries, mutually uncoupled — batched scalar pivots;
2. depth entries coupled through the carried boundary or a prior — one
   dense pivot block;
3. carry-over of continuing features into their next entry (exact
   reparametrization in ``zero_cov`` mode; in ``generic`` mode the links
   were accumulated as weighted rows and the parents are eliminated as an
   ordinary block);
4. the block's non-first frames;
5. the block's first frame.

What survives is carried into the next stage; the last stage keeps its
frames plus the shared states as the dense core. Every group records the
operators of its reduction, so a stage whose linearization is still fresh
is skipped: only the right-hand side is swept through the frozen operators.
Freshness is measured per stage as the squared whitened gap between the
first-order residual prediction from the frozen expansion point and the
actual residuals; a stage may only be skipped while every earlier stage is
also skipped, because a refreshed stage changes the carried matrix. In
``zero_cov`` mode the carry-over rows are excluded from the measure —
dependent entries are recomputed exactly after every accepted step, so
their drift already shows up in the observation rows.
"""

from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np

from .. import kernels
from ..errors import (DegeneratePredictionJacobian, DimensionMismatch,
                      NonPositiveDepth)
from ..factors import (StateKey, boxminus, imu_residual, key_dim,
                       prior_delta, state_value)
from ..geometry import Pose
from ..state import WindowGraph
from .assemble import (FactorSet, SolverOptions, VarLayout, eval_imu,
                       gather_states)
from .elimination import (back_substitute, eliminate_scalars,
                          scalar_back_substitute, schur_eliminate, solve_full)
from .plan import StagePlan, TreePlan, build_plan

_SIX = np.arange(6)


def _front_cols(front: VarLayout, keys) -> np.ndarray:
    if not keys:
        return np.zeros(0, dtype=np.int64)
    return np.concatenate([
        np.arange(front.offsets[k], front.offsets[k] + key_dim(k))
        for k in keys]).astype(np.int64)


def _freeze(value):
    if isinstance(value, Pose):
        return value.copy()
    if isinstance(value, np.ndarray):
        return value.copy()
    return float(value)


# ---------------------------------------------------------------------------
# elimination groups: each one can rerun its right-hand-side reduction and
# recover its pivots from the retained increments


@dataclass
class _ScalarGroup:
    cols: np.ndarray          # front coordinates of the pivots
    rest: np.ndarray          # front coordinates still active afterwards
    local: np.ndarray         # pivot positions within the incoming vector
    rest_local: np.ndarray
    K: np.ndarray
    safe: np.ndarray
    b_pivot: np.ndarray = None

    def reduce_vector(self, bw: np.ndarray) -> np.ndarray:
        self.b_pivot = bw[self.local].copy()
        return bw[self.rest_local] - self.K.T @ self.b_pivot

    def back(self, dvec: np.ndarray) -> None:
        dvec[self.cols] = scalar_back_substitute(
            self.safe, self.K, self.b_pivot, dvec[self.rest])


@dataclass
class _BlockGroup:
    cols: np.ndarray
    rest: np.ndarray
    local: np.ndarray
    rest_local: np.ndarray
    K: np.ndarray
    L: np.ndarray
    b_pivot: np.ndarray = None

    def reduce_vector(self, bw: np.ndarray) -> np.ndarray:
        self.b_pivot = bw[self.local].copy()
        return bw[self.rest_local] - self.K.T @ self.b_pivot

    def back(self, dvec: np.ndarray) -> None:
        dvec[self.cols] = back_substitute(
            self.L, self.K, self.b_pivot, dvec[self.rest])


@dataclass
class _TransportGroup:
    """Exact substitution of parent entries by their carried-over children.

    ``delta_parent = -G * (T @ delta_rest)`` with ``T`` the frozen gradient
    of (carry-over map minus child) over the retained coordinates.
    """

    p_cols: np.ndarray        # front coordinates of the parents
    rest: np.ndarray          # front coordinates retained (children included)
    local: np.ndarray
    rest_local: np.ndarray
    T: np.ndarray             # [n_parents, n_rest]
    G: np.ndarray             # [n_parents] inverse carry-over gradients

    def reduce_vector(self, bw: np.ndarray) -> np.ndarray:
        return bw[self.rest_local] - self.T.T @ (self.G * bw[self.local])

    def back(self, dvec: np.ndarray) -> None:
        dvec[self.p_cols] = -self.G * (self.T @ dvec[self.rest])


@dataclass
class _StageCache:
    token: tuple
    front: VarLayout
    front_keys: List[StateKey]
    x0_vals: list
    carry_in_cols: Optional[np.ndarray]
    # frozen observation rows
    vis_idx3: np.ndarray
    vis_cols13: np.ndarray
    vis_J0: np.ndarray
    vis_r0: np.ndarray
    vis_valid0: np.ndarray
    # frozen carry-over rows (generic mode only carries factor rows)
    link_cols14: np.ndarray
    link_row14: np.ndarray
    link_r0: np.ndarray
    link_valid0: np.ndarray
    # frozen inertial rows
    imu_cols: list
    imu_J0: list
    imu_r0: list
    prior_cols: Optional[np.ndarray]
    prior_delta0: Optional[np.ndarray]
    groups: list = field(default_factory=list)
    H_carry: np.ndarray = None
    b_carry: np.ndarray = None


@dataclass
class SolveReport:
    """What one staged solve did: which stages were reused, and why."""

    refreshed: List[int] = field(default_factory=list)
    skipped: List[int] = field(default_factory=list)
    staleness: Dict[int, float] = field(default_factory=dict)
    core_dim: int = 0
    timings: Dict[str, float] = field(default_factory=dict)


class TreeSolver:
    """Block-staged Gauss-Newton step solver with stage reuse.

    Caches per-stage factorizations keyed by the block's first frame, so a
    sliding window keeps reusing the untouched blocks' work across solves.
    """

    def __init__(self, opts: Optional[SolverOptions] = None):
        self.opts = opts or SolverOptions()
        self._caches: Dict[int, _StageCache] = {}
        self._pool: Optional[ThreadPoolExecutor] = None

    # -- lifecycle ---------------------------------------------------------

    def close(self) -> None:
        if self._pool is not None:
            self._pool.shutdown()
            self._pool = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
        return False

    def _get_pool(self) -> Optional[ThreadPoolExecutor]:
        if self.opts.threads and self.opts.threads > 1:
            if self._pool is None:
                self._pool = ThreadPoolExecutor(max_workers=self.opts.threads)
            return self._pool
        return None

    # -- structure identity --------------------------------------------------

    @staticmethod
    def _stage_key(graph: WindowGraph, sp: StagePlan) -> int:
        return graph.frame(graph.layout.block_first(sp.stage)).global_id

    def _token(self, graph: WindowGraph, fset: FactorSet, sp: StagePlan,
               prev_carry: List[StateKey], is_root: bool) -> tuple:
        gid = lambda k: graph.frame(int(k)).global_id

        def key_id(k: StateKey):
            if k[0] in ("pose", "vel", "bias"):
                return (k[0], gid(k[1]))
            if k[0] == "depth":
                return ("depth", k[1], gid(k[2]))
            return k

        vis = tuple((gid(fset.v_host[i]), gid(fset.v_target[i]),
                     key_id(fset.depth_keys[fset.v_depth[i]]))
                    for i in sp.vis_rows)
        links = tuple((fset.depth_keys[fset.l_parent[i]][1],
                       gid(fset.l_host[i]), gid(fset.l_target[i]))
                      for i in sp.link_rows)
        imu = tuple((gid(fset.imu[j].i), gid(fset.imu[j].j),
                     fset.imu[j].pre.serial) for j in sp.imu_idx)
        prior = fset.prior.serial if sp.has_prior else 0
        return (
            self.opts.mode, fset.v_weight, fset.l_weight, is_root,
            tuple(key_id(k) for k in sp.front_keys),
            tuple(key_id(k) for k in sp.scalar_depths),
            tuple(key_id(k) for k in sp.joint_depths),
            tuple(key_id(k) for k in sp.inner_frames),
            tuple(key_id(k) for k in sp.first_frame),
            tuple(key_id(k) for k in sp.carry_keys),
            tuple(key_id(k) for k in prev_carry),
            vis, links, imu, prior,
        )

    @staticmethod
    def _rekey(cache: _StageCache, sp: StagePlan) -> None:
        """Rebind a structurally identical cache to the current key tuples.

        A window rebase renames frame indices without touching any value;
        the token (built from stable ids) still matches, but the cached
        layout is keyed by the old tuples. Offsets are positional, so only
        the key-to-offset maps need rebuilding.
        """
        if cache.front_keys != sp.front_keys:
            cache.front = VarLayout(sp.front_keys)
            cache.front_keys = list(sp.front_keys)

    # -- freshness ----------------------------------------------------------

    def _front_delta(self, graph: WindowGraph, sp: StagePlan,
                     cache: _StageCache) -> np.ndarray:
        dvec = np.zeros(cache.front.dim)
        for i, k in enumerate(sp.front_keys):
            dvec[cache.front.slice(k)] = boxminus(
                k, state_value(graph, k), cache.x0_vals[i])
        return dvec

    def _staleness(self, graph: WindowGraph, fset: FactorSet, sp: StagePlan,
                   cache: _StageCache, r_vis, r_link, imu_now) -> float:
        dvec = self._front_delta(graph, sp, cache)
        n = 0.0
        if sp.vis_rows.size:
            d13 = dvec[cache.vis_cols13]
            pred = cache.vis_r0 + np.einsum("nij,nj->ni", cache.vis_J0, d13)
            gap = pred - r_vis[sp.vis_rows]
            n += fset.v_weight * float(np.sum(gap * gap))
        if fset.l_weight is not None and sp.link_rows.size:
            pred = cache.link_r0 + np.sum(
                cache.link_row14 * dvec[cache.link_cols14], axis=1)
            gap = pred - r_link[sp.link_rows]
            n += fset.l_weight * float(np.sum(gap * gap))
        for pos, j in enumerate(sp.imu_idx):
            pred = cache.imu_r0[pos] + cache.imu_J0[pos] @ dvec[cache.imu_cols[pos]]
            gap = pred - imu_now[j]
            n += float(gap @ gap)
        if cache.prior_cols is not None:
            prior = fset.prior
            e = cache.prior_delta0 + dvec[cache.prior_cols] - prior_delta(prior, graph)
            n += float(e @ prior.H @ e)
        return n

    # -- forward passes -------------------------------------------------------

    def _refresh_stage(self, graph: WindowGraph, fset: FactorSet,
                       sp: StagePlan, token: tuple, is_root: bool,
                       prev_cache: Optional[_StageCache],
                       prev_carry: List[StateKey],
                       q, p, lam, link_J, link_r, link_valid,
                       ) -> _StageCache:
        opts = self.opts
        front = VarLayout(sp.front_keys)
        H = np.zeros((front.dim, front.dim))
        b = np.zeros(front.dim)

        carry_in = None
        if prev_cache is not None and prev_carry:
            carry_in = _front_cols(front, prev_carry)
            H[np.ix_(carry_in, carry_in)] += prev_cache.H_carry
            b[carry_in] += prev_cache.b_carry

        # observation rows
        rows = sp.vis_rows
        if rows.size:
            hi = fset.v_host[rows] - 1
            ti = fset.v_target[rows] - 1
            r0, J0, valid0 = kernels.visual_eval_jac(
                q[hi], p[hi], q[ti], p[ti], lam[fset.v_depth[rows]],
                fset.v_f[rows], fset.v_u[rows])
            idx3 = np.stack([
                np.array([front.offsets[("pose", int(k))] for k in fset.v_host[rows]]),
                np.array([front.offsets[("pose", int(k))] for k in fset.v_target[rows]]),
                np.array([front.offsets[fset.depth_keys[i]] for i in fset.v_depth[rows]]),
            ], axis=1).astype(np.int64)
            cols13 = np.concatenate(
                [idx3[:, 0:1] + _SIX, idx3[:, 1:2] + _SIX, idx3[:, 2:3]], axis=1)
            w = np.full(rows.size, fset.v_weight)
            kernels.accumulate_h_b(H, b, J0, r0, idx3, w, valid0)
        else:
            r0 = np.zeros((0, 2))
            J0 = np.zeros((0, 2, 13))
            valid0 = np.zeros(0, dtype=np.uint8)
            idx3 = np.zeros((0, 3), dtype=np.int64)
            cols13 = np.zeros((0, 13), dtype=np.int64)

        # carry-over rows as weighted factors (generic mode)
        lrows = sp.link_rows
        link_cols14 = np.zeros((0, 14), dtype=np.int64)
        link_row14 = np.zeros((0, 14))
        link_r0 = np.zeros(0)
        link_valid0 = np.zeros(0, dtype=np.uint8)
        if lrows.size:
            link_valid0 = link_valid[lrows].copy()
            link_r0 = link_r[lrows].copy()
            cols_list, row_list = [], []
            for i in lrows:
                cols = np.concatenate([
                    front.offsets[("pose", int(fset.l_host[i]))] + _SIX,
                    front.offsets[("pose", int(fset.l_target[i]))] + _SIX,
                    [front.offsets[fset.depth_keys[fset.l_parent[i]]],
                     front.offsets[fset.depth_keys[fset.l_child[i]]]],
                ])
                row = np.concatenate([link_J[i], [-1.0]])
                if not link_valid[i]:
                    row = np.zeros(14)
                cols_list.append(cols)
                row_list.append(row)
            link_cols14 = np.asarray(cols_list, dtype=np.int64)
            link_row14 = np.asarray(row_list)
            if fset.l_weight is not None:
                for cols, row, resid in zip(link_cols14, link_row14, link_r0):
                    H[np.ix_(cols, cols)] += fset.l_weight * np.outer(row, row)
                    b[cols] += -fset.l_weight * row * resid

        # inertial rows
        imu_cols, imu_J0, imu_r0 = [], [], []
        for j in sp.imu_idx:
            fac = fset.imu[j]
            r, jac = imu_residual(graph.frame(fac.i), graph.frame(fac.j),
                                  graph.global_state, fac.pre,
                                  with_jacobians=True)
            cols = _front_cols(front, fac.keys())
            Jcat = np.concatenate([jac[k] for k in fac.keys()], axis=1)
            H[np.ix_(cols, cols)] += Jcat.T @ Jcat
            b[cols] += -Jcat.T @ r
            imu_cols.append(cols)
            imu_J0.append(Jcat)
            imu_r0.append(r)

        prior_cols = prior_delta0 = None
        if sp.has_prior:
            prior = fset.prior
            prior_cols = _front_cols(front, prior.keys)
            prior_delta0 = prior_delta(prior, graph)
            H[np.ix_(prior_cols, prior_cols)] += prior.H
            b[prior_cols] += prior.b - prior.H @ prior_delta0

        cache = _StageCache(
            token=token, front=front, front_keys=list(sp.front_keys),
            x0_vals=[_freeze(state_value(graph, k)) for k in sp.front_keys],
            carry_in_cols=carry_in,
            vis_idx3=idx3, vis_cols13=cols13, vis_J0=J0, vis_r0=r0,
            vis_valid0=np.asarray(valid0, dtype=np.uint8).copy(),
            link_cols14=link_cols14, link_row14=link_row14,
            link_r0=link_r0, link_valid0=link_valid0,
            imu_cols=imu_cols, imu_J0=imu_J0, imu_r0=imu_r0,
            prior_cols=prior_cols, prior_delta0=prior_delta0,
        )

        # elimination groups, on a shrinking working system
        work = np.arange(front.dim)
        Hw, bw = H, b
        pool = self._get_pool()

        def positions(cols):
            return np.searchsorted(work, cols)

        def run_scalars(keys):
            nonlocal Hw, bw, work
            cols = _front_cols(front, keys)
            if not cols.size:
                return
            local = positions(cols)
            rest_local = np.setdiff1d(np.arange(work.size), local)
            diag = Hw[local, local].copy()
            Hdr = Hw[np.ix_(local, rest_local)]
            bd = bw[local].copy()
            Hrr = Hw[np.ix_(rest_local, rest_local)]
            br = bw[rest_local].copy()
            K, safe = eliminate_scalars(diag, Hdr, bd, Hrr, br,
                                        chunk=opts.chunk, pool=pool)
            cache.groups.append(_ScalarGroup(
                cols=work[local], rest=work[rest_local], local=local,
                rest_local=rest_local, K=K, safe=safe, b_pivot=bd))
            Hw, bw, work = Hrr, br, work[rest_local]

        def run_block(keys):
            nonlocal Hw, bw, work
            cols = _front_cols(front, keys)
            if not cols.size:
                return
            local = positions(cols)
            rest_local = np.setdiff1d(np.arange(work.size), local)
            perm = np.concatenate([local, rest_local])
            Hp = Hw[np.ix_(perm, perm)]
            bp = bw[perm]
            H_red, b_red, K, L = schur_eliminate(Hp, bp, local.size)
            cache.groups.append(_BlockGroup(
                cols=work[local], rest=work[rest_local], local=local,
                rest_local=rest_local, K=K, L=L, b_pivot=bw[local].copy()))
            Hw, bw, work = H_red, b_red, work[rest_local]

        def run_transport():
            nonlocal Hw, bw, work
            rows = list(sp.transports)
            if not rows:
                return
            pcols = np.array([front.offsets[fset.depth_keys[fset.l_parent[i]]]
                              for i in rows], dtype=np.int64)
            order = np.argsort(pcols)
            rows = [rows[o] for o in order]
            pcols = pcols[order]
            for i in rows:
                if not link_valid[i]:
                    raise NonPositiveDepth(
                        "carry-over row left the valid depth range")
            Fd = np.array([link_J[i, 12] for i in rows])
            if np.any(np.abs(Fd) <= 1e-12):
                raise DegeneratePredictionJacobian(
                    "carry-over gradient vanishes; cannot substitute")
            local = positions(pcols)
            rest_local = np.setdiff1d(np.arange(work.size), local)
            cfront = work[rest_local]
            T = np.zeros((len(rows), cfront.size))
            for r_i, i in enumerate(rows):
                hcols = front.offsets[("pose", int(fset.l_host[i]))] + _SIX
                tcols = front.offsets[("pose", int(fset.l_target[i]))] + _SIX
                ccol = front.offsets[fset.depth_keys[fset.l_child[i]]]
                T[r_i, np.searchsorted(cfront, hcols)] += link_J[i, 0:6]
                T[r_i, np.searchsorted(cfront, tcols)] += link_J[i, 6:12]
                T[r_i, np.searchsorted(cfront, ccol)] -= 1.0
            G = 1.0 / Fd
            GT = G[:, None] * T
            Hcp = Hw[np.ix_(rest_local, local)]
            Hpp = Hw[np.ix_(local, local)]
            A = Hcp @ GT
            H_red = Hw[np.ix_(rest_local, rest_local)] - A - A.T + GT.T @ Hpp @ GT
            b_red = bw[rest_local] - GT.T @ bw[local]
            cache.groups.append(_TransportGroup(
                p_cols=work[local], rest=cfront, local=local,
                rest_local=rest_local, T=T, G=G))
            Hw, bw, work = H_red, b_red, work[rest_local]

        run_scalars(sp.scalar_depths)
        run_block(sp.joint_depths)
        if sp.transports:
            if fset.l_weight is None:
                run_transport()
            else:
                parents = sorted(
                    {fset.depth_keys[fset.l_parent[i]] for i in sp.transports},
                    key=lambda k: front.offsets[k])
                run_block(parents)
        run_block(sp.inner_frames)
        run_block(sp.first_frame)

        cache.H_carry = Hw
        cache.b_carry = bw
        if not is_root:
            expected = _front_cols(front, sp.carry_keys)
            assert np.array_equal(work, expected), "carry mismatch with plan"
        return cache

    def _sweep_stage(self, graph: WindowGraph, fset: FactorSet, sp: StagePlan,
                     cache: _StageCache, prev_cache: Optional[_StageCache],
                     r_vis, r_link, imu_now) -> None:
        """Right-hand-side-only pass through the frozen stage operators."""
        b = np.zeros(cache.front.dim)
        if cache.carry_in_cols is not None and prev_cache is not None:
            b[cache.carry_in_cols] += prev_cache.b_carry
        if sp.vis_rows.size:
            w = np.full(sp.vis_rows.size, fset.v_weight)
            kernels.accumulate_b(b, cache.vis_J0, r_vis[sp.vis_rows],
                                 cache.vis_idx3, w, cache.vis_valid0)
        if fset.l_weight is not None and sp.link_rows.size:
            resid = r_link[sp.link_rows]
            for cols, row, r_i in zip(cache.link_cols14, cache.link_row14, resid):
                b[cols] += -fset.l_weight * row * r_i
        for pos, j in enumerate(sp.imu_idx):
            b[cache.imu_cols[pos]] += -cache.imu_J0[pos].T @ imu_now[j]
        if cache.prior_cols is not None:
            prior = fset.prior
            b[cache.prior_cols] += prior.b - prior.H @ prior_delta(prior, graph)
        bw = b
        for g in cache.groups:
            bw = g.reduce_vector(bw)
        cache.b_carry = bw

    # -- the solve ------------------------------------------------------------

    def solve(self, graph: WindowGraph, fset: FactorSet,
              plan: Optional[TreePlan] = None):
        """One Gauss-Newton step over the window.

        Returns ``(delta, report)`` with increments for every state key.
        The factor set and plan must describe the graph's current structure.
        """
        opts = self.opts
        t_start = time.perf_counter()
        if plan is None:
            plan = build_plan(graph, fset)
        num = len(plan.stages)
        report = SolveReport()

        q, p, lam = gather_states(fset, graph)
        r_vis = valid_vis = None
        if fset.v_host.size:
            hi = fset.v_host - 1
            ti = fset.v_target - 1
            r_vis, valid_vis = kernels.visual_eval(
                q[hi], p[hi], q[ti], p[ti], lam[fset.v_depth], fset.v_f,
                fset.v_u)
        link_J = link_r = link_valid = None
        if fset.l_host.size:
            hi = fset.l_host - 1
            ti = fset.l_target - 1
            pred, link_J, link_valid = kernels.predict_eval_jac(
                q[hi], p[hi], q[ti], p[ti], lam[fset.l_parent], fset.l_f)
            link_r = pred - lam[fset.l_child]
            link_r[link_valid == 0] = 0.0
        imu_now = [r for r, _ in eval_imu(fset, graph, with_jac=False)]
        t_eval = time.perf_counter()

        tokens = []
        prev_carry: List[StateKey] = []
        for idx, sp in enumerate(plan.stages):
            tokens.append(self._token(graph, fset, sp, prev_carry,
                                      idx == num - 1))
            prev_carry = sp.carry_keys

        # longest reusable prefix: stop at the first stale or changed stage
        first_refresh = num - 1
        for idx, sp in enumerate(plan.stages[:-1]):
            cache = self._caches.get(self._stage_key(graph, sp))
            if cache is None or cache.token != tokens[idx]:
                first_refresh = idx
                break
            self._rekey(cache, sp)
            if sp.vis_rows.size and not np.array_equal(
                    valid_vis[sp.vis_rows], cache.vis_valid0):
                first_refresh = idx
                break
            if sp.link_rows.size and not np.array_equal(
                    link_valid[sp.link_rows], cache.link_valid0):
                first_refresh = idx
                break
            n = self._staleness(graph, fset, sp, cache, r_vis, link_r, imu_now)
            report.staleness[sp.stage] = n
            if n > opts.tau:
                first_refresh = idx
                break

        delta_core = None
        prev_cache: Optional[_StageCache] = None
        prev_carry = []
        keep = set()
        for idx, sp in enumerate(plan.stages):
            key = self._stage_key(graph, sp)
            keep.add(key)
            if idx < first_refresh:
                cache = self._caches[key]
                self._sweep_stage(graph, fset, sp, cache, prev_cache,
                                  r_vis, link_r, imu_now)
                report.skipped.append(sp.stage)
            else:
                cache = self._refresh_stage(
                    graph, fset, sp, tokens[idx], idx == num - 1,
                    prev_cache, prev_carry, q, p, lam,
                    link_J, link_r, link_valid)
                self._caches[key] = cache
                report.refreshed.append(sp.stage)
                if idx == num - 1:
                    report.core_dim = int(cache.b_carry.size)
                    delta_core = solve_full(cache.H_carry, cache.b_carry)
            prev_cache = cache
            prev_carry = sp.carry_keys
        self._caches = {k: v for k, v in self._caches.items() if k in keep}
        t_forward = time.perf_counter()

        # back-substitution, root outwards
        delta: Dict[StateKey, np.ndarray] = {}
        for idx in range(num - 1, -1, -1):
            sp = plan.stages[idx]
            cache = self._caches[self._stage_key(graph, sp)]
            dvec = np.zeros(cache.front.dim)
            if idx == num - 1:
                core_cols = _front_cols(cache.front, plan.root_core_keys)
                dvec[core_cols] = delta_core
            else:
                for k in sp.carry_keys:
                    dvec[cache.front.slice(k)] = delta[k]
            for g in reversed(cache.groups):
                g.back(dvec)
            for k in sp.front_keys:
                delta[k] = dvec[cache.front.slice(k)].copy()
        t_end = time.perf_counter()

        report.timings = {
            "evaluate": t_eval - t_start,
            "forward": t_forward - t_eval,
            "back": t_end - t_forward,
            "total": t_end - t_start,
        }
        return delta, report


def reduce_leading_stage(graph: WindowGraph, fset: FactorSet,
                         opts: SolverOptions, plan: Optional[TreePlan] = None):
    """Eliminate everything the leading stage owns, at the current states.

    Returns ``(boundary_keys, H, b)``: the quadratic model the first block's
    factors leave on the boundary once the block's frames and depths are
    gone. Freezing this system as a prior over the boundary keys is exactly
    what dropping the block from the window must preserve, so this is the
    reduction step of marginalization.
    """
    if plan is None:
        plan = build_plan(graph, fset)
    if len(plan.stages) < 2:
        raise DimensionMismatch(
            "reducing the only stage would leave no window behind")
    sp = plan.stages[0]
    q, p, lam = gather_states(fset, graph)
    link_J = link_r = link_valid = None
    if fset.l_host.size:
        hi = fset.l_host - 1
        ti = fset.l_target - 1
        pred, link_J, link_valid = kernels.predict_eval_jac(
            q[hi], p[hi], q[ti], p[ti], lam[fset.l_parent], fset.l_f)
        link_r = pred - lam[fset.l_child]
        link_r[link_valid == 0] = 0.0
    with TreeSolver(opts) as solver:
        cache = solver._refresh_stage(
            graph, fset, sp, token=(), is_root=False, prev_cache=None,
            prev_carry=[], q=q, p=p, lam=lam, link_J=link_J, link_r=link_r,
            link_valid=link_valid)
    return list(sp.carry_keys), cache.H_carry.copy(), cache.b_carry.copy()
