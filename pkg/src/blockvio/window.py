"""Sliding-window lifecycle: keyframe selection, reference management,
depth bootstrapping, drift screening, and block marginalization.

The window holds up to ``block_size * num_blocks`` keyframes. Each incoming
frame is appended provisionally, optimized with the window, and either kept
(sufficient parallax or thinning tracks) or removed again, with its inertial
span merged into the next one. When the window overflows, the oldest block
is eliminated at the current linearization and its reduced information is
kept as a prior over the boundary states.

Feature bookkeeping follows the observation-anchored depth layout of
:mod:`blockvio.state`: a track's depths live at its reference frames, and
reference changes are realized by transporting the inverse depth into the
new anchor. Every incoming feature id is mapped to an internal track id;
when a track is cut (drift flag, segment truncation) later observations of
the same feature id simply open a fresh internal track, so a re-registered
feature restarts with an independent reference.

Frames are counted by a monotonically increasing ``global_id`` whether or
not they are kept. External outputs (estimates, drift verdicts) are keyed
by that id, which also drives the drift screen's "K frames after the
reference" schedule.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Set, Tuple

import numpy as np

from . import kernels
from .errors import (DimensionMismatch, DivergedSolve, InvalidConfig,
                     NonMonotoneTimestamps, NonPositiveDepth,
                     NoValidReference)
from .factors import (ImuFactor, ImuNoise, PriorFactor, anchored_prior,
                      predict_inverse_depth, preintegrate, state_value)
from .geometry import Pose, back_project, quat_mul, quat_normalize
from .solver.assemble import SolverOptions, assemble
from .solver.gn import GnReport, gauss_newton
from .solver.plan import build_plan
from .solver.tree import TreeSolver, reduce_leading_stage
from .state import (BlockLayout, DepthEntry, FeatureTrack, GlobalState,
                    KeyframeState, WindowGraph, camera_pose_from_imu,
                    classify_track, imu_pose_of, reference_frame_index)

ABLATION_MODES = ("full", "single_ref", "truncate")


@dataclass
class WindowConfig:
    """Knobs of the sliding-window estimator."""

    block_size: int = 10         # keyframes per block (M)
    num_blocks: int = 10         # blocks per window (N)
    sigma_v: float = 1.0 / 460.0  # observation noise, normalized units
    sigma_d: float = 0.0         # carry-over noise; 0 = hard substitution

    # keyframe policy: mean bearing displacement against the last keyframe,
    # or too few continued tracks
    parallax_threshold: float = 10.0 / 460.0
    track_floor: float = 0.6
    target_features: int = 200

    # depth-drift screen, in processed frames after the reference
    drift_k: int = 50
    drift_s_a: Optional[float] = None   # mean threshold; default 4 sigma_v
    drift_s_b: Optional[float] = None   # max threshold; default 12 sigma_v

    skip_tau: float = 1e-3       # stage-freshness tolerance (0 = never skip)
    threads: int = 1
    max_iterations: int = 8
    ablation: str = "full"       # full | single_ref | truncate

    def validate(self) -> None:
        if self.block_size < 2:
            raise InvalidConfig("block_size must be at least 2")
        if self.num_blocks < 2:
            raise InvalidConfig("num_blocks must be at least 2")
        if self.sigma_v <= 0.0:
            raise InvalidConfig("sigma_v must be positive")
        if self.sigma_d < 0.0:
            raise InvalidConfig("sigma_d cannot be negative")
        if self.parallax_threshold <= 0.0:
            raise InvalidConfig("parallax_threshold must be positive")
        if not 0.0 <= self.track_floor <= 1.0:
            raise InvalidConfig("track_floor must lie in [0, 1]")
        if self.target_features < 1:
            raise InvalidConfig("target_features must be positive")
        if self.drift_k < 1:
            raise InvalidConfig("drift_k must be at least 1")
        if not 0.0 < self.s_a < self.s_b:
            raise InvalidConfig(
                "drift thresholds must satisfy 0 < mean < max")
        if self.skip_tau < 0.0:
            raise InvalidConfig("skip_tau cannot be negative")
        if self.threads < 1:
            raise InvalidConfig("threads must be at least 1")
        if self.max_iterations < 1:
            raise InvalidConfig("max_iterations must be at least 1")
        if self.ablation not in ABLATION_MODES:
            raise InvalidConfig(
                f"ablation must be one of {ABLATION_MODES}")

    @property
    def s_a(self) -> float:
        return self.drift_s_a if self.drift_s_a is not None \
            else 4.0 * self.sigma_v

    @property
    def s_b(self) -> float:
        return self.drift_s_b if self.drift_s_b is not None \
            else 12.0 * self.sigma_v

    @property
    def capacity(self) -> int:
        return self.block_size * self.num_blocks

    def layout(self) -> BlockLayout:
        return BlockLayout(self.block_size, self.num_blocks)

    def solver_options(self) -> SolverOptions:
        return SolverOptions(
            mode="zero_cov" if self.sigma_d == 0.0 else "generic",
            sigma_v=self.sigma_v,
            sigma_d=self.sigma_d if self.sigma_d > 0.0 else 1e-5,
            tau=self.skip_tau,
            threads=self.threads,
            max_iterations=self.max_iterations,
        )


@dataclass
class DriftVerdict:
    """Outcome of one depth-consistency check.

    ``flagged`` holds exactly when the mean reprojection error against the
    frozen reference depth exceeds the mean threshold or any single error
    exceeds the max threshold. Frame references are global ids.
    """

    feature_id: int
    reference: int
    mean_error: float
    max_error: float
    flagged: bool
    removed_frames: List[int] = field(default_factory=list)


@dataclass
class PoseRecord:
    """One finalized (or current) keyframe estimate."""

    global_id: int
    timestamp: float
    pose: Pose
    velocity: np.ndarray


@dataclass
class FrameResult:
    """What one processed frame did to the window."""

    global_id: int
    timestamp: float
    keyframe: bool
    parallax: float
    tracked: int
    gn: Optional[GnReport]
    verdicts: List[DriftVerdict] = field(default_factory=list)
    marginalized: bool = False
    num_frames: int = 0
    num_tracks: int = 0
    stages_refreshed: int = 0
    stages_skipped: int = 0
    solve_seconds: float = 0.0
    timings: Dict[str, float] = field(default_factory=dict)


@dataclass
class MarginalizationOutcome:
    prior: PriorFactor
    finalized: List[PoseRecord]
    deferred_tracks: List[int]   # lost their depth value in the re-anchor
    dropped_tracks: List[int]    # no observations left in the window


# ---------------------------------------------------------------------------
# policy and geometry operations (window-level, stateless)


def decide_keyframe(graph: WindowGraph, config: WindowConfig,
                    k: Optional[int] = None) -> Tuple[bool, float, int]:
    """Keep the newest frame?

    Returns ``(keep, parallax, tracked)``: the mean bearing displacement of
    features shared with the previous kept frame, and how many such features
    exist. The frame stays when the displacement reaches the parallax
    threshold or the continued-track count falls below the floor. The first
    frame is always kept.
    """
    k = graph.num_frames() if k is None else k
    if k <= 1:
        return True, float("inf"), 0
    prev = k - 1
    disp = []
    for track in graph.tracks.values():
        u_new = track.observations.get(k)
        u_old = track.observations.get(prev)
        if u_new is None or u_old is None:
            continue
        disp.append(float(np.linalg.norm(u_new - u_old)))
    tracked = len(disp)
    parallax = float(np.mean(disp)) if disp else float("inf")
    keep = (parallax >= config.parallax_threshold
            or tracked < config.track_floor * config.target_features)
    return keep, parallax, tracked


def reset_reference(graph: WindowGraph, track: FeatureTrack,
                    new_host: int, parent_host: Optional[int] = None,
                    ) -> DepthEntry:
    """Anchor the track's depth at ``new_host`` by transported prediction.

    The inverse depth of the parent entry (nearest existing anchor unless
    given) is pushed through the relative camera geometry into the new
    anchor frame. Raises ``NonPositiveDepth`` when the transported point
    falls behind the new anchor; callers defer the entry in that case.
    """
    if parent_host is None:
        others = [j for j in track.depth_entries if j != new_host]
        if not others:
            raise NoValidReference(
                f"track {track.feature_id} has no entry to transport from")
        earlier = [j for j in others if j < new_host]
        parent_host = max(earlier) if earlier else min(others)
    parent = track.depth_entries[parent_host]
    lam = predict_inverse_depth(
        graph.frame(parent_host), graph.frame(new_host),
        parent.inverse_depth, back_project(track.observations[parent_host]))
    entry = DepthEntry(
        inverse_depth=lam, initialized=True,
        predicted_from=parent_host if parent_host < new_host else None)
    track.depth_entries[new_host] = entry
    return entry


def detect_depth_drift(graph: WindowGraph, track: FeatureTrack, host: int,
                       k_limit: int, s_a: float, s_b: float,
                       ) -> Optional[DriftVerdict]:
    """Screen one depth entry against the observations that followed it.

    The reference bearing and its current inverse depth are reprojected
    into every window frame at most ``k_limit`` processed frames after the
    reference that still observes the track. Returns ``None`` when no such
    frame exists (nothing to judge), otherwise a verdict; a transport that
    leaves the valid depth range counts as an unbounded error.
    """
    kf_j = graph.frame(host)
    hgid = kf_j.global_id
    targets = [k for k in track.frames()
               if k > host and graph.frame(k).global_id - hgid <= k_limit]
    if not targets:
        return None
    entry = track.depth_entries[host]
    n = len(targets)
    q_h = np.tile(kf_j.pose.q, (n, 1))
    p_h = np.tile(kf_j.pose.p, (n, 1))
    q_t = np.stack([graph.frame(k).pose.q for k in targets])
    p_t = np.stack([graph.frame(k).pose.p for k in targets])
    f_h = np.tile(back_project(track.observations[host]), (n, 1))
    u_t = np.stack([track.observations[k] for k in targets])
    lam = np.full(n, entry.inverse_depth)
    r, ok = kernels.visual_eval(q_h, p_h, q_t, p_t, lam, f_h, u_t)
    err = np.linalg.norm(r, axis=1)
    err[ok == 0] = np.inf
    mean = float(np.mean(err))
    mx = float(np.max(err))
    return DriftVerdict(
        feature_id=track.feature_id, reference=hgid, mean_error=mean,
        max_error=mx, flagged=bool(mean > s_a or mx > s_b))


def _shift_key(key, shift: int):
    if key[0] in ("pose", "vel", "bias"):
        return (key[0], key[1] - shift)
    if key[0] == "depth":
        return ("depth", key[1], key[2] - shift)
    return key


def _freeze(value):
    if isinstance(value, Pose):
        return value.copy()
    if isinstance(value, np.ndarray):
        return value.copy()
    return value


def marginalize_oldest_block(graph: WindowGraph, opts: SolverOptions,
                             ) -> MarginalizationOutcome:
    """Drop the leading block, keeping its information as a boundary prior.

    Short-anchored tracks that outlive the block are first re-anchored at
    their first surviving observation (their depth transported, their dying
    observations dropped), so the block's elimination only involves states
    that actually leave. The leading stage is then reduced at the current
    linearization, the reduced system is frozen as the new prior over the
    boundary states, and the window is renumbered.
    """
    layout = graph.layout
    M = layout.block_size
    if graph.num_frames() <= M:
        raise DimensionMismatch(
            "marginalization needs frames beyond the leading block")

    # 1. re-anchor short-lived tracks that span the boundary
    pinned = set(graph.prior.keys) if graph.prior is not None else set()
    deferred: List[int] = []
    for tid, track in graph.tracks.items():
        frames_ = track.frames()
        if not frames_ or frames_[0] > M:
            continue
        if classify_track(track, layout) != "short":
            continue
        keep = [k for k in frames_ if k > M]
        if not keep:
            continue  # dies with the block; pruned below
        if any(("depth", tid, j) in pinned for j in track.depth_entries):
            # the active prior references this anchor; leave the track to
            # the reduction, which carries its information into the next
            # prior, and let the depth re-initialize afterwards
            deferred.append(tid)
            continue
        old_host = frames_[0]
        old = track.depth_entries.get(old_host)
        lam = None
        if old is not None and old.initialized:
            try:
                lam = predict_inverse_depth(
                    graph.frame(old_host), graph.frame(keep[0]),
                    old.inverse_depth,
                    back_project(track.observations[old_host]))
            except NonPositiveDepth:
                lam = None
        for k in frames_:
            if k <= M:
                del track.observations[k]
        track.depth_entries.clear()
        if lam is not None:
            track.depth_entries[keep[0]] = DepthEntry(lam, True, None)
        else:
            deferred.append(tid)

    # 2. reduce the leading stage at the current linearization
    fset = assemble(graph, opts)
    plan = build_plan(graph, fset)
    keys, H, b = reduce_leading_stage(graph, fset, opts, plan)
    values = {_shift_key(k, M): _freeze(state_value(graph, k)) for k in keys}

    # 3. final estimates for the leaving frames
    finalized = [PoseRecord(f.global_id, f.timestamp, f.pose.copy(),
                            f.velocity.copy()) for f in graph.frames[:M]]

    # 4. prune the block and renumber
    graph.frames = graph.frames[M:]
    graph.imu_factors = [fa for fa in graph.imu_factors if fa.i > M]
    for fa in graph.imu_factors:
        fa.i -= M
        fa.j -= M
    dropped: List[int] = []
    for tid, track in list(graph.tracks.items()):
        for k in [k for k in track.observations if k <= M]:
            del track.observations[k]
        for j in [j for j in track.depth_entries if j <= M]:
            del track.depth_entries[j]
        if not track.observations:
            del graph.tracks[tid]
            dropped.append(tid)
    graph.rebase(M)

    prior = PriorFactor(keys=[_shift_key(k, M) for k in keys], H=H, b=b,
                        values=values)
    graph.prior = prior
    return MarginalizationOutcome(prior=prior, finalized=finalized,
                                  deferred_tracks=deferred,
                                  dropped_tracks=dropped)


# ---------------------------------------------------------------------------
# depth bootstrapping


def _solve_depth_1d(graph: WindowGraph, track: FeatureTrack, host: int,
                    sigma_v: float) -> Optional[float]:
    """Fit the host-anchored inverse depth to the track's other rays.

    One-dimensional Gauss-Newton along the host bearing, from several
    starting depths. Returns ``None`` when the geometry is too weak (no
    valid rows, vanishing gradient, out-of-range depth, or a residual that
    no single point explains).
    """
    layout = graph.layout
    targets = []
    for k in track.frames():
        if k == host:
            continue
        try:
            if reference_frame_index(track, k, layout) == host:
                targets.append(k)
        except NoValidReference:
            continue
    if not targets:
        return None
    n = len(targets)
    kf_h = graph.frame(host)
    q_h = np.tile(kf_h.pose.q, (n, 1))
    p_h = np.tile(kf_h.pose.p, (n, 1))
    q_t = np.stack([graph.frame(k).pose.q for k in targets])
    p_t = np.stack([graph.frame(k).pose.p for k in targets])
    f_h = np.tile(back_project(track.observations[host]), (n, 1))
    u_t = np.stack([track.observations[k] for k in targets])

    tol = max(5.0 * sigma_v, 5e-3)
    best = None
    for lam0 in (0.5, 0.15, 2.0):
        lam = lam0
        for _ in range(25):
            r, J, ok = kernels.visual_eval_jac(
                q_h, p_h, q_t, p_t, np.full(n, lam), f_h, u_t)
            mask = ok.astype(bool)
            if not mask.any():
                lam = None
                break
            g = float(np.sum(J[mask, :, 12] * r[mask]))
            h = float(np.sum(J[mask, :, 12] ** 2))
            if h < 1e-4:  # bearing barely reacts to depth: no parallax yet
                lam = None
                break
            step = -g / h
            new = float(np.clip(lam + step, 1e-4, 50.0))
            done = abs(new - lam) < 1e-12 * max(1.0, lam)
            lam = new
            if done:
                break
        if lam is None or not 1e-3 <= lam <= 20.0:
            continue
        r, ok = kernels.visual_eval(
            q_h, p_h, q_t, p_t, np.full(n, lam), f_h, u_t)
        mask = ok.astype(bool)
        if not mask.any():
            continue
        rms = float(np.sqrt(np.mean(np.sum(r[mask] ** 2, axis=1))))
        if rms <= tol and (best is None or rms < best[1]):
            best = (lam, rms)
    return best[0] if best else None


# ---------------------------------------------------------------------------
# the manager


@dataclass
class WindowStats:
    processed: int = 0
    keyframes: int = 0
    discarded: int = 0
    marginalizations: int = 0
    diverged: int = 0
    gn_iterations: int = 0
    stages_refreshed: int = 0
    stages_skipped: int = 0
    drift_checks: int = 0
    drift_flags: int = 0
    solve_seconds: float = 0.0


class SlidingWindow:
    """Streaming front of the estimator: feed frames, read pose estimates.

    ``insert_frame`` consumes one camera frame (timestamp, feature
    observations, inertial samples since the previous call) and runs the
    full per-frame pipeline. Estimates of keyframes that left the window
    are frozen at their last optimized value and collected in order.
    """

    def __init__(self, config: WindowConfig,
                 initial_pose: Optional[Pose] = None,
                 initial_velocity: Optional[np.ndarray] = None,
                 initial_gyro_bias: Optional[np.ndarray] = None,
                 initial_accel_bias: Optional[np.ndarray] = None,
                 global_state: Optional[GlobalState] = None,
                 imu_noise: Optional[ImuNoise] = None):
        config.validate()
        self.config = config
        self.opts = config.solver_options()
        self.graph = WindowGraph(layout=config.layout(),
                                 global_state=global_state or GlobalState())
        self.solver = TreeSolver(self.opts)
        self.stats = WindowStats()
        self.finalized: List[PoseRecord] = []
        self.verdicts: List[DriftVerdict] = []
        self._noise = imu_noise or ImuNoise()
        self._init_pose = initial_pose or Pose()
        self._init_vel = (np.zeros(3) if initial_velocity is None
                          else np.asarray(initial_velocity, dtype=float))
        self._init_bg = (np.zeros(3) if initial_gyro_bias is None
                         else np.asarray(initial_gyro_bias, dtype=float))
        self._init_ba = (np.zeros(3) if initial_accel_bias is None
                         else np.asarray(initial_accel_bias, dtype=float))
        self._last_t: Optional[float] = None
        self._imu_ts = np.empty(0)
        self._imu_gyro = np.empty((0, 3))
        self._imu_accel = np.empty((0, 3))
        self._alias: Dict[int, int] = {}
        self._raw_of: Dict[int, int] = {}
        self._next_tid = 1
        self._pending: Set[int] = set()
        self._watches: Set[Tuple[int, int]] = set()
        self._checked: Set[Tuple[int, int]] = set()

    # -- lifecycle ----------------------------------------------------------

    def close(self) -> None:
        self.solver.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
        return False

    def estimates(self) -> List[PoseRecord]:
        """Finalized keyframes plus the current window, in global-id order."""
        live = [PoseRecord(f.global_id, f.timestamp, f.pose.copy(),
                           f.velocity.copy()) for f in self.graph.frames]
        return self.finalized + live

    # -- per-frame pipeline --------------------------------------------------

    def insert_frame(self, t: float, observations: Sequence[Tuple],
                     imu_ts=None, imu_gyro=None, imu_accel=None,
                     ) -> FrameResult:
        """Process one camera frame; returns what happened to it."""
        if self._last_t is not None and t <= self._last_t:
            raise NonMonotoneTimestamps(
                f"frame time {t} does not advance past {self._last_t}")
        self._buffer_imu(imu_ts, imu_gyro, imu_accel)
        gid = self.stats.processed
        self.stats.processed += 1
        self._last_t = t
        graph = self.graph

        if not graph.frames:
            kf = KeyframeState(
                frame_index=1, timestamp=t, pose=self._init_pose.copy(),
                velocity=self._init_vel.copy(),
                gyro_bias=self._init_bg.copy(),
                accel_bias=self._init_ba.copy(), global_id=gid)
            graph.frames.append(kf)
            graph.prior = anchored_prior(kf, graph.global_state)
            self._register(1, observations)
            self._trim_imu(t)
            self.stats.keyframes += 1
            return FrameResult(
                global_id=gid, timestamp=t, keyframe=True,
                parallax=float("inf"), tracked=0, gn=None,
                num_frames=1, num_tracks=len(graph.tracks))

        k = graph.num_frames() + 1
        kf, pre = self._predicted_state(t, k, gid)
        graph.frames.append(kf)
        graph.imu_factors.append(ImuFactor(k - 1, k, pre))
        touched = self._register(k, observations)
        for tid in touched:
            self._reconcile(tid)

        gn = None
        t0 = time.perf_counter()
        try:
            gn = gauss_newton(graph, self.opts, self.solver)
        except DivergedSolve:
            self.stats.diverged += 1
        solve_s = time.perf_counter() - t0
        self.stats.solve_seconds += solve_s

        self._attempt_pending()
        verdicts = self._run_drift_checks(gid)

        keep, parallax, tracked = decide_keyframe(graph, self.config, k)
        result = FrameResult(
            global_id=gid, timestamp=t, keyframe=keep, parallax=parallax,
            tracked=tracked, gn=gn, verdicts=verdicts,
            solve_seconds=solve_s)
        if gn is not None:
            result.stages_refreshed = sum(len(s.refreshed) for s in gn.steps)
            result.stages_skipped = sum(len(s.skipped) for s in gn.steps)
            agg: Dict[str, float] = {}
            for s in gn.steps:
                for name, v in s.timings.items():
                    agg[name] = agg.get(name, 0.0) + v
            result.timings = agg
            self.stats.gn_iterations += gn.iterations
            self.stats.stages_refreshed += result.stages_refreshed
            self.stats.stages_skipped += result.stages_skipped

        if not keep:
            self._discard_frame(k)
            self.stats.discarded += 1
        else:
            self.stats.keyframes += 1
            self._trim_imu(t)
            if graph.num_frames() == self.config.capacity + 1:
                self._marginalize()
                result.marginalized = True
        result.num_frames = graph.num_frames()
        result.num_tracks = len(graph.tracks)
        return result

    # -- inertial buffering --------------------------------------------------

    def _buffer_imu(self, ts, gyro, accel) -> None:
        if ts is None:
            return
        ts = np.atleast_1d(np.asarray(ts, dtype=float))
        if ts.size == 0:
            return
        gyro = np.atleast_2d(np.asarray(gyro, dtype=float))
        accel = np.atleast_2d(np.asarray(accel, dtype=float))
        if gyro.shape != (ts.size, 3) or accel.shape != (ts.size, 3):
            raise DimensionMismatch("inertial chunk shapes do not agree")
        if np.any(np.diff(ts) <= 0.0):
            raise NonMonotoneTimestamps("inertial samples must advance")
        if self._imu_ts.size:
            fresh = ts > self._imu_ts[-1] + 1e-12
            ts, gyro, accel = ts[fresh], gyro[fresh], accel[fresh]
            if ts.size == 0:
                return
        self._imu_ts = np.concatenate([self._imu_ts, ts])
        self._imu_gyro = np.concatenate([self._imu_gyro, gyro])
        self._imu_accel = np.concatenate([self._imu_accel, accel])

    def _trim_imu(self, t: float) -> None:
        keep = self._imu_ts >= t - 1e-9
        self._imu_ts = self._imu_ts[keep]
        self._imu_gyro = self._imu_gyro[keep]
        self._imu_accel = self._imu_accel[keep]

    def _predicted_state(self, t: float, k: int, gid: int):
        """Propagate the last keyframe through the buffered inertial span."""
        graph = self.graph
        last = graph.frames[-1]
        span = (self._imu_ts >= last.timestamp - 1e-9) \
            & (self._imu_ts <= t + 1e-9)
        pre = preintegrate(
            self._imu_ts[span], self._imu_gyro[span], self._imu_accel[span],
            last.gyro_bias, last.accel_bias, self._noise)

        g = graph.global_state
        pose_i = imu_pose_of(last, g)
        dt = pre.dt
        grav = g.gravity
        R_i = pose_i.rotation()
        p_j = pose_i.p + last.velocity * dt + 0.5 * grav * dt * dt \
            + R_i @ pre.alpha
        v_j = last.velocity + grav * dt + R_i @ pre.beta
        q_j = quat_normalize(quat_mul(pose_i.q, pre.gamma))
        cam = camera_pose_from_imu(Pose(q_j, p_j), g)
        kf = KeyframeState(
            frame_index=k, timestamp=t, pose=cam, velocity=v_j,
            gyro_bias=last.gyro_bias.copy(),
            accel_bias=last.accel_bias.copy(), global_id=gid)
        return kf, pre

    # -- track registration ---------------------------------------------------

    def _register(self, k: int, observations: Sequence[Tuple]) -> List[int]:
        graph = self.graph
        layout = graph.layout
        force_short = self.config.ablation != "full"
        truncate = self.config.ablation == "truncate"
        touched = []
        for fid, u, v in observations:
            tid = self._alias.get(int(fid))
            track = graph.tracks.get(tid) if tid is not None else None
            if track is not None and track.terminated:
                track = None
            if track is not None and truncate and track.observations:
                if layout.block_of(k) != layout.block_of(track.first_frame()):
                    # cut at the block boundary; the old segment stays as-is
                    track.terminated = True
                    track = None
            if track is None:
                tid = self._next_tid
                self._next_tid += 1
                self._alias[int(fid)] = tid
                self._raw_of[tid] = int(fid)
                track = FeatureTrack(feature_id=tid, force_short=force_short)
                graph.tracks[tid] = track
                self._pending.add(tid)
            track.add_observation(k, np.array([float(u), float(v)]))
            touched.append(tid)
        return touched

    # -- depth-entry reconciliation -------------------------------------------

    def _needed_hosts(self, track: FeatureTrack) -> List[int]:
        layout = self.graph.layout
        hosts = set()
        for k in track.frames():
            try:
                hosts.add(reference_frame_index(track, k, layout))
            except NoValidReference:
                continue
        return sorted(hosts)

    def _protected_keys(self) -> Set[Tuple]:
        prior = self.graph.prior
        return set(prior.keys) if prior is not None else set()

    def _reconcile(self, tid: int) -> None:
        """Make the track's depth entries match its observations.

        Creates missing anchors by transported prediction, migrates the
        root when the reference map moved it (short/long transitions),
        rewires the prediction chain, and drops anchors no observation
        references any more. Depth keys held by the window prior are never
        removed; the prior pins them until the next marginalization
        rebuilds it.
        """
        graph = self.graph
        track = graph.tracks.get(tid)
        if track is None:
            return
        hosts = self._needed_hosts(track)
        entries = track.depth_entries
        protected = self._protected_keys()

        def removable(j: int) -> bool:
            return ("depth", tid, j) not in protected

        if not entries:
            if hosts:
                # terminated segments still triangulate; only new
                # observations are barred
                self._pending.add(tid)
            return
        if not hosts:
            for j in [j for j in entries if removable(j)]:
                del entries[j]
            return

        root = hosts[0]
        if root not in entries:
            src = min(entries)
            try:
                lam = predict_inverse_depth(
                    graph.frame(src), graph.frame(root),
                    entries[src].inverse_depth,
                    back_project(track.observations[src]))
            except NonPositiveDepth:
                # the whole chain is deferred until geometry recovers
                for j in [j for j in entries if removable(j)]:
                    del entries[j]
                if not entries:
                    self._pending.add(tid)
                return
            entries[root] = DepthEntry(lam, True, None)
            self._arm_watch(tid, root)
        entries[root].predicted_from = None

        prev = root
        for j in hosts[1:]:
            if j not in entries:
                try:
                    lam = predict_inverse_depth(
                        graph.frame(prev), graph.frame(j),
                        entries[prev].inverse_depth,
                        back_project(track.observations[prev]))
                except NonPositiveDepth:
                    break  # later anchors wait until geometry recovers
                entries[j] = DepthEntry(lam, True, prev)
                self._arm_watch(tid, j)
            else:
                entries[j].predicted_from = prev
            prev = j

        alive = set(hosts[:hosts.index(prev) + 1])
        for j in [j for j in entries
                  if j not in alive and removable(j)]:
            del entries[j]

    # -- pending depth initialization ------------------------------------------

    def _attempt_pending(self) -> None:
        graph = self.graph
        for tid in sorted(self._pending):
            track = graph.tracks.get(tid)
            if track is None:
                self._pending.discard(tid)
                continue
            if track.depth_entries:
                self._pending.discard(tid)
                continue
            hosts = self._needed_hosts(track)
            if not hosts:
                continue
            lam = _solve_depth_1d(graph, track, hosts[0],
                                  self.config.sigma_v)
            if lam is None:
                continue
            track.depth_entries[hosts[0]] = DepthEntry(lam, True, None)
            self._pending.discard(tid)
            self._arm_watch(tid, hosts[0])
            self._reconcile(tid)

    # -- drift screening ---------------------------------------------------------

    def _arm_watch(self, tid: int, host: int) -> None:
        if self.config.ablation != "full":
            return
        key = (tid, self.graph.frame(host).global_id)
        if key not in self._checked:
            self._watches.add(key)

    def _run_drift_checks(self, current_gid: int) -> List[DriftVerdict]:
        if self.config.ablation != "full":
            return []
        graph = self.graph
        cfg = self.config
        idx_of = {f.global_id: f.frame_index for f in graph.frames}
        newest = graph.num_frames()
        out: List[DriftVerdict] = []
        for key in sorted(self._watches):
            tid, hgid = key
            track = graph.tracks.get(tid)
            host = idx_of.get(hgid)
            if track is None or host is None or \
                    host not in track.depth_entries:
                self._watches.discard(key)
                continue
            ended = track.terminated or track.last_frame() < newest
            if not ended and current_gid - hgid < cfg.drift_k:
                continue
            self._watches.discard(key)
            self._checked.add(key)
            self.stats.drift_checks += 1
            verdict = detect_depth_drift(graph, track, host, cfg.drift_k,
                                         cfg.s_a, cfg.s_b)
            if verdict is None:
                continue
            verdict.feature_id = self._raw_of.get(tid, tid)
            if verdict.flagged:
                self.stats.drift_flags += 1
                removed = [k for k in track.frames() if k > host]
                verdict.removed_frames = [
                    graph.frame(k).global_id for k in removed]
                for k in removed:
                    del track.observations[k]
                for j in [j for j in track.depth_entries if j > host]:
                    del track.depth_entries[j]
                track.terminated = True
                self._pending.discard(tid)
                for other in [w for w in self._watches if w[0] == tid]:
                    self._watches.discard(other)
                self._reconcile(tid)
            out.append(verdict)
            self.verdicts.append(verdict)
        return out

    # -- frame retirement ----------------------------------------------------------

    def _discard_frame(self, k: int) -> None:
        """Remove the provisional newest frame, keeping its inertial span."""
        graph = self.graph
        graph.frames.pop()
        graph.imu_factors = [fa for fa in graph.imu_factors if fa.j < k]
        protected = self._protected_keys()
        touched = []
        for tid, track in list(graph.tracks.items()):
            changed = False
            if k in track.observations:
                del track.observations[k]
                changed = True
            if k in track.depth_entries:
                del track.depth_entries[k]
                changed = True
            if not track.observations and not any(
                    ("depth", tid, j) in protected
                    for j in track.depth_entries):
                del graph.tracks[tid]
                self._pending.discard(tid)
                continue
            if changed:
                touched.append(tid)
        for tid in touched:
            self._reconcile(tid)

    def _marginalize(self) -> None:
        outcome = marginalize_oldest_block(self.graph, self.opts)
        self.finalized.extend(outcome.finalized)
        self.stats.marginalizations += 1
        for tid in outcome.dropped_tracks:
            self._pending.discard(tid)
        for tid in outcome.deferred_tracks:
            if tid in self.graph.tracks:
                self._pending.add(tid)
        for tid in set(t for t, _ in self._watches):
            if tid not in self.graph.tracks:
                self._watches = {w for w in self._watches if w[0] != tid}
        for tid in list(self.graph.tracks):
            self._reconcile(tid)
