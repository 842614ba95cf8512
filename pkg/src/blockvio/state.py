"""Window state layout: keyframes, blocks, feature tracks, reference frames.

Window frames are indexed 1-based so that block ``i`` starts at frame
``(i - 1) * M + 1``. Long tracks anchor one inverse-depth entry per observed
block, always at a block-first frame; short tracks anchor a single entry at
their first observed frame.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np

from .errors import DimensionMismatch, NoValidReference
from .geometry import Pose, quat_identity, quat_mul, quat_normalize, quat_to_matrix, rotate

GRAVITY = np.array([0.0, 0.0, -9.81])


@dataclass
class KeyframeState:
    """Per-frame estimate: camera pose in the visual frame plus IMU states."""

    frame_index: int
    timestamp: float
    pose: Pose = field(default_factory=Pose)
    velocity: np.ndarray = field(default_factory=lambda: np.zeros(3))
    gyro_bias: np.ndarray = field(default_factory=lambda: np.zeros(3))
    accel_bias: np.ndarray = field(default_factory=lambda: np.zeros(3))
    global_id: int = -1

    def copy(self) -> "KeyframeState":
        return KeyframeState(
            self.frame_index, self.timestamp, self.pose.copy(),
            self.velocity.copy(), self.gyro_bias.copy(), self.accel_bias.copy(),
            self.global_id,
        )


@dataclass
class GlobalState:
    """States shared by the whole window."""

    scale: float = 1.0
    q_iv: np.ndarray = field(default_factory=quat_identity)
    extrinsics: Pose = field(default_factory=Pose)  # body frame in camera coords
    gravity: np.ndarray = field(default_factory=lambda: GRAVITY.copy())

    def copy(self) -> "GlobalState":
        return GlobalState(self.scale, self.q_iv.copy(), self.extrinsics.copy(),
                           self.gravity.copy())


@dataclass(frozen=True)
class BlockLayout:
    """Fixed partition of the window into blocks of keyframes."""

    block_size: int = 10
    num_blocks: int = 10

    def __post_init__(self):
        if self.block_size < 2 or self.num_blocks < 2:
            raise DimensionMismatch("layout needs block_size >= 2 and num_blocks >= 2")

    @property
    def capacity(self) -> int:
        return self.block_size * self.num_blocks

    def block_of(self, k: int) -> int:
        return (k - 1) // self.block_size + 1

    def block_first(self, i: int) -> int:
        return (i - 1) * self.block_size + 1

    def is_block_first(self, k: int) -> bool:
        return (k - 1) % self.block_size == 0


def primary_reference(k: int, block_size: int) -> int:
    """Block-anchored reference index for a target observation at frame k."""
    return ((k - 2) // block_size) * block_size + 1


@dataclass
class DepthEntry:
    """One inverse-depth state, anchored at a reference frame's bearing."""

    inverse_depth: float = 0.0
    initialized: bool = False
    predicted_from: Optional[int] = None  # parent entry's reference frame


@dataclass
class FeatureTrack:
    """Observations of one feature, with its per-reference depth entries."""

    feature_id: int
    observations: Dict[int, np.ndarray] = field(default_factory=dict)
    depth_entries: Dict[int, DepthEntry] = field(default_factory=dict)
    terminated: bool = False
    force_short: bool = False  # ablation switch: never reclassify as long

    def frames(self) -> List[int]:
        return sorted(self.observations.keys())

    def first_frame(self) -> int:
        return min(self.observations.keys())

    def last_frame(self) -> int:
        return max(self.observations.keys())

    def add_observation(self, k: int, u: np.ndarray) -> None:
        self.observations[k] = np.asarray(u, dtype=float)


def classify_track(track: FeatureTrack, layout: BlockLayout) -> str:
    """"long" once observations span two non-adjacent blocks, else "short"."""
    if track.force_short or not track.observations:
        return "short"
    blocks = [layout.block_of(k) for k in track.observations]
    return "long" if max(blocks) - min(blocks) >= 2 else "short"


def reference_frame_index(track: FeatureTrack, k: int, layout: BlockLayout) -> int:
    """Reference (host) frame for the observation of ``track`` at frame ``k``.

    Short tracks host everything at their first observed frame. Long tracks
    use the block-anchored map with a one-block-later fallback when the
    primary frame holds no observation of this track.

    Raises:
        NoValidReference: no admissible host exists (also when the fallback
            lands on ``k`` itself).
    """
    if k not in track.observations:
        raise NoValidReference(f"frame {k} does not observe feature {track.feature_id}")
    if classify_track(track, layout) == "short":
        j = track.first_frame()
        if j == k:
            raise NoValidReference("first observation anchors the track, it has no host")
        return j
    j = primary_reference(k, layout.block_size)
    if j not in track.observations:
        j += layout.block_size
    if j not in track.observations or j == k:
        raise NoValidReference(
            f"feature {track.feature_id} has no usable reference for frame {k}")
    return j


def imu_pose_of(kf: KeyframeState, g: GlobalState) -> Pose:
    """Body pose in the inertial frame implied by a camera-frame state."""
    ext = g.extrinsics
    p_i = rotate(g.q_iv, g.scale * kf.pose.p + rotate(kf.pose.q, ext.p))
    q_i = quat_normalize(quat_mul(g.q_iv, quat_mul(kf.pose.q, ext.q)))
    return Pose(q_i, p_i)


def camera_pose_from_imu(pose_i: Pose, g: GlobalState) -> Pose:
    """Inverse of :func:`imu_pose_of`: recover the camera-frame state."""
    ext = g.extrinsics
    q_iv_inv = np.array([g.q_iv[0], -g.q_iv[1], -g.q_iv[2], -g.q_iv[3]])
    q_c = quat_normalize(quat_mul(q_iv_inv, quat_mul(pose_i.q, np.array(
        [ext.q[0], -ext.q[1], -ext.q[2], -ext.q[3]]))))
    p_c = (rotate(q_iv_inv, pose_i.p) - rotate(q_c, ext.p)) / g.scale
    return Pose(q_c, p_c)


@dataclass
class WindowGraph:
    """The optimization window: frames, tracks, global states, factors."""

    layout: BlockLayout
    global_state: GlobalState = field(default_factory=GlobalState)
    frames: List[KeyframeState] = field(default_factory=list)
    tracks: Dict[int, FeatureTrack] = field(default_factory=dict)
    imu_factors: list = field(default_factory=list)
    prior: object = None

    def num_frames(self) -> int:
        return len(self.frames)

    def frame(self, k: int) -> KeyframeState:
        """Window-indexed (1-based) frame lookup."""
        f = self.frames[k - 1]
        if f.frame_index != k:
            raise DimensionMismatch(f"frame at slot {k} carries index {f.frame_index}")
        return f

    def num_blocks(self) -> int:
        return 0 if not self.frames else self.layout.block_of(len(self.frames))

    def rebase(self, shift: int) -> None:
        """Renumber window indices after dropping ``shift`` leading frames.

        Tracks' observation/entry keys move with the frames; callers must
        already have removed observations of the dropped frames.
        """
        for f in self.frames:
            f.frame_index -= shift
        for tr in self.tracks.values():
            tr.observations = {k - shift: u for k, u in tr.observations.items()}
            tr.depth_entries = {
                k - shift: e for k, e in tr.depth_entries.items()}
            for e in tr.depth_entries.values():
                if e.predicted_from is not None:
                    e.predicted_from -= shift
                    if e.predicted_from < 1:
                        # parent left the window; the entry is a root now
                        e.predicted_from = None
