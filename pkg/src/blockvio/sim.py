"""Synthetic worlds for exercising the estimator end to end.

Everything is analytic: trajectories come from closed-form position and yaw
profiles, so body rates and specific forces are exact rather than finite
differences, and a noiseless inertial stream integrates back to the ground
truth to integration accuracy. Landmarks live on the inside of a cylinder
around the trajectory; a tracked point can drift over its local surface
frame by a seeded random walk, either staying on one plane (depth stays
consistent with the motion of the point) or stepping across a depth edge
(the reported depth jumps while the image track stays smooth). Labels
record, per track, which class it belongs to and where the jumps happened,
so detector metrics can be scored against the truth.

All randomness flows from ``SimScenario.seed`` through independent named
streams; a scenario therefore maps to exactly one dataset.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields
from typing import Dict, List, Optional, Tuple

import numpy as np

from . import geometry as geo
from .errors import InvalidScenario
from .factors import ImuNoise
from .state import GRAVITY

TRAJECTORY_KINDS = ("circle", "figure8", "random-spline")

# camera axes in world coordinates when yaw is zero: view along +x, image
# rows toward -z (world up maps to image up), columns toward -y.
_R0 = np.array([
    [0.0, 0.0, 1.0],
    [-1.0, 0.0, 0.0],
    [0.0, -1.0, 0.0],
])
_Q0 = geo.quat_from_matrix(_R0)

_FOV_LIMIT = 1.0        # |u|,|v| bound of the normalized detector (±45 deg)
_MIN_DEPTH = 0.5


@dataclass
class SimScenario:
    """Everything that defines one synthetic dataset."""

    kind: str = "circle"
    radius: float = 5.0          # trajectory excursion scale [m]
    period: float = 20.0         # loop / sweep period [s]
    duration: float = 30.0       # [s]
    imu_rate: float = 200.0      # [Hz]
    frame_rate: float = 20.0     # [Hz]; imu_rate must be an integer multiple

    # landmark pool, by surface class; only ~a quarter of the wall is in
    # view at once, so the pool is several times the per-frame target
    n_planar: int = 1400
    n_edge: int = 350
    target_tracks: int = 200     # active features maintained per frame

    # track lifetime draw: long with probability long_fraction, inclusive
    # frame-count ranges otherwise
    long_fraction: float = 0.3
    life_short_lo: int = 8
    life_short_hi: int = 25
    life_long_lo: int = 60
    life_long_hi: int = 180

    # tracked-point drift over the local surface
    drift_std: float = 0.0       # per-frame walk std, normalized units
    drift_fraction: float = 0.0  # share of tracks that drift at all
    depth_jump: float = 0.3      # relative depth step across an edge
    edge_offset: float = 1.5e-3  # walk distance to the edge, normalized units

    sigma_v: float = 0.0         # observation noise std, normalized units
    imu_noise: bool = True       # sample sensor noise on the inertial stream
    gyro_bias: Tuple[float, float, float] = (1e-3, -2e-3, 5e-4)
    accel_bias: Tuple[float, float, float] = (2e-2, -1e-2, 3e-2)

    seed: int = 0

    def validate(self) -> None:
        if self.kind not in TRAJECTORY_KINDS:
            raise InvalidScenario(
                f"unknown trajectory kind {self.kind!r}; "
                f"expected one of {TRAJECTORY_KINDS}")
        for name in ("radius", "period", "duration", "imu_rate", "frame_rate"):
            if getattr(self, name) <= 0.0:
                raise InvalidScenario(f"{name} must be positive")
        stride = self.imu_rate / self.frame_rate
        if abs(stride - round(stride)) > 1e-9 or round(stride) < 1:
            raise InvalidScenario(
                "imu_rate must be a positive integer multiple of frame_rate")
        if self.n_planar < 0 or self.n_edge < 0:
            raise InvalidScenario("landmark counts cannot be negative")
        if self.target_tracks < 1:
            raise InvalidScenario("target_tracks must be at least 1")
        if self.n_planar + self.n_edge < self.target_tracks:
            raise InvalidScenario(
                "landmark pool smaller than the per-frame track target")
        for lo, hi in ((self.life_short_lo, self.life_short_hi),
                       (self.life_long_lo, self.life_long_hi)):
            if lo < 1 or hi < lo:
                raise InvalidScenario("lifetime ranges must satisfy 1 <= lo <= hi")
        for name in ("long_fraction", "drift_fraction"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise InvalidScenario(f"{name} must lie in [0, 1]")
        if self.drift_std < 0.0 or self.sigma_v < 0.0:
            raise InvalidScenario("noise levels cannot be negative")
        if self.depth_jump <= -1.0:
            raise InvalidScenario("depth_jump must keep depths positive")
        if self.edge_offset <= 0.0:
            raise InvalidScenario("edge_offset must be positive")

    @property
    def stride(self) -> int:
        return int(round(self.imu_rate / self.frame_rate))

    @property
    def num_frames(self) -> int:
        return int(math.floor(self.duration * self.frame_rate)) + 1

    def to_dict(self) -> dict:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            out[f.name] = list(v) if isinstance(v, tuple) else v
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "SimScenario":
        known = {f.name for f in cls.__dataclass_fields__.values()}
        unknown = set(data) - known
        if unknown:
            raise InvalidScenario(
                f"unknown scenario keys: {sorted(unknown)}")
        kwargs = dict(data)
        for name in ("gyro_bias", "accel_bias"):
            if name in kwargs:
                kwargs[name] = tuple(float(x) for x in kwargs[name])
        return cls(**kwargs)


# ---------------------------------------------------------------------------
# trajectory synthesis


def _yaw_quat(psi: np.ndarray) -> np.ndarray:
    half = 0.5 * psi
    q = np.zeros((psi.size, 4))
    q[:, 0] = np.cos(half)
    q[:, 3] = np.sin(half)
    return q


def _harmonics(rng: np.random.Generator, n: int, f_lo: float, f_hi: float,
               amp: float) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    freqs = rng.uniform(f_lo, f_hi, n)
    phases = rng.uniform(0.0, 2.0 * np.pi, n)
    amps = rng.uniform(0.3, 1.0, n)
    amps *= amp / max(np.sum(amps), 1e-12)
    return freqs, phases, amps


class _Profile:
    """Closed-form position and yaw with exact first/second derivatives."""

    def __init__(self, scenario: SimScenario):
        self.kind = scenario.kind
        self.r = scenario.radius
        self.w0 = 2.0 * np.pi / scenario.period
        if scenario.kind == "random-spline":
            rng = np.random.default_rng([scenario.seed, 11])
            self.parts = []
            for axis_amp in (self.r, self.r, 0.3 * self.r):
                self.parts.append(_harmonics(rng, 4, 0.04, 0.30, axis_amp))
            self.yaw_parts = _harmonics(rng, 3, 0.02, 0.15, 0.8)
            self.yaw_rate = self.w0

    def position(self, t: np.ndarray):
        """Returns (p, v, a), each [n, 3]."""
        n = t.size
        p = np.zeros((n, 3))
        v = np.zeros((n, 3))
        a = np.zeros((n, 3))
        if self.kind == "circle":
            w, r = self.w0, self.r
            c, s = np.cos(w * t), np.sin(w * t)
            p[:, 0], p[:, 1] = r * c, r * s
            v[:, 0], v[:, 1] = -r * w * s, r * w * c
            a[:, 0], a[:, 1] = -r * w * w * c, -r * w * w * s
        elif self.kind == "figure8":
            w, r = self.w0, self.r
            p[:, 0] = r * np.sin(w * t)
            p[:, 1] = 0.5 * r * np.sin(2.0 * w * t)
            v[:, 0] = r * w * np.cos(w * t)
            v[:, 1] = r * w * np.cos(2.0 * w * t)
            a[:, 0] = -r * w * w * np.sin(w * t)
            a[:, 1] = -2.0 * r * w * w * np.sin(2.0 * w * t)
        else:
            for axis, (freqs, phases, amps) in enumerate(self.parts):
                for f, ph, A in zip(freqs, phases, amps):
                    w = 2.0 * np.pi * f
                    arg = w * t + ph
                    p[:, axis] += A * np.sin(arg)
                    v[:, axis] += A * w * np.cos(arg)
                    a[:, axis] += -A * w * w * np.sin(arg)
        return p, v, a

    def yaw(self, t: np.ndarray):
        """Returns (psi, psi_dot)."""
        if self.kind in ("circle", "figure8"):
            return self.w0 * t, np.full(t.size, self.w0)
        psi = self.yaw_rate * t
        rate = np.full(t.size, self.yaw_rate)
        freqs, phases, amps = self.yaw_parts
        for f, ph, A in zip(freqs, phases, amps):
            w = 2.0 * np.pi * f
            psi = psi + A * np.sin(w * t + ph)
            rate = rate + A * w * np.cos(w * t + ph)
        return psi, rate


@dataclass
class GroundTruth:
    """Camera truth at frame rate plus exact inertial signals at IMU rate."""

    frame_ts: np.ndarray     # [F]
    cam_q: np.ndarray        # [F, 4] camera-to-world rotation
    cam_p: np.ndarray        # [F, 3]
    cam_v: np.ndarray        # [F, 3] world-frame velocity
    imu_ts: np.ndarray       # [S]
    imu_q: np.ndarray        # [S, 4] body-to-world rotation (body == camera)
    omega_body: np.ndarray   # [S, 3] exact body rates
    accel_world: np.ndarray  # [S, 3] exact world-frame acceleration
    gravity: np.ndarray

    def camera_pose(self, i: int) -> geo.Pose:
        return geo.Pose(self.cam_q[i].copy(), self.cam_p[i].copy())


def gen_trajectory(scenario: SimScenario) -> GroundTruth:
    """Sample the scenario's analytic trajectory at IMU and frame rates."""
    scenario.validate()
    n_imu = int(math.floor(scenario.duration * scenario.imu_rate)) + 1
    imu_ts = np.arange(n_imu) / scenario.imu_rate
    prof = _Profile(scenario)
    p, _, a = prof.position(imu_ts)
    psi, _ = prof.yaw(imu_ts)
    q = geo.quat_mul_batch(_yaw_quat(psi), np.tile(_Q0, (n_imu, 1)))

    # world angular velocity is psi_dot * z; express it in the body frame
    _, psi_dot = prof.yaw(imu_ts)
    R = geo.quat_to_matrix_batch(q)
    w_world = np.zeros((n_imu, 3))
    w_world[:, 2] = psi_dot
    omega_body = np.einsum("nij,ni->nj", R, w_world)

    stride = scenario.stride
    frame_idx = np.arange(0, n_imu, stride)
    _, v_f, _ = prof.position(imu_ts[frame_idx])
    return GroundTruth(
        frame_ts=imu_ts[frame_idx],
        cam_q=q[frame_idx].copy(),
        cam_p=p[frame_idx].copy(),
        cam_v=v_f,
        imu_ts=imu_ts,
        imu_q=q,
        omega_body=omega_body,
        accel_world=a,
        gravity=GRAVITY.copy(),
    )


def synth_imu(gt: GroundTruth, noise: Optional[ImuNoise] = None,
              gyro_bias=(0.0, 0.0, 0.0), accel_bias=(0.0, 0.0, 0.0),
              seed: int = 0) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Sensor stream from the exact signals: rates and specific forces.

    Returns ``(ts, gyro, accel)``. With ``noise=None`` the stream is exact
    up to the constant biases; otherwise white noise at the given densities
    is added (discrete std = density * sqrt(rate)).
    """
    R = geo.quat_to_matrix_batch(gt.imu_q)
    gyro = gt.omega_body + np.asarray(gyro_bias, dtype=float)
    specific = gt.accel_world - gt.gravity[None, :]
    accel = np.einsum("nij,ni->nj", R, specific) + np.asarray(
        accel_bias, dtype=float)
    if noise is not None:
        rate = 1.0 / float(np.median(np.diff(gt.imu_ts)))
        rng = np.random.default_rng([seed, 23])
        gyro = gyro + rng.normal(0.0, noise.gyro * np.sqrt(rate), gyro.shape)
        accel = accel + rng.normal(0.0, noise.accel * np.sqrt(rate),
                                   accel.shape)
    return gt.imu_ts.copy(), gyro, accel


# ---------------------------------------------------------------------------
# landmarks and feature tracks


@dataclass
class Landmark:
    """A point with its local surface frame on the surrounding wall."""

    lid: int
    position: np.ndarray   # world
    normal: np.ndarray     # unit, facing the trajectory
    t1: np.ndarray         # horizontal surface tangent
    t2: np.ndarray         # vertical-ish surface tangent
    cls: str               # "planar" | "edge"


@dataclass
class TrackLabel:
    """Ground truth for one emitted feature track."""

    track_id: int
    landmark_id: int
    cls: str
    drifting: bool
    start_frame: int
    end_frame: int = -1
    depth_at_start: float = 0.0
    frames: List[int] = field(default_factory=list)
    true_uv: List[Tuple[float, float]] = field(default_factory=list)
    jump_frames: List[int] = field(default_factory=list)
    anchor: np.ndarray = field(default_factory=lambda: np.zeros(3))

    @property
    def inconsistent(self) -> bool:
        """Did the reported depth actually step at some frame?"""
        return bool(self.jump_frames)


@dataclass
class FrameObs:
    """One frame's feature observations, ids ascending."""

    index: int
    t: float
    obs: List[Tuple[int, float, float]]


@dataclass
class SimDataset:
    scenario: SimScenario
    gt: GroundTruth
    imu_ts: np.ndarray
    imu_gyro: np.ndarray
    imu_accel: np.ndarray
    frames: List[FrameObs]
    labels: Dict[int, TrackLabel]
    landmarks: List[Landmark]


def make_landmarks(scenario: SimScenario) -> List[Landmark]:
    """Seeded pool on the inside of a cylinder around the trajectory."""
    rng = np.random.default_rng([scenario.seed, 37])
    total = scenario.n_planar + scenario.n_edge
    classes = np.array(["planar"] * scenario.n_planar
                       + ["edge"] * scenario.n_edge)
    rng.shuffle(classes)
    out = []
    up = np.array([0.0, 0.0, 1.0])
    for lid in range(total):
        theta = rng.uniform(0.0, 2.0 * np.pi)
        wall = scenario.radius + rng.uniform(3.0, 8.0)
        height = rng.uniform(-4.0, 5.0)
        pos = np.array([wall * np.cos(theta), wall * np.sin(theta), height])
        normal = -np.array([np.cos(theta), np.sin(theta), 0.0])
        t1 = np.cross(up, normal)
        t1 /= np.linalg.norm(t1)
        t2 = np.cross(normal, t1)
        out.append(Landmark(lid, pos, normal, t1, t2, str(classes[lid])))
    return out


@dataclass
class _LiveTrack:
    tid: int
    lm: Landmark
    start: int
    lifetime: int
    drifting: bool
    depth0: float
    edge_dist: float            # meters from anchor to the edge line
    walk: np.ndarray            # meters in the (t1, t2) surface frame
    bg_shift: Optional[np.ndarray]  # world offset while on the far side
    label: TrackLabel


def _project(R: np.ndarray, cam_p: np.ndarray, point: np.ndarray):
    """(u, v, depth) of a world point; depth <= 0 means behind."""
    x_c = R.T @ (point - cam_p)
    if x_c[2] < _MIN_DEPTH:
        return 0.0, 0.0, x_c[2]
    return x_c[0] / x_c[2], x_c[1] / x_c[2], x_c[2]


def _visible(u: float, v: float, z: float) -> bool:
    return z >= _MIN_DEPTH and abs(u) <= _FOV_LIMIT and abs(v) <= _FOV_LIMIT


def synth_tracks(scenario: SimScenario, gt: GroundTruth,
                 landmarks: Optional[List[Landmark]] = None,
                 ) -> Tuple[List[FrameObs], Dict[int, TrackLabel]]:
    """Per-frame feature observations with drift injection and labels.

    Tracking is simulated directly: each active track follows one landmark,
    whose tracked point may random-walk over the local surface. Tracks end
    when their drawn lifetime expires or the point leaves the field of view;
    the pool is rescanned every frame to keep ``target_tracks`` alive.
    """
    scenario.validate()
    if landmarks is None:
        landmarks = make_landmarks(scenario)
    rng = np.random.default_rng([scenario.seed, 53])
    obs_rng = np.random.default_rng([scenario.seed, 71])

    active: Dict[int, _LiveTrack] = {}
    in_use = set()
    labels: Dict[int, TrackLabel] = {}
    frames: List[FrameObs] = []
    next_tid = 1
    pool_ptr = 0
    n_frames = gt.frame_ts.size

    for i in range(n_frames):
        cam_p = gt.cam_p[i]
        R = geo.quat_to_matrix(gt.cam_q[i])

        # retire expired tracks, advance the survivors' walks
        for tid in sorted(active):
            tr = active[tid]
            if i - tr.start >= tr.lifetime:
                tr.label.end_frame = i - 1
                in_use.discard(tr.lm.lid)
                del active[tid]
                continue
            if tr.drifting and i > tr.start:
                tr.walk += rng.normal(
                    0.0, scenario.drift_std * tr.depth0, 2)

        # top up from the pool: one full scan at most
        total = len(landmarks)
        scanned = 0
        while len(active) < scenario.target_tracks and scanned < total:
            lm = landmarks[pool_ptr % total]
            pool_ptr += 1
            scanned += 1
            if lm.lid in in_use:
                continue
            u, v, z = _project(R, cam_p, lm.position)
            if not _visible(u, v, z):
                continue
            tid = next_tid
            next_tid += 1
            long_track = rng.uniform() < scenario.long_fraction
            lo, hi = ((scenario.life_long_lo, scenario.life_long_hi)
                      if long_track else
                      (scenario.life_short_lo, scenario.life_short_hi))
            lifetime = int(rng.integers(lo, hi + 1))
            drifting = (scenario.drift_std > 0.0
                        and rng.uniform() < scenario.drift_fraction)
            edge_dist = np.inf
            if lm.cls == "edge":
                edge_dist = (scenario.edge_offset * z
                             * rng.uniform(0.5, 1.5))
            label = TrackLabel(track_id=tid, landmark_id=lm.lid, cls=lm.cls,
                               drifting=drifting, start_frame=i,
                               depth_at_start=z, anchor=lm.position.copy())
            labels[tid] = label
            active[tid] = _LiveTrack(
                tid=tid, lm=lm, start=i, lifetime=lifetime,
                drifting=drifting, depth0=z, edge_dist=edge_dist,
                walk=np.zeros(2), bg_shift=None, label=label)
            in_use.add(lm.lid)

        # observe every active track
        emitted: List[Tuple[int, float, float]] = []
        gone: List[int] = []
        for tid in sorted(active):
            tr = active[tid]
            lm = tr.lm
            surface = lm.position + tr.walk[0] * lm.t1 + tr.walk[1] * lm.t2
            shift = tr.bg_shift
            if (lm.cls == "edge" and tr.drifting and shift is None
                    and tr.walk[0] > tr.edge_dist):
                # the tracker slides onto the far surface, permanently: the
                # image track stays continuous, so the background point sits
                # on the current view ray, deeper by the jump ratio
                shift = scenario.depth_jump * (surface - cam_p)
            point = surface if shift is None else surface + shift
            u, v, z = _project(R, cam_p, point)
            if not _visible(u, v, z):
                tr.label.end_frame = i - 1
                gone.append(tid)
                continue
            if shift is not None and tr.bg_shift is None:
                tr.bg_shift = shift
                tr.label.jump_frames.append(i)
            if scenario.sigma_v > 0.0:
                u += obs_rng.normal(0.0, scenario.sigma_v)
                v += obs_rng.normal(0.0, scenario.sigma_v)
            tu, tv, _ = _project(R, cam_p, lm.position)
            tr.label.frames.append(i)
            tr.label.true_uv.append((tu, tv))
            emitted.append((tid, float(u), float(v)))
        for tid in gone:
            in_use.discard(active[tid].lm.lid)
            del active[tid]

        frames.append(FrameObs(index=i, t=float(gt.frame_ts[i]), obs=emitted))

    for tr in active.values():
        tr.label.end_frame = n_frames - 1
    return frames, labels


def simulate(scenario: SimScenario) -> SimDataset:
    """The full dataset a scenario defines: truth, sensors, tracks, labels."""
    gt = gen_trajectory(scenario)
    noise = ImuNoise() if scenario.imu_noise else None
    ts, gyro, accel = synth_imu(gt, noise, scenario.gyro_bias,
                                scenario.accel_bias, seed=scenario.seed)
    landmarks = make_landmarks(scenario)
    frames, labels = synth_tracks(scenario, gt, landmarks)
    return SimDataset(scenario=scenario, gt=gt, imu_ts=ts, imu_gyro=gyro,
                      imu_accel=accel, frames=frames, labels=labels,
                      landmarks=landmarks)
