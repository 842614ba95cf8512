"""Shared builders: geometrically consistent sliding-window problems.

Every window built here is exact at its construction point — observations
are true projections, depth entries hold true inverse depths, inertial
integrals come from the same measurement stream that generated the frame
states — so all residuals start at zero. Tests perturb from there.
"""

import numpy as np

from blockvio import factors
from blockvio import geometry as geo
from blockvio.errors import NoValidReference
from blockvio.factors import (GAUGE_WEIGHT, ImuFactor, ImuNoise, PriorFactor,
                              bootstrap_prior, preintegrate)
from blockvio.geometry import Pose
from blockvio.solver import refresh_dependent_depths
from blockvio.state import (BlockLayout, DepthEntry, FeatureTrack,
                            GlobalState, KeyframeState, WindowGraph,
                            camera_pose_from_imu, reference_frame_index)

RATE = 200.0


def motion_signals(ts, rng, rot_scale=0.12, acc_scale=0.7):
    """Band-limited body rates and specific forces, hover-like on average."""
    cg = rng.normal(0.0, rot_scale, (3, 3))
    ca = rng.normal(0.0, acc_scale, (3, 3))
    freqs = np.array([0.4, 0.9, 1.7])
    phases = rng.uniform(0.0, 2.0 * np.pi, 3)
    arg = 2.0 * np.pi * freqs[None, :] * ts[:, None] + phases[None, :]
    gyro = np.sin(arg) @ cg
    accel = np.cos(arg + 0.3) @ ca + np.array([0.0, 0.0, 9.81])
    return gyro, accel


def _strapdown(ts, gyro, accel, gravity, q0, p0, v0, keep_every):
    """Midpoint integration, recording every ``keep_every``-th sample."""
    q, p, v = q0.copy(), p0.copy(), v0.copy()
    poses, vels = [Pose(q.copy(), p.copy())], [v.copy()]
    for k in range(ts.size - 1):
        dt = ts[k + 1] - ts[k]
        w_mid = 0.5 * (gyro[k] + gyro[k + 1])
        q_next = geo.quat_normalize(geo.quat_mul(q, geo.quat_exp(w_mid * dt)))
        a_mid = 0.5 * (geo.quat_to_matrix(q) @ accel[k]
                       + geo.quat_to_matrix(q_next) @ accel[k + 1])
        a_world = a_mid + gravity
        p = p + v * dt + 0.5 * a_world * dt * dt
        v = v + a_world * dt
        q = q_next
        if (k + 1) % keep_every == 0:
            poses.append(Pose(q.copy(), p.copy()))
            vels.append(v.copy())
    return poses, vels


def place_track(graph, rng, tid, a, b):
    """A feature visible from every frame in [a, b], with exact entries."""
    layout = graph.layout
    for _ in range(300):
        mid = graph.frame((a + b) // 2).pose
        z = float(rng.uniform(4.0, 10.0))
        uv = rng.uniform(-0.45, 0.45, 2)
        X = mid.transform(z * np.array([uv[0], uv[1], 1.0]))
        obs = {}
        for k in range(a, b + 1):
            cam = graph.frame(k).pose
            x_c = cam.rotation().T @ (X - cam.p)
            if x_c[2] < 0.8 or np.max(np.abs(x_c[:2] / x_c[2])) > 1.4:
                obs = None
                break
            obs[k] = x_c[:2] / x_c[2]
        if obs:
            break
    else:
        raise RuntimeError("could not place a landmark visible over the span")
    track = FeatureTrack(feature_id=tid)
    for k, u in obs.items():
        track.add_observation(k, u)
    refs = []
    for k in sorted(obs):
        try:
            r = reference_frame_index(track, k, layout)
        except NoValidReference:
            continue
        if r not in refs:
            refs.append(r)
    prev = None
    for r in sorted(refs):
        cam = graph.frame(r).pose
        z_r = float((cam.rotation().T @ (X - cam.p))[2])
        track.depth_entries[r] = DepthEntry(
            inverse_depth=1.0 / z_r, initialized=True, predicted_from=prev)
        prev = r
    graph.tracks[tid] = track
    return track


def make_consistent_window(rng, layout=None, n_frames=None, n_short=8,
                           n_long=8, samples_per_frame=10, with_prior=True,
                           global_state=None):
    """A window whose states, observations, and integrals agree exactly."""
    layout = layout or BlockLayout(block_size=4, num_blocks=3)
    n_frames = n_frames or layout.capacity
    if n_frames < 2 or n_frames > layout.capacity:
        raise ValueError("frame count outside the window capacity")
    g = global_state or GlobalState(
        scale=float(rng.uniform(0.8, 1.6)),
        q_iv=geo.quat_exp(rng.normal(0.0, 0.2, 3)),
        extrinsics=Pose(q=geo.quat_exp(rng.normal(0.0, 0.1, 3)),
                        p=rng.normal(0.0, 0.03, 3)),
    )
    bg = np.array([0.004, -0.002, 0.003])
    ba = np.array([-0.03, 0.02, 0.05])

    spf = samples_per_frame
    n_samples = (n_frames - 1) * spf + 1
    ts = np.arange(n_samples) / RATE
    gyro_t, accel_t = motion_signals(ts, rng)
    q0 = geo.quat_exp(rng.normal(0.0, 0.1, 3))
    p0 = rng.normal(0.0, 0.5, 3)
    v0 = rng.normal(0.0, 0.2, 3)
    poses_imu, vels = _strapdown(ts, gyro_t, accel_t, g.gravity, q0, p0, v0,
                                 keep_every=spf)

    graph = WindowGraph(layout=layout, global_state=g)
    for k in range(n_frames):
        graph.frames.append(KeyframeState(
            frame_index=k + 1, timestamp=float(ts[k * spf]),
            pose=camera_pose_from_imu(poses_imu[k], g),
            velocity=vels[k].copy(), gyro_bias=bg.copy(),
            accel_bias=ba.copy(), global_id=k + 1))

    gyro_m = gyro_t + bg
    accel_m = accel_t + ba
    noise = ImuNoise()
    for k in range(1, n_frames):
        lo, hi = (k - 1) * spf, k * spf
        pre = preintegrate(ts[lo:hi + 1], gyro_m[lo:hi + 1],
                           accel_m[lo:hi + 1], bg, ba, noise)
        graph.imu_factors.append(ImuFactor(i=k, j=k + 1, pre=pre))

    M = layout.block_size
    tid = 0
    for _ in range(n_long):
        if n_frames <= 2 * M:
            break
        a = int(rng.integers(1, max(2, n_frames - 2 * M)))
        b = int(rng.integers(min(a + 2 * M, n_frames), n_frames + 1))
        while layout.block_of(b) - layout.block_of(a) < 2:
            b = min(b + 1, n_frames)
            if b == n_frames and layout.block_of(b) - layout.block_of(a) < 2:
                a = max(1, a - 1)
        tid += 1
        place_track(graph, rng, tid, a, b)
    for _ in range(n_short):
        a = int(rng.integers(1, n_frames))
        b = min(n_frames, a + int(rng.integers(1, M + 1)))
        tid += 1
        place_track(graph, rng, tid, a, b)

    if with_prior:
        graph.prior = anchored_prior(graph)
    return graph


def anchored_prior(graph):
    """Boundary prior like a marginalized history would leave behind."""
    return factors.anchored_prior(graph.frame(1), graph.global_state)


def perturb_states(graph, rng, pose_t=0.02, pose_r=0.01, vel=0.02,
                   bias=0.002, depth_rel=0.02, scale=0.01, qiv=0.005,
                   zero_cov=True):
    """Random local offsets on every state; chained entries stay consistent
    when ``zero_cov`` is set (they are recomputed from their parents)."""
    for kf in graph.frames:
        kf.pose = geo.boxplus(kf.pose, np.concatenate(
            [rng.normal(0.0, pose_t, 3), rng.normal(0.0, pose_r, 3)]))
        kf.velocity = kf.velocity + rng.normal(0.0, vel, 3)
        kf.gyro_bias = kf.gyro_bias + rng.normal(0.0, bias, 3)
        kf.accel_bias = kf.accel_bias + rng.normal(0.0, bias, 3)
    gs = graph.global_state
    gs.scale += float(rng.normal(0.0, scale))
    gs.q_iv = geo.quat_normalize(geo.quat_mul(
        gs.q_iv, geo.quat_exp(rng.normal(0.0, qiv, 3))))
    for tid in sorted(graph.tracks):
        track = graph.tracks[tid]
        for ref in sorted(track.depth_entries):
            entry = track.depth_entries[ref]
            if zero_cov and entry.predicted_from is not None:
                continue
            entry.inverse_depth *= float(1.0 + rng.normal(0.0, depth_rel))
    if zero_cov:
        refresh_dependent_depths(graph)
