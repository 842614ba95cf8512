"""Tests for the measurement factors.

The inertial-factor Jacobians are checked against central differences on a
wide sweep of random configurations; the preintegration is checked against a
fine-substep oracle, a Monte-Carlo covariance experiment, and a
re-preintegration oracle for the bias-correction terms.
"""

import numpy as np
import pytest

from blockvio import geometry as geo
from blockvio import factors
from blockvio.errors import (EmptyImuSpan, NonMonotoneTimestamps,
                             NonPositiveDepth)
from blockvio.factors import (ImuNoise, bootstrap_prior,
                              depth_prediction_residual, imu_residual,
                              predict_inverse_depth, preintegrate,
                              prior_cost, prior_delta, prior_residual,
                              visual_residual)
from blockvio.geometry import Pose
from blockvio.state import (BlockLayout, GlobalState, KeyframeState,
                            WindowGraph, camera_pose_from_imu, imu_pose_of)

RATE = 200.0
DT = 1.0 / RATE


def smooth_signals(ts, rng):
    """Band-limited gyro/accel measurement signals over the given times."""
    cg = rng.normal(0.0, 0.4, (3, 3))
    ca = rng.normal(0.0, 1.5, (3, 3))
    freqs = np.array([0.7, 1.3, 2.9])
    phases = np.array([0.0, 1.0, 2.0])
    arg = 2 * np.pi * freqs[None, :] * ts[:, None] + phases[None, :]
    gyro = np.sin(arg) @ cg
    accel = np.cos(arg + 0.5) @ ca + np.array([0.0, 0.0, 9.81])
    return gyro, accel


def propagate_truth(ts, gyro, accel, bg, ba, gravity, p0, q0, v0):
    """Midpoint strapdown integration of noiseless measurements."""
    p, q, v = p0.copy(), q0.copy(), v0.copy()
    for k in range(ts.size - 1):
        dt = ts[k + 1] - ts[k]
        w_mid = 0.5 * (gyro[k] + gyro[k + 1]) - bg
        q_next = geo.quat_normalize(geo.quat_mul(q, geo.quat_exp(w_mid * dt)))
        a_mid = 0.5 * (geo.quat_to_matrix(q) @ (accel[k] - ba)
                       + geo.quat_to_matrix(q_next) @ (accel[k + 1] - ba))
        a_world = a_mid + gravity
        p = p + v * dt + 0.5 * a_world * dt * dt
        v = v + a_world * dt
        q = q_next
    return p, q, v


def random_global(rng):
    ext = Pose(q=geo.quat_exp(rng.normal(0.0, 0.3, 3)), p=rng.normal(0.0, 0.05, 3))
    return GlobalState(scale=float(rng.uniform(0.6, 2.0)),
                       q_iv=geo.quat_exp(rng.normal(0.0, 0.5, 3)),
                       extrinsics=ext)


# ---------------------------------------------------------------------------
# preintegration


def test_preintegrate_rejects_bad_spans():
    ts = np.array([0.0])
    z = np.zeros((1, 3))
    with pytest.raises(EmptyImuSpan):
        preintegrate(ts, z, z, np.zeros(3), np.zeros(3), ImuNoise())
    ts = np.array([0.0, 0.1, 0.1])
    z = np.zeros((3, 3))
    with pytest.raises(NonMonotoneTimestamps):
        preintegrate(ts, z, z, np.zeros(3), np.zeros(3), ImuNoise())


def test_preintegrate_zero_motion():
    ts = np.arange(21) * DT
    gyro = np.zeros((21, 3))
    accel = np.zeros((21, 3))
    pre = preintegrate(ts, gyro, accel, np.zeros(3), np.zeros(3), ImuNoise())
    assert np.allclose(pre.alpha, 0.0)
    assert np.allclose(pre.beta, 0.0)
    assert np.allclose(pre.gamma, geo.quat_identity())
    assert pre.dt == pytest.approx(20 * DT)
    # covariance must be symmetric positive definite
    assert np.allclose(pre.covariance, pre.covariance.T)
    assert np.all(np.linalg.eigvalsh(pre.covariance) > 0.0)


def test_preintegrate_constant_rotation():
    ts = np.arange(41) * DT
    w = np.array([0.0, 0.0, 1.3])
    gyro = np.tile(w, (41, 1))
    accel = np.zeros((41, 3))
    pre = preintegrate(ts, gyro, accel, np.zeros(3), np.zeros(3), ImuNoise())
    expect = geo.quat_exp(w * ts[-1])
    assert np.allclose(pre.gamma, expect, atol=1e-12)


def test_preintegrate_constant_acceleration():
    ts = np.arange(41) * DT
    a = np.array([0.3, -0.2, 0.5])
    gyro = np.zeros((41, 3))
    accel = np.tile(a, (41, 1))
    pre = preintegrate(ts, gyro, accel, np.zeros(3), np.zeros(3), ImuNoise())
    T = ts[-1]
    assert np.allclose(pre.beta, a * T, atol=1e-12)
    assert np.allclose(pre.alpha, 0.5 * a * T * T, atol=1e-12)


def test_preintegrate_matches_fine_substep_oracle():
    """Midpoint integrals converge at second order to a dense reference."""
    rng = np.random.default_rng(7)
    T = 0.4
    errs = []
    for factor in (1, 2):
        n_fine = 3200
        tf = np.linspace(0.0, T, n_fine + 1)
        gyro_f, accel_f = smooth_signals(tf, np.random.default_rng(7))
        fine = preintegrate(tf, gyro_f, accel_f, np.zeros(3), np.zeros(3), ImuNoise())
        step = 160 // factor  # coarse sampling: 20/40 intervals
        tc = tf[::step]
        coarse = preintegrate(tc, gyro_f[::step], accel_f[::step],
                              np.zeros(3), np.zeros(3), ImuNoise())
        e = (np.linalg.norm(coarse.alpha - fine.alpha)
             + np.linalg.norm(coarse.beta - fine.beta)
             + np.linalg.norm(geo.quat_log(
                 geo.quat_mul(geo.quat_conj(fine.gamma), coarse.gamma))))
        errs.append(e)
    assert errs[0] < 1e-2
    # halving the step should cut the error by about four (second order)
    assert errs[1] < errs[0] / 2.5


def test_preintegrate_covariance_monte_carlo():
    """Sampled dispersion of the integrals matches the propagated covariance."""
    rng = np.random.default_rng(42)
    n = 81
    ts = np.arange(n) * DT
    gyro, accel = smooth_signals(ts, rng)
    noise = ImuNoise(gyro=1.7e-4, accel=2e-3, gyro_walk=1e-12, accel_walk=1e-12)
    clean = preintegrate(ts, gyro, accel, np.zeros(3), np.zeros(3), noise)
    sg = noise.gyro / np.sqrt(DT)
    sa = noise.accel / np.sqrt(DT)
    trials = 600
    errs = np.zeros((trials, 9))
    for t in range(trials):
        g = gyro + rng.normal(0.0, sg, (n, 3))
        a = accel + rng.normal(0.0, sa, (n, 3))
        p = preintegrate(ts, g, a, np.zeros(3), np.zeros(3), noise)
        errs[t, 0:3] = p.alpha - clean.alpha
        errs[t, 3:6] = geo.quat_log(geo.quat_mul(geo.quat_conj(clean.gamma), p.gamma))
        errs[t, 6:9] = p.beta - clean.beta
    sample = errs.T @ errs / trials
    pred = clean.covariance[:9, :9]
    ratio = np.diag(sample) / np.diag(pred)
    assert np.all(ratio > 0.7) and np.all(ratio < 1.4), ratio


def test_bias_jacobian_matches_repreintegration():
    """First-order bias correction tracks a re-integration at the new bias."""
    rng = np.random.default_rng(3)
    ts = np.arange(41) * DT
    gyro, accel = smooth_signals(ts, rng)
    bg0 = np.array([0.01, -0.02, 0.015])
    ba0 = np.array([0.05, 0.03, -0.04])
    pre = preintegrate(ts, gyro, accel, bg0, ba0, ImuNoise())
    for _ in range(20):
        dbg = rng.uniform(-1e-3, 1e-3, 3)
        dba = rng.uniform(-1e-3, 1e-3, 3)
        ref = preintegrate(ts, gyro, accel, bg0 + dbg, ba0 + dba, ImuNoise())
        Jb = pre.bias_jacobian
        alpha_c = pre.alpha + Jb[0:3, 0:3] @ dbg + Jb[0:3, 3:6] @ dba
        beta_c = pre.beta + Jb[6:9, 0:3] @ dbg + Jb[6:9, 3:6] @ dba
        gamma_c = geo.quat_mul(pre.gamma, geo.quat_exp(Jb[3:6, 0:3] @ dbg))
        assert np.linalg.norm(alpha_c - ref.alpha) < 1e-6
        assert np.linalg.norm(beta_c - ref.beta) < 1e-6
        dth = geo.quat_log(geo.quat_mul(geo.quat_conj(ref.gamma), gamma_c))
        assert np.linalg.norm(dth) < 1e-6


# ---------------------------------------------------------------------------
# inertial factor


def make_consistent_pair(rng, n_samples=21):
    """Ground-truth keyframe pair whose IMU span reproduces the states."""
    g = random_global(rng)
    ts = np.arange(n_samples) * DT
    gyro, accel = smooth_signals(ts, rng)
    bg = rng.normal(0.0, 0.01, 3)
    ba = rng.normal(0.0, 0.05, 3)
    meas_g = gyro + bg
    meas_a = accel + ba
    p0 = rng.normal(0.0, 1.0, 3)
    q0 = geo.quat_exp(rng.normal(0.0, 0.8, 3))
    v0 = rng.normal(0.0, 0.5, 3)
    p1, q1, v1 = propagate_truth(ts, meas_g, meas_a, bg, ba, g.gravity, p0, q0, v0)
    kf = []
    for idx, (p, q, v) in enumerate(((p0, q0, v0), (p1, q1, v1))):
        cam = camera_pose_from_imu(Pose(q=q, p=p), g)
        kf.append(KeyframeState(frame_index=idx + 1, timestamp=float(idx),
                                pose=cam, velocity=v.copy(),
                                gyro_bias=bg.copy(), accel_bias=ba.copy()))
    pre = preintegrate(ts, meas_g, meas_a, bg, ba, ImuNoise())
    return kf[0], kf[1], g, pre


def test_imu_residual_zero_on_consistent_states():
    rng = np.random.default_rng(11)
    for _ in range(5):
        kf_i, kf_j, g, pre = make_consistent_pair(rng)
        r, _ = imu_residual(kf_i, kf_j, g, pre, with_jacobians=False)
        assert np.linalg.norm(r) < 1e-5


def test_imu_residual_sees_bias_change():
    rng = np.random.default_rng(12)
    kf_i, kf_j, g, pre = make_consistent_pair(rng)
    kf_j.gyro_bias = kf_j.gyro_bias + np.array([1e-3, 0, 0])
    r, _ = imu_residual(kf_i, kf_j, g, pre, with_jacobians=False)
    assert np.linalg.norm(r) > 1e-3


def boxplus_state(kf_i, kf_j, g, key, delta):
    """Apply a tangent step to one state key, copying the containers."""
    kf_i, kf_j, g = kf_i.copy(), kf_j.copy(), g.copy()
    kind = key[0]
    if kind == "pose":
        kf = kf_i if key[1] == kf_i.frame_index else kf_j
        kf.pose = geo.boxplus(kf.pose, delta)
    elif kind == "vel":
        kf = kf_i if key[1] == kf_i.frame_index else kf_j
        kf.velocity = kf.velocity + delta
    elif kind == "bias":
        kf = kf_i if key[1] == kf_i.frame_index else kf_j
        kf.gyro_bias = kf.gyro_bias + delta[0:3]
        kf.accel_bias = kf.accel_bias + delta[3:6]
    elif kind == "scale":
        g.scale = g.scale + float(delta[0])
    elif kind == "qiv":
        g.q_iv = geo.quat_normalize(geo.quat_mul(g.q_iv, geo.quat_exp(delta)))
    return kf_i, kf_j, g


def test_imu_jacobians_match_central_differences():
    """Analytic blocks vs central differences on >= 100 random configs."""
    rng = np.random.default_rng(99)
    eps = 1e-6
    checked = 0
    for trial in range(110):
        kf_i, kf_j, g, pre = make_consistent_pair(rng)
        # move the states off the consistent point so the residual is generic,
        # and away from the linearization biases to exercise the corrections
        kf_i.pose = geo.boxplus(kf_i.pose, rng.normal(0.0, 0.05, 6))
        kf_j.pose = geo.boxplus(kf_j.pose, rng.normal(0.0, 0.05, 6))
        kf_i.velocity = kf_i.velocity + rng.normal(0.0, 0.1, 3)
        kf_j.velocity = kf_j.velocity + rng.normal(0.0, 0.1, 3)
        kf_i.gyro_bias = kf_i.gyro_bias + rng.normal(0.0, 2e-3, 3)
        kf_i.accel_bias = kf_i.accel_bias + rng.normal(0.0, 2e-2, 3)
        kf_j.gyro_bias = kf_j.gyro_bias + rng.normal(0.0, 2e-3, 3)
        kf_j.accel_bias = kf_j.accel_bias + rng.normal(0.0, 2e-2, 3)
        _, jac = imu_residual(kf_i, kf_j, g, pre)
        for key, J in jac.items():
            dim = J.shape[1]
            Jfd = np.zeros_like(J)
            for c in range(dim):
                d = np.zeros(dim)
                d[c] = eps
                rp, _ = imu_residual(*boxplus_state(kf_i, kf_j, g, key, d),
                                     pre, with_jacobians=False)
                rm, _ = imu_residual(*boxplus_state(kf_i, kf_j, g, key, -d),
                                     pre, with_jacobians=False)
                Jfd[:, c] = (rp - rm) / (2 * eps)
            scale = max(1.0, np.abs(Jfd).max())
            err = np.abs(J - Jfd).max() / scale
            assert err < 1e-5, (trial, key, err)
        checked += 1
    assert checked >= 100


def test_imu_residual_gauge_invariance():
    """A similarity remap of the visual frame, absorbed by scale and the
    visual-to-inertial rotation, leaves the inertial residual unchanged."""
    rng = np.random.default_rng(21)
    kf_i, kf_j, g, pre = make_consistent_pair(rng)
    kf_i.pose = geo.boxplus(kf_i.pose, rng.normal(0.0, 0.1, 6))
    r0, _ = imu_residual(kf_i, kf_j, g, pre, with_jacobians=False)
    q_g = geo.quat_exp(rng.normal(0.0, 0.7, 3))
    R_g = geo.quat_to_matrix(q_g)
    t_g = rng.normal(0.0, 2.0, 3)
    s_g = 1.7
    for kf in (kf_i, kf_j):
        kf.pose = Pose(q=geo.quat_mul(q_g, kf.pose.q),
                       p=(R_g @ kf.pose.p + t_g) / s_g)
    g2 = g.copy()
    g2.scale = g.scale * s_g
    g2.q_iv = geo.quat_mul(g.q_iv, geo.quat_conj(q_g))
    r1, _ = imu_residual(kf_i, kf_j, g2, pre, with_jacobians=False)
    assert np.linalg.norm(r1 - r0) < 1e-8


# ---------------------------------------------------------------------------
# observation wrappers


def make_view_pair(rng):
    host = KeyframeState(frame_index=1, timestamp=0.0,
                         pose=Pose(q=geo.quat_exp(rng.normal(0.0, 0.1, 3)),
                                   p=rng.normal(0.0, 0.2, 3)))
    target = KeyframeState(frame_index=2, timestamp=0.05,
                           pose=Pose(q=geo.quat_exp(rng.normal(0.0, 0.1, 3)),
                                     p=host.pose.p + rng.normal(0.0, 0.3, 3)))
    u_host = rng.uniform(-0.4, 0.4, 2)
    lam = float(rng.uniform(0.2, 1.0))
    return host, target, u_host, lam


def test_visual_residual_zero_at_reprojection():
    rng = np.random.default_rng(5)
    for _ in range(20):
        host, target, u_host, lam = make_view_pair(rng)
        p_w = host.pose.transform(geo.back_project(u_host) / lam)
        p_c = target.pose.inverse().transform(p_w)
        if p_c[2] < 0.1:
            continue
        u_t = geo.project(p_c)
        r = visual_residual(host, target, lam, u_host, u_t)
        assert np.linalg.norm(r) < 1e-12
        r2, J = visual_residual(host, target, lam, u_host, u_t,
                                with_jacobians=True)
        assert J.shape == (2, 13)
        assert np.allclose(r, r2)


def test_visual_residual_raises_behind_camera():
    host = KeyframeState(frame_index=1, timestamp=0.0, pose=Pose())
    target = KeyframeState(frame_index=2, timestamp=0.1,
                           pose=Pose(p=np.array([0.0, 0.0, 10.0])))
    # point at depth 2 ends up 8 units behind the target
    with pytest.raises(NonPositiveDepth):
        visual_residual(host, target, 0.5, np.zeros(2), np.zeros(2))


def test_predict_inverse_depth_translation_along_ray():
    host = KeyframeState(frame_index=1, timestamp=0.0, pose=Pose())
    target = KeyframeState(frame_index=2, timestamp=0.1,
                           pose=Pose(p=np.array([0.0, 0.0, 1.5])))
    lam = 0.25  # depth 4 from host, so 2.5 from the target
    lam_new = predict_inverse_depth(host, target, lam, np.zeros(2))
    assert lam_new == pytest.approx(1.0 / 2.5, rel=1e-12)
    assert depth_prediction_residual(host, target, lam, np.zeros(2),
                                     lam_new) == pytest.approx(0.0)


def test_visual_residual_gauge_invariance():
    """Rigid-plus-scale remaps of the visual frame leave reprojection and
    the transported inverse depth (rescaled) unchanged."""
    rng = np.random.default_rng(31)
    for _ in range(10):
        host, target, u_host, lam = make_view_pair(rng)
        p_w = host.pose.transform(geo.back_project(u_host) / lam)
        p_c = target.pose.inverse().transform(p_w)
        if p_c[2] < 0.1:
            continue
        u_t = geo.project(p_c) + rng.normal(0.0, 0.01, 2)
        r0 = visual_residual(host, target, lam, u_host, u_t)
        q_g = geo.quat_exp(rng.normal(0.0, 0.5, 3))
        R_g = geo.quat_to_matrix(q_g)
        t_g = rng.normal(0.0, 1.0, 3)
        s_g = float(rng.uniform(0.5, 2.0))
        for kf in (host, target):
            kf.pose = Pose(q=geo.quat_mul(q_g, kf.pose.q),
                           p=(R_g @ kf.pose.p + t_g) / s_g)
        r1 = visual_residual(host, target, lam * s_g, u_host, u_t)
        assert np.linalg.norm(r1 - r0) < 1e-10


# ---------------------------------------------------------------------------
# prior


def make_graph_for_prior():
    layout = BlockLayout(block_size=4, num_blocks=3)
    g = GlobalState()
    graph = WindowGraph(layout=layout, global_state=g)
    kf = KeyframeState(frame_index=1, timestamp=0.0,
                       pose=Pose(p=np.array([0.1, 0.2, 0.3])))
    graph.frames.append(kf)
    return graph, kf


def test_bootstrap_prior_zero_at_linearization():
    graph, kf = make_graph_for_prior()
    prior = bootstrap_prior(1, kf, graph.global_state)
    assert np.allclose(prior_delta(prior, graph), 0.0)
    assert np.allclose(prior_residual(prior, graph), 0.0)
    assert prior_cost(prior, graph) == pytest.approx(0.0)


def test_bootstrap_prior_pins_pose_scale_and_heading():
    graph, kf = make_graph_for_prior()
    g = graph.global_state
    prior = bootstrap_prior(1, kf, g)
    # translate the first pose: quadratic cost with the gauge weight
    kf.pose = Pose(q=kf.pose.q, p=kf.pose.p + np.array([1e-3, 0, 0]))
    assert prior_cost(prior, graph) == pytest.approx(factors.GAUGE_WEIGHT * 1e-6)
    kf.pose = Pose(q=kf.pose.q, p=kf.pose.p - np.array([1e-3, 0, 0]))
    # scale shift is pinned too
    g.scale = 1.0 + 1e-3
    assert prior_cost(prior, graph) == pytest.approx(factors.GAUGE_WEIGHT * 1e-6)
    g.scale = 1.0
    # rotating the visual frame about gravity is pinned ...
    a = geo.quat_to_matrix(g.q_iv).T @ np.array([0.0, 0.0, 1.0])
    g.q_iv = geo.quat_mul(g.q_iv, geo.quat_exp(1e-3 * a))
    assert prior_cost(prior, graph) == pytest.approx(
        factors.GAUGE_WEIGHT * 1e-6, rel=1e-6)
    # ... but tilting it is left to the inertial factors
    g.q_iv = geo.quat_identity()
    g.q_iv = geo.quat_mul(g.q_iv, geo.quat_exp(np.array([1e-3, 0.0, 0.0])))
    assert abs(prior_cost(prior, graph)) < 1e-12 * factors.GAUGE_WEIGHT


def test_prior_residual_tracks_information():
    rng = np.random.default_rng(17)
    graph, kf = make_graph_for_prior()
    prior = bootstrap_prior(1, kf, graph.global_state)
    prior.H = prior.H + np.eye(10)  # make it full-rank for the check
    delta = rng.normal(0.0, 1e-4, 10)
    kf.pose = geo.boxplus(kf.pose, delta[0:6])
    graph.global_state.scale += delta[6]
    graph.global_state.q_iv = geo.quat_mul(graph.global_state.q_iv,
                                           geo.quat_exp(delta[7:10]))
    d = prior_delta(prior, graph)
    assert np.allclose(d, delta, atol=1e-9)
    assert np.allclose(prior_residual(prior, graph), prior.H @ delta, atol=1e-4)


def test_imu_pose_chain_roundtrip():
    rng = np.random.default_rng(55)
    for _ in range(10):
        g = random_global(rng)
        cam = Pose(q=geo.quat_exp(rng.normal(0.0, 1.0, 3)),
                   p=rng.normal(0.0, 2.0, 3))
        kf = KeyframeState(frame_index=1, timestamp=0.0, pose=cam)
        imu = imu_pose_of(kf, g)
        back = camera_pose_from_imu(imu, g)
        assert np.linalg.norm(back.p - cam.p) < 1e-10
        dq = geo.quat_mul(geo.quat_conj(back.q), cam.q)
        assert np.linalg.norm(geo.quat_log(dq)) < 1e-10
