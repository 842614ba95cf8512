"""Rotation / projection primitive checks."""

import numpy as np
import pytest

from blockvio import geometry as geo
from blockvio.errors import NonPositiveDepth


def random_quat(rng):
    q = rng.normal(size=4)
    return q / np.linalg.norm(q)


def test_project_trivial():
    assert np.allclose(geo.project(np.array([0.0, 0.0, 2.0])), [0.0, 0.0])
    assert np.allclose(geo.project(np.array([1.0, -2.0, 2.0])), [0.5, -1.0])


def test_project_rejects_nonpositive_depth():
    with pytest.raises(NonPositiveDepth):
        geo.project(np.array([0.1, 0.1, 0.0]))
    with pytest.raises(NonPositiveDepth):
        geo.project(np.array([0.1, 0.1, -1.0]))


def test_back_project_roundtrip():
    rng = np.random.default_rng(0)
    for _ in range(200):
        u = rng.uniform(-1.0, 1.0, size=2)
        assert np.allclose(geo.project(geo.back_project(u)), u, atol=1e-12)


def test_exp_log_roundtrip():
    rng = np.random.default_rng(1)
    for _ in range(300):
        axis = rng.normal(size=3)
        axis /= np.linalg.norm(axis)
        theta = rng.uniform(0.0, np.pi - 0.1)
        w = theta * axis
        assert np.linalg.norm(geo.quat_log(geo.quat_exp(w)) - w) <= 1e-9


def test_exp_small_angle_series():
    w = np.array([1e-10, -2e-10, 5e-11])
    q = geo.quat_exp(w)
    assert abs(np.linalg.norm(q) - 1.0) < 1e-15
    assert np.allclose(geo.quat_log(q), w, atol=1e-15)


def test_quat_mul_matches_matrix_product():
    rng = np.random.default_rng(2)
    for _ in range(100):
        a, b = random_quat(rng), random_quat(rng)
        Rab = geo.quat_to_matrix(geo.quat_mul(a, b))
        assert np.allclose(Rab, geo.quat_to_matrix(a) @ geo.quat_to_matrix(b), atol=1e-12)


def test_quat_left_right_matrices():
    rng = np.random.default_rng(3)
    for _ in range(50):
        a, b = random_quat(rng), random_quat(rng)
        ab = geo.quat_mul(a, b)
        assert np.allclose(geo.quat_left(a) @ b, ab, atol=1e-12)
        assert np.allclose(geo.quat_right(b) @ a, ab, atol=1e-12)


def test_pose_compose_inverse():
    rng = np.random.default_rng(4)
    for _ in range(100):
        a = geo.Pose(random_quat(rng), rng.normal(size=3))
        b = geo.Pose(random_quat(rng), rng.normal(size=3))
        pt = rng.normal(size=3)
        assert np.allclose(a.compose(b).transform(pt), a.transform(b.transform(pt)), atol=1e-10)
        ident = a.compose(a.inverse())
        assert np.allclose(ident.p, 0.0, atol=1e-12)
        assert np.allclose(np.abs(ident.q[0]), 1.0, atol=1e-12)


def test_boxplus_zero_increment_is_identity():
    rng = np.random.default_rng(5)
    pose = geo.Pose(random_quat(rng), rng.normal(size=3))
    out = geo.boxplus(pose, np.zeros(6))
    assert np.allclose(out.p, pose.p) and np.allclose(out.q, pose.q)
    v = rng.normal(size=3)
    assert np.allclose(geo.boxplus(v, np.zeros(3)), v)


def test_boxplus_rotation_is_right_multiplied():
    rng = np.random.default_rng(6)
    pose = geo.Pose(random_quat(rng), rng.normal(size=3))
    delta = np.concatenate([rng.normal(size=3), 0.1 * rng.normal(size=3)])
    out = geo.boxplus(pose, delta)
    assert np.allclose(out.p, pose.p + delta[:3])
    expected = geo.quat_mul(pose.q, geo.quat_exp(delta[3:]))
    assert np.allclose(out.q, expected / np.linalg.norm(expected), atol=1e-12)
    assert abs(np.linalg.norm(out.q) - 1.0) <= 1e-9


def test_batched_quat_helpers_match_scalar():
    rng = np.random.default_rng(7)
    a = np.stack([random_quat(rng) for _ in range(64)])
    b = np.stack([random_quat(rng) for _ in range(64)])
    ab = geo.quat_mul_batch(a, b)
    for i in range(64):
        assert np.allclose(ab[i], geo.quat_mul(a[i], b[i]), atol=1e-12)
    m = geo.quat_to_matrix_batch(a)
    for i in range(0, 64, 7):
        assert np.allclose(m[i], geo.quat_to_matrix(a[i]), atol=1e-12)
    w = 0.3 * rng.normal(size=(32, 3))
    qe = geo.quat_exp_batch(w)
    for i in range(0, 32, 5):
        assert np.allclose(qe[i], geo.quat_exp(w[i]), atol=1e-12)


def test_project_jacobian_finite_difference():
    rng = np.random.default_rng(8)
    for _ in range(50):
        p = np.array([rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(0.5, 5.0)])
        J = geo.project_jacobian(p)
        eps = 1e-7
        for k in range(3):
            dp = np.zeros(3)
            dp[k] = eps
            num = (geo.project(p + dp) - geo.project(p - dp)) / (2 * eps)
            assert np.allclose(J[:, k], num, atol=1e-6)
