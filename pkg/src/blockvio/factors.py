"""Measurement factors: IMU preintegration, observation, depth carry-over, prior.

State keys shared with the solver:
``("pose", k)`` 6 (translation, rotation), ``("vel", k)`` 3, ``("bias", k)`` 6
(gyro then accel), ``("depth", track, ref)`` 1, ``("scale",)`` 1,
``("qiv",)`` 3.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np
import scipy.linalg

from . import geometry as geo
from . import kernels
from .errors import (DimensionMismatch, EmptyImuSpan, NonMonotoneTimestamps,
                     NonPositiveDepth)
from .geometry import Pose
from .state import GlobalState, KeyframeState

StateKey = Tuple

KEY_DIMS = {"pose": 6, "vel": 3, "bias": 6, "depth": 1, "scale": 1, "qiv": 3}


def key_dim(key: StateKey) -> int:
    return KEY_DIMS[key[0]]


@dataclass
class ImuNoise:
    """Continuous-time noise densities of the inertial unit."""

    gyro: float = 1.7e-4
    accel: float = 2e-3
    gyro_walk: float = 2e-5
    accel_walk: float = 3e-3


_SERIALS = iter(range(1, 1 << 62))


@dataclass
class PreintegratedImu:
    """Relative motion integral between two frames, at fixed linearization biases."""

    dt: float
    alpha: np.ndarray          # position integral
    beta: np.ndarray           # velocity integral
    gamma: np.ndarray          # rotation integral, quaternion
    covariance: np.ndarray     # 15x15 over [p, theta, v, bg, ba]
    bias_jacobian: np.ndarray  # 15x6 sensitivity to [bg, ba] at linearization
    gyro_bias_ref: np.ndarray
    accel_bias_ref: np.ndarray
    serial: int = field(default_factory=lambda: next(_SERIALS))
    _sqrt_info: Optional[np.ndarray] = field(
        default=None, repr=False, compare=False)

    def sqrt_information(self) -> np.ndarray:
        """Lower-triangular L with L^T L = covariance^{-1} (via Cholesky).

        Cached: a preintegration never changes once built, and the factor is
        re-evaluated every solver iteration.
        """
        if self._sqrt_info is None:
            Lp = np.linalg.cholesky(self.covariance)
            self._sqrt_info = scipy.linalg.solve_triangular(
                Lp, np.eye(15), lower=True)
        return self._sqrt_info


def preintegrate(ts: np.ndarray, gyro: np.ndarray, accel: np.ndarray,
                 gyro_bias: np.ndarray, accel_bias: np.ndarray,
                 noise: ImuNoise) -> PreintegratedImu:
    """Midpoint preintegration over a span of IMU samples.

    Args:
        ts: sample timestamps, strictly increasing, length >= 2.
        gyro, accel: body-frame angular rate / specific force per sample.
        gyro_bias, accel_bias: linearization biases.
        noise: continuous-time noise densities.

    Returns:
        The preintegrated motion with its 15x15 covariance and the 15x6
        sensitivity of the integrals to the linearization biases.
    """
    ts = np.asarray(ts, dtype=float)
    if ts.size < 2:
        raise EmptyImuSpan(f"need at least 2 samples, got {ts.size}")
    if np.any(np.diff(ts) <= 0.0):
        raise NonMonotoneTimestamps("sample timestamps must increase strictly")

    alpha = np.zeros(3)
    beta = np.zeros(3)
    gamma = geo.quat_identity()
    P = np.zeros((15, 15))
    J = np.eye(15)

    for k in range(ts.size - 1):
        dt = ts[k + 1] - ts[k]
        w_mid = 0.5 * (gyro[k] + gyro[k + 1]) - gyro_bias
        R_k = geo.quat_to_matrix(gamma)
        gamma_next = geo.quat_normalize(geo.quat_mul(gamma, geo.quat_exp(w_mid * dt)))
        R_k1 = geo.quat_to_matrix(gamma_next)
        a_k = accel[k] - accel_bias
        a_k1 = accel[k + 1] - accel_bias
        a_mid = 0.5 * (R_k @ a_k + R_k1 @ a_k1)

        alpha = alpha + beta * dt + 0.5 * a_mid * dt * dt
        beta = beta + a_mid * dt

        # error-state transition for [dp, dtheta, dv, dbg, dba]
        Adj = geo.quat_to_matrix(geo.quat_exp(w_mid * dt)).T
        Jr = geo.so3_right_jacobian(w_mid * dt)
        Sk = R_k @ geo.skew(a_k)
        Sk1 = R_k1 @ geo.skew(a_k1)
        dv_dth = -0.5 * dt * (Sk + Sk1 @ Adj)
        dv_dbg = 0.5 * dt * Sk1 @ Jr * dt
        dv_dba = -0.5 * dt * (R_k + R_k1)
        F = np.eye(15)
        F[0:3, 3:6] = 0.5 * dt * dv_dth
        F[0:3, 6:9] = np.eye(3) * dt
        F[0:3, 9:12] = 0.5 * dt * dv_dbg
        F[0:3, 12:15] = 0.5 * dt * dv_dba
        F[3:6, 3:6] = Adj
        F[3:6, 9:12] = -Jr * dt
        F[6:9, 3:6] = dv_dth
        F[6:9, 9:12] = dv_dbg
        F[6:9, 12:15] = dv_dba

        # additive step noise: one effective midpoint noise per step at the
        # full per-sample variance (each raw sample is shared by two steps,
        # so halving per input would undercount the continuous-time density)
        sg2 = noise.gyro ** 2 / dt
        sa2 = noise.accel ** 2 / dt
        G = np.zeros((15, 6))  # [n_gyro_mid, n_accel_mid]
        G[3:6, 0:3] = Jr * dt
        G[6:9, 0:3] = -0.5 * dt * dt * Sk1 @ Jr
        G[6:9, 3:6] = 0.5 * dt * (R_k + R_k1)
        G[0:3, :] = 0.5 * dt * G[6:9, :]
        Qn = np.diag([sg2] * 3 + [sa2] * 3)
        P = F @ P @ F.T + G @ Qn @ G.T
        P[9:12, 9:12] += np.eye(3) * noise.gyro_walk ** 2 * dt
        P[12:15, 12:15] += np.eye(3) * noise.accel_walk ** 2 * dt
        J = F @ J
        gamma = gamma_next

    # tiny floor keeps the covariance invertible over very short spans
    P = P + np.eye(15) * 1e-14
    return PreintegratedImu(
        dt=float(ts[-1] - ts[0]), alpha=alpha, beta=beta, gamma=gamma,
        covariance=P, bias_jacobian=J[:, 9:15].copy(),
        gyro_bias_ref=np.asarray(gyro_bias, float).copy(),
        accel_bias_ref=np.asarray(accel_bias, float).copy())


@dataclass
class ImuFactor:
    """Preintegrated constraint between window frames i and j (j = i + 1)."""

    i: int
    j: int
    pre: PreintegratedImu

    def keys(self) -> List[StateKey]:
        return [("pose", self.i), ("vel", self.i), ("bias", self.i),
                ("pose", self.j), ("vel", self.j), ("bias", self.j),
                ("scale",), ("qiv",)]


def _imu_chain(kf: KeyframeState, g: GlobalState):
    """IMU-frame pose of a camera state plus its partials.

    Returns (p_i, q_i, d_p) where d_p maps [dp_c, dth_c, ds, dth_iv] -> dp_I
    as a 3x10 matrix, and the rotation chain factors (R_e^T, (R_c R_e)^T)
    mapping [dth_c, dth_iv] into the right-perturbation of q_I.
    """
    ext = g.extrinsics
    R_iv = geo.quat_to_matrix(g.q_iv)
    R_c = kf.pose.rotation()
    R_e = ext.rotation()
    m = g.scale * kf.pose.p + R_c @ ext.p
    d_p = np.zeros((3, 10))
    d_p[:, 0:3] = g.scale * R_iv
    d_p[:, 3:6] = -R_iv @ R_c @ geo.skew(ext.p)
    d_p[:, 6] = R_iv @ kf.pose.p
    d_p[:, 7:10] = -R_iv @ geo.skew(m)
    p_i = R_iv @ m
    q_i = geo.quat_normalize(geo.quat_mul(g.q_iv, geo.quat_mul(kf.pose.q, ext.q)))
    return p_i, q_i, d_p, R_e.T, (R_c @ R_e).T


def imu_residual(kf_i: KeyframeState, kf_j: KeyframeState, g: GlobalState,
                 pre: PreintegratedImu, with_jacobians: bool = True):
    """Whitened 15-dim preintegration residual and its Jacobians.

    Returns (r, jac) where jac maps state keys (frame indices taken from the
    keyframes) to whitened 15 x dim blocks; jac is None when not requested.
    """
    T = pre.dt
    grav = g.gravity
    p_i, q_i, dpi, Rei_T, Rcei_T = _imu_chain(kf_i, g)
    p_j, q_j, dpj, Rej_T, Rcej_T = _imu_chain(kf_j, g)
    R_i = geo.quat_to_matrix(q_i)

    dbg = kf_i.gyro_bias - pre.gyro_bias_ref
    dba = kf_i.accel_bias - pre.accel_bias_ref
    Jb = pre.bias_jacobian
    alpha_c = pre.alpha + Jb[0:3, 0:3] @ dbg + Jb[0:3, 3:6] @ dba
    beta_c = pre.beta + Jb[6:9, 0:3] @ dbg + Jb[6:9, 3:6] @ dba
    eta = Jb[3:6, 0:3] @ dbg
    gamma_c = geo.quat_normalize(geo.quat_mul(pre.gamma, geo.quat_exp(eta)))

    m_p = p_j - p_i - kf_i.velocity * T - 0.5 * grav * T * T
    m_v = kf_j.velocity - kf_i.velocity - grav * T
    q_err = geo.quat_mul(geo.quat_conj(gamma_c), geo.quat_mul(geo.quat_conj(q_i), q_j))

    r = np.empty(15)
    r[0:3] = R_i.T @ m_p - alpha_c
    r[3:6] = 2.0 * q_err[1:]
    r[6:9] = R_i.T @ m_v - beta_c
    r[9:12] = kf_j.gyro_bias - kf_i.gyro_bias
    r[12:15] = kf_j.accel_bias - kf_i.accel_bias

    L = pre.sqrt_information()
    if not with_jacobians:
        return L @ r, None

    # partials w.r.t. IMU-frame perturbations
    dr_dpIi = np.zeros((15, 3))
    dr_dpIj = np.zeros((15, 3))
    dr_dphii = np.zeros((15, 3))
    dr_dphij = np.zeros((15, 3))
    dr_dpIi[0:3] = -R_i.T
    dr_dpIj[0:3] = R_i.T
    dr_dphii[0:3] = geo.skew(R_i.T @ m_p)
    dr_dphii[6:9] = geo.skew(R_i.T @ m_v)
    # rotation residual rows
    A = geo.quat_mul(geo.quat_conj(gamma_c), geo.quat_conj(q_i))
    Q = geo.quat_mul(A, q_j)
    dr_dphij[3:6] = Q[0] * np.eye(3) + geo.skew(Q[1:])
    Lg = geo.quat_left(geo.quat_conj(gamma_c))
    Rq = geo.quat_right(geo.quat_mul(geo.quat_conj(q_i), q_j))
    dr_dphii[3:6] = -(Lg @ Rq)[1:4, 1:4]

    jac: Dict[StateKey, np.ndarray] = {}
    ki, kj = kf_i.frame_index, kf_j.frame_index
    # frame i camera states
    Jpose_i = np.zeros((15, 6))
    Jpose_i[:, 0:3] = dr_dpIi @ dpi[:, 0:3]
    Jpose_i[:, 3:6] = dr_dpIi @ dpi[:, 3:6] + dr_dphii @ Rei_T
    jac[("pose", ki)] = Jpose_i
    Jv_i = np.zeros((15, 3))
    Jv_i[0:3] = -R_i.T * T
    Jv_i[6:9] = -R_i.T
    jac[("vel", ki)] = Jv_i
    Jb_i = np.zeros((15, 6))
    Jb_i[0:3, 0:3] = -Jb[0:3, 0:3]
    Jb_i[0:3, 3:6] = -Jb[0:3, 3:6]
    Jb_i[6:9, 0:3] = -Jb[6:9, 0:3]
    Jb_i[6:9, 3:6] = -Jb[6:9, 3:6]
    Rq_full = geo.quat_right(q_err)  # d/d(-u) on the left of the chain
    dtheta_corr = geo.so3_right_jacobian(eta) @ Jb[3:6, 0:3]
    Jb_i[3:6, 0:3] = -Rq_full[1:4, 1:4] @ dtheta_corr
    Jb_i[9:12, 0:3] = -np.eye(3)
    Jb_i[12:15, 3:6] = -np.eye(3)
    jac[("bias", ki)] = Jb_i
    # frame j camera states
    Jpose_j = np.zeros((15, 6))
    Jpose_j[:, 0:3] = dr_dpIj @ dpj[:, 0:3]
    Jpose_j[:, 3:6] = dr_dpIj @ dpj[:, 3:6] + dr_dphij @ Rej_T
    jac[("pose", kj)] = Jpose_j
    Jv_j = np.zeros((15, 3))
    Jv_j[6:9] = R_i.T
    jac[("vel", kj)] = Jv_j
    Jb_j = np.zeros((15, 6))
    Jb_j[9:12, 0:3] = np.eye(3)
    Jb_j[12:15, 3:6] = np.eye(3)
    jac[("bias", kj)] = Jb_j
    # shared states
    jac[("scale",)] = (dr_dpIi @ dpi[:, 6:7] + dr_dpIj @ dpj[:, 6:7])
    jac[("qiv",)] = (dr_dpIi @ dpi[:, 7:10] + dr_dpIj @ dpj[:, 7:10]
                     + dr_dphii @ Rcei_T + dr_dphij @ Rcej_T)

    wr = L @ r
    wjac = {k: L @ v for k, v in jac.items()}
    return wr, wjac


# ---------------------------------------------------------------------------
# observation factors (single-factor wrappers over the batched kernels)


def _as_batch(kf_host: KeyframeState, kf_target: KeyframeState, lam: float,
              u_host: np.ndarray, u_target: Optional[np.ndarray] = None):
    args = (
        kf_host.pose.q[None, :].copy(), kf_host.pose.p[None, :].copy(),
        kf_target.pose.q[None, :].copy(), kf_target.pose.p[None, :].copy(),
        np.array([lam], dtype=float),
        geo.back_project(u_host)[None, :].copy(),
    )
    if u_target is None:
        return args
    return args + (np.asarray(u_target, dtype=float)[None, :].copy(),)


def visual_residual(kf_host: KeyframeState, kf_target: KeyframeState, lam: float,
                    u_host: np.ndarray, u_target: np.ndarray,
                    with_jacobians: bool = False):
    """Reprojection residual of one observation (unwhitened).

    Raises NonPositiveDepth when the transported point is unusable.
    """
    args = _as_batch(kf_host, kf_target, lam, u_host, u_target)
    if with_jacobians:
        r, J, ok = kernels.visual_eval_jac(*args)
        if not ok[0]:
            raise NonPositiveDepth("observation factor is deactivated")
        return r[0], J[0]
    r, ok = kernels.visual_eval(*args)
    if not ok[0]:
        raise NonPositiveDepth("observation factor is deactivated")
    return r[0]


def predict_inverse_depth(kf_host: KeyframeState, kf_target: KeyframeState,
                          lam: float, u_host: np.ndarray) -> float:
    """Inverse depth of the host-anchored point seen from the target frame."""
    lam_new, _, ok = kernels.predict_eval_jac(*_as_batch(kf_host, kf_target, lam, u_host))
    if not ok[0]:
        raise NonPositiveDepth("transported depth at or below floor")
    return float(lam_new[0])


def depth_prediction_residual(kf_host: KeyframeState, kf_target: KeyframeState,
                              lam_parent: float, u_host: np.ndarray,
                              lam_child: float) -> float:
    """Carry-over consistency residual between chained depth entries."""
    return predict_inverse_depth(kf_host, kf_target, lam_parent, u_host) - lam_child


# ---------------------------------------------------------------------------
# prior


@dataclass
class PriorFactor:
    """Gaussian information over a set of states, frozen at marginalization.

    The residual is ``H @ delta - b`` with ``delta`` the boxminus of the
    current states from the stored linearization values.
    """

    keys: List[StateKey]
    H: np.ndarray
    b: np.ndarray
    values: Dict[StateKey, object] = field(default_factory=dict)
    serial: int = field(default_factory=lambda: next(_SERIALS))

    def dim(self) -> int:
        return sum(key_dim(k) for k in self.keys)

    def offsets(self) -> Dict[StateKey, int]:
        out, off = {}, 0
        for k in self.keys:
            out[k] = off
            off += key_dim(k)
        return out

    def __post_init__(self):
        d = self.dim()
        if self.H.shape != (d, d) or self.b.shape != (d,):
            raise DimensionMismatch(
                f"prior blocks {self.H.shape}/{self.b.shape} vs keys dim {d}")


def state_value(graph, key: StateKey):
    """Fetch the live value of a state key from a window graph."""
    kind = key[0]
    if kind == "pose":
        return graph.frame(key[1]).pose
    if kind == "vel":
        return graph.frame(key[1]).velocity
    if kind == "bias":
        kf = graph.frame(key[1])
        return np.concatenate([kf.gyro_bias, kf.accel_bias])
    if kind == "depth":
        return graph.tracks[key[1]].depth_entries[key[2]].inverse_depth
    if kind == "scale":
        return graph.global_state.scale
    if kind == "qiv":
        return graph.global_state.q_iv
    raise DimensionMismatch(f"unknown state key {key}")


def boxminus(key: StateKey, current, reference) -> np.ndarray:
    """Local coordinates of ``current`` around ``reference`` for one key."""
    kind = key[0]
    if kind == "pose":
        dq = geo.quat_mul(geo.quat_conj(reference.q), current.q)
        return np.concatenate([current.p - reference.p, geo.quat_log(dq)])
    if kind == "qiv":
        return geo.quat_log(geo.quat_mul(geo.quat_conj(reference), current))
    if kind in ("scale", "depth"):
        return np.array([current - reference])
    return np.asarray(current, float) - np.asarray(reference, float)


def prior_delta(prior: PriorFactor, graph) -> np.ndarray:
    """Stacked boxminus of the window's states from the prior linearization."""
    parts = [boxminus(k, state_value(graph, k), prior.values[k]) for k in prior.keys]
    return np.concatenate(parts) if parts else np.zeros(0)


def prior_residual(prior: PriorFactor, graph) -> np.ndarray:
    return prior.H @ prior_delta(prior, graph) - prior.b


def prior_cost(prior: PriorFactor, graph) -> float:
    """Quadratic cost contribution (up to the constant term)."""
    d = prior_delta(prior, graph)
    return float(d @ prior.H @ d - 2.0 * prior.b @ d)


GAUGE_WEIGHT = 1e8


def bootstrap_prior(first_frame: int, kf: KeyframeState, g: GlobalState,
                    weight: float = GAUGE_WEIGHT) -> PriorFactor:
    """Pin the unobservable directions at startup.

    Stereo-free visual-inertial estimation leaves the first camera pose, the
    metric scale of the visual frame, and the rotation of the visual frame
    about gravity undetermined; this prior holds all eight at their initial
    values with a stiff quadratic.
    """
    keys = [("pose", first_frame), ("scale",), ("qiv",)]
    H = np.zeros((10, 10))
    H[0:6, 0:6] = np.eye(6) * weight
    H[6, 6] = weight
    # only the gravity-aligned rotation of the visual frame is free; pin it.
    a = geo.quat_to_matrix(g.q_iv).T @ np.array([0.0, 0.0, 1.0])
    H[7:10, 7:10] = weight * np.outer(a, a)
    values = {("pose", first_frame): kf.pose.copy(),
              ("scale",): g.scale,
              ("qiv",): g.q_iv.copy()}
    return PriorFactor(keys=keys, H=H, b=np.zeros(10), values=values)


def anchored_prior(kf: KeyframeState, g: GlobalState) -> PriorFactor:
    """Startup prior over the first frame, as a marginalized past would leave.

    Pins the gauge directions of :func:`bootstrap_prior` and additionally
    anchors the first frame's velocity and biases (plus, weakly, the full
    body-to-visual rotation). Until depth states come online the window has
    no visual information, and a single inertial factor cannot fix the
    starting velocity or biases on its own; the anchor keeps those early
    solves well posed.
    """
    keys = [("pose", 1), ("vel", 1), ("bias", 1), ("scale",), ("qiv",)]
    H = np.zeros((19, 19))
    H[0:6, 0:6] = GAUGE_WEIGHT * np.eye(6)
    H[6:9, 6:9] = 1e6 * np.eye(3)
    H[9:15, 9:15] = 1e6 * np.eye(6)
    H[15, 15] = GAUGE_WEIGHT
    a = geo.quat_to_matrix(g.q_iv).T @ np.array([0.0, 0.0, 1.0])
    H[16:19, 16:19] = GAUGE_WEIGHT * np.outer(a, a) + 1e4 * np.eye(3)
    values = {
        ("pose", 1): kf.pose.copy(),
        ("vel", 1): kf.velocity.copy(),
        ("bias", 1): np.concatenate([kf.gyro_bias, kf.accel_bias]),
        ("scale",): float(g.scale),
        ("qiv",): g.q_iv.copy(),
    }
    return PriorFactor(keys=keys, H=H, b=np.zeros(19), values=values)
