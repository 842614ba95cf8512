"""Vectorized numpy implementation of the factor-evaluation kernels.

This is the fallback used when the compiled extension is unavailable; both
backends expose the same functions and must produce identical numbers.

Jacobian column layout for a single observation factor (13 columns):
``[host translation (3), host rotation (3), target translation (3),
target rotation (3), inverse depth (1)]``.
"""

from __future__ import annotations

import numpy as np

from .. import geometry as geo

DEPTH_FLOOR = 1e-6
INV_DEPTH_FLOOR = 1e-8

name = "numpy"


def _camera_point(q_h, p_h, q_t, p_t, lam, f_h):
    """Transport host-frame rays into target camera frames.

    Returns the target-frame points, both rotation stacks, and a validity
    mask (positive inverse depth, depth above floor after transport).
    """
    R_h = geo.quat_to_matrix_batch(q_h)
    R_t = geo.quat_to_matrix_batch(q_t)
    ok = lam > INV_DEPTH_FLOOR
    safe_lam = np.where(ok, lam, 1.0)
    p_w = np.einsum("nij,nj->ni", R_h, f_h) / safe_lam[:, None] + p_h
    p_c = np.einsum("nji,nj->ni", R_t, p_w - p_t)
    ok &= p_c[:, 2] > DEPTH_FLOOR
    return p_c, R_h, R_t, ok


def visual_eval(q_h, p_h, q_t, p_t, lam, f_h, u_t):
    """Residuals of observation factors: project(transport) - measurement."""
    p_c, _, _, ok = _camera_point(q_h, p_h, q_t, p_t, lam, f_h)
    z = np.where(ok, p_c[:, 2], 1.0)
    r = p_c[:, :2] / z[:, None] - u_t
    r[~ok] = 0.0
    return r, ok.astype(np.uint8)


def _transport_jacobians(p_c, R_h, R_t, lam, f_h, ok):
    """d(target-frame point)/d(states), stacked [n, 3, 13]."""
    n = p_c.shape[0]
    safe_lam = np.where(ok, lam, 1.0)
    J = np.zeros((n, 3, 13))
    Rt_T = np.swapaxes(R_t, 1, 2)
    RtT_Rh = np.einsum("nij,njk->nik", Rt_T, R_h)
    # host translation / target translation
    J[:, :, 0:3] = Rt_T
    J[:, :, 6:9] = -Rt_T
    # host rotation: -Rt^T Rh [f]x / lam
    fx = np.zeros((n, 3, 3))
    fx[:, 0, 1] = -f_h[:, 2]
    fx[:, 0, 2] = f_h[:, 1]
    fx[:, 1, 0] = f_h[:, 2]
    fx[:, 1, 2] = -f_h[:, 0]
    fx[:, 2, 0] = -f_h[:, 1]
    fx[:, 2, 1] = f_h[:, 0]
    J[:, :, 3:6] = -np.einsum("nij,njk->nik", RtT_Rh, fx) / safe_lam[:, None, None]
    # target rotation: [p_c]x
    J[:, 0, 10] = -p_c[:, 2]
    J[:, 0, 11] = p_c[:, 1]
    J[:, 1, 9] = p_c[:, 2]
    J[:, 1, 11] = -p_c[:, 0]
    J[:, 2, 9] = -p_c[:, 1]
    J[:, 2, 10] = p_c[:, 0]
    # inverse depth: -Rt^T Rh f / lam^2
    J[:, :, 12] = -np.einsum("nij,nj->ni", RtT_Rh, f_h) / (safe_lam ** 2)[:, None]
    return J


def visual_eval_jac(q_h, p_h, q_t, p_t, lam, f_h, u_t):
    """Residuals plus 2x13 Jacobians of observation factors."""
    p_c, R_h, R_t, ok = _camera_point(q_h, p_h, q_t, p_t, lam, f_h)
    n = p_c.shape[0]
    z = np.where(ok, p_c[:, 2], 1.0)
    r = p_c[:, :2] / z[:, None] - u_t
    Jp = _transport_jacobians(p_c, R_h, R_t, lam, f_h, ok)
    iz = 1.0 / z
    # rows of the projection derivative applied to the transport Jacobian
    J = np.empty((n, 2, 13))
    J[:, 0, :] = iz[:, None] * Jp[:, 0, :] - (p_c[:, 0] * iz * iz)[:, None] * Jp[:, 2, :]
    J[:, 1, :] = iz[:, None] * Jp[:, 1, :] - (p_c[:, 1] * iz * iz)[:, None] * Jp[:, 2, :]
    bad = ~ok
    r[bad] = 0.0
    J[bad] = 0.0
    return r, J, ok.astype(np.uint8)


def predict_eval_jac(q_h, p_h, q_t, p_t, lam, f_h):
    """Inverse depth transported into the target frame, with its gradient.

    Returns ``(lam_new[n], J[n,13], valid[n])`` where J uses the shared
    column layout (the inverse-depth column is d lam_new / d lam_host).
    """
    p_c, R_h, R_t, ok = _camera_point(q_h, p_h, q_t, p_t, lam, f_h)
    z = np.where(ok, p_c[:, 2], 1.0)
    lam_new = 1.0 / z
    Jp = _transport_jacobians(p_c, R_h, R_t, lam, f_h, ok)
    J = -(lam_new * lam_new)[:, None] * Jp[:, 2, :]
    lam_new = np.where(ok, lam_new, 0.0)
    J[~ok] = 0.0
    return lam_new, J, ok.astype(np.uint8)


def _column_indices(idx3: np.ndarray) -> np.ndarray:
    six = np.arange(6)
    return np.concatenate(
        [idx3[:, 0:1] + six, idx3[:, 1:2] + six, idx3[:, 2:3]], axis=1
    )


def accumulate_h_b(H, b, J, r, idx3, w, valid):
    """Scatter-add weighted normal-equation contributions.

    ``H += sum_i w_i J_i^T J_i`` and ``b += -sum_i w_i J_i^T r_i`` with each
    factor's 13 columns routed through ``idx3 = [host, target, depth]``
    offsets into the destination system.
    """
    mask = valid.astype(bool)
    if not mask.any():
        return
    Jm, rm, wm = J[mask], r[mask], w[mask]
    cols = _column_indices(idx3[mask])
    elem = np.einsum("nri,nrj->nij", Jm, Jm) * wm[:, None, None]
    rhs = np.einsum("nri,nr->ni", Jm, rm) * wm[:, None]
    np.add.at(H, (cols[:, :, None], cols[:, None, :]), elem)
    np.add.at(b, cols, -rhs)


def accumulate_b(b, J, r, idx3, w, valid):
    """Gradient-only variant of :func:`accumulate_h_b` (frozen Jacobians)."""
    mask = valid.astype(bool)
    if not mask.any():
        return
    Jm, rm, wm = J[mask], r[mask], w[mask]
    cols = _column_indices(idx3[mask])
    rhs = np.einsum("nri,nr->ni", Jm, rm) * wm[:, None]
    np.add.at(b, cols, -rhs)
