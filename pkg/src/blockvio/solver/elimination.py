"""Dense elimination primitives shared by the tree and oracle solvers.

All routines work on information form: ``H @ delta = b`` with
``b = -sum J^T W r``. Elimination of a variable group A out of [A, B]
produces the reduced system over B plus the operators needed to (a) rerun
the right-hand-side reduction with frozen matrices and (b) recover
``delta_A`` during back-substitution.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np
import scipy.linalg

from ..errors import (DegeneratePredictionJacobian, SingularEliminationBlock,
                      SingularSystem)

RIDGE = 1e-10


def _chol_with_ridge(A: np.ndarray, what: str) -> np.ndarray:
    """Cholesky factor, retrying with a small diagonal ridge when needed."""
    try:
        return np.linalg.cholesky(A)
    except np.linalg.LinAlgError:
        pass
    scale = max(np.abs(np.diag(A)).max(), 1.0)
    try:
        return np.linalg.cholesky(A + np.eye(A.shape[0]) * (RIDGE * scale))
    except np.linalg.LinAlgError as e:
        raise SingularEliminationBlock(f"{what}: pivot block not positive definite") from e


def schur_eliminate(H: np.ndarray, b: np.ndarray, na: int
                    ) -> Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Eliminate the leading ``na`` coordinates of the system.

    Returns ``(H_red, b_red, K, L)`` where ``K = H_AA^{-1} H_AB`` reduces
    right-hand sides via ``b_B - K^T b_A`` and ``L`` is the Cholesky factor
    of the pivot block for back-substitution.
    """
    L = _chol_with_ridge(H[:na, :na], "schur pivot")
    Hab = H[:na, na:]
    K = scipy.linalg.cho_solve((L, True), Hab)
    H_red = H[na:, na:] - Hab.T @ K
    b_red = b[na:] - K.T @ b[:na]
    return H_red, b_red, K, L


def back_substitute(L: np.ndarray, K: np.ndarray, b_a: np.ndarray,
                    delta_b: np.ndarray) -> np.ndarray:
    """Recover the eliminated group: ``H_AA^{-1} b_A - K delta_B``."""
    da = scipy.linalg.cho_solve((L, True), b_a)
    if K.shape[1]:
        da = da - K @ delta_b
    return da


def eliminate_scalars(diag: np.ndarray, H_dr: np.ndarray, b_d: np.ndarray,
                      H_rr: np.ndarray, b_r: np.ndarray,
                      chunk: int = 64, pool=None):
    """Batched elimination of mutually uncoupled scalar pivots.

    ``diag`` holds the pivot values, ``H_dr`` the coupling of each scalar to
    the retained block. The downdate ``H_rr -= H_dr^T diag^{-1} H_dr`` is
    accumulated over fixed-size chunks in index order so the floating-point
    result does not depend on how many workers process the chunks.
    """
    safe = np.where(diag > 0.0, diag, 1.0)
    bad = diag <= max(RIDGE, 0.0)
    if np.any(bad):
        scale = max(diag.max(initial=1.0), 1.0)
        safe = np.where(bad, diag + RIDGE * scale, safe)
        if np.any(safe <= 0.0):
            raise SingularEliminationBlock("non-positive scalar pivot")
    K = H_dr / safe[:, None]
    n = diag.size
    spans = [(s, min(s + chunk, n)) for s in range(0, n, chunk)]
    if pool is not None and len(spans) > 1:
        parts = list(pool.map(
            lambda sp: H_dr[sp[0]:sp[1]].T @ K[sp[0]:sp[1]], spans))
    else:
        parts = [H_dr[s0:s1].T @ K[s0:s1] for s0, s1 in spans]
    for part in parts:
        H_rr -= part
    b_r -= K.T @ b_d
    return K, safe


def scalar_back_substitute(safe_diag: np.ndarray, K: np.ndarray,
                           b_d: np.ndarray, delta_r: np.ndarray) -> np.ndarray:
    return b_d / safe_diag - K @ delta_r


@dataclass
class PredictionJacobian:
    """Linearized carry-over map ``delta_new = [I 0; Fc Fd] delta_old``.

    The retained coordinates C pass through unchanged; each predicted
    coordinate is ``Fc @ delta_C + fd * delta_parent`` with ``Fd``
    diagonal (stored as a vector).
    """

    Fc: np.ndarray  # [nd, nc]
    Fd: np.ndarray  # [nd]

    def __post_init__(self):
        if np.any(np.abs(self.Fd) <= 1e-12):
            raise DegeneratePredictionJacobian(
                "carry-over gradient vanishes; cannot reparametrize")

    @property
    def nc(self) -> int:
        return self.Fc.shape[1]

    @property
    def nd(self) -> int:
        return self.Fc.shape[0]

    def matrix(self) -> np.ndarray:
        n = self.nc + self.nd
        J = np.eye(n)
        J[self.nc:, :self.nc] = self.Fc
        J[self.nc:, self.nc:] = np.diag(self.Fd)
        return J


def transport_reparam(H: np.ndarray, b: np.ndarray, pj: PredictionJacobian
                      ) -> Tuple[np.ndarray, np.ndarray]:
    """Exact change of variables from [C, parents] to [C, predictions].

    With ``J`` the block lower-triangular map from old to new coordinates,
    the information transforms as ``J^{-T} H J^{-1}`` (and ``b`` as
    ``J^{-T} b``), computed here without forming the inverse explicitly.
    """
    nc, nd = pj.nc, pj.nd
    G = 1.0 / pj.Fd
    S = pj.Fc
    Hcc, Hcd, Hdd = H[:nc, :nc], H[:nc, nc:], H[nc:, nc:]
    # columns: substitute delta_parent = G (delta_pred - S delta_C)
    GS = G[:, None] * S
    HcdG = Hcd * G[None, :]
    HddG = Hdd * G[None, :]
    top = Hcc - HcdG @ S
    mid = G[:, None] * (H[nc:, :nc] - HddG @ S)
    out = np.empty_like(H)
    # rows: same substitution applied on the left
    out[:nc, :nc] = top - GS.T @ (H[nc:, :nc] - HddG @ S)
    out[:nc, nc:] = HcdG - GS.T @ HddG
    out[nc:, :nc] = mid
    out[nc:, nc:] = G[:, None] * HddG
    bn = np.empty_like(b)
    bn[:nc] = b[:nc] - GS.T @ b[nc:]
    bn[nc:] = G * b[nc:]
    return out, bn


def transport_back_substitute(pj: PredictionJacobian, delta_c: np.ndarray,
                              delta_pred: np.ndarray) -> np.ndarray:
    """Parent increments implied by retained and predicted increments."""
    return (delta_pred - pj.Fc @ delta_c) / pj.Fd


def eliminate_prediction(H_star: np.ndarray, b_star: np.ndarray,
                         pj: PredictionJacobian,
                         Q: Optional[np.ndarray] = None
                         ) -> Tuple[np.ndarray, np.ndarray]:
    """Push a Gaussian in information form through the carry-over map.

    With ``Q`` omitted (noise-free map) this is the exact reparametrization
    ``(J^{-T} H* J^{-1}, J^{-T} b*)``. With a prediction covariance ``Q``
    the result is the general information-filter transport
    ``H+ = (J H*^{-1} J^T + Q)^{-1}`` and ``b+ = H+ J H*^{-1} b*``.
    """
    if Q is None:
        return transport_reparam(H_star, b_star, pj)
    J = pj.matrix()
    L = _chol_with_ridge(H_star, "prediction source")
    cov = scipy.linalg.cho_solve((L, True), np.eye(H_star.shape[0]))
    mean = scipy.linalg.cho_solve((L, True), b_star)
    cov_new = J @ cov @ J.T + Q
    cov_new = 0.5 * (cov_new + cov_new.T)
    Ln = _chol_with_ridge(cov_new, "prediction target")
    H_new = scipy.linalg.cho_solve((Ln, True), np.eye(cov_new.shape[0]))
    H_new = 0.5 * (H_new + H_new.T)
    b_new = H_new @ (J @ mean)
    return H_new, b_new


def solve_full(H: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Solve a symmetric positive (semi-)definite system densely."""
    if H.shape[0] == 0:
        return np.zeros(0)
    try:
        L = np.linalg.cholesky(H)
        return scipy.linalg.cho_solve((L, True), b)
    except np.linalg.LinAlgError:
        pass
    lu, d, perm = scipy.linalg.ldl(H)
    dd = np.diag(d).copy()
    if np.any(np.abs(dd) < 1e-12 * max(np.abs(dd).max(), 1.0)):
        raise SingularSystem("rank-deficient normal equations")
    return scipy.linalg.solve(H, b, assume_a="sym")
