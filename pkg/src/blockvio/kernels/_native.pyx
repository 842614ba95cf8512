# Compiled twins of the numpy factor-evaluation kernels.
# Column layout matches numpy_backend: [host t(3), host r(3), target t(3),
# target r(3), inverse depth(1)].

import numpy as np

cimport numpy as cnp

cnp.import_array()

cdef double DEPTH_FLOOR = 1e-6
cdef double INV_DEPTH_FLOOR = 1e-8

name = "native"


cdef inline void _quat_to_matrix(const double* q, double* R) noexcept nogil:
    cdef double w = q[0], x = q[1], y = q[2], z = q[3]
    R[0] = 1 - 2 * (y * y + z * z); R[1] = 2 * (x * y - w * z); R[2] = 2 * (x * z + w * y)
    R[3] = 2 * (x * y + w * z); R[4] = 1 - 2 * (x * x + z * z); R[5] = 2 * (y * z - w * x)
    R[6] = 2 * (x * z - w * y); R[7] = 2 * (y * z + w * x); R[8] = 1 - 2 * (x * x + y * y)


cdef inline int _factor_geometry(const double* qh, const double* ph,
                                 const double* qt, const double* pt,
                                 double lam, const double* f,
                                 double* Rh, double* Rt, double* pc) noexcept nogil:
    """Fill rotations and the target-frame point; return validity."""
    cdef double pw[3]
    cdef double d[3]
    cdef int i
    if lam <= INV_DEPTH_FLOOR:
        return 0
    _quat_to_matrix(qh, Rh)
    _quat_to_matrix(qt, Rt)
    for i in range(3):
        pw[i] = (Rh[3 * i] * f[0] + Rh[3 * i + 1] * f[1] + Rh[3 * i + 2] * f[2]) / lam + ph[i]
        d[i] = pw[i] - pt[i]
    for i in range(3):
        # R_t^T row i = column i of R_t
        pc[i] = Rt[i] * d[0] + Rt[3 + i] * d[1] + Rt[6 + i] * d[2]
    if pc[2] <= DEPTH_FLOOR:
        return 0
    return 1


cdef inline void _transport_jac(const double* Rh, const double* Rt,
                                const double* pc, double lam,
                                const double* f, double* Jp) noexcept nogil:
    """3x13 derivative of the target-frame point, row-major into Jp."""
    cdef double RtT[9]
    cdef double M[9]
    cdef double g[3]
    cdef int i, j, k
    for i in range(3):
        for j in range(3):
            RtT[3 * i + j] = Rt[3 * j + i]
    # M = Rt^T Rh
    for i in range(3):
        for j in range(3):
            M[3 * i + j] = 0.0
            for k in range(3):
                M[3 * i + j] = M[3 * i + j] + RtT[3 * i + k] * Rh[3 * k + j]
    for i in range(39):
        Jp[i] = 0.0
    for i in range(3):
        for j in range(3):
            Jp[13 * i + j] = RtT[3 * i + j]
            Jp[13 * i + 6 + j] = -RtT[3 * i + j]
    # host rotation block: -M [f]x / lam ; column l of [f]x is (e_l x f) with sign
    # [f]x = [[0,-f2,f1],[f2,0,-f0],[-f1,f0,0]]
    cdef double fx[9]
    fx[0] = 0.0; fx[1] = -f[2]; fx[2] = f[1]
    fx[3] = f[2]; fx[4] = 0.0; fx[5] = -f[0]
    fx[6] = -f[1]; fx[7] = f[0]; fx[8] = 0.0
    for i in range(3):
        for j in range(3):
            Jp[13 * i + 3 + j] = 0.0
            for k in range(3):
                Jp[13 * i + 3 + j] = Jp[13 * i + 3 + j] - M[3 * i + k] * fx[3 * k + j] / lam
    # target rotation block: [pc]x
    Jp[13 * 0 + 10] = -pc[2]; Jp[13 * 0 + 11] = pc[1]
    Jp[13 * 1 + 9] = pc[2]; Jp[13 * 1 + 11] = -pc[0]
    Jp[13 * 2 + 9] = -pc[1]; Jp[13 * 2 + 10] = pc[0]
    # inverse depth column: -M f / lam^2
    for i in range(3):
        g[i] = M[3 * i] * f[0] + M[3 * i + 1] * f[1] + M[3 * i + 2] * f[2]
        Jp[13 * i + 12] = -g[i] / (lam * lam)


def visual_eval(double[:, ::1] q_h, double[:, ::1] p_h,
                double[:, ::1] q_t, double[:, ::1] p_t,
                double[::1] lam, double[:, ::1] f_h, double[:, ::1] u_t):
    cdef Py_ssize_t n = lam.shape[0], i
    r_arr = np.zeros((n, 2))
    ok_arr = np.zeros(n, dtype=np.uint8)
    cdef double[:, ::1] r = r_arr
    cdef unsigned char[::1] ok = ok_arr
    cdef double Rh[9]
    cdef double Rt[9]
    cdef double pc[3]
    with nogil:
        for i in range(n):
            if _factor_geometry(&q_h[i, 0], &p_h[i, 0], &q_t[i, 0], &p_t[i, 0],
                                lam[i], &f_h[i, 0], Rh, Rt, pc):
                ok[i] = 1
                r[i, 0] = pc[0] / pc[2] - u_t[i, 0]
                r[i, 1] = pc[1] / pc[2] - u_t[i, 1]
    return r_arr, ok_arr


def visual_eval_jac(double[:, ::1] q_h, double[:, ::1] p_h,
                    double[:, ::1] q_t, double[:, ::1] p_t,
                    double[::1] lam, double[:, ::1] f_h, double[:, ::1] u_t):
    cdef Py_ssize_t n = lam.shape[0], i, c
    r_arr = np.zeros((n, 2))
    J_arr = np.zeros((n, 2, 13))
    ok_arr = np.zeros(n, dtype=np.uint8)
    cdef double[:, ::1] r = r_arr
    cdef double[:, :, ::1] J = J_arr
    cdef unsigned char[::1] ok = ok_arr
    cdef double Rh[9]
    cdef double Rt[9]
    cdef double pc[3]
    cdef double Jp[39]
    cdef double iz, x_iz2, y_iz2
    with nogil:
        for i in range(n):
            if not _factor_geometry(&q_h[i, 0], &p_h[i, 0], &q_t[i, 0], &p_t[i, 0],
                                    lam[i], &f_h[i, 0], Rh, Rt, pc):
                continue
            ok[i] = 1
            iz = 1.0 / pc[2]
            r[i, 0] = pc[0] * iz - u_t[i, 0]
            r[i, 1] = pc[1] * iz - u_t[i, 1]
            _transport_jac(Rh, Rt, pc, lam[i], &f_h[i, 0], Jp)
            x_iz2 = pc[0] * iz * iz
            y_iz2 = pc[1] * iz * iz
            for c in range(13):
                J[i, 0, c] = iz * Jp[c] - x_iz2 * Jp[26 + c]
                J[i, 1, c] = iz * Jp[13 + c] - y_iz2 * Jp[26 + c]
    return r_arr, J_arr, ok_arr


def predict_eval_jac(double[:, ::1] q_h, double[:, ::1] p_h,
                     double[:, ::1] q_t, double[:, ::1] p_t,
                     double[::1] lam, double[:, ::1] f_h):
    cdef Py_ssize_t n = lam.shape[0], i, c
    lam_arr = np.zeros(n)
    J_arr = np.zeros((n, 13))
    ok_arr = np.zeros(n, dtype=np.uint8)
    cdef double[::1] lam_new = lam_arr
    cdef double[:, ::1] J = J_arr
    cdef unsigned char[::1] ok = ok_arr
    cdef double Rh[9]
    cdef double Rt[9]
    cdef double pc[3]
    cdef double Jp[39]
    cdef double ln
    with nogil:
        for i in range(n):
            if not _factor_geometry(&q_h[i, 0], &p_h[i, 0], &q_t[i, 0], &p_t[i, 0],
                                    lam[i], &f_h[i, 0], Rh, Rt, pc):
                continue
            ok[i] = 1
            ln = 1.0 / pc[2]
            lam_new[i] = ln
            _transport_jac(Rh, Rt, pc, lam[i], &f_h[i, 0], Jp)
            for c in range(13):
                J[i, c] = -ln * ln * Jp[26 + c]
    return lam_arr, J_arr, ok_arr


def accumulate_h_b(double[:, ::1] H, double[::1] b,
                   double[:, :, ::1] J, double[:, ::1] r,
                   long[:, ::1] idx3, double[::1] w,
                   unsigned char[::1] valid):
    cdef Py_ssize_t n = J.shape[0], rd = J.shape[1], i, a, c, k
    cdef long cols[13]
    cdef double acc, wi
    with nogil:
        for i in range(n):
            if not valid[i]:
                continue
            wi = w[i]
            for a in range(6):
                cols[a] = idx3[i, 0] + a
                cols[6 + a] = idx3[i, 1] + a
            cols[12] = idx3[i, 2]
            for a in range(13):
                for c in range(13):
                    acc = 0.0
                    for k in range(rd):
                        acc = acc + J[i, k, a] * J[i, k, c]
                    H[cols[a], cols[c]] = H[cols[a], cols[c]] + wi * acc
                acc = 0.0
                for k in range(rd):
                    acc = acc + J[i, k, a] * r[i, k]
                b[cols[a]] = b[cols[a]] - wi * acc


def accumulate_b(double[::1] b, double[:, :, ::1] J, double[:, ::1] r,
                 long[:, ::1] idx3, double[::1] w, unsigned char[::1] valid):
    cdef Py_ssize_t n = J.shape[0], rd = J.shape[1], i, a, k
    cdef long cols[13]
    cdef double acc, wi
    with nogil:
        for i in range(n):
            if not valid[i]:
                continue
            wi = w[i]
            for a in range(6):
                cols[a] = idx3[i, 0] + a
                cols[6 + a] = idx3[i, 1] + a
            cols[12] = idx3[i, 2]
            for a in range(13):
                acc = 0.0
                for k in range(rd):
                    acc = acc + J[i, k, a] * r[i, k]
                b[cols[a]] = b[cols[a]] - wi * acc
