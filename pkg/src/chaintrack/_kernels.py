"""Compiled per-step kernels of the chain filter.

State blocks use the layout of :func:`chaintrack.chain.state_layout`:
per IMU ``i`` the orientation perturbation at ``6i`` and the rate at
``6i + 3``, then per joint ``k`` the two positions at ``6n + 6k``.
Residual rows are ``[gyro (3n); joint (3m); orientation (3)]``.
"""

from __future__ import annotations

import numpy as np
from numba import njit

_SMALL = 1e-12


@njit(cache=True)
def skew(v):
    S = np.zeros((3, 3))
    S[0, 1] = -v[2]
    S[0, 2] = v[1]
    S[1, 0] = v[2]
    S[1, 2] = -v[0]
    S[2, 0] = -v[1]
    S[2, 1] = v[0]
    return S


@njit(cache=True)
def mrp_to_quat(chi):
    n2 = chi[0] * chi[0] + chi[1] * chi[1] + chi[2] * chi[2]
    d = 1.0 + n2
    q = np.empty(4)
    q[0] = (1.0 - n2) / d
    q[1] = 2.0 * chi[0] / d
    q[2] = 2.0 * chi[1] / d
    q[3] = 2.0 * chi[2] / d
    return q


@njit(cache=True)
def quat_to_mrp(q):
    s = 1.0 if q[0] >= 0.0 else -1.0
    d = 1.0 + s * q[0]
    out = np.empty(3)
    out[0] = s * q[1] / d
    out[1] = s * q[2] / d
    out[2] = s * q[3] / d
    return out


@njit(cache=True)
def shadow(chi):
    n2 = chi[0] * chi[0] + chi[1] * chi[1] + chi[2] * chi[2]
    if n2 > 1.0:
        return -chi / n2
    return chi.copy()


@njit(cache=True)
def qmul(a, b):
    q = np.empty(4)
    q[0] = a[0] * b[0] - a[1] * b[1] - a[2] * b[2] - a[3] * b[3]
    q[1] = a[0] * b[1] + a[1] * b[0] + a[2] * b[3] - a[3] * b[2]
    q[2] = a[0] * b[2] - a[1] * b[3] + a[2] * b[0] + a[3] * b[1]
    q[3] = a[0] * b[3] + a[1] * b[2] - a[2] * b[1] + a[3] * b[0]
    return q


@njit(cache=True)
def qconj(q):
    out = -q
    out[0] = q[0]
    return out


@njit(cache=True)
def qmat(q):
    w, x, y, z = q[0], q[1], q[2], q[3]
    R = np.empty((3, 3))
    R[0, 0] = 1 - 2 * (y * y + z * z)
    R[0, 1] = 2 * (x * y - w * z)
    R[0, 2] = 2 * (x * z + w * y)
    R[1, 0] = 2 * (x * y + w * z)
    R[1, 1] = 1 - 2 * (x * x + z * z)
    R[1, 2] = 2 * (y * z - w * x)
    R[2, 0] = 2 * (x * z - w * y)
    R[2, 1] = 2 * (y * z + w * x)
    R[2, 2] = 1 - 2 * (x * x + y * y)
    return R


@njit(cache=True)
def qexp(v):
    n2 = v[0] * v[0] + v[1] * v[1] + v[2] * v[2]
    q = np.empty(4)
    if n2 < _SMALL * _SMALL:
        q[0] = 1.0 - 0.5 * n2
        s = 1.0 - n2 / 6.0
    else:
        n = np.sqrt(n2)
        q[0] = np.cos(n)
        s = np.sin(n) / n
    q[1] = s * v[0]
    q[2] = s * v[1]
    q[3] = s * v[2]
    return q / np.sqrt(q @ q)


@njit(cache=True)
def qlog(q):
    if q[0] < 0.0:
        q = -q
    v = q[1:].copy()
    s = np.sqrt(v @ v)
    if s < _SMALL:
        return v / q[0]
    return np.arctan2(s, q[0]) / s * v


@njit(cache=True)
def right_jacobian(phi):
    th2 = phi @ phi
    K = skew(phi)
    I = np.eye(3)
    if th2 < 1e-10:
        return I - 0.5 * K + K @ K / 6.0
    th = np.sqrt(th2)
    return I - (1.0 - np.cos(th)) / th2 * K + (th - np.sin(th)) / (th2 * th) * (K @ K)


@njit(cache=True)
def left_jacobian_inv(phi):
    th2 = phi @ phi
    K = skew(phi)
    I = np.eye(3)
    if th2 < 1e-10:
        return I - 0.5 * K + K @ K / 12.0
    th = np.sqrt(th2)
    coef = 1.0 / th2 - (1.0 + np.cos(th)) / (2.0 * th * np.sin(th))
    return I - 0.5 * K + coef * (K @ K)


@njit(cache=True)
def predict(chi, omega, P, dt, q_omega):
    """Propagate orientations at constant rate and the covariance with ``F P F^T``."""
    n = chi.shape[0]
    dim = P.shape[0]
    chi_out = np.empty_like(chi)
    F = np.eye(dim)
    for i in range(n):
        half = 0.5 * dt * omega[i]
        dq = qexp(half)
        q = qmul(mrp_to_quat(chi[i]), dq)
        q /= np.sqrt(q @ q)
        chi_out[i] = shadow(quat_to_mrp(q))
        RincT = qmat(dq).T
        Jr = right_jacobian(dt * omega[i])
        o = 6 * i
        F[o : o + 3, o : o + 3] = RincT
        F[o : o + 3, o + 3 : o + 6] = 0.25 * dt * Jr
    Pn = F @ P @ F.T
    for i in range(n):
        for a in range(3):
            Pn[6 * i + 3 + a, 6 * i + 3 + a] += q_omega
    return chi_out, 0.5 * (Pn + Pn.T)


@njit(cache=True)
def evaluate(
    chi, omega, joints, accel, gyro, q_meas, omega_dot, ji, jj, e, wg, wa, wr, want_jac
):
    """Whitened residuals and (optionally) their Jacobian with respect to the
    local perturbation."""
    n = chi.shape[0]
    m = joints.shape[0]
    rows = 3 * n + 3 * m + 3
    dim = 6 * n + 6 * m
    r = np.empty(rows)
    Jac = np.zeros((rows, dim)) if want_jac else np.zeros((0, 0))

    quats = np.empty((n, 4))
    R = np.empty((n, 3, 3))
    C = np.empty((n, 3, 3))
    for i in range(n):
        quats[i] = mrp_to_quat(chi[i])
        R[i] = qmat(quats[i])
        W = skew(omega[i])
        C[i] = W @ W + skew(omega_dot[i])
        for a in range(3):
            r[3 * i + a] = wg * (gyro[i, a] - omega[i, a])
            if want_jac:
                Jac[3 * i + a, 6 * i + 3 + a] = -wg

    base = 3 * n
    for k in range(m):
        i = ji[k]
        j = jj[k]
        Ji = joints[k, 0]
        Jj = joints[k, 1]
        a_i = accel[i] + C[i] @ Ji
        a_j = accel[j] + C[j] @ Jj
        res = R[i] @ a_i - R[j] @ a_j
        row = base + 3 * k
        r[row : row + 3] = wa * res
        if want_jac:
            oi = 6 * i
            oj = 6 * j
            col = 6 * n + 6 * k
            Jac[row : row + 3, oi : oi + 3] = -4.0 * wa * (R[i] @ skew(a_i))
            Jac[row : row + 3, oj : oj + 3] = 4.0 * wa * (R[j] @ skew(a_j))
            Jac[row : row + 3, oi + 3 : oi + 6] = wa * (R[i] @ _rate_jacobian(omega[i], Ji))
            Jac[row : row + 3, oj + 3 : oj + 6] = -wa * (R[j] @ _rate_jacobian(omega[j], Jj))
            Jac[row : row + 3, col : col + 3] = wa * (R[i] @ C[i])
            Jac[row : row + 3, col + 3 : col + 6] = -wa * (R[j] @ C[j])

    row = base + 3 * m
    phi = 2.0 * qlog(qmul(qconj(quats[e]), q_meas))
    r[row : row + 3] = wr * phi
    if want_jac:
        Jac[row : row + 3, 6 * e : 6 * e + 3] = -4.0 * wr * left_jacobian_inv(phi)
    return r, Jac


@njit(cache=True)
def _rate_jacobian(w, J):
    """d/dw of w x (w x J)."""
    out = np.empty((3, 3))
    d = w @ J
    for a in range(3):
        for b in range(3):
            out[a, b] = w[a] * J[b] - 2.0 * J[a] * w[b]
        out[a, a] += d
    return out


@njit(cache=True)
def retract(chi, omega, joints, delta):
    n = chi.shape[0]
    m = joints.shape[0]
    chi_out = np.empty_like(chi)
    omega_out = np.empty_like(omega)
    joints_out = np.empty_like(joints)
    for i in range(n):
        q = qmul(mrp_to_quat(chi[i]), mrp_to_quat(delta[6 * i : 6 * i + 3]))
        q /= np.sqrt(q @ q)
        chi_out[i] = shadow(quat_to_mrp(q))
        omega_out[i] = omega[i] + delta[6 * i + 3 : 6 * i + 6]
    for k in range(m):
        c = 6 * n + 6 * k
        joints_out[k, 0] = joints[k, 0] + delta[c : c + 3]
        joints_out[k, 1] = joints[k, 1] + delta[c + 3 : c + 6]
    return chi_out, omega_out, joints_out


@njit(cache=True)
def local_difference(chi, omega, joints, chi_ref, omega_ref, joints_ref):
    """Local coordinates ``d`` of a state around a reference and the chart
    Jacobian ``M = dd / d(perturbation)`` (identity off the orientation blocks)."""
    n = chi.shape[0]
    m = joints.shape[0]
    dim = 6 * n + 6 * m
    d = np.empty(dim)
    M = np.eye(dim)
    for i in range(n):
        p = qmul(qconj(mrp_to_quat(chi_ref[i])), mrp_to_quat(chi[i]))
        if p[0] < 0.0:
            p = -p
        w = p[0]
        v = p[1:]
        o = 6 * i
        d[o : o + 3] = v / (1.0 + w)
        M[o : o + 3, o : o + 3] = (
            (2.0 * w / (1.0 + w)) * np.eye(3)
            + (2.0 / (1.0 + w)) * skew(v)
            + (2.0 / (1.0 + w) ** 2) * np.outer(v, v)
        )
        d[o + 3 : o + 6] = omega[i] - omega_ref[i]
    for k in range(m):
        c = 6 * n + 6 * k
        d[c : c + 3] = joints[k, 0] - joints_ref[k, 0]
        d[c + 3 : c + 6] = joints[k, 1] - joints_ref[k, 1]
    return d, M


@njit(cache=True)
def cholesky_solve(L, b):
    """Solve ``L L^T x = b`` for lower-triangular ``L``."""
    n = L.shape[0]
    y = np.empty(n)
    for i in range(n):
        s = b[i]
        for k in range(i):
            s -= L[i, k] * y[k]
        y[i] = s / L[i, i]
    x = np.empty(n)
    for i in range(n - 1, -1, -1):
        s = y[i]
        for k in range(i + 1, n):
            s -= L[k, i] * x[k]
        x[i] = s / L[i, i]
    return x


@njit(cache=True)
def cholesky(A):
    """Lower Cholesky factor; returns an empty matrix if ``A`` is not positive definite."""
    n = A.shape[0]
    L = np.zeros((n, n))
    for j in range(n):
        s = A[j, j]
        for k in range(j):
            s -= L[j, k] * L[j, k]
        if not s > 0.0:
            return np.zeros((0, 0))
        L[j, j] = np.sqrt(s)
        for i in range(j + 1, n):
            t = A[i, j]
            for k in range(j):
                t -= L[i, k] * L[j, k]
            L[i, j] = t / L[j, j]
    return L


@njit(cache=True)
def spd_inverse(A, reg):
    n = A.shape[0]
    L = cholesky(A + reg * np.eye(n))
    if L.shape[0] == 0:
        return np.zeros((0, 0))
    out = np.empty((n, n))
    e = np.zeros(n)
    for k in range(n):
        e[:] = 0.0
        e[k] = 1.0
        out[:, k] = cholesky_solve(L, e)
    return 0.5 * (out + out.T)


@njit(cache=True)
def gauss_newton(
    chi_p, omega_p, joints_p, info_prior, accel, gyro, q_meas, omega_dot,
    ji, jj, e, wg, wa, wr, max_iter, tol, reg,
):
    """Minimise the per-step MAP objective starting at the prior mean.

    Returns the iterate, the normal-equations matrix at it, the iteration
    count and a status flag (1 converged, 0 iteration cap, -1 singular).
    """
    chi = chi_p.copy()
    omega = omega_p.copy()
    joints = joints_p.copy()
    dim = info_prior.shape[0]
    H = np.zeros((dim, dim))
    status = 0
    it = 0
    for it in range(1, max_iter + 1):
        r, Jac = evaluate(
            chi, omega, joints, accel, gyro, q_meas, omega_dot, ji, jj, e, wg, wa, wr, True
        )
        d, M = local_difference(chi, omega, joints, chi_p, omega_p, joints_p)
        IM = info_prior @ M
        H = Jac.T @ Jac + M.T @ IM
        g = Jac.T @ r + IM.T @ d
        L = cholesky(H + reg * np.eye(dim))
        if L.shape[0] == 0:
            return chi, omega, joints, H, it, -1
        step = -cholesky_solve(L, g)
        chi, omega, joints = retract(chi, omega, joints, step)
        if np.sqrt(step @ step) < tol:
            status = 1
            break
    # normal equations at the returned iterate
    r, Jac = evaluate(
        chi, omega, joints, accel, gyro, q_meas, omega_dot, ji, jj, e, wg, wa, wr, True
    )
    d, M = local_difference(chi, omega, joints, chi_p, omega_p, joints_p)
    H = Jac.T @ Jac + M.T @ (info_prior @ M)
    return chi, omega, joints, H, it, status
