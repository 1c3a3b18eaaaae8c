# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled gated-recurrence kernels.

Same contract as scan_py; see that module for the array layout and the
snapshot protocol.  The loops here fuse the per-timestep state update,
the attention ratio, and (in backward) the reverse-mode recurrences into
single passes over contiguous float64 buffers.
"""

import numpy as np

cimport numpy as cnp

cnp.import_array()


def scan_forward(
    double[:, :, :, ::1] phi_q,
    double[:, :, :, ::1] phi_k,
    double[:, :, :, ::1] v,
    double[:, :, ::1] f,
    double[:, :, ::1] w,
    int[:, ::1] snap_slot,
    int n_slots,
    double eps,
):
    cdef Py_ssize_t N = phi_q.shape[0]
    cdef Py_ssize_t B = phi_q.shape[1]
    cdef Py_ssize_t H = phi_q.shape[2]
    cdef Py_ssize_t P = phi_q.shape[3]
    cdef Py_ssize_t V = v.shape[3]

    out_arr = np.empty((N, B, H, V), dtype=np.float64)
    den_arr = np.empty((N, B, H), dtype=np.float64)
    s_snap_arr = np.zeros((max(n_slots, 1), B, H, P, V), dtype=np.float64)
    z_snap_arr = np.zeros((max(n_slots, 1), B, H, P), dtype=np.float64)
    s_arr = np.zeros((B, H, P, V), dtype=np.float64)
    z_arr = np.zeros((B, H, P), dtype=np.float64)

    cdef double[:, :, :, ::1] out = out_arr
    cdef double[:, :, ::1] den_raw = den_arr
    cdef double[:, :, :, :, ::1] s_snap = s_snap_arr
    cdef double[:, :, :, ::1] z_snap = z_snap_arr
    cdef double[:, :, :, ::1] s = s_arr
    cdef double[:, :, ::1] z = z_arr

    cdef Py_ssize_t t, b, h, p, j, slot
    cdef double ft, wt, pk, pq, den, acc
    cdef double num[1024]
    if V > 1024:
        raise ValueError("value dim exceeds kernel buffer (1024)")

    for t in range(N):
        for b in range(B):
            slot = snap_slot[t, b]
            for h in range(H):
                if slot >= 0:
                    for p in range(P):
                        z_snap[slot, b, h, p] = z[b, h, p]
                        for j in range(V):
                            s_snap[slot, b, h, p, j] = s[b, h, p, j]
                ft = f[t, b, h]
                wt = w[t, b, h]
                for j in range(V):
                    num[j] = 0.0
                den = 0.0
                for p in range(P):
                    pk = wt * phi_k[t, b, h, p]
                    if ft == 1.0:
                        z[b, h, p] = z[b, h, p] + pk
                        for j in range(V):
                            s[b, h, p, j] = s[b, h, p, j] + pk * v[t, b, h, j]
                    else:
                        z[b, h, p] = ft * z[b, h, p] + pk
                        for j in range(V):
                            s[b, h, p, j] = ft * s[b, h, p, j] + pk * v[t, b, h, j]
                    pq = phi_q[t, b, h, p]
                    den += pq * z[b, h, p]
                    for j in range(V):
                        num[j] += pq * s[b, h, p, j]
                den_raw[t, b, h] = den
                if den < eps:
                    den = eps
                for j in range(V):
                    out[t, b, h, j] = num[j] / den
    return out_arr, den_arr, s_snap_arr, z_snap_arr, s_arr, z_arr


def scan_backward(
    double[:, :, :, ::1] phi_q,
    double[:, :, :, ::1] phi_k,
    double[:, :, :, ::1] v,
    double[:, :, ::1] f,
    double[:, :, ::1] w,
    int[:, ::1] snap_slot,
    double eps,
    double[:, :, :, ::1] out,
    double[:, :, ::1] den_raw,
    double[:, :, :, :, ::1] s_snap,
    double[:, :, :, ::1] z_snap,
    double[:, :, :, ::1] s_last,
    double[:, :, ::1] z_last,
    double[:, :, :, ::1] d_out,
):
    cdef Py_ssize_t N = phi_q.shape[0]
    cdef Py_ssize_t B = phi_q.shape[1]
    cdef Py_ssize_t H = phi_q.shape[2]
    cdef Py_ssize_t P = phi_q.shape[3]
    cdef Py_ssize_t V = v.shape[3]

    d_phi_q_arr = np.empty((N, B, H, P), dtype=np.float64)
    d_phi_k_arr = np.empty((N, B, H, P), dtype=np.float64)
    d_v_arr = np.empty((N, B, H, V), dtype=np.float64)
    d_f_arr = np.zeros((N, B, H), dtype=np.float64)
    d_w_arr = np.zeros((N, B, H), dtype=np.float64)
    s_arr = np.array(s_last, dtype=np.float64, copy=True)
    z_arr = np.array(z_last, dtype=np.float64, copy=True)
    ds_arr = np.zeros((B, H, P, V), dtype=np.float64)
    dz_arr = np.zeros((B, H, P), dtype=np.float64)

    cdef double[:, :, :, ::1] d_phi_q = d_phi_q_arr
    cdef double[:, :, :, ::1] d_phi_k = d_phi_k_arr
    cdef double[:, :, :, ::1] d_v = d_v_arr
    cdef double[:, :, ::1] d_f = d_f_arr
    cdef double[:, :, ::1] d_w = d_w_arr
    cdef double[:, :, :, ::1] s = s_arr
    cdef double[:, :, ::1] z = z_arr
    cdef double[:, :, :, ::1] ds = ds_arr
    cdef double[:, :, ::1] dz = dz_arr

    cdef Py_ssize_t t, b, h, p, j, slot
    cdef double den, dr, ft, wt, pq, pk, dden, acc, uplus, gate_grad
    cdef double dnum[1024]
    cdef double dvbuf[1024]
    if V > 1024:
        raise ValueError("value dim exceeds kernel buffer (1024)")

    for t in range(N - 1, -1, -1):
        for b in range(B):
            slot = snap_slot[t, b]
            for h in range(H):
                dr = den_raw[t, b, h]
                den = dr if dr > eps else eps
                ft = f[t, b, h]
                wt = w[t, b, h]
                # d num and d den of the stabilized ratio out = num / den.
                dden = 0.0
                for j in range(V):
                    dnum[j] = d_out[t, b, h, j] / den
                if dr > eps:
                    acc = 0.0
                    for j in range(V):
                        acc += out[t, b, h, j] * den * d_out[t, b, h, j]
                    dden = -acc / (den * den)
                gate_grad = 0.0
                for j in range(V):
                    dvbuf[j] = 0.0
                for p in range(P):
                    pq = phi_q[t, b, h, p]
                    pk = phi_k[t, b, h, p]
                    # Gradient into phi_q and accumulation into dS, dz.
                    acc = dden * z[b, h, p]
                    for j in range(V):
                        acc += s[b, h, p, j] * dnum[j]
                        ds[b, h, p, j] += pq * dnum[j]
                    d_phi_q[t, b, h, p] = acc
                    dz[b, h, p] += dden * pq
                    # Gradients of the update S_t = f S_{t-1} + w phi_k v^T.
                    uplus = dz[b, h, p]
                    for j in range(V):
                        uplus += ds[b, h, p, j] * v[t, b, h, j]
                        dvbuf[j] += ds[b, h, p, j] * pk
                    d_phi_k[t, b, h, p] = wt * uplus
                    d_w[t, b, h] += pk * uplus
                    # Walk the state back to t-1.
                    if slot >= 0:
                        gate_grad += dz[b, h, p] * z_snap[slot, b, h, p]
                        z[b, h, p] = z_snap[slot, b, h, p]
                        for j in range(V):
                            gate_grad += ds[b, h, p, j] * s_snap[slot, b, h, p, j]
                            s[b, h, p, j] = s_snap[slot, b, h, p, j]
                    elif t > 0:
                        z[b, h, p] -= wt * pk
                        for j in range(V):
                            s[b, h, p, j] -= wt * pk * v[t, b, h, j]
                    # Carry the recurrent gradient down.
                    dz[b, h, p] *= ft
                    for j in range(V):
                        ds[b, h, p, j] *= ft
                for j in range(V):
                    d_v[t, b, h, j] = wt * dvbuf[j]
                if slot >= 0:
                    d_f[t, b, h] = gate_grad
    return d_phi_q_arr, d_phi_k_arr, d_v_arr, d_f_arr, d_w_arr
