"""Pure-NumPy reference implementation of the gated recurrence kernels.

Shared array layout (time-major, batch and heads flattened per step):

    phi_q, phi_k : (N, B, H, P)   featurized queries/keys
    v            : (N, B, H, V)   values
    f, w         : (N, B, H)      decay gate / update weight per step
    snap_slot    : (N, B) int32   slot for the pre-step state snapshot, -1 if none

The recurrence is S_t = f_t S_{t-1} + w_t phi_k_t v_t^T (and likewise for
z_t), with output (phi_q_t . S_t) / max(phi_q_t . z_t, eps).  Callers must
provide a snapshot slot at every position where f != 1 or w != 1; the
backward pass reconstructs intermediate states by exact subtraction inside
ungated segments and reloads the stored state at gated boundaries, so no
division by the gate is ever needed.
"""

import numpy as np


def scan_forward(phi_q, phi_k, v, f, w, snap_slot, n_slots, eps):
    n, b, h, p = phi_q.shape
    dv = v.shape[-1]
    out = np.empty((n, b, h, dv), dtype=np.float64)
    den_raw = np.empty((n, b, h), dtype=np.float64)
    s_snap = np.zeros((max(n_slots, 1), b, h, p, dv), dtype=np.float64)
    z_snap = np.zeros((max(n_slots, 1), b, h, p), dtype=np.float64)
    s = np.zeros((b, h, p, dv), dtype=np.float64)
    z = np.zeros((b, h, p), dtype=np.float64)
    for t in range(n):
        snap_b = np.nonzero(snap_slot[t] >= 0)[0]
        if snap_b.size:
            slots = snap_slot[t, snap_b]
            s_snap[slots, snap_b] = s[snap_b]
            z_snap[slots, snap_b] = z[snap_b]
        upd = phi_k[t][..., :, None] * v[t][..., None, :]  # (B,H,P,V)
        ft = f[t][..., None]
        wt = w[t][..., None]
        z = ft * z + wt * phi_k[t]
        s = ft[..., None] * s + wt[..., None] * upd
        num = np.einsum("bhp,bhpv->bhv", phi_q[t], s)
        den_raw[t] = np.einsum("bhp,bhp->bh", phi_q[t], z)
        out[t] = num / np.maximum(den_raw[t], eps)[..., None]
    return out, den_raw, s_snap, z_snap, s, z


def scan_backward(
    phi_q, phi_k, v, f, w, snap_slot, eps,
    out, den_raw, s_snap, z_snap, s_last, z_last, d_out,
):
    n, b, h, p = phi_q.shape
    dv = v.shape[-1]
    d_phi_q = np.empty_like(phi_q)
    d_phi_k = np.empty_like(phi_k)
    d_v = np.empty_like(v)
    d_f = np.zeros_like(f)
    d_w = np.zeros_like(w)
    s = s_last.copy()
    z = z_last.copy()
    ds = np.zeros_like(s)
    dz = np.zeros_like(z)
    for t in range(n - 1, -1, -1):
        den = np.maximum(den_raw[t], eps)
        live = (den_raw[t] > eps).astype(np.float64)
        g = d_out[t]
        num = out[t] * den[..., None]
        dnum = g / den[..., None]
        dden = -live * np.einsum("bhv,bhv->bh", num, g) / den**2
        d_phi_q[t] = np.einsum("bhpv,bhv->bhp", s, dnum) + dden[..., None] * z
        ds += phi_q[t][..., :, None] * dnum[..., None, :]
        dz += dden[..., None] * phi_q[t]
        u = np.einsum("bhpv,bhv->bhp", ds, v[t]) + dz  # (B,H,P)
        d_phi_k[t] = w[t][..., None] * u
        d_w[t] = np.einsum("bhp,bhp->bh", phi_k[t], u)
        d_v[t] = w[t][..., None] * np.einsum("bhpv,bhp->bhv", ds, phi_k[t])
        # Reconstruct the state at t-1 and propagate the recurrent gradient.
        snap_b = np.nonzero(snap_slot[t] >= 0)[0]
        if t > 0 or snap_b.size:
            upd = phi_k[t][..., :, None] * v[t][..., None, :]
            s_prev = s - w[t][..., None, None] * upd
            z_prev = z - w[t][..., None] * phi_k[t]
            if snap_b.size:
                slots = snap_slot[t, snap_b]
                s_prev[snap_b] = s_snap[slots, snap_b]
                z_prev[snap_b] = z_snap[slots, snap_b]
                gate_grad = np.einsum("bhpv,bhpv->bh", ds, s_prev) + np.einsum(
                    "bhp,bhp->bh", dz, z_prev
                )
                d_f[t, snap_b] = gate_grad[snap_b]
            s, z = s_prev, z_prev
        ds *= f[t][..., None, None]
        dz *= f[t][..., None]
    return d_phi_q, d_phi_k, d_v, d_f, d_w
