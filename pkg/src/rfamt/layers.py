"""Manual-backprop layers for the encoder-decoder model.

Every layer reads its weights from a shared name->array dict and offers
forward/backward; backward accumulates into a gradient dict keyed the
same way and returns the gradient w.r.t. its inputs.  Caches live on the
layer instance, so a backward call must directly follow the forward it
belongs to.

Shapes: (B, N, D) for token streams, (B, H, N, dh) per attention head.
All math is float64.
"""

import numpy as np

from rfamt import _kernels

_BIG_NEG = -1e30
_NORM_FLOOR = 1e-12


def split_heads(x, n_heads):
    b, n, d = x.shape
    return x.reshape(b, n, n_heads, d // n_heads).transpose(0, 2, 1, 3)


def merge_heads(x):
    b, h, n, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, n, h * dh)


def sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


class Linear:
    def __init__(self, params, name, bias=True):
        self.params = params
        self.name = name
        self.bias = bias
        self._x = None

    def forward(self, x):
        self._x = x
        y = x @ self.params[f"{self.name}.w"]
        if self.bias:
            y = y + self.params[f"{self.name}.b"]
        return y

    def backward(self, dy, grads):
        w = self.params[f"{self.name}.w"]
        x2 = self._x.reshape(-1, w.shape[0])
        dy2 = dy.reshape(-1, w.shape[1])
        grads[f"{self.name}.w"] += x2.T @ dy2
        if self.bias:
            grads[f"{self.name}.b"] += dy2.sum(axis=0)
        return dy @ w.T


class LayerNorm:
    def __init__(self, params, name, eps=1e-5):
        self.params = params
        self.name = name
        self.eps = eps
        self._cache = None

    def forward(self, x):
        mu = x.mean(axis=-1, keepdims=True)
        var = x.var(axis=-1, keepdims=True)
        sig = np.sqrt(var + self.eps)
        xhat = (x - mu) / sig
        self._cache = (xhat, sig)
        return xhat * self.params[f"{self.name}.g"] + self.params[f"{self.name}.b"]

    def backward(self, dy, grads):
        xhat, sig = self._cache
        g = self.params[f"{self.name}.g"]
        axes = tuple(range(dy.ndim - 1))
        grads[f"{self.name}.g"] += (dy * xhat).sum(axis=axes)
        grads[f"{self.name}.b"] += dy.sum(axis=axes)
        dxhat = dy * g
        m1 = dxhat.mean(axis=-1, keepdims=True)
        m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
        return (dxhat - m1 - xhat * m2) / sig


class Embedding:
    """Token embedding scaled by sqrt(d_model)."""

    def __init__(self, params, name):
        self.params = params
        self.name = name
        self._ids = None

    def forward(self, ids):
        table = self.params[self.name]
        self._ids = ids
        return table[ids] * np.sqrt(table.shape[1])

    def backward(self, dy, grads):
        table = self.params[self.name]
        g = grads[self.name]
        np.add.at(g, self._ids.ravel(), dy.reshape(-1, table.shape[1]) * np.sqrt(table.shape[1]))


def sinusoidal_positions(max_len, d_model):
    pos = np.arange(max_len, dtype=np.float64)[:, None]
    i = np.arange(d_model, dtype=np.float64)[None, :]
    angle = pos / np.power(10000.0, 2.0 * (i // 2) / d_model)
    enc = np.zeros((max_len, d_model), dtype=np.float64)
    enc[:, 0::2] = np.sin(angle[:, 0::2])
    enc[:, 1::2] = np.cos(angle[:, 1::2])
    return enc


class FeedForward:
    def __init__(self, params, name):
        self.lin1 = Linear(params, f"{name}.l1")
        self.lin2 = Linear(params, f"{name}.l2")
        self._pre = None

    def forward(self, x):
        pre = self.lin1.forward(x)
        self._pre = pre
        return self.lin2.forward(np.maximum(pre, 0.0))

    def backward(self, dy, grads):
        dh = self.lin2.backward(dy, grads)
        dh = dh * (self._pre > 0.0)
        return self.lin1.backward(dh, grads)


class ExactAttention:
    """Standard multi-head softmax attention (self, cross, or causal)."""

    def __init__(self, params, name, n_heads, causal=False):
        self.n_heads = n_heads
        self.causal = causal
        self.wq = Linear(params, f"{name}.wq", bias=False)
        self.wk = Linear(params, f"{name}.wk", bias=False)
        self.wv = Linear(params, f"{name}.wv", bias=False)
        self.wo = Linear(params, f"{name}.wo", bias=False)
        self._cache = None

    def forward(self, xq, xkv=None, key_mask=None):
        self._self_attn = xkv is None
        if xkv is None:
            xkv = xq
        q = split_heads(self.wq.forward(xq), self.n_heads)
        k = split_heads(self.wk.forward(xkv), self.n_heads)
        v = split_heads(self.wv.forward(xkv), self.n_heads)
        dh = q.shape[-1]
        scores = q @ k.transpose(0, 1, 3, 2) / np.sqrt(dh)
        if key_mask is not None:
            scores = np.where(key_mask[:, None, None, :], scores, _BIG_NEG)
        if self.causal:
            n, m = scores.shape[-2:]
            tri = np.tril(np.ones((n, m), dtype=bool))
            scores = np.where(tri, scores, _BIG_NEG)
        scores -= scores.max(axis=-1, keepdims=True)
        attn = np.exp(scores)
        attn /= attn.sum(axis=-1, keepdims=True)
        ctx = attn @ v
        self._cache = (q, k, v, attn)
        return self.wo.forward(merge_heads(ctx))

    def backward(self, dy, grads):
        q, k, v, attn = self._cache
        dh = q.shape[-1]
        dctx = split_heads(self.wo.backward(dy, grads), self.n_heads)
        dattn = dctx @ v.transpose(0, 1, 3, 2)
        dv = attn.transpose(0, 1, 3, 2) @ dctx
        dscores = attn * (dattn - (dattn * attn).sum(axis=-1, keepdims=True))
        dq = dscores @ k / np.sqrt(dh)
        dk = dscores.transpose(0, 1, 3, 2) @ q / np.sqrt(dh)
        dxq = self.wq.backward(merge_heads(dq), grads)
        dxkv = self.wk.backward(merge_heads(dk), grads)
        dxkv += self.wv.backward(merge_heads(dv), grads)
        if self._self_attn:
            return dxq + dxkv, None
        return dxq, dxkv

    # --- incremental decoding helpers (forward only) ---

    def project_kv(self, x):
        k = split_heads(self.wk.forward(x), self.n_heads)
        v = split_heads(self.wv.forward(x), self.n_heads)
        return k, v

    def step(self, h_t, keys, values, key_mask=None):
        """Attend a single query position over cached keys/values.

        h_t: (B, D); keys/values: (B, H, M, dh).  Returns (B, D).
        """
        b, d = h_t.shape
        dh = d // self.n_heads
        q = (h_t @ self.wq.params[f"{self.wq.name}.w"]).reshape(b, self.n_heads, dh)
        scores = np.einsum("bhd,bhmd->bhm", q, keys) / np.sqrt(dh)
        if key_mask is not None:
            scores = np.where(key_mask[:, None, :], scores, _BIG_NEG)
        scores -= scores.max(axis=-1, keepdims=True)
        attn = np.exp(scores)
        attn /= attn.sum(axis=-1, keepdims=True)
        ctx = np.einsum("bhm,bhmd->bhd", attn, values)
        return ctx.reshape(b, d) @ self.wo.params[f"{self.wo.name}.w"]


class RfaFeaturizer:
    """Length-normalize, temperature-scale, and featurize queries/keys.

    Holds one random projection per head, stacked as (H, D, dh).  Scaling
    by dh**-0.25 happens on unit-norm vectors so the feature inner
    products approximate exp(q . k / sqrt(dh)), matching the exact
    backend's softmax temperature.
    """

    def __init__(self, w_stack):
        self.w = w_stack  # (H, D, dh)
        self.out_scale = np.sqrt(1.0 / w_stack.shape[1])
        self.temp = w_stack.shape[2] ** (-0.25)

    @property
    def feature_dim(self):
        return 2 * self.w.shape[1]

    def forward(self, x):
        """x: (B, H, N, dh) -> phi: (B, H, N, 2D), plus backward cache."""
        norm = np.linalg.norm(x, axis=-1, keepdims=True)
        safe = np.maximum(norm, _NORM_FLOOR)
        xhat = x / safe
        scaled = xhat * self.temp
        proj = scaled @ self.w.transpose(0, 2, 1)  # (B,H,N,dh) @ (H,dh,D)
        sin, cos = np.sin(proj), np.cos(proj)
        feats = self.out_scale * np.concatenate([sin, cos], axis=-1)
        cache = (xhat, safe, norm, sin, cos)
        return feats, cache

    def backward(self, dfeats, cache):
        xhat, safe, norm, sin, cos = cache
        p = sin.shape[-1]
        dproj = self.out_scale * (cos * dfeats[..., :p] - sin * dfeats[..., p:])
        dscaled = dproj @ self.w
        dxhat = dscaled * self.temp
        small = norm <= _NORM_FLOOR
        proj_term = (dxhat - xhat * (xhat * dxhat).sum(axis=-1, keepdims=True)) / safe
        return np.where(small, dxhat / safe, proj_term)


class RfaCrossAttention:
    """Random-feature cross attention: one summary pass, O(1) per query."""

    def __init__(self, params, name, n_heads, featurizer, eps):
        self.n_heads = n_heads
        self.feat = featurizer
        self.eps = eps
        self.wq = Linear(params, f"{name}.wq", bias=False)
        self.wk = Linear(params, f"{name}.wk", bias=False)
        self.wv = Linear(params, f"{name}.wv", bias=False)
        self.wo = Linear(params, f"{name}.wo", bias=False)
        self._cache = None

    def forward(self, xq, enc, src_mask):
        q = split_heads(self.wq.forward(xq), self.n_heads)
        k = split_heads(self.wk.forward(enc), self.n_heads)
        v = split_heads(self.wv.forward(enc), self.n_heads)
        phi_q, cq = self.feat.forward(q)
        phi_k, ck = self.feat.forward(k)
        mask = src_mask[:, None, :, None].astype(np.float64)
        phi_km = phi_k * mask
        S = phi_km.transpose(0, 1, 3, 2) @ v  # (B,H,P,V)
        z = phi_km.sum(axis=2)
        num = phi_q @ S
        den_raw = (phi_q @ z[..., None])[..., 0]
        den = np.maximum(den_raw, self.eps)
        out = num / den[..., None]
        self._cache = (phi_q, cq, phi_km, ck, mask, v, S, z, den_raw, den, out)
        return self.wo.forward(merge_heads(out))

    def backward(self, dy, grads):
        phi_q, cq, phi_km, ck, mask, v, S, z, den_raw, den, out = self._cache
        dout = split_heads(self.wo.backward(dy, grads), self.n_heads)
        dnum = dout / den[..., None]
        live = (den_raw > self.eps).astype(np.float64)
        num = out * den[..., None]
        dden = -live * (num * dout).sum(axis=-1) / den**2
        dphi_q = dnum @ S.transpose(0, 1, 3, 2) + dden[..., None] * z[:, :, None, :]
        dS = phi_q.transpose(0, 1, 3, 2) @ dnum
        dz = (dden[:, :, None, :] @ phi_q)[:, :, 0, :]
        dphi_km = v @ dS.transpose(0, 1, 3, 2) + dz[:, :, None, :]
        dv = phi_km @ dS
        dphi_k = dphi_km * mask
        dq = self.feat.backward(dphi_q, cq)
        dk = self.feat.backward(dphi_k, ck)
        dxq = self.wq.backward(merge_heads(dq), grads)
        denc = self.wk.backward(merge_heads(dk), grads)
        denc += self.wv.backward(merge_heads(dv), grads)
        return dxq, denc

    # --- incremental decoding helpers ---

    def summarize(self, enc, src_mask):
        """Precompute the (S, z) source summaries used by every step."""
        k = split_heads(self.wk.forward(enc), self.n_heads)
        v = split_heads(self.wv.forward(enc), self.n_heads)
        phi_k, _ = self.feat.forward(k)
        phi_km = phi_k * src_mask[:, None, :, None]
        S = phi_km.transpose(0, 1, 3, 2) @ v
        z = phi_km.sum(axis=2)
        return S, z

    def step(self, h_t, S, z):
        b, d = h_t.shape
        dh = d // self.n_heads
        q = (h_t @ self.wq.params[f"{self.wq.name}.w"]).reshape(b, self.n_heads, 1, dh)
        phi_q = self.feat.forward(q)[0]
        num = (phi_q @ S)[:, :, 0, :]
        den = np.maximum((phi_q @ z[..., None])[:, :, 0, 0], self.eps)
        out = num / den[..., None]
        return out.reshape(b, d) @ self.wo.params[f"{self.wo.name}.w"]


class RfaCausalAttention:
    """Gated random-feature causal attention over the target prefix.

    The forget gate at a sentence-start position t is computed from the
    raw layer input at t-1 (the separator token); one scalar gate per
    head.  Variant "sgate" decays the running state, "sgate_avg" blends
    old state and new token as (f, 1-f) at boundaries, "none" disables
    gating entirely.
    """

    def __init__(self, params, name, n_heads, featurizer, variant, eps):
        self.params = params
        self.name = name
        self.n_heads = n_heads
        self.feat = featurizer
        self.variant = variant
        self.eps = eps
        self.wq = Linear(params, f"{name}.wq", bias=False)
        self.wk = Linear(params, f"{name}.wk", bias=False)
        self.wv = Linear(params, f"{name}.wv", bias=False)
        self.wo = Linear(params, f"{name}.wo", bias=False)
        self._cache = None

    def _gate_arrays(self, e_raw, start_mask):
        """Per-position gate f and update weight w, plus snapshot plan."""
        b, n, d = e_raw.shape
        h = self.n_heads
        gate_mask = np.zeros((b, n), dtype=bool)
        if self.variant != "none":
            gate_mask = start_mask.copy()
            gate_mask[:, 0] = False
        e_prev = np.zeros_like(e_raw)
        e_prev[:, 1:] = e_raw[:, :-1]
        w_f = self.params[f"{self.name}.gate.w"]  # (H, D)
        b_f = self.params[f"{self.name}.gate.b"]  # (H,)
        pre = np.einsum("bnd,hd->bnh", e_prev, w_f) + b_f
        sig = sigmoid(pre)
        f = np.where(gate_mask[..., None], sig, 1.0)
        if self.variant == "sgate_avg":
            avg_mask = gate_mask[..., None] & (f < 1.0)
            w = np.where(avg_mask, 1.0 - f, 1.0)
        else:
            avg_mask = np.zeros_like(f, dtype=bool)
            w = np.ones_like(f)
        # Snapshot slots wherever any head is gated (boundary positions).
        snap_slot = np.full((n, b), -1, dtype=np.int32)
        counts = np.zeros(b, dtype=np.int32)
        for t in range(n):
            gated = np.nonzero(gate_mask[:, t])[0]
            snap_slot[t, gated] = counts[gated]
            counts[gated] += 1
        n_slots = int(counts.max()) if b else 0
        return f, w, sig, pre, gate_mask, avg_mask, e_prev, snap_slot, n_slots

    def forward(self, x, e_raw, start_mask):
        b, n, d = x.shape
        q = split_heads(self.wq.forward(x), self.n_heads)
        k = split_heads(self.wk.forward(x), self.n_heads)
        v = split_heads(self.wv.forward(x), self.n_heads)
        phi_q, cq = self.feat.forward(q)
        phi_k, ck = self.feat.forward(k)
        f, w, sig, pre, gate_mask, avg_mask, e_prev, snap_slot, n_slots = self._gate_arrays(
            e_raw, start_mask
        )
        # Kernel layout is time-major: (N, B, H, ...).
        pq = np.ascontiguousarray(phi_q.transpose(2, 0, 1, 3))
        pk = np.ascontiguousarray(phi_k.transpose(2, 0, 1, 3))
        vt = np.ascontiguousarray(v.transpose(2, 0, 1, 3))
        ft = np.ascontiguousarray(f.transpose(1, 0, 2))
        wt = np.ascontiguousarray(w.transpose(1, 0, 2))
        out, den_raw, s_snap, z_snap, s_last, z_last = _kernels.scan_forward(
            pq, pk, vt, ft, wt, snap_slot, n_slots, self.eps
        )
        self._cache = (
            pq, pk, vt, ft, wt, snap_slot, out, den_raw, s_snap, z_snap,
            s_last, z_last, cq, ck, sig, gate_mask, avg_mask, e_prev,
        )
        ctx = out.transpose(1, 2, 0, 3)  # (B, H, N, dh)
        return self.wo.forward(merge_heads(ctx))

    def backward(self, dy, grads):
        (pq, pk, vt, ft, wt, snap_slot, out, den_raw, s_snap, z_snap,
         s_last, z_last, cq, ck, sig, gate_mask, avg_mask, e_prev) = self._cache
        dctx = split_heads(self.wo.backward(dy, grads), self.n_heads)
        d_out = np.ascontiguousarray(dctx.transpose(2, 0, 1, 3))
        d_pq, d_pk, d_vt, d_f, d_w = _kernels.scan_backward(
            pq, pk, vt, ft, wt, snap_slot, self.eps,
            out, den_raw, s_snap, z_snap, s_last, z_last, d_out,
        )
        # Gate gradient: f enters the decay everywhere it is active; under
        # the averaging variant the update weight w = 1 - f adds -d_w.
        d_f_total = d_f.transpose(1, 0, 2).copy()  # (B, N, H)
        if self.variant == "sgate_avg":
            d_f_total -= np.where(avg_mask, d_w.transpose(1, 0, 2), 0.0)
        dpre = np.where(gate_mask[..., None], d_f_total * sig * (1.0 - sig), 0.0)
        w_f = self.params[f"{self.name}.gate.w"]
        grads[f"{self.name}.gate.w"] += np.einsum("bnh,bnd->hd", dpre, e_prev)
        grads[f"{self.name}.gate.b"] += dpre.sum(axis=(0, 1))
        de_raw = np.zeros_like(e_prev)
        de_raw[:, :-1] = np.einsum("bnh,hd->bnd", dpre[:, 1:], w_f)
        # Chain through the featurizer and projections.
        dphi_q = d_pq.transpose(1, 2, 0, 3)
        dphi_k = d_pk.transpose(1, 2, 0, 3)
        dv = d_vt.transpose(1, 2, 0, 3)
        dq = self.feat.backward(dphi_q, cq)
        dk = self.feat.backward(dphi_k, ck)
        dx = self.wq.backward(merge_heads(dq), grads)
        dx += self.wk.backward(merge_heads(dk), grads)
        dx += self.wv.backward(merge_heads(dv), grads)
        return dx, de_raw

    # --- incremental decoding helpers ---

    def step(self, h_t, e_prev, is_start, step_idx, S, z):
        """Advance one decode position, updating (S, z) in place.

        h_t: (B, D) normed layer input; e_prev: raw layer input at the
        previous position (the separator when a sentence opens).
        """
        b, d = h_t.shape
        dh = d // self.n_heads
        q = (h_t @ self.wq.params[f"{self.wq.name}.w"]).reshape(b, self.n_heads, 1, dh)
        k = (h_t @ self.wk.params[f"{self.wk.name}.w"]).reshape(b, self.n_heads, 1, dh)
        v = (h_t @ self.wv.params[f"{self.wv.name}.w"]).reshape(b, self.n_heads, dh)
        phi_q = self.feat.forward(q)[0][:, :, 0, :]
        phi_k = self.feat.forward(k)[0][:, :, 0, :]
        gate_on = is_start & (step_idx > 0) if self.variant != "none" else np.zeros(b, dtype=bool)
        f = np.ones((b, self.n_heads), dtype=np.float64)
        if gate_on.any():
            w_f = self.params[f"{self.name}.gate.w"]
            b_f = self.params[f"{self.name}.gate.b"]
            sig = sigmoid(e_prev @ w_f.T + b_f)
            f = np.where(gate_on[:, None], sig, 1.0)
        w_new = np.ones_like(f)
        if self.variant == "sgate_avg":
            w_new = np.where(gate_on[:, None] & (f < 1.0), 1.0 - f, 1.0)
        z *= f[..., None]
        z += w_new[..., None] * phi_k
        S *= f[..., None, None]
        S += w_new[..., None, None] * phi_k[..., None] * v[:, :, None, :]
        num = (phi_q[:, :, None, :] @ S)[:, :, 0, :]
        den = np.maximum((phi_q[:, :, None, :] @ z[..., None])[:, :, 0, 0], self.eps)
        out = num / den[..., None]
        return out.reshape(b, d) @ self.wo.params[f"{self.wo.name}.w"]
