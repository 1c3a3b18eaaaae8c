"""Desk-scale encoder-decoder transformer with pluggable attention backends.

The encoder always uses exact self-attention.  Decoder cross and causal
attention each dispatch on the configured backend (exact softmax or
random-feature), and the causal side optionally applies the sentential
forget gate.  All gradients are hand-written reverse mode; the test
suite checks them against central finite differences.
"""

import json
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from rfamt import layers as L
from rfamt.random_features import FeatureMapSpec, sample_feature_map
from rfamt.seeding import derive_seed, substream

__all__ = [
    "ModelConfig",
    "Parameters",
    "Batch",
    "make_batch",
    "param_shapes",
    "init_parameters",
    "TransformerModel",
    "forward",
    "backward",
    "PAD_ID",
    "BOS_ID",
    "EOS_ID",
    "SEP_ID",
    "N_SPECIALS",
]

PAD_ID, BOS_ID, EOS_ID, SEP_ID = 0, 1, 2, 3
N_SPECIALS = 4

BACKENDS = ("exact", "rfa")
GATE_VARIANTS = ("none", "sgate", "sgate_avg")


@dataclass
class ModelConfig:
    vocab_size: int
    d_model: int = 64
    n_heads: int = 4
    d_ff: int = 128
    n_enc_layers: int = 2
    n_dec_layers: int = 2
    cross_backend: str = "exact"
    causal_backend: str = "exact"
    gate_variant: str = "none"
    D_cross: int = 128
    D_causal: int = 64
    sigma_k: float = 1.0
    b_f_init: float = 2.0
    master_seed: int = 0
    w_f_init_scale: float = 1e-3
    label_smoothing: float = 0.0
    resample_features: bool = False
    max_len: int = 1200
    denom_eps: float = 1e-6

    def __post_init__(self):
        if self.vocab_size <= N_SPECIALS:
            raise ValueError(f"vocab_size must exceed {N_SPECIALS} special ids")
        if self.d_model % self.n_heads != 0:
            raise ValueError(
                f"d_model ({self.d_model}) must be divisible by n_heads ({self.n_heads})"
            )
        if self.cross_backend not in BACKENDS or self.causal_backend not in BACKENDS:
            raise ValueError(f"backends must be one of {BACKENDS}")
        if self.gate_variant not in GATE_VARIANTS:
            raise ValueError(f"gate_variant must be one of {GATE_VARIANTS}")
        if self.gate_variant != "none" and self.causal_backend != "rfa":
            raise ValueError("sentential gating requires the rfa causal backend")
        if self.b_f_init not in (1, 2):
            raise ValueError(f"b_f_init must be 1 or 2, got {self.b_f_init}")
        for name in ("d_model", "n_heads", "d_ff", "n_enc_layers", "n_dec_layers",
                     "D_cross", "D_causal"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if not self.sigma_k > 0:
            raise ValueError("sigma_k must be positive")

    @property
    def d_head(self):
        return self.d_model // self.n_heads

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)

    @classmethod
    def paper_preset(cls, vocab_size, **overrides):
        """Full-size configuration (6 layers, 512 wide); not used by tests."""
        base = dict(
            vocab_size=vocab_size, d_model=512, n_heads=8, d_ff=2048,
            n_enc_layers=6, n_dec_layers=6, cross_backend="rfa",
            causal_backend="rfa", gate_variant="sgate", D_cross=256,
            D_causal=32, b_f_init=2.0,
        )
        base.update(overrides)
        return cls(**base)


class Parameters(dict):
    """Name -> float64 array mapping with a few conveniences."""

    def copy(self):
        return Parameters({k: v.copy() for k, v in self.items()})

    def zeros_like(self):
        return Parameters({k: np.zeros_like(v) for k, v in self.items()})

    @property
    def n_params(self):
        return sum(v.size for v in self.values())


def param_shapes(config: ModelConfig) -> dict:
    """Deterministic name -> shape manifest for every trainable array."""
    d, v, h, dff = config.d_model, config.vocab_size, config.n_heads, config.d_ff
    shapes = {"src_emb": (v, d), "tgt_emb": (v, d)}

    def attn(prefix):
        for w in ("wq", "wk", "wv", "wo"):
            shapes[f"{prefix}.{w}.w"] = (d, d)

    def ln(prefix):
        shapes[f"{prefix}.g"] = (d,)
        shapes[f"{prefix}.b"] = (d,)

    def ffn(prefix):
        shapes[f"{prefix}.l1.w"] = (d, dff)
        shapes[f"{prefix}.l1.b"] = (dff,)
        shapes[f"{prefix}.l2.w"] = (dff, d)
        shapes[f"{prefix}.l2.b"] = (d,)

    for i in range(config.n_enc_layers):
        ln(f"enc{i}.ln1")
        attn(f"enc{i}.attn")
        ln(f"enc{i}.ln2")
        ffn(f"enc{i}.ffn")
    ln("enc_ln")
    for i in range(config.n_dec_layers):
        ln(f"dec{i}.ln1")
        attn(f"dec{i}.causal")
        shapes[f"dec{i}.causal.gate.w"] = (h, d)
        shapes[f"dec{i}.causal.gate.b"] = (h,)
        ln(f"dec{i}.ln2")
        attn(f"dec{i}.cross")
        ln(f"dec{i}.ln3")
        ffn(f"dec{i}.ffn")
    ln("dec_ln")
    shapes["out.w"] = (d, v)
    shapes["out.b"] = (v,)
    return shapes


def init_parameters(config: ModelConfig) -> Parameters:
    """Initialize all weights from the "init" substream of the master seed.

    Gate biases start at ``b_f_init`` (gates mostly open, favoring recent
    context) and gate weights near zero, so initial gates are close to
    sigmoid(b_f_init) for every input.
    """
    rng = substream(config.master_seed, "init")
    params = Parameters()
    for name, shape in param_shapes(config).items():
        if name.endswith("emb"):
            arr = rng.standard_normal(shape) / np.sqrt(config.d_model)
        elif name.endswith("gate.w"):
            arr = rng.standard_normal(shape) * config.w_f_init_scale
        elif name.endswith("gate.b"):
            arr = np.full(shape, float(config.b_f_init))
        elif name.endswith(".g"):
            arr = np.ones(shape)
        elif name.endswith(".b"):
            arr = np.zeros(shape)
        else:  # projection matrices
            fan_in, fan_out = shape
            arr = rng.standard_normal(shape) * np.sqrt(2.0 / (fan_in + fan_out))
        params[name] = np.ascontiguousarray(arr, dtype=np.float64)
    return params


@dataclass
class Batch:
    """Padded parallel batch with sentence-start metadata.

    ``tgt_in`` is the shifted decoder input ([BOS] y_1 .. y_{m-1}) and
    ``tgt_out`` the prediction targets (y_1 .. y_m EOS).  ``tgt_start``
    marks decoder-input positions that open a sentence (position 0, and
    any position right after a separator token).
    """

    src: np.ndarray        # (B, Ns) int64
    src_mask: np.ndarray   # (B, Ns) bool
    tgt_in: np.ndarray     # (B, Nt) int64
    tgt_out: np.ndarray    # (B, Nt) int64
    tgt_mask: np.ndarray   # (B, Nt) bool
    tgt_start: np.ndarray  # (B, Nt) bool

    @property
    def size(self):
        return self.src.shape[0]


def make_batch(pairs, extra_pad=0) -> Batch:
    """Assemble (src_ids, tgt_ids) pairs into a padded Batch.

    Sources get a trailing EOS; targets are wrapped as BOS ... EOS.
    ``extra_pad`` appends that many pad columns to both sides (used by the
    padding-invariance tests).
    """
    srcs = [list(s) + [EOS_ID] for s, _ in pairs]
    tins = [[BOS_ID] + list(t) for _, t in pairs]
    touts = [list(t) + [EOS_ID] for _, t in pairs]
    ns = max(len(s) for s in srcs) + extra_pad
    nt = max(len(t) for t in tins) + extra_pad
    b = len(pairs)
    src = np.full((b, ns), PAD_ID, dtype=np.int64)
    tgt_in = np.full((b, nt), PAD_ID, dtype=np.int64)
    tgt_out = np.full((b, nt), PAD_ID, dtype=np.int64)
    src_mask = np.zeros((b, ns), dtype=bool)
    tgt_mask = np.zeros((b, nt), dtype=bool)
    for i, (s, ti, to) in enumerate(zip(srcs, tins, touts)):
        src[i, : len(s)] = s
        src_mask[i, : len(s)] = True
        tgt_in[i, : len(ti)] = ti
        tgt_out[i, : len(to)] = to
        tgt_mask[i, : len(to)] = True
    tgt_start = np.zeros((b, nt), dtype=bool)
    tgt_start[:, 0] = True
    tgt_start[:, 1:] = tgt_in[:, :-1] == SEP_ID
    return Batch(src, src_mask, tgt_in, tgt_out, tgt_mask, tgt_start)


def _feature_seed(config, kind, layer, head, round_idx=0):
    label = f"fmap.dec{layer}.{kind}.h{head}.r{round_idx}"
    return derive_seed(config.master_seed, label)


class TransformerModel:
    """Bundles config, parameters, layers, and fixed feature maps."""

    def __init__(self, config: ModelConfig, params: Parameters):
        shapes = param_shapes(config)
        missing = set(shapes) - set(params)
        if missing:
            raise ValueError(f"parameters missing keys: {sorted(missing)[:4]} ...")
        for name, shape in shapes.items():
            if params[name].shape != shape:
                raise ValueError(
                    f"parameter {name} has shape {params[name].shape}, expected {shape}"
                )
        self.config = config
        self.params = params
        self.pos = L.sinusoidal_positions(config.max_len, config.d_model)
        self._build_layers(feature_round=0)

    def _featurizer(self, kind, layer_idx, num_features, round_idx):
        maps = []
        for head in range(self.config.n_heads):
            spec = FeatureMapSpec(
                input_dim=self.config.d_head,
                num_features=num_features,
                bandwidth=self.config.sigma_k,
                seed=_feature_seed(self.config, kind, layer_idx, head, round_idx),
            )
            maps.append(sample_feature_map(spec).projection)
        return L.RfaFeaturizer(np.ascontiguousarray(np.stack(maps)))

    def _build_layers(self, feature_round):
        cfg, params = self.config, self.params
        self.feature_round = feature_round
        self.enc_layers = []
        for i in range(cfg.n_enc_layers):
            self.enc_layers.append({
                "ln1": L.LayerNorm(params, f"enc{i}.ln1"),
                "attn": L.ExactAttention(params, f"enc{i}.attn", cfg.n_heads),
                "ln2": L.LayerNorm(params, f"enc{i}.ln2"),
                "ffn": L.FeedForward(params, f"enc{i}.ffn"),
            })
        self.enc_ln = L.LayerNorm(params, "enc_ln")
        self.dec_layers = []
        for i in range(cfg.n_dec_layers):
            if cfg.causal_backend == "rfa":
                causal = L.RfaCausalAttention(
                    params, f"dec{i}.causal", cfg.n_heads,
                    self._featurizer("causal", i, cfg.D_causal, feature_round),
                    cfg.gate_variant, cfg.denom_eps,
                )
            else:
                causal = L.ExactAttention(params, f"dec{i}.causal", cfg.n_heads, causal=True)
            if cfg.cross_backend == "rfa":
                cross = L.RfaCrossAttention(
                    params, f"dec{i}.cross", cfg.n_heads,
                    self._featurizer("cross", i, cfg.D_cross, feature_round),
                    cfg.denom_eps,
                )
            else:
                cross = L.ExactAttention(params, f"dec{i}.cross", cfg.n_heads)
            self.dec_layers.append({
                "ln1": L.LayerNorm(params, f"dec{i}.ln1"),
                "causal": causal,
                "ln2": L.LayerNorm(params, f"dec{i}.ln2"),
                "cross": cross,
                "ln3": L.LayerNorm(params, f"dec{i}.ln3"),
                "ffn": L.FeedForward(params, f"dec{i}.ffn"),
            })
        self.dec_ln = L.LayerNorm(params, "dec_ln")
        self.src_emb = L.Embedding(params, "src_emb")
        self.tgt_emb = L.Embedding(params, "tgt_emb")
        self.out_proj = L.Linear(params, "out")

    def resample_feature_maps(self, round_idx):
        """Redraw the random feature maps (optional per-step resampling)."""
        self._build_layers(feature_round=round_idx)

    # ----- forward / backward -----

    def _check_ids(self, ids):
        if ids.size and (ids.min() < 0 or ids.max() >= self.config.vocab_size):
            bad = ids[(ids < 0) | (ids >= self.config.vocab_size)][0]
            raise ValueError(f"token id {bad} out of vocabulary "
                             f"(size {self.config.vocab_size})")

    def encode(self, src, src_mask):
        self._check_ids(src)
        x = self.src_emb.forward(src) + self.pos[: src.shape[1]]
        for lay in self.enc_layers:
            x = x + lay["attn"].forward(lay["ln1"].forward(x), key_mask=src_mask)
            x = x + lay["ffn"].forward(lay["ln2"].forward(x))
        return self.enc_ln.forward(x)

    def decode_states(self, enc_out, src_mask, tgt_in, tgt_start):
        self._check_ids(tgt_in)
        y = self.tgt_emb.forward(tgt_in) + self.pos[: tgt_in.shape[1]]
        for lay in self.dec_layers:
            h = lay["ln1"].forward(y)
            if isinstance(lay["causal"], L.RfaCausalAttention):
                y = y + lay["causal"].forward(h, y, tgt_start)
            else:
                y = y + lay["causal"].forward(h)
            h = lay["ln2"].forward(y)
            if isinstance(lay["cross"], L.RfaCrossAttention):
                y = y + lay["cross"].forward(h, enc_out, src_mask)
            else:
                y = y + lay["cross"].forward(h, enc_out, key_mask=src_mask)
            y = y + lay["ffn"].forward(lay["ln3"].forward(y))
        return self.dec_ln.forward(y)

    def forward(self, batch: Batch):
        """Returns (logits, loss): mean token cross-entropy over non-pad."""
        enc_out = self.encode(batch.src, batch.src_mask)
        dec_out = self.decode_states(enc_out, batch.src_mask, batch.tgt_in, batch.tgt_start)
        logits = self.out_proj.forward(dec_out)
        loss, dlogits = self._loss_and_grad(logits, batch.tgt_out, batch.tgt_mask)
        self._fw = (batch, dlogits)
        return logits, loss

    def _loss_and_grad(self, logits, targets, mask):
        ls = self.config.label_smoothing
        v = logits.shape[-1]
        shifted = logits - logits.max(axis=-1, keepdims=True)
        lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
        logp = shifted - lse
        n_tok = max(int(mask.sum()), 1)
        gold = np.take_along_axis(logp, targets[..., None], axis=-1)[..., 0]
        nll = -((1.0 - ls) * gold + ls * logp.mean(axis=-1))
        loss = float((nll * mask).sum() / n_tok)
        soft = np.exp(logp)
        target_dist = np.zeros_like(soft)
        np.put_along_axis(target_dist, targets[..., None], 1.0 - ls, axis=-1)
        target_dist += ls / v
        dlogits = (soft - target_dist) * mask[..., None] / n_tok
        if not np.isfinite(loss):
            raise FloatingPointError(f"non-finite loss: {loss}")
        return loss, dlogits

    def backward(self):
        """Gradients of the last forward's loss for every parameter."""
        batch, dlogits = self._fw
        grads = Parameters({k: np.zeros_like(v) for k, v in self.params.items()})
        ddec = self.out_proj.backward(dlogits, grads)
        dy = self.dec_ln.backward(ddec, grads)
        denc_total = np.zeros(
            (batch.src.shape[0], batch.src.shape[1], self.config.d_model)
        )
        for lay in reversed(self.dec_layers):
            dffn = lay["ffn"].backward(dy, grads)
            dy = dy + lay["ln3"].backward(dffn, grads)
            dxq, denc = lay["cross"].backward(dy, grads)
            denc_total += denc
            dy = dy + lay["ln2"].backward(dxq, grads)
            if isinstance(lay["causal"], L.RfaCausalAttention):
                dh, de_raw = lay["causal"].backward(dy, grads)
                dy = dy + de_raw + lay["ln1"].backward(dh, grads)
            else:
                dh, _ = lay["causal"].backward(dy, grads)
                dy = dy + lay["ln1"].backward(dh, grads)
        self.tgt_emb.backward(dy, grads)
        dx = self.enc_ln.backward(denc_total, grads)
        for lay in reversed(self.enc_layers):
            dffn = lay["ffn"].backward(dx, grads)
            dx = dx + lay["ln2"].backward(dffn, grads)
            dq, _ = lay["attn"].backward(dx, grads)
            dx = dx + lay["ln1"].backward(dq, grads)
        self.src_emb.backward(dx, grads)
        return grads

    # ----- evaluation helpers -----

    def sequence_logprob(self, batch: Batch):
        """Sum of gold-token log-probabilities per sequence (non-pad only)."""
        enc_out = self.encode(batch.src, batch.src_mask)
        dec_out = self.decode_states(enc_out, batch.src_mask, batch.tgt_in, batch.tgt_start)
        logits = self.out_proj.forward(dec_out)
        shifted = logits - logits.max(axis=-1, keepdims=True)
        logp = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
        gold = np.take_along_axis(logp, batch.tgt_out[..., None], axis=-1)[..., 0]
        return (gold * batch.tgt_mask).sum(axis=-1)

    def next_token_accuracy(self, batch: Batch):
        logits, _ = self.forward(batch)
        pred = logits.argmax(axis=-1)
        hits = (pred == batch.tgt_out) & batch.tgt_mask
        return float(hits.sum() / max(int(batch.tgt_mask.sum()), 1))


def forward(params: Parameters, batch: Batch, config: ModelConfig):
    """Functional wrapper: one forward pass, returns (logits, loss)."""
    return TransformerModel(config, params).forward(batch)


def backward(params: Parameters, batch: Batch, config: ModelConfig) -> Parameters:
    """Functional wrapper: gradients of the batch loss for all parameters."""
    model = TransformerModel(config, params)
    model.forward(batch)
    return model.backward()
