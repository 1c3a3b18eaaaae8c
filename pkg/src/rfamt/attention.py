"""Exact softmax attention and its random-feature approximation.

The exact form serves as the oracle/baseline.  The random-feature form
replaces the N-way score computation with inner products against two
running summaries: S (features x values) and z (feature mass).  For
cross attention the summaries are built once from the source; for causal
attention they are updated one step at a time, optionally decayed by a
sentential forget gate at sentence boundaries.

Queries and keys are length-normalized and then scaled by d_k**-0.25
before featurization.  With unit-norm inputs the Gaussian prefactors of
the kernel estimator are constant and cancel in the attention ratio, and
the surviving scores approximate exp(q . k / sqrt(d_k)), the same
temperature the exact baseline uses.
"""

import enum
from dataclasses import dataclass

import numpy as np

from rfamt.random_features import FeatureMap, phi

__all__ = [
    "GateVariant",
    "GateParams",
    "TokenMeta",
    "AttentionState",
    "softmax_attention",
    "prepare_qk",
    "rfa_cross_attention",
    "compute_gate",
    "rfa_causal_step",
    "rfa_causal_sequence",
    "DENOM_EPS",
]

# Floor applied to the attention-ratio denominator; sine/cosine features
# are signed, so phi(q) . z can be arbitrarily close to zero or negative.
DENOM_EPS = 1e-6

_NORM_FLOOR = 1e-12


class GateVariant(enum.Enum):
    NONE = "none"
    SGATE = "sgate"
    SGATE_AVG = "sgate_avg"


@dataclass
class GateParams:
    """Learned sentential-gate parameters for one head.

    ``w_f`` has the model width of the representations fed to the gate;
    ``b_f`` biases the gate open (positive values keep more history).
    With variant NONE both are ignored and the gate is identically 1.
    """

    w_f: np.ndarray
    b_f: float
    variant: GateVariant = GateVariant.NONE


@dataclass
class TokenMeta:
    """Per-position sentence-start flags; position 0 is always a start."""

    is_sentence_start: np.ndarray

    def __post_init__(self):
        self.is_sentence_start = np.asarray(self.is_sentence_start, dtype=bool)
        if self.is_sentence_start.ndim != 1:
            raise ValueError("is_sentence_start must be 1-D")
        if self.is_sentence_start.size and not self.is_sentence_start[0]:
            raise ValueError("position 0 must be marked as a sentence start")


@dataclass
class AttentionState:
    """Running key/value summaries (S, z) after ``step`` tokens."""

    S: np.ndarray  # (2D, d_v)
    z: np.ndarray  # (2D,)
    step: int = 0

    @classmethod
    def zeros(cls, feature_dim: int, d_v: int) -> "AttentionState":
        return cls(
            S=np.zeros((feature_dim, d_v), dtype=np.float64),
            z=np.zeros(feature_dim, dtype=np.float64),
            step=0,
        )


def softmax_attention(q_t, keys, values, scale: float) -> np.ndarray:
    """Exact attention: softmax(scale * q.k_i) weighted average of values.

    ``keys`` and ``values`` are sequences of equal nonempty length.  The
    output is a convex combination of the values.
    """
    keys = np.asarray(keys, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    q_t = np.asarray(q_t, dtype=np.float64)
    if keys.ndim != 2 or keys.shape[0] == 0:
        raise ValueError("keys must be a nonempty list of vectors")
    if values.ndim != 2 or values.shape[0] != keys.shape[0]:
        raise ValueError(
            f"keys and values must have equal length, got {keys.shape[0]} and "
            f"{values.shape[0] if values.ndim == 2 else 'scalar'}"
        )
    if q_t.shape != (keys.shape[1],):
        raise ValueError(f"query has shape {q_t.shape}, keys have dim {keys.shape[1]}")
    if not scale > 0:
        raise ValueError(f"scale must be positive, got {scale}")
    scores = scale * (keys @ q_t)
    scores -= scores.max()
    weights = np.exp(scores)
    weights /= weights.sum()
    return weights @ values


def prepare_qk(x: np.ndarray, d_k: int) -> np.ndarray:
    """Length-normalize then temperature-scale a query/key by d_k**-0.25."""
    x = np.asarray(x, dtype=np.float64)
    norm = np.linalg.norm(x, axis=-1, keepdims=True)
    return x / np.maximum(norm, _NORM_FLOOR) * d_k ** (-0.25)


def _stabilized(num: np.ndarray, den: np.ndarray, eps: float) -> np.ndarray:
    return num / np.maximum(den, eps)


def rfa_cross_attention(
    fmap: FeatureMap, queries, keys, values, eps: float = DENOM_EPS
) -> np.ndarray:
    """Random-feature cross attention over a fixed source.

    Builds S = sum_i phi(k_i) v_i^T and z = sum_i phi(k_i) once, then
    answers every query as (phi(q) . S) / (phi(q) . z) with the denominator
    floored at ``eps``.  Cost is O(N + #queries) after the single summary
    pass, independent of N per query.
    """
    queries = np.asarray(queries, dtype=np.float64)
    keys = np.asarray(keys, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    if keys.ndim != 2 or keys.shape[0] == 0:
        raise ValueError("source keys must be a nonempty list of vectors")
    if values.shape[0] != keys.shape[0]:
        raise ValueError("keys and values must have equal length")
    if queries.ndim != 2 or queries.shape[0] == 0:
        raise ValueError("queries must be a nonempty list of vectors")
    d_k = fmap.spec.input_dim
    phi_k = phi(fmap, prepare_qk(keys, d_k))
    phi_q = phi(fmap, prepare_qk(queries, d_k))
    S = phi_k.T @ values  # (2D, d_v)
    z = phi_k.sum(axis=0)  # (2D,)
    num = phi_q @ S
    den = phi_q @ z
    return _stabilized(num, den[:, None], eps)


def compute_gate(params: GateParams, e_prev: np.ndarray, is_start: bool) -> float:
    """Forget gate f_t = sigmoid(w_f . e_prev + b_f) at sentence starts, else 1."""
    if not is_start or params.variant is GateVariant.NONE:
        return 1.0
    e_prev = np.asarray(e_prev, dtype=np.float64)
    if e_prev.shape != np.asarray(params.w_f).shape:
        raise ValueError(
            f"gate input has shape {e_prev.shape}, w_f has {np.asarray(params.w_f).shape}"
        )
    pre = float(np.dot(params.w_f, e_prev) + params.b_f)
    return float(1.0 / (1.0 + np.exp(-pre)))


def rfa_causal_step(
    fmap: FeatureMap,
    state: AttentionState,
    q_t,
    k_t,
    v_t,
    f_t: float,
    variant: GateVariant = GateVariant.NONE,
    is_start: bool = False,
    eps: float = DENOM_EPS,
) -> tuple[np.ndarray, AttentionState]:
    """One recurrent attention step; constant work regardless of ``state.step``.

    Update rule: S_t = f_t S_{t-1} + w phi(k_t) v_t^T and the matching z
    update, where w = 1 except for SGATE_AVG at a gated sentence boundary
    (is_start with f_t < 1), which blends old and new as (f_t, 1 - f_t).
    Output is (phi(q_t) . S_t) / (phi(q_t) . z_t) with a floored denominator.
    """
    if not 0.0 < f_t <= 1.0:
        raise ValueError(f"gate value must be in (0, 1], got {f_t}")
    q_t = np.asarray(q_t, dtype=np.float64)
    k_t = np.asarray(k_t, dtype=np.float64)
    v_t = np.asarray(v_t, dtype=np.float64)
    if not (np.all(np.isfinite(q_t)) and np.all(np.isfinite(k_t)) and np.all(np.isfinite(v_t))):
        raise ValueError("attention step inputs must be finite")
    d_k = fmap.spec.input_dim
    phi_q = phi(fmap, prepare_qk(q_t, d_k))
    phi_k = phi(fmap, prepare_qk(k_t, d_k))
    w_new = 1.0
    if variant is GateVariant.SGATE_AVG and is_start and f_t < 1.0:
        w_new = 1.0 - f_t
    S = f_t * state.S + w_new * np.outer(phi_k, v_t)
    z = f_t * state.z + w_new * phi_k
    num = phi_q @ S
    den = float(phi_q @ z)
    out = num / max(den, eps)
    return out, AttentionState(S=S, z=z, step=state.step + 1)


def rfa_causal_sequence(
    fmap: FeatureMap,
    queries,
    keys,
    values,
    e_inputs,
    meta: TokenMeta,
    params: GateParams,
    eps: float = DENOM_EPS,
) -> np.ndarray:
    """Run the gated recurrence over a whole sequence; total cost O(N).

    The gate at position t is computed from ``e_inputs[t-1]`` (the layer
    input at the preceding position, i.e. the separator token when t opens
    a sentence).  The first position always gets f = 1: there is no
    previous token and the zero initial state makes any gate a no-op.
    """
    queries = np.asarray(queries, dtype=np.float64)
    keys = np.asarray(keys, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    e_inputs = np.asarray(e_inputs, dtype=np.float64)
    n = queries.shape[0]
    if not (keys.shape[0] == values.shape[0] == e_inputs.shape[0] == n):
        raise ValueError("queries, keys, values and e_inputs must have equal length")
    if meta.is_sentence_start.shape[0] != n:
        raise ValueError("token meta length must match the sequence")
    state = AttentionState.zeros(fmap.feature_dim, values.shape[1])
    outputs = np.empty((n, values.shape[1]), dtype=np.float64)
    for t in range(n):
        is_start = bool(meta.is_sentence_start[t])
        f_t = 1.0 if t == 0 else compute_gate(params, e_inputs[t - 1], is_start)
        outputs[t], state = rfa_causal_step(
            fmap, state, queries[t], keys[t], values[t], f_t,
            variant=params.variant, is_start=is_start, eps=eps,
        )
    return outputs
