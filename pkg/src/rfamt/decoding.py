"""Incremental decoding with per-backend caches.

Exact attention caches every generated key/value pair, so its per-step
cost grows with the prefix; random-feature attention carries only the
constant-size (S, z) summaries.  Stepwise logits match a full forward
over the same prefix to float precision for both backends.

Sentence starts during generation: position t starts a sentence iff
t == 0 or the previously generated token was the separator; the gate
consumes the previous position's raw layer input, mirroring training.
"""

import numpy as np

from rfamt import layers as L
from rfamt.model import BOS_ID, EOS_ID, PAD_ID, SEP_ID, TransformerModel

__all__ = [
    "DecodeCache",
    "init_cache",
    "decode_step",
    "greedy_decode",
    "greedy_decode_batch",
    "beam_decode",
    "default_max_len",
]


def default_max_len(src_len: int) -> int:
    """Generation cap: twice the source window length plus a little slack."""
    return 2 * src_len + 8


class DecodeCache:
    """Per-layer decoder state for one batch of generation streams."""

    def __init__(self, layers, batch, max_len, src_mask):
        self.layers = layers  # list of per-layer dicts
        self.n = 0            # tokens consumed so far
        self.batch = batch
        self.max_len = max_len
        self.src_mask = src_mask

    def entry_count(self) -> int:
        """Number of cached float64 values that exist because of generation.

        Exact caches grow linearly with the generated length; RFA state is
        constant (its arrays are counted at their fixed size).
        """
        total = 0
        for lc in self.layers:
            if "k" in lc:  # exact causal: used slices only
                dh = lc["k"].shape[-1]
                total += 2 * self.batch * lc["k"].shape[1] * self.n * dh
            else:  # rfa causal: fixed-size state
                total += lc["S"].size + lc["z"].size + lc["prev_e"].size
        return total

    def used_nbytes(self) -> int:
        return self.entry_count() * 8

    def clone(self) -> "DecodeCache":
        layers = [{k: v.copy() for k, v in lc.items()} for lc in self.layers]
        out = DecodeCache(layers, self.batch, self.max_len, self.src_mask)
        out.n = self.n
        return out


def init_cache(model: TransformerModel, enc_out, src_mask, max_len) -> DecodeCache:
    """Precompute cross-attention material; causal state starts empty/zero."""
    cfg = model.config
    b = enc_out.shape[0]
    dh = cfg.d_head
    layers = []
    for lay in model.dec_layers:
        lc = {}
        causal = lay["causal"]
        if isinstance(causal, L.RfaCausalAttention):
            p = causal.feat.feature_dim
            lc["S"] = np.zeros((b, cfg.n_heads, p, dh))
            lc["z"] = np.zeros((b, cfg.n_heads, p))
            lc["prev_e"] = np.zeros((b, cfg.d_model))
        else:
            lc["k"] = np.zeros((b, cfg.n_heads, max_len, dh))
            lc["v"] = np.zeros((b, cfg.n_heads, max_len, dh))
        cross = lay["cross"]
        if isinstance(cross, L.RfaCrossAttention):
            lc["cS"], lc["cz"] = cross.summarize(enc_out, src_mask)
        else:
            lc["ck"], lc["cv"] = cross.project_kv(enc_out)
        layers.append(lc)
    return DecodeCache(layers, b, max_len, src_mask)


def decode_step(model: TransformerModel, cache: DecodeCache, tokens, is_start):
    """Advance all streams by one position; returns logits (B, vocab).

    ``tokens`` are the decoder inputs for this position (BOS first, then
    the previously generated token); ``is_start`` flags positions opening
    a sentence.  The cache is updated in place.
    """
    if cache.n >= cache.max_len:
        raise ValueError("decode cache exhausted; raise max_len")
    cfg = model.config
    pos = cache.n
    y = model.params["tgt_emb"][tokens] * np.sqrt(cfg.d_model) + model.pos[pos]
    for lay, lc in zip(model.dec_layers, cache.layers):
        h = lay["ln1"].forward(y)
        causal = lay["causal"]
        if isinstance(causal, L.RfaCausalAttention):
            out = causal.step(h, lc["prev_e"], is_start, pos, lc["S"], lc["z"])
            lc["prev_e"][...] = y
        else:
            k, v = causal.project_kv(h[:, None, :])
            lc["k"][:, :, pos] = k[:, :, 0]
            lc["v"][:, :, pos] = v[:, :, 0]
            out = causal.step(h, lc["k"][:, :, : pos + 1], lc["v"][:, :, : pos + 1])
        y = y + out
        h = lay["ln2"].forward(y)
        cross = lay["cross"]
        if isinstance(cross, L.RfaCrossAttention):
            out = cross.step(h, lc["cS"], lc["cz"])
        else:
            out = cross.step(h, lc["ck"], lc["cv"], key_mask=cache.src_mask)
        y = y + out
        y = y + lay["ffn"].forward(lay["ln3"].forward(y))
    y = model.dec_ln.forward(y)
    logits = y @ model.params["out.w"] + model.params["out.b"]
    cache.n += 1
    return logits


def greedy_decode_batch(model, src, src_mask, max_len=None, forced_len=None,
                        cache_out=None):
    """Argmax decoding over a padded source batch.

    Stops each stream at EOS (emitting pads afterwards) unless
    ``forced_len`` is set, in which case every stream runs exactly that
    many steps ignoring EOS, so different backends decode identical token
    counts.  Ties in the argmax go to the lowest token id.
    """
    b, ns = src.shape
    limit = forced_len if forced_len is not None else (max_len or default_max_len(ns))
    enc_out = model.encode(src, src_mask)
    cache = init_cache(model, enc_out, src_mask, limit + 1)
    if cache_out is not None:
        cache_out.append(cache)
    last = np.full(b, BOS_ID, dtype=np.int64)
    is_start = np.ones(b, dtype=bool)
    finished = np.zeros(b, dtype=bool)
    cols = []
    for _ in range(limit):
        logits = decode_step(model, cache, last, is_start)
        nxt = logits.argmax(axis=-1).astype(np.int64)
        if forced_len is None:
            nxt = np.where(finished, PAD_ID, nxt)
            finished |= nxt == EOS_ID
        cols.append(nxt)
        if forced_len is None and finished.all():
            break
        is_start = nxt == SEP_ID
        last = nxt
    return np.stack(cols, axis=1)


def strip_generation(row):
    """Token list up to (excluding) EOS, with pads removed."""
    out = []
    for tok in row:
        if tok == EOS_ID:
            break
        if tok != PAD_ID:
            out.append(int(tok))
    return out


def greedy_decode(model, src_tokens, max_len=None):
    """Greedy decode of a single source window; returns generated ids."""
    src = np.asarray([list(src_tokens) + [EOS_ID]], dtype=np.int64)
    mask = np.ones_like(src, dtype=bool)
    rows = greedy_decode_batch(model, src, mask, max_len=max_len)
    return strip_generation(rows[0])


class _Hypothesis:
    __slots__ = ("tokens", "score", "cache", "last", "is_start", "finished")

    def __init__(self, tokens, score, cache, last, is_start, finished=False):
        self.tokens = tokens
        self.score = score
        self.cache = cache
        self.last = last
        self.is_start = is_start
        self.finished = finished

    def normalized(self):
        return self.score / max(len(self.tokens), 1)


def beam_decode(model, src_tokens, beam=4, max_len=None):
    """Length-normalized beam search over a single source window.

    Each hypothesis owns an independent cache copy.  Candidate ties are
    broken deterministically by (score, token id); beam=1 reproduces
    greedy decoding token for token.
    """
    if beam < 1:
        raise ValueError("beam must be >= 1")
    src = np.asarray([list(src_tokens) + [EOS_ID]], dtype=np.int64)
    mask = np.ones_like(src, dtype=bool)
    limit = max_len or default_max_len(src.shape[1])
    enc_out = model.encode(src, mask)
    root = init_cache(model, enc_out, mask, limit + 1)
    live = [_Hypothesis([], 0.0, root, np.array([BOS_ID]), np.array([True]))]
    done = []
    for _ in range(limit):
        candidates = []
        for hyp in live:
            logits = decode_step(model, hyp.cache, hyp.last, hyp.is_start)[0]
            shifted = logits - logits.max()
            logp = shifted - np.log(np.exp(shifted).sum())
            top = np.argsort(-logp, kind="stable")[:beam]
            for tok in top:
                candidates.append((hyp.score + float(logp[tok]), int(tok), hyp))
        candidates.sort(key=lambda c: (-c[0], c[1]))
        next_live = []
        for score, tok, parent in candidates[: 2 * beam]:
            if tok == EOS_ID:
                done.append(_Hypothesis(parent.tokens, score, None, None, None, True))
            elif len(next_live) < beam:
                next_live.append(
                    _Hypothesis(
                        parent.tokens + [tok], score, parent.cache.clone(),
                        np.array([tok]), np.array([tok == SEP_ID]),
                    )
                )
            if len(next_live) >= beam:
                break
        live = next_live
        if not live:
            break
    pool = done if done else live
    if not pool:
        return []
    pool.sort(key=lambda h: (-h.normalized(), tuple(h.tokens)))
    return list(pool[0].tokens)


def translate_documents(model, docs, window_size, beam=4, max_len=None):
    """Window-by-window translation keeping only each window's last sentence.

    Returns (list of hypothesis documents as sentence lists, count of empty
    extractions).  An output ending in a separator yields an empty sentence;
    that is reported via the count, not treated as fatal.
    """
    from rfamt.documents import extract_last_sentence, make_windows

    hyp_docs = []
    n_empty = 0
    for doc in docs:
        windows = make_windows(doc, window_size)
        outputs = []
        if beam == 1:
            srcs = [list(w.tokens) + [EOS_ID] for w in windows]
            width = max(len(s) for s in srcs)
            src = np.full((len(srcs), width), PAD_ID, dtype=np.int64)
            mask = np.zeros_like(src, dtype=bool)
            for i, s in enumerate(srcs):
                src[i, : len(s)] = s
                mask[i, : len(s)] = True
            rows = greedy_decode_batch(model, src, mask, max_len=max_len)
            outputs = [strip_generation(row) for row in rows]
        else:
            outputs = [
                beam_decode(model, w.tokens, beam=beam, max_len=max_len)
                for w in windows
            ]
        sents = []
        for out in outputs:
            sent = extract_last_sentence(out)
            if not sent:
                n_empty += 1
            sents.append(sent)
        hyp_docs.append(sents)
    return hyp_docs, n_empty
