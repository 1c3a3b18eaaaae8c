"""Decoding-speed benchmark: tokens/sec and per-token latency scaling.

One trained model is decoded at many window sizes with both attention
backends sharing its weights (gating is disabled for benchmarking; the
gate adds negligible compute).  Decodes run in forced-length mode so
both backends emit identical token counts, and only the forward passes
are timed; token selection and bookkeeping stay outside the timed
region.  A separate probe decodes far past the usual window lengths to
measure how per-token latency depends on the prefix length.
"""

import csv
import io
import time
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.stats import spearmanr

from rfamt.decoding import decode_step, init_cache
from rfamt.model import EOS_ID, N_SPECIALS, SEP_ID, TransformerModel
from rfamt.seeding import substream

__all__ = [
    "BenchConfig",
    "BenchCell",
    "BenchResult",
    "run_benchmark",
    "compute_speedup",
    "emit_report",
    "assert_laws",
    "kernel_benchmark",
    "DEFAULT_BATCH_TABLE",
]

# Decoding batch size per window size, scaled down by BenchConfig.batch_divisor.
DEFAULT_BATCH_TABLE = {1: 1024, 2: 512, 3: 512, 4: 256, 5: 256, 10: 128, 15: 96}

CSV_COLUMNS = [
    "backend", "L", "batch", "tokens_per_sec", "p50_latency_us",
    "p95_latency_us", "cache_entries_peak", "speedup",
]


@dataclass
class BenchConfig:
    window_sizes: tuple = (1, 2, 3, 4, 5, 10, 15)
    batch_table: dict = field(default_factory=lambda: dict(DEFAULT_BATCH_TABLE))
    batch_divisor: int = 16
    repetitions: int = 3
    warmup: int = 1
    backends: tuple = ("exact", "rfa")
    tokens_per_sentence: int = 20
    seed: int = 0
    single_thread: bool = True
    probe_prefix_lo: int = 100
    probe_prefix_hi: int = 1000
    probe_batch: int = 64
    probe_bucket_halfwidth: int = 50
    run_probe: bool = True
    # Test hook: seconds added to each recorded step time, per backend.
    # Inflates measured latency without touching the computation.
    synthetic_delay: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.repetitions < 3:
            raise ValueError("repetitions must be >= 3")
        if not self.window_sizes or min(self.window_sizes) < 1:
            raise ValueError("window sizes must be positive")
        if self.batch_divisor < 1 or self.tokens_per_sentence < 1 or self.probe_batch < 1:
            raise ValueError("sizes must be positive")
        for lsize in self.window_sizes:
            if lsize not in self.batch_table:
                raise ValueError(f"no batch-table entry for L={lsize}")

    def batch_for(self, window_size):
        return max(1, self.batch_table[window_size] // self.batch_divisor)


@dataclass
class BenchCell:
    backend: str
    window_size: int
    batch: int
    tokens_per_sec: float
    p50_latency_us: float
    p95_latency_us: float
    cache_entries_peak: int


@dataclass
class BenchResult:
    cells: list
    speedups: dict           # L -> rfa/exact tokens-per-sec ratio
    spearman_rho: float
    probe: dict              # backend -> {prefix: per-token latency seconds}
    skipped: list
    meta: dict


def _backend_model(model, backend):
    cfg = replace(model.config, cross_backend=backend, causal_backend=backend,
                  gate_variant="none")
    return TransformerModel(cfg, model.params)


def _synthetic_sources(config, window_size, batch, vocab_size, rng):
    """Fixed-length source windows: L sentences of ~tokens_per_sentence."""
    sent = config.tokens_per_sentence
    length = window_size * sent + (window_size - 1) + 1  # separators + EOS
    src = rng.integers(N_SPECIALS, vocab_size, size=(batch, length)).astype(np.int64)
    for j in range(1, window_size):
        src[:, j * (sent + 1) - 1] = SEP_ID
    src[:, -1] = EOS_ID
    mask = np.ones_like(src, dtype=bool)
    return src, mask


def timed_decode(model, src, src_mask, forced_len, clock, delay=0.0):
    """Forced-length greedy decode, timing each forward step.

    Returns (tokens (B, T), per-step seconds, final cache).  Only the
    decode_step call sits inside the timed region, so instrumentation
    cannot perturb the computed tokens.
    """
    b = src.shape[0]
    enc_out = model.encode(src, src_mask)
    cache = init_cache(model, enc_out, src_mask, forced_len + 1)
    last = np.full(b, 1, dtype=np.int64)  # BOS
    is_start = np.ones(b, dtype=bool)
    cols = []
    times = np.empty(forced_len)
    for t in range(forced_len):
        t0 = clock()
        logits = decode_step(model, cache, last, is_start)
        times[t] = clock() - t0 + delay
        nxt = logits.argmax(axis=-1).astype(np.int64)
        cols.append(nxt)
        is_start = nxt == SEP_ID
        last = nxt
    return np.stack(cols, axis=1), times, cache


def _bench_cell(model, config, backend, window_size, clock):
    batch = config.batch_for(window_size)
    rng = substream(config.seed, f"bench.L{window_size}")
    src, mask = _synthetic_sources(
        config, window_size, batch, model.config.vocab_size, rng
    )
    forced_len = src.shape[1] + 2
    delay = config.synthetic_delay.get(backend, 0.0)
    all_times = []
    rates = []
    cache_peak = 0
    for rep in range(config.warmup + config.repetitions):
        _, times, cache = timed_decode(model, src, mask, forced_len, clock, delay)
        if rep < config.warmup:
            continue
        rates.append(batch * forced_len / times.sum())
        all_times.append(times)
        cache_peak = max(cache_peak, cache.entry_count())
    per_token_us = np.concatenate(all_times) / batch * 1e6
    return BenchCell(
        backend=backend,
        window_size=window_size,
        batch=batch,
        tokens_per_sec=float(np.median(rates)),
        p50_latency_us=float(np.percentile(per_token_us, 50)),
        p95_latency_us=float(np.percentile(per_token_us, 95)),
        cache_entries_peak=cache_peak,
    )


def _probe(model, config, backend, clock):
    """Median per-token latency around two prefix depths (lo and hi)."""
    rng = substream(config.seed, "probe")
    src, mask = _synthetic_sources(config, 1, config.probe_batch,
                                   model.config.vocab_size, rng)
    hw = config.probe_bucket_halfwidth
    forced_len = config.probe_prefix_hi + hw + 1
    delay = config.synthetic_delay.get(backend, 0.0)
    buckets = {config.probe_prefix_lo: [], config.probe_prefix_hi: []}
    for rep in range(config.warmup + config.repetitions):
        _, times, _ = timed_decode(model, src, mask, forced_len, clock, delay)
        if rep < config.warmup:
            continue
        prefix = np.arange(forced_len)  # cache length entering each step
        for center in buckets:
            sel = (prefix >= center - hw) & (prefix <= center + hw)
            buckets[center].append(times[sel] / config.probe_batch)
    return {center: float(np.median(np.concatenate(chunks)))
            for center, chunks in buckets.items()}


def run_benchmark(model, config: BenchConfig, clock=None) -> BenchResult:
    """Decode with every backend at every window size and measure rates.

    Token outputs are deterministic per backend; timings come from the
    injectable ``clock`` (monotonic wall clock by default).  A cell that
    runs out of memory is reported in ``skipped`` and omitted.
    """
    if not config.backends:
        raise ValueError("no backends configured")
    if clock is None:
        clock = time.perf_counter
    limits = _thread_limit(config)
    with limits:
        cells = []
        skipped = []
        for backend in config.backends:
            bmodel = _backend_model(model, backend)
            for window_size in config.window_sizes:
                try:
                    cells.append(_bench_cell(bmodel, config, backend, window_size, clock))
                except MemoryError:
                    skipped.append((backend, window_size, "out of memory"))
        probe = {}
        if config.run_probe:
            for backend in config.backends:
                probe[backend] = _probe(_backend_model(model, backend), config,
                                        backend, clock)
    speedups, rho = compute_speedup_from_cells(cells)
    meta = {
        "single_thread": config.single_thread,
        # Hardware-specific reference points from the original study; recorded
        # for context, never asserted.
        "reference_speedups": {"gpu_L15": 2.09, "cpu_L15": 19.2, "cpu_L1": 1.58},
    }
    return BenchResult(cells, speedups, rho, probe, skipped, meta)


def _thread_limit(config):
    if not config.single_thread:
        import contextlib

        return contextlib.nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=1)


def compute_speedup_from_cells(cells):
    by_key = {(c.backend, c.window_size): c for c in cells}
    speedups = {}
    for (backend, lsize) in list(by_key):
        if backend != "rfa":
            continue
        exact = by_key.get(("exact", lsize))
        if exact is None:
            continue
        speedups[lsize] = by_key[("rfa", lsize)].tokens_per_sec / exact.tokens_per_sec
    rho = float("nan")
    if len(speedups) >= 3:
        ls = sorted(speedups)
        rho = float(spearmanr(ls, [speedups[l] for l in ls]).statistic)
    return speedups, rho


def compute_speedup(result: BenchResult):
    """RFA/exact tokens-per-sec ratio per window size, plus the trend."""
    ls = sorted(result.speedups)
    if not ls:
        raise ValueError("speedup requires both backends for at least one L")
    monotone = result.spearman_rho > 0.8 if len(ls) >= 3 else None
    return {
        "ratios": {l: result.speedups[l] for l in ls},
        "spearman_rho": result.spearman_rho,
        "monotone_increasing": monotone,
    }


def assert_laws(result: BenchResult, rfa_tolerance=0.2, exact_min_ratio=5.0,
                min_rho=0.8):
    """Scaling-law failures (empty list when all hold).

    - RFA per-token latency constant in prefix length within the tolerance.
    - Exact per-token latency grows at least ``exact_min_ratio`` from the
      low to the high probe prefix.
    - RFA/exact speedup increases with window size (Spearman rho).
    """
    failures = []
    probe = result.probe
    if "rfa" in probe and len(probe["rfa"]) == 2:
        lo, hi = sorted(probe["rfa"])
        ratio = probe["rfa"][hi] / probe["rfa"][lo]
        if abs(ratio - 1.0) > rfa_tolerance:
            failures.append(
                f"rfa latency ratio prefix {hi}/{lo} = {ratio:.3f}, "
                f"expected within {rfa_tolerance:.0%} of 1"
            )
    if "exact" in probe and len(probe["exact"]) == 2:
        lo, hi = sorted(probe["exact"])
        ratio = probe["exact"][hi] / probe["exact"][lo]
        if ratio < exact_min_ratio:
            failures.append(
                f"exact latency ratio prefix {hi}/{lo} = {ratio:.2f}, "
                f"expected >= {exact_min_ratio}"
            )
    if len(result.speedups) >= 3 and not result.spearman_rho > min_rho:
        failures.append(
            f"speedup trend rho = {result.spearman_rho:.3f}, expected > {min_rho}"
        )
    return failures


def emit_report(result: BenchResult, path):
    """Write the CSV at ``path`` plus a text summary at ``path`` + '.summary.txt'.

    CSV columns are fixed: backend, L, batch, tokens_per_sec,
    p50_latency_us, p95_latency_us, cache_entries_peak, speedup (the
    RFA/exact ratio for that L, on both backends' rows).
    """
    if not result.cells:
        raise ValueError("no benchmark cells to report")
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for cell in sorted(result.cells, key=lambda c: (c.backend, c.window_size)):
        ratio = result.speedups.get(cell.window_size, "")
        writer.writerow([
            cell.backend, cell.window_size, cell.batch,
            f"{cell.tokens_per_sec:.3f}", f"{cell.p50_latency_us:.3f}",
            f"{cell.p95_latency_us:.3f}", cell.cache_entries_peak,
            f"{ratio:.4f}" if ratio != "" else "",
        ])
    with open(path, "w") as fh:
        fh.write(buf.getvalue())
    lines = [f"benchmark cells: {len(result.cells)}"]
    for lsize in sorted(result.speedups):
        lines.append(f"L={lsize}: rfa/exact speedup {result.speedups[lsize]:.3f}")
    if result.speedups:
        verdict = "increasing" if result.spearman_rho > 0.8 else "NOT increasing"
        lines.append(
            f"speedup trend across L: {verdict} (spearman rho {result.spearman_rho:.3f})"
        )
    for backend, buckets in result.probe.items():
        if len(buckets) == 2:
            lo, hi = sorted(buckets)
            lines.append(
                f"{backend} per-token latency: {buckets[lo]*1e6:.1f}us @prefix {lo}, "
                f"{buckets[hi]*1e6:.1f}us @prefix {hi} (ratio {buckets[hi]/buckets[lo]:.2f})"
            )
    for backend, lsize, reason in result.skipped:
        lines.append(f"skipped {backend} L={lsize}: {reason}")
    lines.append(f"single-threaded timing: {result.meta.get('single_thread')}")
    lines.append("note: beam/candidate bookkeeping is excluded from timed regions")
    summary = "\n".join(lines) + "\n"
    with open(str(path) + ".summary.txt", "w") as fh:
        fh.write(summary)
    return summary


def kernel_benchmark(n=64, batch=16, heads=4, feat=128, dv=16, reps=5, clock=None):
    """Compare compiled and pure-Python recurrence kernels on one shape."""
    from rfamt._kernels import available_impls

    if clock is None:
        clock = time.perf_counter
    rng = np.random.default_rng(0)
    phi_q = rng.standard_normal((n, batch, heads, feat))
    phi_k = rng.standard_normal((n, batch, heads, feat))
    v = rng.standard_normal((n, batch, heads, dv))
    f = np.ones((n, batch, heads))
    w = np.ones((n, batch, heads))
    snap = np.full((n, batch), -1, dtype=np.int32)
    g = rng.standard_normal((n, batch, heads, dv))
    rows = []
    for name, mod in available_impls().items():
        fwd_times, bwd_times = [], []
        for _ in range(reps + 1):
            t0 = clock()
            out = mod.scan_forward(phi_q, phi_k, v, f, w, snap, 1, 1e-6)
            t1 = clock()
            mod.scan_backward(phi_q, phi_k, v, f, w, snap, 1e-6,
                              out[0], out[1], out[2], out[3], out[4], out[5], g)
            t2 = clock()
            fwd_times.append(t1 - t0)
            bwd_times.append(t2 - t1)
        rows.append({
            "impl": name,
            "forward_ms": float(np.median(fwd_times[1:]) * 1e3),
            "backward_ms": float(np.median(bwd_times[1:]) * 1e3),
        })
    return rows
