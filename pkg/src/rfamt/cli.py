"""Command-line entry point.

Subcommands: gen-data, train, translate, eval-consistency, bench.
Option values resolve as flags > config file > built-in defaults; the
config file is flat ``section.key = value`` text (sections mirror the
subcommand names, e.g. ``train.steps = 500``).  The default output
directory comes from $RFAMT_OUT (falling back to ./rfamt_out).

Exit codes: 0 success, 1 usage error, 2 runtime error, 3 scaling-law
assertion failure (bench --assert).
"""

import argparse
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from rfamt import benchmark as B
from rfamt import documents as D
from rfamt.checkpoint import load_checkpoint, save_checkpoint
from rfamt.decoding import translate_documents
from rfamt.model import ModelConfig, TransformerModel, init_parameters, make_batch
from rfamt.seeding import derive_seed
from rfamt.training import TrainConfig, train

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME, EXIT_ASSERT = 0, 1, 2, 3

VARIANTS = {
    "exact": ("exact", "exact", "none"),
    "rfa": ("rfa", "rfa", "none"),
    "rfa-sgate": ("rfa", "rfa", "sgate"),
    "rfa-sgate-avg": ("rfa", "rfa", "sgate_avg"),
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def out_dir():
    return Path(os.environ.get("RFAMT_OUT", "rfamt_out"))


def read_config_file(path):
    """Flat ``section.key = value`` lines; '#' starts a comment."""
    values = {}
    with open(path) as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise UsageError(f"{path}:{lineno}: expected key = value")
            key, val = line.split("=", 1)
            values[key.strip()] = val.strip()
    return values


def _resolve(args, section, spec):
    """Merge parsed flags with config-file values and defaults."""
    file_vals = {}
    if args.config:
        file_vals = read_config_file(args.config)
    out = {}
    for dest, typ, default in spec:
        flag_val = getattr(args, dest, None)
        if flag_val is not None:
            out[dest] = flag_val
            continue
        key = f"{section}.{dest}"
        if key in file_vals:
            raw = file_vals[key]
            if typ is bool:
                out[dest] = raw.lower() in ("1", "true", "yes")
            else:
                out[dest] = typ(raw)
        else:
            out[dest] = default
    return argparse.Namespace(**out)


def _int_pair(text):
    parts = text.split(":")
    if len(parts) == 1:
        v = int(parts[0])
        return (v, v)
    return (int(parts[0]), int(parts[1]))


def _int_list(text):
    return tuple(int(x) for x in text.split(","))


def _str_list(text):
    return tuple(x.strip() for x in text.split(",") if x.strip())


# --------------------------------------------------------------------------
# gen-data
# --------------------------------------------------------------------------

GEN_SPEC = [
    ("task", str, "copy"),
    ("docs", int, 200),
    ("dev_docs", int, 20),
    ("test_docs", int, 50),
    ("sentences", _int_pair, None),
    ("tokens", _int_pair, (3, 8)),
    ("fillers", int, 40),
    ("consistency_l", _int_list, (1, 2, 3, 4)),
    ("seed", int, 0),
    ("out", str, None),
    ("force", bool, False),
]


def cmd_gen_data(opts):
    if opts.docs < 1:
        raise UsageError("--docs must be >= 1")
    sentences = opts.sentences or ((2, 2) if opts.task == "agree" else (2, 4))
    spec = D.CorpusSpec(
        task=opts.task, n_train_docs=opts.docs, n_dev_docs=opts.dev_docs,
        n_test_docs=opts.test_docs, sentences_per_doc=sentences,
        tokens_per_sentence=opts.tokens, n_filler_tokens=opts.fillers,
        seed=opts.seed,
    )
    dest = Path(opts.out) if opts.out else out_dir() / "data"
    dest.mkdir(parents=True, exist_ok=True)
    existing = [p for p in (dest / "vocab.txt",) if p.exists()]
    if existing and not opts.force:
        raise RuntimeError(f"{existing[0]} exists; pass --force to overwrite")
    corpus = D.generate_synthetic_corpus(spec)
    corpus.vocab.save(dest / "vocab.txt")
    for split, docs in (("train", corpus.train), ("dev", corpus.dev), ("test", corpus.test)):
        D.write_documents(dest / f"{split}.src.txt", [s for s, _ in docs])
        D.write_documents(dest / f"{split}.tgt.txt", [t for _, t in docs])
        print(f"{split}: {len(docs)} documents")
    if opts.task == "agree":
        for lsize in opts.consistency_l:
            items = D.build_consistency_items(
                corpus.test, lsize, seed=derive_seed(opts.seed, f"items.L{lsize}")
            )
            D.write_consistency_items(dest / f"items_L{lsize}.txt", items)
            print(f"consistency items (L={lsize}): {len(items)}")
    print(f"wrote corpus to {dest}")
    return EXIT_OK


# --------------------------------------------------------------------------
# train
# --------------------------------------------------------------------------

TRAIN_SPEC = [
    ("data", str, None),
    ("l", int, 1),
    ("variant", str, "exact"),
    ("steps", int, 2000),
    ("batch_size", int, 32),
    ("lr", float, 3e-3),
    ("warmup", int, 400),
    ("eval_every", int, 200),
    ("patience", int, 10),
    ("clip", float, 1.0),
    ("d_model", int, 64),
    ("n_heads", int, 4),
    ("d_ff", int, 128),
    ("enc_layers", int, 2),
    ("dec_layers", int, 2),
    ("d_cross", int, 128),
    ("d_causal", int, 64),
    ("sigma_k", float, 1.0),
    ("b_f_init", float, 2.0),
    ("label_smoothing", float, 0.0),
    ("seed", int, 0),
    ("out", str, None),
    ("loss_csv", str, None),
]


def load_split(data_dir, split):
    data_dir = Path(data_dir)
    src = D.read_documents(data_dir / f"{split}.src.txt")
    tgt = D.read_documents(data_dir / f"{split}.tgt.txt")
    if len(src) != len(tgt):
        raise RuntimeError(f"{split}: {len(src)} source docs vs {len(tgt)} target docs")
    return list(zip(src, tgt))


def window_pairs(parallel_docs, vocab, window_size):
    """Aligned (source window, target window) id pairs, one per sentence."""
    pairs = []
    for src_doc, tgt_doc in parallel_docs:
        src_ids = D.Document([vocab.encode(s) for s in src_doc.sentences])
        tgt_ids = D.Document([vocab.encode(s) for s in tgt_doc.sentences])
        for sw, tw in zip(D.make_windows(src_ids, window_size),
                          D.make_windows(tgt_ids, window_size)):
            pairs.append((sw.tokens, tw.tokens))
    return pairs


def cmd_train(opts):
    if opts.variant not in VARIANTS:
        raise UsageError(f"--variant must be one of {sorted(VARIANTS)}")
    if not opts.data:
        raise UsageError("--data is required")
    data_dir = Path(opts.data)
    vocab = D.Vocab.load(data_dir / "vocab.txt")
    train_pairs = window_pairs(load_split(data_dir, "train"), vocab, opts.l)
    dev_pairs = window_pairs(load_split(data_dir, "dev"), vocab, opts.l)
    cross, causal, gate = VARIANTS[opts.variant]
    config = ModelConfig(
        vocab_size=len(vocab), d_model=opts.d_model, n_heads=opts.n_heads,
        d_ff=opts.d_ff, n_enc_layers=opts.enc_layers, n_dec_layers=opts.dec_layers,
        cross_backend=cross, causal_backend=causal, gate_variant=gate,
        D_cross=opts.d_cross, D_causal=opts.d_causal, sigma_k=opts.sigma_k,
        b_f_init=opts.b_f_init, label_smoothing=opts.label_smoothing,
        master_seed=opts.seed,
    )
    tcfg = TrainConfig(
        steps=opts.steps, batch_size=opts.batch_size, lr_peak=opts.lr,
        warmup=opts.warmup, eval_every=opts.eval_every, patience=opts.patience,
        clip_norm=opts.clip, seed=opts.seed, log_every=max(opts.steps // 10, 1),
    )
    params = init_parameters(config)
    if opts.steps > 0:
        params, curve = train(params, config, train_pairs, dev_pairs, tcfg)
    else:
        curve = []
    ckpt = Path(opts.out) if opts.out else out_dir() / f"{opts.variant}_L{opts.l}.npz"
    ckpt.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(ckpt, config, params,
                    extra={"train_window": opts.l, "variant": opts.variant})
    loss_csv = Path(opts.loss_csv) if opts.loss_csv else Path(str(ckpt) + ".loss.csv")
    with open(loss_csv, "w") as fh:
        fh.write("step,lr,train_loss,dev_loss\n")
        for rec in curve:
            dev = rec.get("dev_loss", "")
            fh.write(f"{rec['step']},{rec['lr']:.6g},{rec['train_loss']:.6f},{dev}\n")
    if curve:
        last_dev = [r["dev_loss"] for r in curve if "dev_loss" in r]
        if last_dev:
            print(f"best dev loss: {min(last_dev):.4f}")
    print(f"checkpoint: {ckpt}")
    return EXIT_OK


# --------------------------------------------------------------------------
# translate
# --------------------------------------------------------------------------

TRANSLATE_SPEC = [
    ("ckpt", str, None),
    ("data", str, None),
    ("split", str, "test"),
    ("l", int, None),
    ("beam", int, 4),
    ("greedy", bool, False),
    ("max_len", int, 0),
    ("out", str, None),
]


def cmd_translate(opts):
    if not opts.ckpt:
        raise UsageError("--ckpt is required")
    if not opts.data:
        raise UsageError("--data is required")
    config, params, extra = load_checkpoint(opts.ckpt)
    model = TransformerModel(config, params)
    data_dir = Path(opts.data)
    vocab = D.Vocab.load(data_dir / "vocab.txt")
    docs = load_split(data_dir, opts.split)
    window_size = opts.l if opts.l is not None else extra.get("train_window", 1)
    beam = 1 if opts.greedy else opts.beam
    max_len = opts.max_len or None
    src_docs = [D.Document([vocab.encode(s) for s in sd.sentences]) for sd, _ in docs]
    hyp_docs, n_empty = translate_documents(model, src_docs, window_size,
                                            beam=beam, max_len=max_len)
    if n_empty:
        print(f"warning: {n_empty} empty extracted sentences")
    hyp_tokens = [[vocab.decode(sent) for sent in doc] for doc in hyp_docs]
    dest = Path(opts.out) if opts.out else out_dir() / f"translation_{opts.split}.txt"
    dest.parent.mkdir(parents=True, exist_ok=True)
    D.write_documents(dest, hyp_tokens)
    hyps = [sent for doc in hyp_tokens for sent in doc]
    refs = [sent for _, td in docs for sent in td.sentences]
    score = D.bleu(hyps, refs)
    print(f"BLEU = {score:.2f} over {len(hyps)} sentences")
    print(f"translations: {dest}")
    return EXIT_OK


# --------------------------------------------------------------------------
# eval-consistency
# --------------------------------------------------------------------------

EVAL_SPEC = [
    ("ckpt", str, None),
    ("items", str, None),
    ("batch_size", int, 64),
    ("data", str, None),
]


def cmd_eval_consistency(opts):
    if not opts.ckpt or not opts.items:
        raise UsageError("--ckpt and --items are required")
    config, params, _ = load_checkpoint(opts.ckpt)
    model = TransformerModel(config, params)
    data_dir = Path(opts.data) if opts.data else Path(opts.items).parent
    vocab = D.Vocab.load(data_dir / "vocab.txt")
    items = D.read_consistency_items(opts.items)
    acc, _ = D.consistency_evaluate(model, items, vocab, batch_size=opts.batch_size)
    baseline = D.random_baseline(items)
    print(f"items: {len(items)}")
    print(f"accuracy: {acc:.4f}")
    print(f"random baseline: {baseline:.4f}")
    return EXIT_OK


# --------------------------------------------------------------------------
# bench
# --------------------------------------------------------------------------

BENCH_SPEC = [
    ("ckpt", str, None),
    ("l", _int_list, (1, 2, 3, 4, 5, 10, 15)),
    ("backends", _str_list, ("exact", "rfa")),
    ("reps", int, 3),
    ("batch_divisor", int, 16),
    ("tokens_per_sentence", int, 20),
    ("probe", bool, True),
    ("probe_batch", int, 64),
    ("out", str, None),
    ("seed", int, 0),
    ("kernels", bool, False),
    ("assert_laws", bool, False),
    ("inflate", str, ""),
]


def cmd_bench(opts):
    if opts.kernels:
        rows = B.kernel_benchmark()
        for row in rows:
            print(f"{row['impl']:9s} forward {row['forward_ms']:8.2f} ms   "
                  f"backward {row['backward_ms']:8.2f} ms")
        if not opts.ckpt:
            return EXIT_OK
    if not opts.ckpt:
        raise UsageError("--ckpt is required")
    config, params, _ = load_checkpoint(opts.ckpt)
    model = TransformerModel(config, params)
    delay = {}
    if opts.inflate:
        name, _, secs = opts.inflate.partition(":")
        delay[name] = float(secs)
    bcfg = B.BenchConfig(
        window_sizes=opts.l, backends=opts.backends, repetitions=opts.reps,
        batch_divisor=opts.batch_divisor, tokens_per_sentence=opts.tokens_per_sentence,
        run_probe=opts.probe, probe_batch=opts.probe_batch, seed=opts.seed,
        synthetic_delay=delay,
    )
    result = B.run_benchmark(model, bcfg)
    dest = Path(opts.out) if opts.out else out_dir() / "bench.csv"
    dest.parent.mkdir(parents=True, exist_ok=True)
    summary = B.emit_report(result, dest)
    print(summary, end="")
    print(f"csv: {dest}")
    if opts.assert_laws:
        failures = B.assert_laws(result)
        for failure in failures:
            print(f"ASSERTION FAILED: {failure}")
        if failures:
            return EXIT_ASSERT
        print("all scaling-law assertions passed")
    return EXIT_OK


# --------------------------------------------------------------------------
# parser
# --------------------------------------------------------------------------


def build_parser():
    parser = _Parser(prog="rfamt", description=__doc__,
                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, spec, fn, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="flat key=value config file")
        for dest, typ, default in spec:
            flag = "--" + dest.replace("_", "-")
            if dest == "l":
                flag = "--L"
            if dest == "assert_laws":
                flag = "--assert"
            if typ is bool:
                p.add_argument(flag, dest=dest, action="store_const", const=True,
                               default=None, help=f"(default: {default})")
                if default is True:
                    p.add_argument("--no-" + dest.replace("_", "-"), dest=dest,
                                   action="store_const", const=False, default=None)
            else:
                p.add_argument(flag, dest=dest, type=typ, default=None,
                               help=f"(default: {default})")
        p.set_defaults(_fn=fn, _spec=spec, _section=name.replace("-", "_"))
        return p

    add("gen-data", GEN_SPEC, cmd_gen_data, "generate a synthetic parallel corpus")
    add("train", TRAIN_SPEC, cmd_train, "train a model on windowed documents")
    add("translate", TRANSLATE_SPEC, cmd_translate, "translate and score a corpus split")
    add("eval-consistency", EVAL_SPEC, cmd_eval_consistency,
        "contrastive consistency accuracy")
    add("bench", BENCH_SPEC, cmd_bench, "decoding speed benchmark")
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        opts = _resolve(args, args._section, args._spec)
        return args._fn(opts)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (KeyboardInterrupt, BrokenPipeError):
        return EXIT_RUNTIME
    except Exception as exc:  # runtime failures map to exit 2
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
