"""Sliding-window document processing, BLEU, and synthetic corpora.

A document is an ordered list of sentences (token lists).  Translation
units are stride-one sliding windows of up to L consecutive sentences,
joined by a reserved separator token; after decoding, only the final
sentence of each translated window is kept, so concatenating the
extractions reconstructs the document.

Corpus files are plain text: one sentence per line, a blank line between
documents, with parallel source/target files sharing the document
structure.  Consistency items (contrastive candidate scoring) have their
own record format, documented at write_consistency_items.
"""

from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from rfamt.model import BOS_ID, EOS_ID, N_SPECIALS, PAD_ID, SEP_ID, make_batch

__all__ = [
    "Vocab",
    "Document",
    "DocumentWindow",
    "ConsistencyItem",
    "make_windows",
    "extract_last_sentence",
    "corpus_bleu",
    "bleu",
    "BleuResult",
    "consistency_evaluate",
    "CorpusSpec",
    "SyntheticCorpus",
    "generate_synthetic_corpus",
    "build_consistency_items",
    "read_documents",
    "write_documents",
    "read_consistency_items",
    "write_consistency_items",
]

SPECIAL_TOKENS = ("<pad>", "<bos>", "<eos>", "<sep>")

# Token inventory of the synthetic "agree" task.
FORMAL_MARK = "FORMAL"
INFORMAL_MARK = "INFORMAL"
PRONOUN = "PRN"
FORMAL_FORM = "PRN-F"
INFORMAL_FORM = "PRN-I"
NEUTRAL_MARK = "MRK"
AGREE_TOKENS = (FORMAL_MARK, INFORMAL_MARK, PRONOUN, FORMAL_FORM, INFORMAL_FORM, NEUTRAL_MARK)


class Vocab:
    """Token <-> id mapping; ids 0..3 are pad/bos/eos/sep."""

    def __init__(self, tokens):
        self.tokens = list(SPECIAL_TOKENS) + [t for t in tokens if t not in SPECIAL_TOKENS]
        self.index = {t: i for i, t in enumerate(self.tokens)}
        if len(self.index) != len(self.tokens):
            raise ValueError("duplicate tokens in vocabulary")

    def __len__(self):
        return len(self.tokens)

    def encode(self, toks):
        try:
            return [self.index[t] for t in toks]
        except KeyError as exc:
            raise ValueError(f"token {exc.args[0]!r} not in vocabulary") from None

    def decode(self, ids):
        return [self.tokens[i] for i in ids]

    def save(self, path):
        with open(path, "w") as fh:
            fh.write("\n".join(self.tokens) + "\n")

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            toks = [line.rstrip("\n") for line in fh if line.strip()]
        if toks[:N_SPECIALS] != list(SPECIAL_TOKENS):
            raise ValueError(f"vocabulary file must start with {SPECIAL_TOKENS}")
        return cls(toks[N_SPECIALS:])


@dataclass
class Document:
    """Ordered nonempty sentences; each sentence a nonempty token list."""

    sentences: list

    def __post_init__(self):
        if not self.sentences:
            raise ValueError("document must contain at least one sentence")
        if any(len(s) == 0 for s in self.sentences):
            raise ValueError("document sentences must be nonempty")

    def __len__(self):
        return len(self.sentences)


@dataclass
class DocumentWindow:
    """Up to L sentences joined by the separator, plus start metadata.

    ``is_sentence_start`` is True at position 0 and at each position
    immediately after a separator.  ``last_sentence_index`` is the
    document-level index of the window's final sentence, the only one
    kept for evaluation.
    """

    window_size: int
    tokens: list
    is_sentence_start: np.ndarray
    last_sentence_index: int
    n_sentences: int


def _join_sentences(sentences, sep):
    tokens = []
    starts = []
    for i, sent in enumerate(sentences):
        if i > 0:
            tokens.append(sep)
            starts.append(False)
        starts.append(True)
        starts.extend([False] * (len(sent) - 1))
        tokens.extend(sent)
    return tokens, np.asarray(starts, dtype=bool)


def make_windows(doc: Document, window_size: int, sep=SEP_ID):
    """One window per sentence index t, covering sentences max(0, t-L+1)..t.

    Early windows are truncated (never padded), so every sentence is the
    final sentence of exactly one window.
    """
    if window_size < 1:
        raise ValueError(f"window size must be >= 1, got {window_size}")
    windows = []
    for t in range(len(doc)):
        lo = max(0, t - window_size + 1)
        sents = doc.sentences[lo : t + 1]
        tokens, starts = _join_sentences(sents, sep)
        windows.append(
            DocumentWindow(
                window_size=window_size,
                tokens=tokens,
                is_sentence_start=starts,
                last_sentence_index=t,
                n_sentences=len(sents),
            )
        )
    return windows


def extract_last_sentence(tokens, sep=SEP_ID):
    """Tokens after the final separator (the whole output if none)."""
    tokens = list(tokens)
    for i in range(len(tokens) - 1, -1, -1):
        if tokens[i] == sep:
            return tokens[i + 1 :]
    return tokens


# --------------------------------------------------------------------------
# BLEU
# --------------------------------------------------------------------------


@dataclass
class BleuResult:
    score: float
    precisions: list
    brevity_penalty: float
    sys_len: int
    ref_len: int
    counts: list = field(default_factory=list)
    totals: list = field(default_factory=list)


def _ngrams(tokens, n):
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def corpus_bleu(hypotheses, references, max_n=4) -> BleuResult:
    """Corpus BLEU with modified n-gram precision and exponential smoothing.

    A zero match count at order n contributes precision 1 / (2^k * total_n)
    with k incrementing per smoothed order; the brevity penalty is
    exp(1 - ref_len/sys_len) when the system output is shorter.
    """
    hypotheses = list(hypotheses)
    references = list(references)
    if not hypotheses:
        raise ValueError("empty corpus")
    if len(hypotheses) != len(references):
        raise ValueError(
            f"got {len(hypotheses)} hypotheses and {len(references)} references"
        )
    counts = [0] * max_n
    totals = [0] * max_n
    sys_len = 0
    ref_len = 0
    for hyp, ref in zip(hypotheses, references):
        hyp = list(hyp)
        ref = list(ref)
        sys_len += len(hyp)
        ref_len += len(ref)
        for n in range(1, max_n + 1):
            hgrams = _ngrams(hyp, n)
            rgrams = _ngrams(ref, n)
            counts[n - 1] += sum(min(c, rgrams[g]) for g, c in hgrams.items())
            totals[n - 1] += max(len(hyp) - n + 1, 0)
    if sys_len == 0:
        return BleuResult(0.0, [0.0] * max_n, 0.0, 0, ref_len, counts, totals)
    precisions = []
    smooth = 1.0
    for n in range(max_n):
        if totals[n] == 0:
            precisions.append(0.0)
        elif counts[n] == 0:
            smooth *= 2.0
            precisions.append(1.0 / (smooth * totals[n]))
        else:
            precisions.append(counts[n] / totals[n])
    bp = 1.0 if sys_len >= ref_len else float(np.exp(1.0 - ref_len / sys_len))
    if min(precisions) <= 0.0:
        score = 0.0
    else:
        log_mean = sum(np.log(p) for p in precisions) / max_n
        score = 100.0 * bp * float(np.exp(log_mean))
    return BleuResult(score, precisions, bp, sys_len, ref_len, counts, totals)


def bleu(hypotheses, references, max_n=4) -> float:
    """Corpus BLEU score in [0, 100]."""
    return corpus_bleu(hypotheses, references, max_n).score


# --------------------------------------------------------------------------
# Contrastive consistency evaluation
# --------------------------------------------------------------------------


@dataclass
class ConsistencyItem:
    """A source window plus >= 2 candidate target windows, one correct."""

    source_sentences: list  # list of token-string sentences
    candidates: list        # list of candidate windows (list of sentences)
    correct: int

    def __post_init__(self):
        if len(self.candidates) < 2:
            raise ValueError("consistency item needs at least 2 candidates")
        if not 0 <= self.correct < len(self.candidates):
            raise ValueError(f"correct index {self.correct} out of range")


def consistency_evaluate(model, items, vocab: Vocab, batch_size=64):
    """Fraction of items whose highest-log-probability candidate is correct.

    Candidates are scored as the model log-probability of the candidate
    target window given the source window; ties go to the lowest index.
    """
    predictions = []
    flat = []
    for item in items:
        src_tokens, _ = _join_sentences(
            [vocab.encode(s) for s in item.source_sentences], SEP_ID
        )
        for cand in item.candidates:
            cand_tokens, _ = _join_sentences([vocab.encode(s) for s in cand], SEP_ID)
            flat.append((src_tokens, cand_tokens))
    scores = np.empty(len(flat))
    for start in range(0, len(flat), batch_size):
        chunk = flat[start : start + batch_size]
        scores[start : start + len(chunk)] = model.sequence_logprob(make_batch(chunk))
    pos = 0
    correct = 0
    for item in items:
        k = len(item.candidates)
        cand_scores = scores[pos : pos + k]
        pos += k
        pred = int(np.argmax(cand_scores))  # argmax takes the lowest index on ties
        predictions.append(pred)
        if pred == item.correct:
            correct += 1
    return correct / len(items), predictions


def random_baseline(items) -> float:
    """Expected accuracy of picking uniformly from each candidate set."""
    return float(np.mean([1.0 / len(it.candidates) for it in items]))


# --------------------------------------------------------------------------
# Synthetic corpora
# --------------------------------------------------------------------------


@dataclass
class CorpusSpec:
    task: str = "copy"  # "copy" | "agree"
    n_train_docs: int = 200
    n_dev_docs: int = 20
    n_test_docs: int = 50
    sentences_per_doc: tuple = (2, 4)
    tokens_per_sentence: tuple = (3, 8)
    n_filler_tokens: int = 40
    seed: int = 0

    def __post_init__(self):
        if self.task not in ("copy", "agree"):
            raise ValueError(f"unknown task {self.task!r}")
        for name in ("n_train_docs", "n_dev_docs", "n_test_docs", "n_filler_tokens"):
            if getattr(self, name) < 0 or (name == "n_train_docs" and getattr(self, name) == 0):
                raise ValueError(f"{name} must be positive")
        if self.n_filler_tokens < 2:
            raise ValueError("need at least 2 filler tokens")
        if self.task == "agree" and self.sentences_per_doc[0] < 2:
            raise ValueError("agree documents need at least 2 sentences")


@dataclass
class SyntheticCorpus:
    spec: CorpusSpec
    vocab: Vocab
    train: list  # list of (src Document, tgt Document)
    dev: list
    test: list


def _fillers(n):
    return [f"w{i:03d}" for i in range(n)]


def _copy_doc(spec, rng):
    words = _fillers(spec.n_filler_tokens)
    n_sent = int(rng.integers(spec.sentences_per_doc[0], spec.sentences_per_doc[1] + 1))
    sents = []
    for _ in range(n_sent):
        ln = int(rng.integers(spec.tokens_per_sentence[0], spec.tokens_per_sentence[1] + 1))
        sents.append([words[i] for i in rng.integers(0, len(words), ln)])
    doc = Document(sents)
    return doc, Document([list(s) for s in sents])


def _agree_doc(spec, rng):
    """First sentence carries an (independent) formality marker; later
    sentences each contain one pronoun whose target form follows it."""
    words = _fillers(spec.n_filler_tokens)
    n_sent = int(rng.integers(spec.sentences_per_doc[0], spec.sentences_per_doc[1] + 1))
    formal = bool(rng.integers(0, 2))
    mark = FORMAL_MARK if formal else INFORMAL_MARK
    form = FORMAL_FORM if formal else INFORMAL_FORM
    lo, hi = spec.tokens_per_sentence
    ln = int(rng.integers(max(lo, 2), hi + 1))
    filler = [words[i] for i in rng.integers(0, len(words), ln - 1)]
    src_sents = [[mark] + filler]
    tgt_sents = [[NEUTRAL_MARK] + list(filler)]
    for _ in range(n_sent - 1):
        ln = int(rng.integers(max(lo, 2), hi + 1))
        sent = [words[i] for i in rng.integers(0, len(words), ln)]
        pron_pos = int(rng.integers(0, ln))
        src = list(sent)
        src[pron_pos] = PRONOUN
        tgt = list(sent)
        tgt[pron_pos] = form
        src_sents.append(src)
        tgt_sents.append(tgt)
    return Document(src_sents), Document(tgt_sents)


def generate_synthetic_corpus(spec: CorpusSpec) -> SyntheticCorpus:
    """Deterministic parallel documents for the copy or agree task.

    copy: target sentence equals the source sentence (context-free).
    agree: the marker in sentence 1 decides every later pronoun's target
    form; the marker is drawn independently of all other content, so a
    window that misses sentence 1 provably carries no information about
    the correct form.
    """
    rng = np.random.Generator(np.random.PCG64(spec.seed))
    words = _fillers(spec.n_filler_tokens)
    vocab = Vocab(words + (list(AGREE_TOKENS) if spec.task == "agree" else []))
    gen = _copy_doc if spec.task == "copy" else _agree_doc
    splits = []
    for n_docs in (spec.n_train_docs, spec.n_dev_docs, spec.n_test_docs):
        splits.append([gen(spec, rng) for _ in range(n_docs)])
    return SyntheticCorpus(spec, vocab, *splits)


def flip_agree_forms(sentences):
    """Swap every pronoun form, producing the marker-flipped counterfactual."""
    swap = {FORMAL_FORM: INFORMAL_FORM, INFORMAL_FORM: FORMAL_FORM}
    return [[swap.get(tok, tok) for tok in sent] for sent in sentences]


def build_consistency_items(parallel_docs, window_size, seed=0):
    """Contrastive items from agree documents at a given window size.

    For each document sentence containing a pronoun, the source window
    ending there is paired with the gold target window and its
    form-flipped counterfactual; candidate order is shuffled per item.
    """
    rng = np.random.Generator(np.random.PCG64(seed))
    items = []
    for src_doc, tgt_doc in parallel_docs:
        for t in range(1, len(src_doc)):
            if PRONOUN not in src_doc.sentences[t]:
                continue
            lo = max(0, t - window_size + 1)
            src_win = [list(s) for s in src_doc.sentences[lo : t + 1]]
            gold = [list(s) for s in tgt_doc.sentences[lo : t + 1]]
            flipped = flip_agree_forms(gold)
            if bool(rng.integers(0, 2)):
                cands, correct = [gold, flipped], 0
            else:
                cands, correct = [flipped, gold], 1
            items.append(ConsistencyItem(src_win, cands, correct))
    return items


# --------------------------------------------------------------------------
# File formats
# --------------------------------------------------------------------------


def write_documents(path, docs):
    """One sentence per line, blank line between documents.

    Accepts Document objects or plain sentence lists (as produced by the
    translator, where an extracted sentence may be empty).
    """
    blocks = []
    for doc in docs:
        sents = doc.sentences if isinstance(doc, Document) else doc
        blocks.append("\n".join(" ".join(sent) for sent in sents))
    with open(path, "w") as fh:
        fh.write("\n\n".join(blocks) + "\n")


def read_documents(path):
    docs = []
    current = []
    with open(path) as fh:
        for line in fh:
            line = line.rstrip("\n")
            if not line.strip():
                if current:
                    docs.append(Document(current))
                    current = []
            else:
                current.append(line.split())
    if current:
        docs.append(Document(current))
    return docs


def write_consistency_items(path, items):
    """Record format, one block per item, blank-line separated:

        source:
        <one sentence per line>
        candidate:
        <sentences of candidate 0>
        candidate:
        <sentences of candidate 1>
        correct: <index>
    """
    with open(path, "w") as fh:
        for i, item in enumerate(items):
            if i > 0:
                fh.write("\n")
            fh.write("source:\n")
            for sent in item.source_sentences:
                fh.write(" ".join(sent) + "\n")
            for cand in item.candidates:
                fh.write("candidate:\n")
                for sent in cand:
                    fh.write(" ".join(sent) + "\n")
            fh.write(f"correct: {item.correct}\n")


def read_consistency_items(path):
    items = []
    src, cands, correct = [], [], None
    target = None
    with open(path) as fh:
        for raw in fh:
            line = raw.rstrip("\n")
            if not line.strip():
                continue
            if line == "source:":
                if src or cands:
                    items.append(ConsistencyItem(src, cands, correct))
                src, cands, correct = [], [], None
                target = src
            elif line == "candidate:":
                cands.append([])
                target = cands[-1]
            elif line.startswith("correct:"):
                correct = int(line.split(":", 1)[1])
            else:
                target.append(line.split())
    if src or cands:
        items.append(ConsistencyItem(src, cands, correct))
    return items
