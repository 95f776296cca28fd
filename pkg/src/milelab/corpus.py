"""Tokenization, synthetic Zipf corpora, chunking, frequency buckets, domain weights."""

from __future__ import annotations

import csv
import json
import math
from collections import Counter
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from .errors import InputError
from .rng import stream

UNK = "<unk>"
HIGH, MEDIUM, LOW = 0, 1, 2
BUCKET_NAMES = ("high", "medium", "low")
DEFAULT_COVERAGE = (0.80, 0.95)
TOKEN_MAGIC = b"MILT1"


# vocabulary / tokenization ---------------------------------------------------

class Vocab:
    """Dense id <-> surface mapping.  ``mode`` is ``"byte"`` or ``"word"``."""

    def __init__(self, surfaces, mode):
        self.id_to_str = list(surfaces)
        self.str_to_id = {s: i for i, s in enumerate(self.id_to_str)}
        if len(self.str_to_id) != len(self.id_to_str):
            raise InputError("vocabulary surfaces must be unique")
        self.mode = mode

    def __len__(self):
        return len(self.id_to_str)

    @property
    def size(self):
        return len(self.id_to_str)

    def surface(self, i):
        return self.id_to_str[i]

    @classmethod
    def bytes(cls):
        surfaces = [chr(b) if 0x21 <= b < 0x7F else f"<0x{b:02X}>" for b in range(256)]
        return cls(surfaces, "byte")

    @classmethod
    def words(cls, texts, max_size):
        """Word-level vocab: UNK at id 0, then the ``max_size - 1`` most frequent words."""
        if max_size < 2:
            raise InputError("word vocabulary needs room for UNK plus one word")
        counts = Counter(w for text in texts for w in text.split())
        ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))[: max_size - 1]
        return cls([UNK] + [w for w, _ in ranked], "word")

    @classmethod
    def synthetic(cls, size):
        return cls([f"t{i}" for i in range(size)], "synthetic")

    def to_dict(self):
        return {"mode": self.mode, "surfaces": None if self.mode == "byte" else self.id_to_str}

    @classmethod
    def from_dict(cls, d):
        if d["mode"] == "byte":
            return cls.bytes()
        return cls(d["surfaces"], d["mode"])


def tokenize(text, vocab):
    if vocab.mode == "byte":
        return list(text.encode("utf-8"))
    if vocab.mode != "word":
        raise InputError(f"cannot tokenize text with a {vocab.mode!r} vocabulary")
    unk = vocab.str_to_id[UNK]
    return [vocab.str_to_id.get(w, unk) for w in text.split()]


def read_jsonl(path):
    """Yield ``(text, domain)`` records from a JSON-lines corpus file."""
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                yield str(rec["text"]), str(rec.get("domain", "default"))
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise InputError(f"{path}:{lineno}: bad corpus record ({exc})") from None


# synthetic corpus ------------------------------------------------------------

def zipf_probs(vocab_size, exponent):
    ranks = np.arange(1, vocab_size + 1, dtype=np.float64)
    w = ranks ** (-float(exponent))
    return w / w.sum()


def _successor_table(vocab_size, n_successors, rng):
    # symmetric proposal: each permutation contributes i -> perm[i] and i -> perm^-1[i]
    cols = []
    for _ in range(max(1, n_successors // 2)):
        perm = rng.permutation(vocab_size)
        inv = np.empty_like(perm)
        inv[perm] = np.arange(vocab_size)
        cols += [perm, inv]
    return np.stack(cols, axis=1)


def generate_zipf_corpus(n_tokens, vocab_size, exponent, seed, markov_order=1,
                         markov_strength=0.5, n_successors=8):
    """Token stream whose unigram marginal is Zipf(rank^-s), token id = rank - 1.

    With ``markov_order=1`` each step, with probability ``markov_strength``,
    proposes a move from the previous token to one of its fixed successors and
    accepts it Metropolis-Hastings style.  That kernel leaves the Zipf marginal
    stationary, so the bigram structure is learnable without distorting the
    unigram distribution.  The chain starts from a Zipf draw, so it is
    stationary from the first token.
    """
    if exponent <= 0:
        raise InputError("Zipf exponent must be positive")
    if vocab_size < 2:
        raise InputError("vocab_size must be at least 2")
    if markov_order not in (0, 1):
        raise InputError("markov_order must be 0 or 1")
    n_tokens = int(n_tokens)
    rng = stream(seed, "corpus")
    probs = zipf_probs(vocab_size, exponent)
    cdf = np.cumsum(probs)
    cdf[-1] = 1.0
    iid = np.minimum(np.searchsorted(cdf, rng.random(n_tokens), side="right"), vocab_size - 1)
    if markov_order == 0 or n_tokens == 0:
        return iid.astype(np.int64)

    succ = _successor_table(vocab_size, n_successors, rng)
    k = succ.shape[1]
    use_chain = (rng.random(n_tokens) < markov_strength).tolist()
    pick = rng.integers(0, k, size=n_tokens).tolist()
    accept_u = rng.random(n_tokens).tolist()
    log_p = np.log(probs).tolist()
    succ_l = succ.tolist()
    iid_l = iid.tolist()

    out = [0] * n_tokens
    prev = iid_l[0]
    out[0] = prev
    for i in range(1, n_tokens):
        if use_chain[i]:
            cand = succ_l[prev][pick[i]]
            if cand != prev and math.log(accept_u[i] or 1e-300) < log_p[cand] - log_p[prev]:
                prev = cand
        else:
            prev = iid_l[i]
        out[i] = prev
    return np.asarray(out, dtype=np.int64)


# statistics / buckets --------------------------------------------------------

@dataclass
class CorpusStats:
    counts: np.ndarray
    total: int = field(init=False)

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.int64)
        if np.any(self.counts < 0):
            raise InputError("token counts must be non-negative")
        self.total = int(self.counts.sum())

    @classmethod
    def from_tokens(cls, tokens, vocab_size):
        tokens = np.asarray(tokens, dtype=np.int64)
        if tokens.size and (tokens.min() < 0 or tokens.max() >= vocab_size):
            raise InputError("token id outside the vocabulary")
        return cls(np.bincount(tokens, minlength=vocab_size))


@dataclass
class FrequencyBuckets:
    assignment: np.ndarray      # per token id: HIGH / MEDIUM / LOW
    order: np.ndarray           # token ids by descending count, ties by ascending id
    coverage_targets: tuple = DEFAULT_COVERAGE

    def label(self, token_id):
        return BUCKET_NAMES[self.assignment[token_id]]

    def members(self, bucket):
        if isinstance(bucket, str):
            bucket = BUCKET_NAMES.index(bucket)
        return [int(t) for t in self.order if self.assignment[t] == bucket]

    def to_dict(self):
        return {
            "assignment": self.assignment.tolist(),
            "order": self.order.tolist(),
            "coverage_targets": list(self.coverage_targets),
        }

    @classmethod
    def from_dict(cls, d):
        a = np.asarray(d["assignment"], dtype=np.int8)
        return cls(a, np.asarray(d["order"], dtype=np.int64), tuple(d["coverage_targets"]))


def _as_fraction(x):
    return Fraction(str(x)) if isinstance(x, float) else Fraction(x)


def build_frequency_buckets(stats, coverage_targets=DEFAULT_COVERAGE):
    """High/Medium/Low split of the vocabulary by cumulative coverage.

    A bucket ends at the first token whose inclusion reaches or crosses its
    coverage target.  Comparisons are done in exact integer arithmetic.
    """
    counts = np.asarray(stats.counts, dtype=np.int64)
    total = int(counts.sum())
    if counts.size == 0 or total <= 0:
        raise InputError("cannot bucket an empty corpus")
    lo, hi = (_as_fraction(c) for c in coverage_targets)
    if not 0 < lo <= hi <= 1:
        raise InputError("coverage targets must satisfy 0 < high <= high+medium <= 1")
    order = np.lexsort((np.arange(counts.size), -counts))
    assignment = np.full(counts.size, LOW, dtype=np.int8)
    cum = 0
    bucket = HIGH
    for tok in order.tolist():
        c = int(counts[tok])
        if c == 0 or bucket == LOW:
            break
        assignment[tok] = bucket
        cum += c
        if bucket == HIGH and cum * lo.denominator >= lo.numerator * total:
            bucket = MEDIUM
        if bucket == MEDIUM and cum * hi.denominator >= hi.numerator * total:
            bucket = LOW
    return FrequencyBuckets(assignment, order, (float(lo), float(hi)))


def write_bucket_report(path, stats, buckets, vocab=None):
    counts = np.asarray(stats.counts)
    total = stats.total
    cum = 0
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["token_id", "surface", "count", "frequency", "cum_frequency", "bucket"])
        for tok in buckets.order.tolist():
            c = int(counts[tok])
            cum += c
            surface = vocab.surface(tok) if vocab is not None else str(tok)
            w.writerow([tok, surface, c, repr(c / total), repr(cum / total), buckets.label(tok)])


# chunking --------------------------------------------------------------------

def chunk(tokens, seq_len):
    """Non-overlapping [n, seq_len] windows; the short tail is dropped."""
    if seq_len < 2:
        raise InputError("seq_len must be at least 2")
    tokens = np.asarray(tokens, dtype=np.int64)
    n = tokens.size // seq_len
    return tokens[: n * seq_len].reshape(n, seq_len)


def inputs_targets(sequences):
    """Shift [n, T] windows into model inputs [:, :T-1] and targets [:, 1:]."""
    seqs = np.asarray(sequences)
    return seqs[:, :-1], seqs[:, 1:]


def write_token_stream(path, tokens):
    tokens = np.asarray(tokens)
    if tokens.size and (tokens.min() < 0 or tokens.max() >= 2**32):
        raise InputError("token ids must fit in uint32")
    with open(path, "wb") as fh:
        fh.write(TOKEN_MAGIC)
        fh.write(tokens.astype("<u4").tobytes())


def read_token_stream(path):
    with open(path, "rb") as fh:
        if fh.read(len(TOKEN_MAGIC)) != TOKEN_MAGIC:
            raise InputError(f"{path}: not a MILT1 token stream")
        raw = fh.read()
    if len(raw) % 4:
        raise InputError(f"{path}: truncated token stream")
    return np.frombuffer(raw, dtype="<u4").astype(np.int64)


# domain sampling -------------------------------------------------------------

@dataclass(frozen=True)
class Domain:
    name: str
    sequence_count: int
    epochs: float


@dataclass(frozen=True)
class DomainManifest:
    domains: tuple

    def __post_init__(self):
        doms = tuple(self.domains)
        object.__setattr__(self, "domains", doms)
        if not doms:
            raise InputError("manifest has no domains")
        for d in doms:
            if d.sequence_count < 0 or not d.epochs > 0:
                raise InputError(f"domain {d.name!r}: need sequence_count >= 0 and epochs > 0")

    @classmethod
    def from_lists(cls, names, counts, epochs):
        return cls(tuple(Domain(n, int(c), float(e)) for n, c, e in zip(names, counts, epochs)))

    @classmethod
    def from_json(cls, path):
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
        rows = doc["domains"] if isinstance(doc, dict) else doc
        try:
            return cls(tuple(Domain(str(r["name"]), int(r["sequence_count"]), float(r["epochs"])) for r in rows))
        except (KeyError, TypeError) as exc:
            raise InputError(f"{path}: bad manifest ({exc})") from None


def compute_sampling_weights(manifest):
    """weight_d = count_d * epochs_d / sum_e count_e * epochs_e."""
    products = [d.sequence_count * d.epochs for d in manifest.domains]
    total = math.fsum(products)
    if total <= 0:
        raise InputError("all domain products are zero")
    return [p / total for p in products]


def sample_domain(weights, rng, size=None):
    """Draw domain indices with probabilities ``weights``; zero-weight domains never occur."""
    w = np.asarray(weights, dtype=np.float64)
    cdf = np.cumsum(w)
    cdf /= cdf[-1]
    u = rng.random(size)
    idx = np.searchsorted(cdf, u, side="right")
    return int(idx) if size is None else idx


def domain_sequences_from_jsonl(path, vocab, seq_len):
    """Chunk each domain of a JSON-lines corpus separately; returns {domain: [n, seq_len]}."""
    streams = {}
    for text, domain in read_jsonl(path):
        streams.setdefault(domain, []).extend(tokenize(text, vocab))
    return {d: chunk(toks, seq_len) for d, toks in streams.items()}
