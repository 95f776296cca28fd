"""Experiment configuration and the corpus -> train -> report pipeline."""

from __future__ import annotations

import copy
import json
import os
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from . import checkpoint
from .analysis import bucketed_ppl
from .corpus import (
    CorpusStats,
    Vocab,
    build_frequency_buckets,
    chunk,
    generate_zipf_corpus,
    read_jsonl,
    read_token_stream,
    tokenize,
    write_bucket_report,
)
from .errors import ConfigError, InputError
from .losses import LossSpec
from .model import Model, ModelConfig, PRESETS
from .trainer import TrainConfig, evaluate_ppl, split_sequences, train


@dataclass(frozen=True)
class CorpusConfig:
    kind: str = "zipf"                 # zipf | jsonl | tokens
    n_tokens: int = 2_000_000
    exponent: float = 1.1
    markov_order: int = 1
    markov_strength: float = 0.5
    n_successors: int = 8
    seed: int | None = None
    path: str | None = None
    tokenizer: str = "byte"            # byte | word (jsonl only)

    def __post_init__(self):
        if self.kind not in ("zipf", "jsonl", "tokens"):
            raise ConfigError(f"corpus.kind must be zipf, jsonl or tokens, got {self.kind!r}")
        if self.kind != "zipf" and not self.path:
            raise ConfigError(f"corpus.kind={self.kind} needs corpus.path")
        if self.tokenizer not in ("byte", "word"):
            raise ConfigError("corpus.tokenizer must be 'byte' or 'word'")


SECTIONS = ("model", "train", "loss", "corpus")


@dataclass(frozen=True)
class ExperimentConfig:
    model: ModelConfig = field(default_factory=lambda: ModelConfig(**PRESETS["tiny"]))
    train: TrainConfig = field(default_factory=TrainConfig)
    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    seed: int = 0

    @property
    def loss(self):
        return self.train.loss

    def with_loss(self, **kw):
        loss = replace(self.loss, **kw)
        return replace(self, train=replace(self.train, loss=loss))

    def with_seed(self, seed):
        """Same experiment under another root seed (init and data order; corpus seed kept)."""
        return replace(self, seed=seed, model=replace(self.model, seed=seed), train=replace(self.train, seed=seed))

    def to_dict(self):
        return {
            "seed": self.seed,
            "model": self.model.to_dict(),
            "train": self.train.to_dict(),
            "loss": asdict(self.loss),
            "corpus": asdict(self.corpus),
        }

    @classmethod
    def from_dict(cls, doc):
        doc = copy.deepcopy(doc)
        unknown = set(doc) - set(SECTIONS) - {"seed", "preset"}
        if unknown:
            raise ConfigError(f"unknown config sections: {sorted(unknown)}")
        seed = int(doc.get("seed", 0))
        model_d = dict(PRESETS[doc["preset"]]) if "preset" in doc else {}
        model_d.update(doc.get("model", {}))
        model_d.setdefault("seed", seed)
        train_d = dict(doc.get("train", {}))
        train_d.setdefault("seed", seed)
        corpus_d = dict(doc.get("corpus", {}))
        if corpus_d.get("seed") is None:
            corpus_d["seed"] = seed
        try:
            loss = LossSpec(**doc.get("loss", {}))
            return cls(
                model=ModelConfig.from_dict(model_d),
                train=TrainConfig.from_dict(train_d, loss=loss),
                corpus=_corpus_from_dict(corpus_d),
                seed=seed,
            )
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    @classmethod
    def load(cls, path, overrides=()):
        try:
            with open(path, encoding="utf-8") as fh:
                doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from None
        for item in overrides:
            apply_override(doc, item)
        return cls.from_dict(doc)

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")


def _corpus_from_dict(d):
    known = {f.name for f in fields(CorpusConfig)}
    unknown = set(d) - known
    if unknown:
        raise ConfigError(f"unknown corpus config keys: {sorted(unknown)}")
    return CorpusConfig(**d)


def parse_value(text):
    """Interpret an override value as JSON when possible, else as a string."""
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_override(doc, item):
    """Apply one ``dotted.path=value`` override to a config document in place."""
    if "=" not in item:
        raise ConfigError(f"override {item!r} is not of the form dotted.path=value")
    path, raw = item.split("=", 1)
    keys = path.strip().split(".")
    if not all(keys):
        raise ConfigError(f"bad override path {path!r}")
    node = doc
    for k in keys[:-1]:
        node = node.setdefault(k, {})
        if not isinstance(node, dict):
            raise ConfigError(f"override {path!r} descends into a non-object")
    node[keys[-1]] = parse_value(raw)


# pipeline ----------------------------------------------------------------------

def load_tokens(config):
    """Token stream for ``config.corpus`` plus the vocabulary it was encoded with."""
    c, n = config.corpus, config.model.vocab_size
    if c.kind == "zipf":
        toks = generate_zipf_corpus(c.n_tokens, n, c.exponent, c.seed, c.markov_order,
                                    c.markov_strength, c.n_successors)
        return toks, Vocab.synthetic(n)
    if c.kind == "tokens":
        toks = read_token_stream(c.path)
        if toks.size and toks.max() >= n:
            raise InputError(f"{c.path}: token id {toks.max()} exceeds vocab_size {n}")
        return toks, Vocab.synthetic(n)
    records = list(read_jsonl(c.path))
    vocab = Vocab.bytes() if c.tokenizer == "byte" else Vocab.words([t for t, _ in records], n)
    if vocab.size > n:
        raise InputError(f"tokenizer vocabulary ({vocab.size}) exceeds model vocab_size {n}")
    toks = [i for text, _ in records for i in tokenize(text, vocab)]
    return np.asarray(toks, dtype=np.int64), vocab


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    model: Model
    metrics: object
    state: object
    train_seqs: np.ndarray
    eval_seqs: np.ndarray
    stats: CorpusStats
    buckets: object
    vocab: Vocab
    val_ppl: float
    bucket_report: object


def tag(config):
    loss = config.loss
    g = "" if loss.kind == "ce" else f"_g{loss.gamma:g}"
    return f"{loss.kind}{g}_s{config.seed}"


def prepare_data(config):
    tokens, vocab = load_tokens(config)
    seqs = chunk(tokens, config.model.seq_len)
    train_seqs, eval_seqs = split_sequences(seqs, config.train.eval_fraction)
    stats = CorpusStats.from_tokens(train_seqs.ravel(), config.model.vocab_size)
    return train_seqs, eval_seqs, stats, build_frequency_buckets(stats), vocab


def run_experiment(config, run_dir=None, data=None, on_step=None):
    """Generate/load the corpus, train, evaluate, and (optionally) write all outputs."""
    train_seqs, eval_seqs, stats, buckets, vocab = data or prepare_data(config)
    model = Model(config.model)
    metrics, state = train(model, train_seqs, config.train, eval_seqs=eval_seqs, on_step=on_step)
    val_ppl = evaluate_ppl(model, eval_seqs)
    report = bucketed_ppl(model, eval_seqs, buckets)
    res = ExperimentResult(config, model, metrics, state, train_seqs, eval_seqs, stats, buckets,
                           vocab, val_ppl, report)
    if run_dir is not None:
        write_outputs(res, run_dir)
    return res


def write_outputs(res, run_dir):
    os.makedirs(run_dir, exist_ok=True)
    t = tag(res.config)
    res.config.save(os.path.join(run_dir, "config.json"))
    res.metrics.write_csv(os.path.join(run_dir, "metrics.csv"))
    checkpoint.save_model(os.path.join(run_dir, "checkpoint.milo"), res.model, res.state)
    write_bucket_report(os.path.join(run_dir, "buckets.csv"), res.stats, res.buckets, res.vocab)
    res.bucket_report.write_csv(os.path.join(run_dir, f"bucket_ppl_{t}.csv"))
    with open(os.path.join(run_dir, f"bucket_ppl_{t}.txt"), "w", encoding="utf-8") as fh:
        fh.write(res.bucket_report.to_text())
