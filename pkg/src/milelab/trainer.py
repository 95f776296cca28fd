"""AdamW + warmup/cosine training loop, evaluation and metric logging."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import checkpoint
from . import numcore as nc
from .corpus import inputs_targets
from .errors import ConfigError, InputError, NumericError
from .losses import LossSpec, batch_loss, token_terms
from .rng import stream

log = logging.getLogger(__name__)

METRIC_COLUMNS = ("step", "lr", "loss", "ce", "grad_norm", "val_ppl")


@dataclass(frozen=True)
class TrainConfig:
    peak_lr: float = 3.0e-4
    warmup_steps: int = 100
    total_steps: int = 3000
    min_lr_ratio: float = 0.1
    batch_size: int = 32
    weight_decay: float = 0.1
    adam_beta1: float = 0.9
    adam_beta2: float = 0.95
    adam_eps: float = 1e-8
    grad_clip: float = 1.0
    eval_interval: int = 250
    eval_fraction: float = 0.02
    seed: int = 0
    loss: LossSpec = field(default_factory=LossSpec)

    def __post_init__(self):
        if isinstance(self.loss, dict):
            object.__setattr__(self, "loss", LossSpec(**self.loss))
        if self.total_steps < 0 or self.warmup_steps < 0:
            raise ConfigError("train.total_steps and train.warmup_steps must be non-negative")
        if self.total_steps > 0 and self.warmup_steps >= self.total_steps:
            raise ConfigError("train.warmup_steps must be smaller than train.total_steps")
        if not self.peak_lr > 0:
            raise ConfigError("train.peak_lr must be positive")
        if not 0.0 <= self.min_lr_ratio <= 1.0:
            raise ConfigError("train.min_lr_ratio must lie in [0, 1]")
        if self.batch_size < 1 or self.eval_interval < 1:
            raise ConfigError("train.batch_size and train.eval_interval must be positive")
        if not 0.0 < self.eval_fraction < 1.0:
            raise ConfigError("train.eval_fraction must lie in (0, 1)")
        if not self.grad_clip > 0:
            raise ConfigError("train.grad_clip must be positive")
        if not 0 <= int(self.seed) < 2**64:
            raise ConfigError("train.seed must be a 64-bit unsigned integer")

    def to_dict(self):
        d = asdict(self)
        d.pop("loss")
        return d

    @classmethod
    def from_dict(cls, d, loss=None):
        known = {f.name for f in fields(cls)} - {"loss"}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d, loss=loss if loss is not None else LossSpec())


def lr_at(step, config):
    """Linear warmup from 0 to peak, then cosine decay to ``peak * min_lr_ratio``."""
    peak, warm, total = config.peak_lr, config.warmup_steps, config.total_steps
    if step < warm:
        return peak * step / warm
    if total == warm:
        return peak
    progress = min(max((step - warm) / (total - warm), 0.0), 1.0)
    r = config.min_lr_ratio
    return peak * (r + (1.0 - r) * 0.5 * (1.0 + math.cos(math.pi * progress)))


class OptimizerState:
    """AdamW first/second moments per parameter, in the model's parameter order."""

    def __init__(self, params):
        self.names = list(params)
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.step = 0

    def as_tensors(self):
        out = {}
        for k in self.names:
            out["m." + k] = self.m[k]
            out["v." + k] = self.v[k]
        return out

    @classmethod
    def from_tensors(cls, params, step, tensors):
        st = cls(params)
        st.step = int(step)
        for k in st.names:
            st.m[k] = tensors["m." + k].copy()
            st.v[k] = tensors["v." + k].copy()
        return st


def adamw_step(params, grads, state, lr, config):
    """One in-place AdamW update.  Decay applies to matrices only, before the Adam step."""
    for k, g in grads.items():
        if g.shape != params[k].data.shape:
            raise InputError(f"gradient shape mismatch for {k}")
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for {k}")
    state.step += 1
    t = state.step
    b1, b2, eps, wd = config.adam_beta1, config.adam_beta2, config.adam_eps, config.weight_decay
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for k, p in params.items():
        g = grads[k]
        if wd and p.data.ndim >= 2:
            p.data *= 1.0 - lr * wd
        m = state.m[k]
        v = state.v[k]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


def clip_grad_norm(grads, max_norm):
    """Scale grads in place so their global L2 norm is at most ``max_norm``; returns the pre-clip norm."""
    norm = math.sqrt(math.fsum(float(np.vdot(g, g)) for g in grads.values()))
    if norm > max_norm:
        s = max_norm / norm
        for g in grads.values():
            g *= s
    return norm


def split_sequences(sequences, eval_fraction=0.02):
    """Hold out the last ``eval_fraction`` of the chunked sequences (at least one)."""
    seqs = np.asarray(sequences)
    n = len(seqs)
    if n < 2:
        raise InputError("need at least two sequences to split train/eval")
    n_eval = max(1, int(round(n * eval_fraction)))
    return seqs[: n - n_eval], seqs[n - n_eval:]


class BatchStream:
    """Endless batches; each epoch is a fresh permutation from the data stream.

    The stream is owned by the data rng only, so the loss choice can never
    change the order in which sequences are consumed.
    """

    def __init__(self, sequences, batch_size, rng):
        self.seqs = np.asarray(sequences)
        self.batch = min(batch_size, len(self.seqs))
        self.rng = rng
        self.perm = None
        self.pos = 0
        self.epoch = 0

    def next(self):
        if self.perm is None or self.pos + self.batch > len(self.perm):
            self.perm = self.rng.permutation(len(self.seqs))
            self.pos = 0
            self.epoch += 1
        idx = self.perm[self.pos:self.pos + self.batch]
        self.pos += self.batch
        return self.seqs[idx]


@dataclass
class StepRecord:
    step: int
    lr: float
    loss: float
    ce: float
    grad_norm: float
    val_ppl: float | None = None


@dataclass
class RunMetrics:
    steps: list = field(default_factory=list)

    def __len__(self):
        return len(self.steps)

    @property
    def losses(self):
        return [r.loss for r in self.steps]

    @property
    def ces(self):
        return [r.ce for r in self.steps]

    @property
    def val_ppl(self):
        return [(r.step, r.val_ppl) for r in self.steps if r.val_ppl is not None]

    def write_csv(self, path):
        # repr() round-trips floats exactly, so equal runs give equal bytes
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(METRIC_COLUMNS)
            for r in self.steps:
                w.writerow([r.step, repr(r.lr), repr(r.loss), repr(r.ce), repr(r.grad_norm),
                            "" if r.val_ppl is None else repr(r.val_ppl)])

    @classmethod
    def read_csv(cls, path):
        out = cls()
        with open(path, encoding="utf-8") as fh:
            for row in csv.DictReader(fh):
                out.steps.append(StepRecord(
                    int(row["step"]), float(row["lr"]), float(row["loss"]), float(row["ce"]),
                    float(row["grad_norm"]), float(row["val_ppl"]) if row["val_ppl"] else None,
                ))
        return out


def sequence_ce(model, sequences, batch_size=64):
    """Per-target-token CE for [n, T] sequences, shape [n, T-1]."""
    seqs = np.asarray(sequences)
    if seqs.ndim != 2 or len(seqs) == 0:
        raise InputError("evaluation needs a non-empty [n, T] array of sequences")
    x, y = inputs_targets(seqs)
    out = np.empty(y.shape)
    ce_spec = LossSpec("ce", 0.0)
    with nc.no_grad():
        for i in range(0, len(seqs), batch_size):
            logits = model(x[i:i + batch_size]).data
            n = logits.shape[-1]
            _, _, ce, _ = token_terms(logits.reshape(-1, n), y[i:i + batch_size].reshape(-1), ce_spec, with_grad=False)
            out[i:i + batch_size] = ce.reshape(-1, y.shape[1])
    return out


def evaluate_ppl(model, sequences, batch_size=64):
    """exp(mean raw CE) over every target position, whatever loss trained the model."""
    if len(sequences) == 0:
        raise InputError("cannot evaluate perplexity on an empty set")
    ce = sequence_ce(model, sequences, batch_size)
    return math.exp(math.fsum(ce.ravel().tolist()) / ce.size)


def train_step(model, batch, config, state, step):
    x, y = inputs_targets(batch)
    model.zero_grad()
    logits = model(x)
    loss, ce = batch_loss(logits, y, np.ones(y.shape), config.loss, return_ce=True)
    loss.backward()
    grads = {k: p.grad for k, p in model.params.items()}
    for k, g in grads.items():
        if g is None:
            grads[k] = np.zeros_like(model.params[k].data)
    gnorm = clip_grad_norm(grads, config.grad_clip)
    lr = lr_at(step, config)
    adamw_step(model.params, grads, state, lr, config)
    return loss.item(), ce, gnorm, lr


def train(model, train_seqs, config, eval_seqs=None, state=None, on_step=None):
    """Run ``config.total_steps`` optimizer steps (numbered 1..total).

    Returns ``(metrics, optimizer_state)``; numeric failures are re-raised as
    NumericError with the step index in the message.
    """
    state = state or OptimizerState(model.params)
    metrics = RunMetrics()
    if config.total_steps == 0:
        return metrics, state
    batches = BatchStream(train_seqs, config.batch_size, stream(config.seed, "data"))
    for step in range(1, config.total_steps + 1):
        batch = batches.next()
        try:
            loss, ce, gnorm, lr = train_step(model, batch, config, state, step)
        except NumericError as exc:
            raise NumericError(f"step {step}: {exc}") from exc
        rec = StepRecord(step, lr, loss, ce, gnorm)
        if eval_seqs is not None and len(eval_seqs) and (
            step % config.eval_interval == 0 or step == config.total_steps
        ):
            rec.val_ppl = evaluate_ppl(model, eval_seqs)
            log.info("step %d loss %.4f ce %.4f val_ppl %.3f", step, loss, ce, rec.val_ppl)
        metrics.steps.append(rec)
        if on_step is not None:
            on_step(rec)
    return metrics, state


def save_run_checkpoint(path, model, state):
    checkpoint.save_model(path, model, state)
