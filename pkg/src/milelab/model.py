"""Tiny LLaMA-style decoder-only transformer on top of :mod:`milelab.numcore`.

Pre-RMSNorm blocks, rotary (or learned absolute) positions, SiLU-gated
feed-forward, untied output projection by default.  Parameters live in a
plain ``dict[str, Tensor]`` whose insertion order is the canonical order used
by the optimizer and checkpoints.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields

import numpy as np

from . import numcore as nc
from .errors import ConfigError, InputError
from .rng import stream


@dataclass(frozen=True)
class ModelConfig:
    dim: int = 64
    n_heads: int = 2
    n_layers: int = 2
    vocab_size: int = 512
    seq_len: int = 128
    seed: int = 0
    ffn_hidden: int | None = None
    activation: str = "silu"
    pos_embedding: str = "rotary"
    tie_embeddings: bool = False
    norm_eps: float = 1e-6

    def __post_init__(self):
        for name in ("dim", "n_heads", "vocab_size", "seq_len"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"model.{name} must be positive")
        if self.n_layers < 0:
            raise ConfigError("model.n_layers must be non-negative")
        if self.dim % self.n_heads:
            raise ConfigError(f"model.dim={self.dim} is not divisible by n_heads={self.n_heads}")
        if self.pos_embedding == "rotary" and (self.dim // self.n_heads) % 2:
            raise ConfigError("rotary positions need an even head dimension")
        if self.activation not in ("silu", "gelu"):
            raise ConfigError(f"model.activation must be 'silu' or 'gelu', got {self.activation!r}")
        if self.pos_embedding not in ("rotary", "learned"):
            raise ConfigError(f"model.pos_embedding must be 'rotary' or 'learned'")
        if not 0 <= int(self.seed) < 2**64:
            raise ConfigError("model.seed must be a 64-bit unsigned integer")

    @property
    def hidden(self):
        if self.ffn_hidden:
            return int(self.ffn_hidden)
        # SwiGLU convention: 2/3 of 4*dim, rounded up to a multiple of 16
        return 16 * math.ceil(8 * self.dim / 3 / 16)

    @property
    def head_dim(self):
        return self.dim // self.n_heads

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


PRESETS = {
    "tiny": dict(dim=64, n_layers=2, n_heads=2, vocab_size=512, seq_len=128),
    "small": dict(dim=128, n_layers=4, n_heads=4, vocab_size=2048, seq_len=256),
}


def preset(name, **overrides):
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return ModelConfig(**{**PRESETS[name], **overrides})


def param_shapes(config):
    """Ordered (name, shape) pairs for every parameter tensor."""
    d, n, h = config.dim, config.vocab_size, config.hidden
    shapes = [("tok_emb", (n, d))]
    if config.pos_embedding == "learned":
        shapes.append(("pos_emb", (config.seq_len, d)))
    for i in range(config.n_layers):
        p = f"layers.{i}."
        shapes += [
            (p + "attn_norm", (d,)),
            (p + "wq", (d, d)),
            (p + "wk", (d, d)),
            (p + "wv", (d, d)),
            (p + "wo", (d, d)),
            (p + "ffn_norm", (d,)),
            (p + "w_gate", (d, h)),
            (p + "w_up", (d, h)),
            (p + "w_down", (h, d)),
        ]
    if config.n_layers:
        shapes.append(("final_norm", (d,)))
    if not config.tie_embeddings:
        shapes.append(("output", (n, d)))
    return shapes


def count_params(config):
    return sum(math.prod(s) for _, s in param_shapes(config))


def init_params(config):
    rng = stream(config.seed, "init")
    std = 1.0 / math.sqrt(config.dim)
    params = {}
    for name, shape in param_shapes(config):
        if name.endswith("norm"):
            data = np.ones(shape)
        else:
            data = rng.normal(0.0, std, size=shape)
        params[name] = nc.Tensor(data, requires_grad=True)
    return params


def _output_weight(config, params):
    return params["tok_emb"] if config.tie_embeddings else params["output"]


def _attention(config, params, prefix, x, rope):
    b, t, d = x.shape
    nh, hd = config.n_heads, config.head_dim

    def heads(w):
        y = nc.reshape(nc.linear(x, params[prefix + w]), (b, t, nh, hd))
        return nc.transpose(y, (0, 2, 1, 3))

    q, k, v = heads("wq"), heads("wk"), heads("wv")
    if rope is not None:
        cos, sin = rope
        q, k = nc.rotary(q, cos[:t], sin[:t]), nc.rotary(k, cos[:t], sin[:t])
    scores = nc.scale(nc.matmul(q, nc.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(hd))
    out = nc.matmul(nc.causal_softmax(scores), v)
    out = nc.reshape(nc.transpose(out, (0, 2, 1, 3)), (b, t, d))
    return nc.linear(out, params[prefix + "wo"])


def _feed_forward(config, params, prefix, x):
    act = nc.silu if config.activation == "silu" else nc.gelu
    gate = act(nc.linear(x, params[prefix + "w_gate"]))
    return nc.linear(nc.mul(gate, nc.linear(x, params[prefix + "w_up"])), params[prefix + "w_down"])


_ROPE_CACHE = {}


def _rope(config):
    key = (config.seq_len, config.head_dim)
    if key not in _ROPE_CACHE:
        _ROPE_CACHE[key] = nc.rotary_tables(*key)
    return _ROPE_CACHE[key]


def forward(config, params, tokens):
    """Logits Tensor [B, T, N] for integer tokens [B, T]."""
    tokens = np.asarray(tokens)
    if tokens.ndim != 2:
        raise InputError(f"tokens must be [B, T], got shape {tokens.shape}")
    b, t = tokens.shape
    if t > config.seq_len:
        raise InputError(f"sequence length {t} exceeds model seq_len {config.seq_len}")
    if tokens.size and (tokens.min() < 0 or tokens.max() >= config.vocab_size):
        raise InputError(f"token id out of range [0, {config.vocab_size})")

    x = nc.embedding(params["tok_emb"], tokens)
    rope = None
    if config.pos_embedding == "learned":
        x = nc.add(x, nc.embedding(params["pos_emb"], np.arange(t)))
    else:
        rope = _rope(config)
    for i in range(config.n_layers):
        p = f"layers.{i}."
        x = nc.add(x, _attention(config, params, p, nc.rms_norm(x, params[p + "attn_norm"], config.norm_eps), rope))
        x = nc.add(x, _feed_forward(config, params, p, nc.rms_norm(x, params[p + "ffn_norm"], config.norm_eps)))
    if config.n_layers:
        x = nc.rms_norm(x, params["final_norm"], config.norm_eps)
    w = _output_weight(config, params)
    return nc.linear(x, nc.transpose(w, (1, 0)))


class Model:
    """Config plus parameters, the unit the trainer and checkpoints work with."""

    def __init__(self, config, params=None):
        self.config = config
        self.params = init_params(config) if params is None else params

    def __call__(self, tokens):
        return forward(self.config, self.params, tokens)

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def num_params(self):
        return sum(p.size for p in self.params.values())
