"""Cross-entropy, focal and MiLe next-token losses with closed-form gradients.

All probabilities come from a log-softmax of the logits; no epsilon clamps.

    CE     = -log p_t
    Focal  = (1 - p_t)^gamma * CE
    MiLe   = (1 + H)^gamma * CE,   H = -sum_j p_j log p_j  (nats)

With ``factor_grad="differentiable"`` the gradient also flows through the
scaling factor; with ``"detached"`` the factor is a constant weight.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import numcore
from .errors import ConfigError, DegenerateBatchError, DimensionError, InputError
from .numcore import Tensor, log_softmax_array

KINDS = ("ce", "focal", "mile")
FACTOR_MODES = ("differentiable", "detached")
MAX_GAMMA = 10.0

_KIND_ALIASES = {
    "ce": "ce", "crossentropy": "ce", "cross_entropy": "ce", "cross-entropy": "ce",
    "focal": "focal", "mile": "mile",
}


@dataclass(frozen=True)
class LossSpec:
    kind: str = "ce"
    gamma: float = 1.0
    factor_grad: str = "differentiable"

    def __post_init__(self):
        kind = _KIND_ALIASES.get(str(self.kind).lower())
        if kind is None:
            raise ConfigError(f"unknown loss kind {self.kind!r}; expected one of {KINDS}")
        object.__setattr__(self, "kind", kind)
        mode = str(self.factor_grad).lower()
        if mode not in FACTOR_MODES:
            raise ConfigError(f"factor_grad must be one of {FACTOR_MODES}, got {self.factor_grad!r}")
        object.__setattr__(self, "factor_grad", mode)
        gamma = float(self.gamma)
        if not (0.0 <= gamma <= MAX_GAMMA):
            raise ConfigError(f"gamma must lie in [0, {MAX_GAMMA}], got {self.gamma}")
        object.__setattr__(self, "gamma", gamma)

    @property
    def effective_gamma(self):
        return 0.0 if self.kind == "ce" else self.gamma


@dataclass(frozen=True)
class ProbDist:
    probs: np.ndarray
    log_probs: np.ndarray

    @classmethod
    def from_logits(cls, logits):
        z = np.asarray(logits, dtype=np.float64)
        if z.ndim != 1 or z.size < 1:
            raise DimensionError("ProbDist needs a non-empty 1-D logit vector")
        if not np.all(np.isfinite(z)):
            raise InputError("logits must be finite")
        lp = log_softmax_array(z)
        return cls(np.exp(lp), lp)

    @classmethod
    def from_probs(cls, probs):
        p = np.asarray(probs, dtype=np.float64)
        if p.ndim != 1 or np.any(p < 0) or abs(p.sum() - 1.0) > 1e-12:
            raise InputError("probabilities must be non-negative and sum to 1")
        with np.errstate(divide="ignore"):
            lp = np.log(p)
        return cls(p, lp)


@dataclass(frozen=True)
class PerTokenLoss:
    value: float
    factor: float
    ce_value: float


def entropy(dist):
    """Shannon entropy in nats, with 0 log 0 = 0.  Accepts a ProbDist or raw logits."""
    if not isinstance(dist, ProbDist):
        dist = ProbDist.from_logits(dist)
    p, lp = dist.probs, dist.log_probs
    terms = np.where(p > 0, p * np.where(p > 0, lp, 0.0), 0.0)
    return float(min(max(-terms.sum(), 0.0), math.log(p.size)))


def entropy_rows(logp):
    """Row entropies from log-probabilities, clipped to the analytic range [0, ln N]."""
    h = -(np.exp(logp) * logp).sum(axis=-1)
    return np.clip(h, 0.0, math.log(logp.shape[-1]))


def _focal_factor(logpt, gamma):
    one_minus = -np.expm1(logpt)  # 1 - p_t without cancellation
    if gamma == 0.0:
        return np.ones_like(logpt), one_minus
    with np.errstate(divide="ignore"):
        f = np.where(one_minus > 0, np.exp(gamma * np.log(np.where(one_minus > 0, one_minus, 1.0))), 0.0)
    return f, one_minus


def token_terms(logits, targets, spec, with_grad=True):
    """Per-row loss pieces for a [M, N] logit matrix.

    Returns ``(value, factor, ce, grad)`` where ``grad`` is dL_i/dz_i per row
    (None when ``with_grad`` is false).
    """
    z = np.asarray(logits, dtype=np.float64)
    t = np.asarray(targets)
    m, n = z.shape
    rows = np.arange(m)
    logp = log_softmax_array(z)
    ce = -logp[rows, t]
    gamma = spec.effective_gamma
    p = np.exp(logp)

    if spec.kind == "mile":
        h = np.clip(-(p * logp).sum(axis=-1), 0.0, math.log(n))
        base = 1.0 + h
        factor = np.ones(m) if gamma == 0.0 else base**gamma
    elif spec.kind == "focal":
        factor, one_minus = _focal_factor(-ce, gamma)
    else:
        factor = np.ones(m)
    value = factor * ce
    if not with_grad:
        return value, factor, ce, None

    d = p.copy()
    d[rows, t] = np.expm1(-ce)  # p_t - 1 without cancellation
    grad = factor[:, None] * d
    if gamma != 0.0 and spec.factor_grad == "differentiable":
        if spec.kind == "mile":
            # dH/dz_j = -p_j (log p_j + H)
            coef = gamma * base ** (gamma - 1.0) * ce
            grad -= coef[:, None] * (p * (logp + h[:, None]))
        elif spec.kind == "focal":
            pt = p[rows, t]
            safe = np.where(one_minus > 0, one_minus, 1.0)
            coef = np.where(one_minus > 0, gamma * np.exp((gamma - 1.0) * np.log(safe)) * pt * ce, 0.0)
            grad += coef[:, None] * d
    return value, factor, ce, grad


def _single(logits, target, spec):
    z = np.asarray(logits, dtype=np.float64)
    if z.ndim != 1 or z.size < 1:
        raise DimensionError("expected a non-empty 1-D logit vector")
    if not np.all(np.isfinite(z)):
        raise InputError("logits must be finite")
    target = int(target)
    if not 0 <= target < z.size:
        raise IndexError(f"target {target} out of range [0, {z.size})")
    return z[None, :], np.array([target])


def per_token_loss(logits, target, spec):
    z, t = _single(logits, target, spec)
    value, factor, ce, _ = token_terms(z, t, spec, with_grad=False)
    return PerTokenLoss(float(value[0]), float(factor[0]), float(ce[0]))


def ce_loss(logits, target):
    return per_token_loss(logits, target, LossSpec("ce", 0.0))


def focal_loss(logits, target, gamma):
    return per_token_loss(logits, target, LossSpec("focal", gamma))


def mile_loss(logits, target, gamma):
    return per_token_loss(logits, target, LossSpec("mile", gamma))


def loss_grad(logits, target, spec):
    """dL/dz for one logit vector under ``spec``."""
    z, t = _single(logits, target, spec)
    return token_terms(z, t, spec)[3][0]


def batch_loss(logits, targets, mask, spec, return_ce=False):
    """Mean per-token loss over positions with ``mask == 1``.

    ``logits`` is a Tensor [B, T, N]; the result is a differentiable scalar
    Tensor.  With ``return_ce`` the masked mean of the raw CE is returned too.
    """
    if not isinstance(logits, Tensor):
        logits = Tensor(logits)
    tg = np.asarray(targets.data if isinstance(targets, Tensor) else targets)
    mk = np.asarray(mask.data if isinstance(mask, Tensor) else mask, dtype=np.float64)
    if logits.ndim != 3 or tg.shape != logits.shape[:2] or mk.shape != tg.shape:
        raise DimensionError(
            f"batch_loss shapes disagree: logits {logits.shape}, targets {tg.shape}, mask {mk.shape}"
        )
    if not np.all((mk == 0) | (mk == 1)):
        raise InputError("mask entries must be 0 or 1")
    tg = tg.astype(np.int64)
    n = logits.shape[-1]
    if tg.size and (tg.min() < 0 or tg.max() >= n):
        raise IndexError(f"target id out of range [0, {n})")
    count = mk.sum()
    if count == 0:
        raise DegenerateBatchError("every position in the batch is masked")

    flat = logits.data.reshape(-1, n)
    value, _, ce, grad = token_terms(flat, tg.reshape(-1), spec, with_grad=logits.requires_grad)
    w = mk.reshape(-1)
    loss = np.array((value * w).sum() / count)
    shape = logits.shape

    def backward(g):
        return ((grad * (w / count)[:, None] * g).reshape(shape),)

    out = numcore.record(loss, (logits,), backward, f"{spec.kind}_loss")
    if return_ce:
        return out, float((ce * w).sum() / count)
    return out
