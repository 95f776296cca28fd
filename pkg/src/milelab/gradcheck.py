"""Central finite-difference checks for loss gradients and autodiff ops.

The loss oracle is an independent 30-digit (mpmath) evaluation by direct
summation; it never touches the log-softmax path whose gradient it checks.
Perturbing one logit changes a single term of S = sum exp(z) and
T = sum z exp(z), so each perturbed evaluation is O(1) after one full pass.
Op checks run the forward pass in extended precision (np.longdouble).
"""

from __future__ import annotations

import mpmath
import numpy as np

from . import numcore as nc
from .losses import LossSpec, loss_grad

LD = np.longdouble
DIGITS = 30


def rel_err(analytic, numeric, floor=1e-8):
    """max_i |a_i - b_i| / max(|a_i|, |b_i|, floor)."""
    a = np.asarray(analytic, dtype=np.float64)
    b = np.asarray(numeric, dtype=np.float64)
    den = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / den)) if a.size else 0.0


def _loss_from_sums(kind, gamma, s, t, zt, frozen=None):
    lse = mpmath.log(s)
    ce = lse - zt
    if frozen is not None:
        return frozen * ce
    return _factor(kind, gamma, s, t, zt, lse) * ce


def _factor(kind, gamma, s, t, zt, lse=None):
    if kind == "ce" or gamma == 0:
        return mpmath.mpf(1)
    lse = mpmath.log(s) if lse is None else lse
    if kind == "mile":
        return (1 + lse - t / s) ** gamma
    return (1 - mpmath.exp(zt) / s) ** gamma


def reference_loss(logits, target, spec):
    """Loss value by direct summation in 30-digit arithmetic."""
    with mpmath.workdps(DIGITS):
        z = [mpmath.mpf(float(v)) for v in logits]
        e = [mpmath.exp(v) for v in z]
        s = mpmath.fsum(e)
        t = mpmath.fsum(v * w for v, w in zip(z, e))
        return float(_loss_from_sums(spec.kind, mpmath.mpf(spec.gamma), s, t, z[target]))


def fd_loss_grad(logits, target, spec, h=1e-5):
    """Central differences of the reference loss; detached mode freezes the factor."""
    with mpmath.workdps(DIGITS):
        gamma = mpmath.mpf(spec.gamma)
        z = [mpmath.mpf(float(v)) for v in logits]
        shift = max(z)
        z = [v - shift for v in z]
        e = [mpmath.exp(v) for v in z]
        s = mpmath.fsum(e)
        t = mpmath.fsum(v * w for v, w in zip(z, e))
        frozen = _factor(spec.kind, gamma, s, t, z[target]) if spec.factor_grad == "detached" else None
        hh = mpmath.mpf(h)
        out = np.empty(len(z))
        for j, (zj, ej) in enumerate(zip(z, e)):
            vals = []
            for d in (hh, -hh):
                ej2 = mpmath.exp(zj + d)
                s2 = s - ej + ej2
                t2 = t - zj * ej + (zj + d) * ej2
                zt = z[target] + (d if j == target else 0)
                vals.append(_loss_from_sums(spec.kind, gamma, s2, t2, zt, frozen))
            out[j] = float((vals[0] - vals[1]) / (2 * hh))
        return out


def check_loss_grad(kind, gamma, mode, n, trials, seed=0, scale=3.0, h=1e-5):
    """Max relative error of ``loss_grad`` against finite differences over random trials."""
    spec = LossSpec(kind, gamma, mode)
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(trials):
        z = rng.normal(0.0, scale, size=n)
        t = int(rng.integers(n))
        worst = max(worst, rel_err(loss_grad(z, t, spec), fd_loss_grad(z, t, spec, h)))
    return worst


def fd_tensor_grad(fn, arrays, h=1e-5, dtype=LD):
    """Finite-difference gradient of scalar ``fn(*tensors)`` w.r.t. each input array.

    Inputs are re-wrapped as Tensors of ``dtype`` for every evaluation, so the
    forward pass runs in extended precision.
    """
    base = [np.asarray(a, dtype=dtype) for a in arrays]
    grads = []
    for k, a in enumerate(base):
        g = np.empty(a.shape, dtype=np.float64)
        it = np.nditer(a, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            vals = []
            for sign in (1, -1):
                args = [b.copy() for b in base]
                args[k][idx] += sign * dtype(h)
                with nc.no_grad():
                    out = fn(*[nc.Tensor(x, dtype=dtype) for x in args])
                vals.append(out.data.reshape(()))
            g[idx] = float((vals[0] - vals[1]) / (2 * dtype(h)))
        grads.append(g)
    return grads


def analytic_tensor_grad(fn, arrays):
    ts = [nc.Tensor(a, requires_grad=True) for a in arrays]
    fn(*ts).backward()
    return [t.grad for t in ts]


def check_op(fn, arrays, h=1e-5):
    """Max relative error between backward() and finite differences for ``fn``."""
    an = analytic_tensor_grad(fn, arrays)
    fd = fd_tensor_grad(fn, arrays, h)
    return max(rel_err(a, b) for a, b in zip(an, fd))
