"""Per-bucket perplexity, entropy histograms and gamma sweeps."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from . import numcore as nc
from .corpus import BUCKET_NAMES, inputs_targets
from .errors import InputError
from .losses import entropy_rows
from .numcore import log_softmax_array
from .trainer import sequence_ce


@dataclass
class BucketRow:
    bucket: str
    token_count: int
    mean_ce: float | None
    ppl: float | None


@dataclass
class BucketPPLReport:
    rows: list
    overall: BucketRow

    def row(self, bucket):
        for r in self.rows:
            if r.bucket == bucket:
                return r
        raise KeyError(bucket)

    def ppl(self, bucket):
        return self.overall.ppl if bucket == "overall" else self.row(bucket).ppl

    def as_dict(self):
        return {r.bucket: r.ppl for r in self.rows + [self.overall]}

    def write_csv(self, path):
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["bucket", "token_count", "mean_ce", "ppl"])
            for r in self.rows + [self.overall]:
                w.writerow([r.bucket, r.token_count, _fmt(r.mean_ce), _fmt(r.ppl)])

    def to_text(self):
        lines = [f"{'bucket':<8} {'tokens':>10} {'mean_ce':>10} {'ppl':>10}"]
        for r in self.rows + [self.overall]:
            ce = "-" if r.mean_ce is None else f"{r.mean_ce:.4f}"
            ppl = "-" if r.ppl is None else f"{r.ppl:.3f}"
            lines.append(f"{r.bucket:<8} {r.token_count:>10} {ce:>10} {ppl:>10}")
        return "\n".join(lines) + "\n"


def _fmt(x):
    return "" if x is None else repr(x)


def report_from_ce(ce, targets, buckets):
    """Attribute each target's CE to the target token's bucket."""
    ce = np.asarray(ce, dtype=np.float64).ravel()
    labels = buckets.assignment[np.asarray(targets).ravel()]
    rows = []
    for b, name in enumerate(BUCKET_NAMES):
        sel = ce[labels == b]
        if sel.size:
            m = math.fsum(sel.tolist()) / sel.size
            rows.append(BucketRow(name, int(sel.size), m, math.exp(m)))
        else:
            rows.append(BucketRow(name, 0, None, None))
    m = math.fsum(ce.tolist()) / ce.size
    return BucketPPLReport(rows, BucketRow("overall", int(ce.size), m, math.exp(m)))


def bucketed_ppl(model, sequences, buckets, batch_size=64):
    seqs = np.asarray(sequences)
    if len(seqs) == 0:
        raise InputError("bucketed_ppl needs at least one sequence")
    if buckets.assignment.size != model.config.vocab_size:
        raise InputError("buckets were built for a different vocabulary size")
    ce = sequence_ce(model, seqs, batch_size)
    return report_from_ce(ce, inputs_targets(seqs)[1], buckets)


def position_entropies(model, sequences, batch_size=64):
    """Entropy of the predicted next-token distribution at every input position."""
    x, _ = inputs_targets(np.asarray(sequences))
    out = []
    with nc.no_grad():
        for i in range(0, len(x), batch_size):
            logits = model(x[i:i + batch_size]).data
            out.append(entropy_rows(log_softmax_array(logits)).ravel())
    return np.concatenate(out) if out else np.empty(0)


def entropy_histogram(model, sequences, n_bins):
    """Counts of predicted-distribution entropies in ``n_bins`` equal bins over [0, ln N]."""
    if n_bins < 1:
        raise InputError("n_bins must be at least 1")
    h = position_entropies(model, sequences)
    edges = np.linspace(0.0, math.log(model.config.vocab_size), n_bins + 1)
    counts, _ = np.histogram(np.clip(h, edges[0], edges[-1]), bins=edges)
    return counts, edges


# gamma sweep -----------------------------------------------------------------

@dataclass
class SweepRow:
    gamma: float
    val_ppl: float
    bucket_ppl: dict
    delta_ppl: float = 0.0
    delta_bucket: dict = field(default_factory=dict)


@dataclass
class SweepReport:
    rows: list
    seed: int

    def row(self, gamma):
        for r in self.rows:
            if r.gamma == gamma:
                return r
        raise KeyError(gamma)

    def write_csv(self, path):
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["gamma", "val_ppl", "delta_ppl"]
                       + [f"ppl_{b}" for b in BUCKET_NAMES] + [f"delta_{b}" for b in BUCKET_NAMES])
            for r in self.rows:
                w.writerow([repr(r.gamma), repr(r.val_ppl), repr(r.delta_ppl)]
                           + [_fmt(r.bucket_ppl.get(b)) for b in BUCKET_NAMES]
                           + [_fmt(r.delta_bucket.get(b)) for b in BUCKET_NAMES])

    def to_text(self):
        head = f"{'gamma':>6} {'val_ppl':>10} {'delta':>9}" + "".join(f" {b:>9}" for b in BUCKET_NAMES)
        lines = [head]
        for r in self.rows:
            cells = "".join(
                f" {'-' if r.bucket_ppl.get(b) is None else format(r.bucket_ppl[b], '.3f'):>9}"
                for b in BUCKET_NAMES
            )
            lines.append(f"{r.gamma:>6g} {r.val_ppl:>10.3f} {r.delta_ppl:>+9.3f}{cells}")
        return "\n".join(lines) + "\n"


def _sweep_one(args):
    from .experiment import run_experiment

    config, gamma, run_dir = args
    cfg = config.with_loss(kind="mile", gamma=gamma)
    sub = None if run_dir is None else f"{run_dir}/gamma{gamma:g}_seed{cfg.seed}"
    try:
        res = run_experiment(cfg, sub)
    except Exception as exc:
        raise type(exc)(f"gamma={gamma:g}: {exc}") from exc
    rep = res.bucket_report
    return gamma, res.val_ppl, {b: rep.ppl(b) for b in BUCKET_NAMES}


def gamma_sweep(base_config, gammas, run_dir=None, jobs=1):
    """One MiLe training run per gamma, identical seeds and data order.

    gamma = 0 is the cross-entropy baseline every other row is compared to.
    """
    gammas = [float(g) for g in gammas]
    if 0.0 not in gammas:
        raise InputError("a gamma sweep must include gamma = 0 as the baseline")
    tasks = [(base_config, g, run_dir) for g in gammas]
    if jobs > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=jobs) as ex:
            results = list(ex.map(_sweep_one, tasks))
    else:
        results = [_sweep_one(t) for t in tasks]
    rows = [SweepRow(g, ppl, bp) for g, ppl, bp in results]
    base = next(r for r in rows if r.gamma == 0.0)
    for r in rows:
        r.delta_ppl = r.val_ppl - base.val_ppl
        r.delta_bucket = {
            b: (None if r.bucket_ppl[b] is None or base.bucket_ppl[b] is None
                else r.bucket_ppl[b] - base.bucket_ppl[b])
            for b in BUCKET_NAMES
        }
    report = SweepReport(rows, base_config.seed)
    if run_dir is not None:
        stem = f"{run_dir}/sweep_seed{base_config.seed}"
        report.write_csv(stem + ".csv")
        with open(stem + ".txt", "w", encoding="utf-8") as fh:
            fh.write(report.to_text())
    return report
