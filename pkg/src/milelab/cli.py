"""``milelab`` command-line entry point.

Exit codes: 0 success, 2 config/input error, 3 numeric failure, 4 I/O
failure, 1 anything else.  Failures print exactly one line to stderr of the
form ``error=<category> message=<text>``.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

from . import checkpoint
from .corpus import (
    CorpusStats,
    DomainManifest,
    build_frequency_buckets,
    compute_sampling_weights,
    read_token_stream,
    write_bucket_report,
    write_token_stream,
)
from .errors import ConfigError, InputError, MileLabError, NumericError

EXIT_CODES = {"config": 2, "input": 2, "dimension": 2, "degenerate-batch": 2, "numeric": 3, "io": 4}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def _add_config(p, required=True):
    p.add_argument("--config", required=required, help="JSON experiment config")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="PATH=VALUE",
                   help="override a config field, e.g. --set loss.gamma=0")


def build_parser():
    parser = _Parser(prog="milelab", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-corpus", help="generate/tokenize the configured corpus into a MILT1 stream")
    _add_config(p)
    p.add_argument("--out", required=True)

    p = sub.add_parser("buckets", help="frequency-bucket report for a token stream or configured corpus")
    _add_config(p, required=False)
    p.add_argument("--tokens", help="MILT1 token stream (instead of --config)")
    p.add_argument("--vocab-size", type=int)
    p.add_argument("--coverage", default="0.8,0.95")
    p.add_argument("--out", required=True)

    p = sub.add_parser("weights", help="domain sampling weights from a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out")

    p = sub.add_parser("train", help="train one model")
    _add_config(p)
    p.add_argument("--out", required=True)

    p = sub.add_parser("eval", help="overall and per-bucket perplexity of a checkpoint")
    _add_config(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--entropy-bins", type=int, default=0)

    p = sub.add_parser("sweep", help="MiLe gamma sweep")
    _add_config(p)
    p.add_argument("--gammas", default="0,0.5,1,2,5")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--out", required=True)

    p = sub.add_parser("grad-check", help="finite-difference check of the loss gradients")
    p.add_argument("--loss", choices=("ce", "focal", "mile"), default="mile")
    p.add_argument("--gamma", type=float, default=1.0)
    p.add_argument("--mode", choices=("differentiable", "detached", "both"), default="both")
    p.add_argument("--n", type=int, default=64)
    p.add_argument("--trials", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tol", type=float, default=1e-5)
    p.add_argument("--out")
    return parser


def _load_config(args):
    from .experiment import ExperimentConfig

    return ExperimentConfig.load(args.config, args.overrides)


def _prepare_out(path, config=None):
    os.makedirs(path, exist_ok=True)
    if config is not None:
        config.save(os.path.join(path, "config.json"))


def _floats(text):
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise ConfigError(f"expected comma-separated numbers, got {text!r}") from None


def cmd_gen_corpus(args):
    from .experiment import load_tokens

    cfg = _load_config(args)
    _prepare_out(args.out, cfg)
    toks, _ = load_tokens(cfg)
    write_token_stream(os.path.join(args.out, "tokens.milt"), toks)
    print(f"wrote {toks.size} tokens to {os.path.join(args.out, 'tokens.milt')}")


def cmd_buckets(args):
    from .experiment import load_tokens

    targets = tuple(_floats(args.coverage))
    if len(targets) != 2:
        raise ConfigError("--coverage takes two comma-separated fractions")
    vocab = None
    if args.tokens:
        if not args.vocab_size:
            raise ConfigError("--tokens needs --vocab-size")
        toks, n = read_token_stream(args.tokens), args.vocab_size
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, "config.json"), "w", encoding="utf-8") as fh:
            json.dump({"tokens": args.tokens, "vocab_size": n, "coverage": list(targets)}, fh, indent=2)
    elif args.config:
        cfg = _load_config(args)
        _prepare_out(args.out, cfg)
        toks, vocab = load_tokens(cfg)
        n = cfg.model.vocab_size
    else:
        raise ConfigError("buckets needs --config or --tokens")
    stats = CorpusStats.from_tokens(toks, n)
    buckets = build_frequency_buckets(stats, targets)
    write_bucket_report(os.path.join(args.out, "buckets.csv"), stats, buckets, vocab)
    for name in ("high", "medium", "low"):
        print(f"{name}\t{len(buckets.members(name))}")


def cmd_weights(args):
    manifest = DomainManifest.from_json(args.manifest)
    weights = compute_sampling_weights(manifest)
    lines = [f"{d.name}\t{w!r}" for d, w in zip(manifest.domains, weights)]
    print("\n".join(lines))
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, "weights.csv"), "w", encoding="utf-8") as fh:
            fh.write("domain,weight\n")
            fh.writelines(f"{d.name},{w!r}\n" for d, w in zip(manifest.domains, weights))
        with open(os.path.join(args.out, "config.json"), "w", encoding="utf-8") as fh:
            json.dump({"manifest": args.manifest}, fh, indent=2)


def cmd_train(args):
    from .experiment import run_experiment

    cfg = _load_config(args)
    _prepare_out(args.out, cfg)
    res = run_experiment(cfg, args.out)
    print(f"val_ppl\t{res.val_ppl!r}")
    print(res.bucket_report.to_text(), end="")


def cmd_eval(args):
    from .analysis import bucketed_ppl, entropy_histogram
    from .experiment import prepare_data, tag

    cfg = _load_config(args)
    _prepare_out(args.out, cfg)
    model, _, _ = checkpoint.load_model(args.checkpoint)
    if model.config.vocab_size != cfg.model.vocab_size:
        raise ConfigError("checkpoint vocabulary does not match the config")
    _, eval_seqs, _, buckets, _ = prepare_data(cfg)
    report = bucketed_ppl(model, eval_seqs, buckets)
    stem = os.path.join(args.out, f"eval_{tag(cfg)}")
    report.write_csv(stem + ".csv")
    with open(stem + ".txt", "w", encoding="utf-8") as fh:
        fh.write(report.to_text())
    print(report.to_text(), end="")
    if args.entropy_bins:
        counts, edges = entropy_histogram(model, eval_seqs, args.entropy_bins)
        with open(stem + "_entropy.csv", "w", encoding="utf-8") as fh:
            fh.write("bin_lo,bin_hi,count\n")
            fh.writelines(f"{lo!r},{hi!r},{c}\n" for lo, hi, c in zip(edges[:-1], edges[1:], counts))


def cmd_sweep(args):
    from .analysis import gamma_sweep

    cfg = _load_config(args)
    _prepare_out(args.out, cfg)
    report = gamma_sweep(cfg, _floats(args.gammas), run_dir=args.out, jobs=max(1, args.jobs))
    print(report.to_text(), end="")


def cmd_grad_check(args):
    from .gradcheck import check_loss_grad

    modes = ("differentiable", "detached") if args.mode == "both" else (args.mode,)
    worst = 0.0
    lines = []
    for mode in modes:
        err = check_loss_grad(args.loss, args.gamma, mode, args.n, args.trials, seed=args.seed)
        worst = max(worst, err)
        lines.append(f"{args.loss}\t{mode}\tgamma={args.gamma:g}\tn={args.n}\tmax_rel_err={err:.3e}")
    print("\n".join(lines))
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, "grad_check.txt"), "w", encoding="utf-8") as fh:
            fh.write("\n".join(lines) + "\n")
        with open(os.path.join(args.out, "config.json"), "w", encoding="utf-8") as fh:
            json.dump({k: v for k, v in vars(args).items() if k != "func"}, fh, indent=2)
    if worst > args.tol:
        raise NumericError(f"max relative error {worst:.3e} exceeds {args.tol:g}")


COMMANDS = {
    "gen-corpus": cmd_gen_corpus,
    "buckets": cmd_buckets,
    "weights": cmd_weights,
    "train": cmd_train,
    "eval": cmd_eval,
    "sweep": cmd_sweep,
    "grad-check": cmd_grad_check,
}


def _fail(category, message):
    msg = " ".join(str(message).split())
    print(f"error={category} message={msg}", file=sys.stderr)
    return EXIT_CODES.get(category, 1)


def run(argv=None):
    """Run one command; returns the process exit status."""
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        COMMANDS[args.command](args)
    except MileLabError as exc:
        return _fail(exc.category, exc)
    except (KeyError, TypeError, ValueError) as exc:
        return _fail("config", exc)
    except OSError as exc:
        return _fail("io", exc)
    except IndexError as exc:
        return _fail("input", exc)
    return 0


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
