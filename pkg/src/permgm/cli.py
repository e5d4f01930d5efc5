"""Command line entry point: generate, train, eval, sweep, gradcheck.

Any flag may come from a JSON config file (``--config``); flags given on the
command line win.  Failures exit nonzero after printing one line of the form
``error: <category>: <message>``.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys

from . import graphs, harness
from .embed import SinkhornSettings
from .graphs import SyntheticConfig
from .harness import ExperimentConfig, OptimizerSettings

EXIT_CODES = {"config": 2, "dataset": 3, "checkpoint": 4, "numeric": 5, "io": 6, "gradcheck": 7}

_SYN_FLAGS = {f.name: f.type for f in dataclasses.fields(SyntheticConfig)
              if f.name not in ("affine_scale_range", "shuffle", "topology")}
_OPT_FLAGS = [f.name for f in dataclasses.fields(OptimizerSettings)]


class GradcheckFailed(Exception):
    pass


def _add_experiment_flags(p):
    p.add_argument("--config", help="JSON file with any of these flags")
    p.add_argument("--method", choices=harness.METHODS)
    p.add_argument("--loss", choices=harness.LOSSES)
    p.add_argument("--dataset", help="JSONL training pairs")
    p.add_argument("--eval-dataset", help="JSONL eval pairs")
    p.add_argument("--eval-pairs", type=int)
    p.add_argument("--hidden", type=int)
    p.add_argument("--tau", type=float)
    p.add_argument("--iterations", type=int)
    p.add_argument("--sm-sigma", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--topology", choices=["delaunay", "full"])
    for name in _SYN_FLAGS:
        if name != "seed":
            p.add_argument("--" + name.replace("_", "-"), type=float if "sigma" in name or "range" in name else int)
    for name in _OPT_FLAGS:
        p.add_argument("--" + name.replace("_", "-"), type=float if name in ("lr", "momentum", "clip_norm") else int)
    p.add_argument("--sinkhorn-train-iters", type=int)
    p.add_argument("--sinkhorn-eval-iters", type=int)
    p.add_argument("--sinkhorn-tol", type=float)


def _settings(args):
    """Flat dict: config file first, explicit flags on top."""
    flat = {}
    if getattr(args, "config", None):
        with open(args.config) as f:
            flat.update(json.load(f))
    for k, v in vars(args).items():
        if v is not None and k not in ("command", "config", "func", "verbose"):
            flat[k] = v
    return flat


def build_config(flat):
    flat = dict(flat)
    syn = {k: flat.pop(k) for k in list(flat) if k in _SYN_FLAGS and k != "seed"}
    if "topology" in flat:
        syn["topology"] = flat.pop("topology")
    opt = {k: flat.pop(k) for k in list(flat) if k in _OPT_FLAGS}
    sk = {k: flat.pop("sinkhorn_" + k) for k in ("train_iters", "eval_iters", "tol") if "sinkhorn_" + k in flat}
    keys = {f.name for f in dataclasses.fields(ExperimentConfig)}
    cfg = {k: v for k, v in flat.items() if k in keys}
    method = cfg.get("method", "PCA")
    if cfg.get("dataset") and cfg.get("eval_dataset") and not syn:
        cfg["synthetic"] = None
    else:
        syn.setdefault("seed", cfg.get("seed", 0))
        cfg["synthetic"] = SyntheticConfig(**syn)
    if method != "SM-unlearned":
        cfg["optimizer"] = OptimizerSettings(**opt)
    elif opt:
        raise ValueError(f"SM-unlearned takes no optimizer flags (got {sorted(opt)})")
    cfg["sinkhorn"] = SinkhornSettings(**sk)
    return ExperimentConfig(**cfg)


def cmd_generate(args):
    flat = _settings(args)
    syn = {k: flat[k] for k in _SYN_FLAGS if k in flat}
    if "topology" in flat:
        syn["topology"] = flat["topology"]
    cfg = SyntheticConfig(**syn)
    pairs = graphs.generate_pairs(cfg, int(flat.get("count", 100)), seed=cfg.seed)
    graphs.save_pairs(args.out, pairs)
    print(f"wrote {len(pairs)} pairs to {args.out}")


def cmd_train(args):
    cfg = build_config(_settings(args))
    ckpt, rec = harness.train(cfg, log_every=args.log_every)
    if ckpt is not None and args.checkpoint:
        harness.checkpoint_save(args.checkpoint, ckpt)
    if args.record:
        with open(args.record, "w") as f:
            f.write(rec.to_json())
    print(f"{cfg.method} mean_acc={rec.mean_acc:.4f} std_acc={rec.std_acc:.4f} "
          f"wallclock_s={rec.wallclock_s:.1f}")


def cmd_eval(args):
    eval_set = graphs.load_pairs(args.eval_dataset) if args.eval_dataset else None
    rec = harness.evaluate_checkpoint(args.checkpoint, eval_set)
    if args.record:
        with open(args.record, "w") as f:
            f.write(rec.to_json())
    print(f"mean_acc={rec.mean_acc:.4f} std_acc={rec.std_acc:.4f} skipped={rec.n_skipped}")


def cmd_sweep(args):
    flat = _settings(args)
    axis, methods = flat.pop("axis"), flat.pop("methods")
    values = flat.pop("values")
    out, seeds = flat.pop("out"), flat.pop("seeds", None)
    methods = methods.split(",") if isinstance(methods, str) else methods
    values = [float(v) for v in values.split(",")] if isinstance(values, str) else values
    if isinstance(seeds, str):
        seeds = [int(s) for s in seeds.split(",")]
    flat["method"] = next((m for m in methods if m != "SM-unlearned"), "PCA")
    base = build_config(flat)
    rows = harness.sweep(base, axis, values, methods, seeds=seeds, csv_path=out)
    failed = sum(r["mean_acc"] == "failed" for r in rows)
    print(f"wrote {len(rows)} rows to {out} ({failed} failed)")


def cmd_gradcheck(args):
    results = harness.gradient_suite(seed=args.seed or 0)
    for name, rep in results:
        print(f"{'PASS' if rep.passed else 'FAIL'} {name} max_rel_error={rep.max_rel_error:.3e} "
              f"tol={rep.tolerance:g}")
    bad = [n for n, r in results if not r.passed]
    if bad:
        raise GradcheckFailed(", ".join(bad))


def make_parser():
    parser = argparse.ArgumentParser(prog="permgm", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write synthetic pairs as JSONL")
    g.add_argument("--config")
    g.add_argument("--out", required=True)
    g.add_argument("--count", type=int)
    g.add_argument("--topology", choices=["delaunay", "full"])
    for name in _SYN_FLAGS:
        g.add_argument("--" + name.replace("_", "-"), type=float if "sigma" in name or "range" in name else int)
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="train a model and evaluate it")
    _add_experiment_flags(t)
    t.add_argument("--checkpoint", help="where to write the trained checkpoint")
    t.add_argument("--record", help="where to write the result record (JSON)")
    t.add_argument("--log-every", type=int, default=0)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--eval-dataset")
    e.add_argument("--record")
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("sweep", help="accuracy table over one synthetic axis")
    _add_experiment_flags(s)
    s.add_argument("--axis", choices=harness.SWEEP_AXES)
    s.add_argument("--values", help="comma separated")
    s.add_argument("--methods", help="comma separated")
    s.add_argument("--seeds", help="comma separated")
    s.add_argument("--out")
    s.set_defaults(func=cmd_sweep)

    c = sub.add_parser("gradcheck", help="finite-difference suite")
    c.add_argument("--seed", type=int)
    c.set_defaults(func=cmd_gradcheck)
    return parser


def _category(exc):
    if isinstance(exc, GradcheckFailed):
        return "gradcheck"
    if isinstance(exc, graphs.DatasetFormatError):
        return "dataset"
    if isinstance(exc, harness.CheckpointError):
        return "checkpoint"
    if isinstance(exc, (harness.NonFiniteLossError, OverflowError, FloatingPointError)):
        return "numeric"
    if isinstance(exc, OSError):
        return "io"
    return "config"


def main(argv=None):
    args = make_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "sweep":
        missing = [k for k in ("axis", "values", "methods", "out") if getattr(args, k) is None
                   and not (args.config and k in json.load(open(args.config)))]
        if missing:
            print(f"error: config: sweep needs {', '.join('--' + m for m in missing)}", file=sys.stderr)
            return EXIT_CODES["config"]
    try:
        args.func(args)
    except (ValueError, TypeError, KeyError, OSError, FloatingPointError, OverflowError, GradcheckFailed) as e:
        cat = _category(e)
        msg = str(e).splitlines()[0] if str(e) else type(e).__name__
        print(f"error: {cat}: {msg}", file=sys.stderr)
        return EXIT_CODES[cat]
    return 0


if __name__ == "__main__":
    sys.exit(main())
