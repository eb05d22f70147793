"""Command-line interface: ``utsp {gen,oracle,baseline,minimize,train,eval}``.

Dataset files hold one JSON object per line with fields ``n``, exactly one of
``coords`` (n x 2) or ``matrix`` (n x n), and optional ``opt_len`` / ``opt_tour``.
Reports are JSON documents with ``method``, ``count``, ``mean_gap`` (percent,
3 decimals), ``seconds`` (wall clock for the whole dataset, or null with
``--omit-timing``) and a per-instance ``instances`` list of ``{length, gap}``.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path
from typing import Optional, Sequence

import yaml

from . import instances as I
from . import solver as S
from .gnn import GnnModel
from .loss import LossWeights

log = logging.getLogger("utsp")

TRAIN_KEYS = {f.name for f in dataclasses.fields(S.TrainConfig)}
EXTRA_KEYS = {"oracle"}


class UsageError(Exception):
    pass


def _positive_int(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return v


def _nonneg_int(text: str) -> int:
    v = int(text)
    if v < 0:
        raise argparse.ArgumentTypeError(f"expected a non-negative integer, got {text}")
    return v


def _node_count(text: str) -> int:
    v = int(text)
    if v < 3:
        raise argparse.ArgumentTypeError(f"instances need at least 3 nodes, got {text}")
    return v


def _writable(path: str) -> Path:
    p = Path(path)
    parent = p.parent if str(p.parent) else Path(".")
    if not parent.is_dir():
        raise UsageError(f"output directory {parent} does not exist")
    if not os.access(parent, os.W_OK):
        raise UsageError(f"output directory {parent} is not writable")
    return p


def _readable(path: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"input file {p} does not exist")
    return p


def write_report(path, report: S.EvalReport, timing: bool) -> None:
    doc = report.to_dict()
    if not timing:
        doc["seconds"] = None
    Path(path).write_text(json.dumps(doc, indent=1) + "\n", encoding="utf-8")


def _print_summary(report: S.EvalReport) -> None:
    secs = "" if report.seconds is None else f"  time {report.seconds:.3f}s"
    print(f"{report.method}: {len(report.gaps)} instances  mean gap {report.mean_gap:.3f}%{secs}")


# ---------------------------------------------------------------------------
# commands


def cmd_gen(args) -> int:
    out = _writable(args.out)
    data = I.generate(args.kind, args.n, args.count, args.seed)
    I.write_dataset(out, data)
    print(f"wrote {len(data)} {args.kind} instances (n={args.n}) to {out}")
    return 0


def cmd_oracle(args) -> int:
    src = _readable(args.input)
    out = _writable(args.out)
    data = I.read_dataset(src)
    limit = I.HELD_KARP_MAX_N if args.method == "held-karp" else I.BRUTE_FORCE_MAX_N
    too_big = [inst.n for inst in data if inst.n > limit]
    if too_big:
        raise I.OracleLimitError(
            f"{args.method} is limited to n <= {limit}; dataset contains n={max(too_big)}")
    I.write_dataset(out, I.annotate(data, args.method))
    print(f"annotated {len(data)} instances with {args.method} optima -> {out}")
    return 0


def _load_annotated(path: str) -> list[I.TspInstance]:
    data = I.read_dataset(_readable(path))
    missing = sum(inst.opt_len is None for inst in data)
    if missing:
        raise I.InstanceError(f"{missing} records in {path} lack opt_len; run `utsp oracle` first")
    return data


def cmd_baseline(args) -> int:
    data = _load_annotated(args.input)
    out = _writable(args.out)
    report = S.run_baseline(args.method, data, args.seed)
    write_report(out, report, not args.omit_timing)
    _print_summary(report)
    return 0


def cmd_minimize(args) -> int:
    data = _load_annotated(args.input)
    out = _writable(args.out)
    noise = args.noise
    if noise is None:
        noise = 0.0 if all(inst.is_euclidean for inst in data) else 0.1
    w = LossWeights(args.alpha, args.beta, args.gamma, noise)
    report = S.run_minimize(data, args.steps, args.lr, noise, args.seed, args.decode_seed, w)
    write_report(out, report, not args.omit_timing)
    _print_summary(report)
    return 0


def load_train_config(path) -> tuple[S.TrainConfig, str]:
    """Parse a flat ``key: value`` document; unknown keys are rejected."""
    doc = yaml.safe_load(Path(path).read_text(encoding="utf-8")) or {}
    if not isinstance(doc, dict):
        raise UsageError(f"{path}: config must be a flat key-value document")
    unknown = set(doc) - TRAIN_KEYS - EXTRA_KEYS
    if unknown:
        raise UsageError(f"{path}: unknown config keys {sorted(unknown)}")
    nested = [k for k, v in doc.items() if isinstance(v, (dict, list))]
    if nested:
        raise UsageError(f"{path}: values must be scalars, got nested values for {nested}")
    oracle = doc.pop("oracle", "held-karp")
    if oracle not in I.ORACLES:
        raise UsageError(f"{path}: oracle must be one of {sorted(I.ORACLES)}")
    try:
        config = S.TrainConfig(**doc)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"{path}: {exc}") from exc
    base = Path(path).parent
    # relative paths are taken relative to the config file
    for key in ("val_path", "metrics_path", "checkpoint_dir"):
        value = getattr(config, key)
        if value is not None and not Path(value).is_absolute():
            setattr(config, key, str(base / value))
    return config, oracle


def cmd_train(args) -> int:
    config, oracle = load_train_config(_readable(args.config))
    if args.omit_timing:
        config.timing = False
    if config.val_path is None:
        raise UsageError("config must set val_path")
    _readable(config.val_path)
    if config.metrics_path:
        _writable(config.metrics_path)
    if config.checkpoint_dir:
        ckpt = _writable(config.checkpoint_dir)
        if ckpt.exists() and not ckpt.is_dir():
            raise UsageError(f"checkpoint_dir {ckpt} is not a directory")
    val = I.read_dataset(config.val_path)
    if any(inst.opt_len is None for inst in val):
        log.info("annotating validation set with %s", oracle)
        val = I.annotate(val, oracle)
    result = S.train(config, val)
    last = result.metrics[-1]
    print(f"trained {config.epochs} epochs; final val gap {last.val_mean_gap:.3f}% "
          f"(best epoch {result.best_epoch}); parameters {result.model.num_parameters()}")
    return 0


def cmd_eval(args) -> int:
    model = GnnModel.load(_readable(args.model))
    data = _load_annotated(args.input)
    out = _writable(args.out)
    if model.config.coord_input and any(inst.coords is None for inst in data):
        raise I.InstanceError("model was trained on coordinates but the dataset has matrix-only records")
    report = S.evaluate(model, data, args.decode_seed, args.batch_size)
    write_report(out, report, not args.omit_timing)
    _print_summary(report)
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="utsp",
        description="Unsupervised TSP: datasets, exact oracles, baselines, loss minimisation, GNN training.",
        epilog=__doc__.split("\n\n", 1)[1],
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a random dataset (one JSON record per line)")
    g.add_argument("--kind", choices=["euclidean", "asymmetric"], required=True,
                   help="unit-square points or uniform [0,1) cost matrices")
    g.add_argument("--n", type=_node_count, required=True, help="nodes per instance (>= 3)")
    g.add_argument("--count", type=_positive_int, required=True, help="number of instances")
    g.add_argument("--seed", type=_nonneg_int, required=True,
                   help="record k is drawn from PCG64 seeded with SeedSequence([seed, k])")
    g.add_argument("--out", required=True, help="output dataset path")
    g.set_defaults(func=cmd_gen)

    o = sub.add_parser("oracle", help="annotate a dataset with exact optima")
    o.add_argument("--in", dest="input", required=True, help="input dataset")
    o.add_argument("--method", choices=sorted(I.ORACLES), default="held-karp",
                   help=f"held-karp (n <= {I.HELD_KARP_MAX_N}) or brute (n <= {I.BRUTE_FORCE_MAX_N})")
    o.add_argument("--out", required=True, help="annotated output dataset")
    o.set_defaults(func=cmd_oracle)

    def report_flags(sp):
        sp.add_argument("--in", dest="input", required=True, help="annotated dataset (records need opt_len)")
        sp.add_argument("--out", required=True, help="JSON report path")
        sp.add_argument("--omit-timing", action="store_true",
                        help="write seconds as null so reruns are byte-identical")

    b = sub.add_parser("baseline", help="random or nearest-neighbour tours")
    report_flags(b)
    b.add_argument("--method", choices=["greedy", "random"], required=True,
                   help="greedy: nearest neighbour from node 0; random: uniform permutation")
    b.add_argument("--seed", type=_nonneg_int, default=0, help="seed for random tours")
    b.set_defaults(func=cmd_baseline)

    m = sub.add_parser("minimize", help="minimise the loss directly per instance, then decode greedily")
    report_flags(m)
    m.add_argument("--steps", type=_nonneg_int, default=15000, help="Adam steps per instance")
    m.add_argument("--lr", type=float, default=0.01, help="Adam learning rate")
    m.add_argument("--noise", type=float, default=None,
                   help="Gumbel noise scale (default 0 for Euclidean data, 0.1 otherwise)")
    m.add_argument("--alpha", type=float, default=5.0, help="tour-length weight")
    m.add_argument("--beta", type=float, default=1.0, help="degree-constraint weight")
    m.add_argument("--gamma", type=float, default=1.0, help="subtour-constraint weight")
    m.add_argument("--seed", type=_nonneg_int, default=0, help="noise seed")
    m.add_argument("--decode-seed", type=_nonneg_int, default=0, help="seed for decode start nodes")
    m.set_defaults(func=cmd_minimize)

    t = sub.add_parser("train", help="train the GNN from a flat key-value config",
                       description="Config keys: " + ", ".join(sorted(TRAIN_KEYS | EXTRA_KEYS))
                       + ". Metrics CSV columns: epoch,mean_train_loss,val_mean_gap,seconds.")
    t.add_argument("--config", required=True, help="YAML file of flat key: value pairs")
    t.add_argument("--omit-timing", action="store_true", help="leave the seconds column empty")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint with greedy decoding")
    report_flags(e)
    e.add_argument("--model", required=True, help="checkpoint JSON written by train")
    e.add_argument("--decode-seed", type=_nonneg_int, default=0, help="seed for decode start nodes")
    e.add_argument("--batch-size", type=_positive_int, default=256, help="instances per forward pass")
    e.set_defaults(func=cmd_eval)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        parser.error(str(exc))
    except (I.InstanceError, ValueError, OSError) as exc:
        print(f"utsp {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
