"""Command-line entry point: ``mmgcd {split,tes-train,train,eval,estimate-k}``.

Exit codes: 0 success, 2 configuration or argument error, 3 runtime or
training failure. Every command writes into a fresh timestamped
subdirectory of ``--out`` unless ``--overwrite`` is given, in which case it
writes into ``--out`` itself. Input artifacts default to the newest run
under ``--out`` that contains them.
"""

from __future__ import annotations

import argparse
import glob
import logging
import os
import sys
import time

from . import pipeline
from .config import PipelineConfig, default_config_text
from .exceptions import ConfigError

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3

log = logging.getLogger("mmgcd")


def _common_flags(suppress):
    # subcommand copies must not clobber flags given before the subcommand
    d = (lambda v: argparse.SUPPRESS) if suppress else (lambda v: v)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", default=d(None), help="key = value config file")
    common.add_argument("--seed", type=int, default=d(None), help="override the training seed")
    common.add_argument("--out", metavar="DIR", default=d("runs"), help="output root (default: runs)")
    common.add_argument("--overwrite", action="store_true", default=d(False),
                        help="write into --out directly instead of a new timestamped subdirectory")
    common.add_argument("--set", action="append", default=d([]), metavar="KEY=VALUE",
                        help="override one config key; may be repeated")
    common.add_argument("-v", "--verbose", action="store_true", default=d(False))
    return common


def build_parser():
    top, common = _common_flags(False), _common_flags(True)
    parser = argparse.ArgumentParser(prog="mmgcd", description=__doc__.splitlines()[0],
                                     parents=[top])
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("split", parents=[common], help="build the labeled/unlabeled split")
    p = sub.add_parser("tes-train", parents=[common], help="train the text embedding synthesizer")
    p.add_argument("--split", metavar="PATH")
    p = sub.add_parser("train", parents=[common], help="dual-branch training")
    p.add_argument("--split", metavar="PATH")
    p.add_argument("--tes", metavar="PATH")
    p = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint and/or baselines")
    p.add_argument("--split", metavar="PATH")
    p.add_argument("--checkpoint", metavar="PATH")
    p.add_argument("--tes", metavar="PATH")
    p.add_argument("--cache", metavar="PATH")
    p.add_argument("--ss-kmeans", action="store_true", help="ss-kmeans on frozen visual features")
    p.add_argument("--concat-tes", action="store_true",
                   help="ss-kmeans on visual and pseudo text features concatenated")
    p = sub.add_parser("estimate-k", parents=[common], help="estimate the total class count")
    p.add_argument("--split", metavar="PATH")
    p.add_argument("--cache", metavar="PATH")
    sub.add_parser("show-config", parents=[common], help="print the effective configuration")
    sub.add_parser("defaults", parents=[common], help="print every key with its default")
    return parser


def load_config(args):
    values, base_dir = {}, "."
    errors = []
    if args.config:
        cfg = PipelineConfig.from_file(args.config)
        values, base_dir = cfg.to_dict(), cfg.base_dir
    for item in args.set:
        if "=" not in item:
            errors.append(f"--set expects KEY=VALUE, got {item!r}")
            continue
        key, value = item.split("=", 1)
        values[key.strip()] = value.strip()
    if args.seed is not None:
        values["seed"] = args.seed
    try:
        config = PipelineConfig(values, base_dir)
    except ConfigError as exc:
        raise ConfigError(errors + exc.errors) from None
    if errors:
        raise ConfigError(errors)
    return config


def run_directory(out, overwrite):
    """``out`` itself with ``--overwrite``, otherwise a new timestamped child."""
    if overwrite:
        os.makedirs(out, exist_ok=True)
        return out
    stamp = time.strftime("%Y%m%d-%H%M%S")
    path = os.path.join(out, stamp)
    n = 1
    while os.path.exists(path):
        path = os.path.join(out, f"{stamp}-{n}")
        n += 1
    os.makedirs(path)
    return path


def find_artifact(out, name, explicit=None):
    """Explicit path, else ``out/name``, else the newest ``out/*/name``."""
    if explicit:
        return explicit
    direct = os.path.join(out, name)
    if os.path.exists(direct):
        return direct
    found = sorted(glob.glob(os.path.join(glob.escape(out), "*", name)))
    return found[-1] if found else direct


def dispatch(args, config):
    if args.command == "show-config":
        sys.stdout.write(config.to_text())
        return None
    if args.command == "defaults":
        sys.stdout.write(default_config_text())
        return None
    out = args.out
    # resolve inputs before creating the new run directory
    split = find_artifact(out, pipeline.SPLIT_FILE, getattr(args, "split", None))
    tes = find_artifact(out, pipeline.TES_FILE, getattr(args, "tes", None))
    cache = find_artifact(out, pipeline.CACHE_FILE, getattr(args, "cache", None))
    checkpoint = None
    if args.command == "eval":
        checkpoint = args.checkpoint
        if checkpoint is None and not (args.ss_kmeans or args.concat_tes):
            checkpoint = find_artifact(out, pipeline.DUAL_FILE)
        elif checkpoint is None:
            candidate = find_artifact(out, pipeline.DUAL_FILE)
            checkpoint = candidate if os.path.exists(candidate) else None
    run_dir = run_directory(out, args.overwrite)
    if args.command == "split":
        report = pipeline.run_split(config, run_dir)
    elif args.command == "tes-train":
        report = pipeline.run_tes_train(config, run_dir, split)
    elif args.command == "train":
        report = pipeline.run_train(config, run_dir, split, tes)
    elif args.command == "eval":
        report = pipeline.run_eval(config, run_dir, split, checkpoint,
                                   tes if os.path.exists(tes) else None, cache,
                                   ss_kmeans_baseline=args.ss_kmeans, concat_tes=args.concat_tes)
    else:
        report = pipeline.run_estimate_k(config, run_dir, split, cache)
    path = os.path.join(run_dir, f"report_{args.command}.json")
    pipeline.write_report(report, path)
    _summarize(report, path)
    return report


def _summarize(report, path):
    cmd = report["command"]
    if cmd == "split":
        s = report["split"]
        print(f"classes {s['num_classes']} (old {s['num_old_classes']}, new {s['num_new_classes']}); "
              f"instances {s['num_instances']} (labeled {s['num_labeled']}, "
              f"unlabeled {s['num_unlabeled']})")
    elif cmd == "tes-train":
        m = report["metrics"]
        print(f"tes epochs {report['epochs']}; retrieval top-1 {m['retrieval_top1']:.4f}")
    for key in ("acc", "ss_kmeans_visual", "ss_kmeans_concat_tes"):
        if key in report:
            a = report[key]
            print(f"{key}: all {_fmt(a['acc_all'])} old {_fmt(a['acc_old'])} new {_fmt(a['acc_new'])}")
    if cmd == "estimate-k":
        for key in ("visual", "concat"):
            print(f"{key}: k_hat {report[key]['k_hat']} (error {report[key]['error']})")
    print(f"report: {path}")


def _fmt(v):
    return "n/a" if v is None else f"{v:.4f}"


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code in (0, None) else EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        config = load_config(args)
    except ConfigError as exc:
        print(f"mmgcd: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        dispatch(args, config)
    except (ConfigError, ValueError) as exc:
        print(f"mmgcd: invalid argument: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # runtime failures map to a single exit code
        print(f"mmgcd: {type(exc).__name__}: {exc}", file=sys.stderr)
        log.debug("traceback", exc_info=True)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
