"""Command-line front end. One subcommand per pipeline stage.

Exit codes: 0 success, 1 other failure, 2 configuration error, 3 provenance
error (stale or mismatched artifact), 4 numerical divergence.
"""
from __future__ import annotations

import argparse
import logging
import sys

from .config import load_config, n_samples, size_key
from .errors import ConfigError, NumericalError, ParameterError, ProvenanceError, ZSKDError

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_PROVENANCE, EXIT_NUMERIC = 0, 1, 2, 3, 4

COMMANDS = ("train-teacher", "train-student-ce", "train-student-kd", "extract-prior", "gen-di", "gen-ci",
            "augment", "zskd", "finetune", "eval", "sweep", "report")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="INI experiment config (defaults apply otherwise)")
    common.add_argument("--seed", type=int, help="override [experiment] seed")
    common.add_argument("--out", metavar="DIR", help="override [experiment] out_dir")
    common.add_argument("--data-dir", metavar="DIR", help="override [experiment] data_dir")
    common.add_argument("--force", action="store_true", help="rebuild stale artifacts instead of failing")
    common.add_argument("--dry-run", action="store_true", help="validate and print the plan without computing")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="zskd", description="Zero-shot knowledge distillation experiments")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name, parents=[common])
        if name in ("train-student-kd", "gen-di", "gen-ci", "augment", "zskd", "finetune"):
            p.add_argument("--size", type=float, default=None,
                           help="transfer-set size in percent of the training set")
        if name == "gen-di":
            p.add_argument("--prior", choices=("class_similarity", "uniform"), default="class_similarity")
        if name == "zskd":
            p.add_argument("--source", choices=("di", "ci", "di_uniform"), default="di")
        if name in ("zskd", "finetune"):
            p.add_argument("--allow-mismatch", action="store_true",
                           help="distil even if the transfer set came from a different teacher")
        if name == "eval":
            p.add_argument("checkpoint")
        if name == "sweep":
            p.add_argument("--fractions", type=float, nargs="+")
            p.add_argument("--methods", nargs="+", choices=("DI", "CI", "real"))
    return parser


def _plan(args, cfg) -> list:
    size = getattr(args, "size", None)
    if args.command == "gen-di":
        from .pipeline import Pipeline
        s = size if size is not None else cfg["di"]["sizes"][0]
        lines = ["class,beta,count,lr,batch_size,iterations"]
        lines += [",".join(f"{v:g}" if isinstance(v, float) else str(v) for v in row)
                  for row in Pipeline(cfg).di_schedule(s)]
        return lines
    lines = [f"command: {args.command}", f"out_dir: {cfg.out_dir}", f"seed: {cfg.seed}"]
    if size is not None:
        lines.append(f"size: {size_key(size)}% ({n_samples(size)} samples)")
    return lines


def run(args) -> int:
    overrides = {}
    if args.seed is not None:
        overrides[("experiment", "seed")] = args.seed
    if args.out is not None:
        overrides[("experiment", "out_dir")] = args.out
    if args.data_dir is not None:
        overrides[("experiment", "data_dir")] = args.data_dir
    cfg = load_config(args.config, overrides)
    if args.dry_run:
        print("\n".join(_plan(args, cfg)))
        return EXIT_OK

    from .pipeline import Pipeline
    pipe = Pipeline(cfg, force=args.force)
    cmd = args.command
    size = getattr(args, "size", None)
    if cmd == "train-teacher":
        result = pipe.train_teacher()
    elif cmd == "train-student-ce":
        result = pipe.train_student_ce()
    elif cmd == "train-student-kd":
        result = pipe.train_student_kd(size)
    elif cmd == "extract-prior":
        pipe.extract_prior()
        result = {"artifact": str(pipe.path("prior.csv"))}
    elif cmd == "gen-di":
        result = {"artifact": str(pipe.gen_di(_size(size, cfg), args.prior))}
    elif cmd == "gen-ci":
        result = {"artifact": str(pipe.gen_ci(_size(size, cfg)))}
    elif cmd == "augment":
        result = {"artifact": str(pipe.augment(_size(size, cfg)))}
    elif cmd == "zskd":
        result = pipe.zskd(_size(size, cfg), args.source, args.allow_mismatch)
    elif cmd == "finetune":
        result = pipe.finetune(size, args.allow_mismatch)
    elif cmd == "eval":
        result = {"accuracy": pipe.evaluate(args.checkpoint)}
    elif cmd == "sweep":
        result = {"artifact": str(pipe.sweep(args.fractions, args.methods))}
    else:
        result = {"artifact": str(pipe.report())}
    for key in ("artifact", "final_acc", "best_acc", "accuracy"):
        if key in result and result[key] is not None:
            print(f"{key}: {result[key]}")
    return EXIT_OK


def _size(size, cfg) -> float:
    if size is None:
        raise ConfigError("--size is required for this command")
    if not 0 < size <= 100:
        raise ConfigError(f"--size must be a percentage in (0, 100], got {size}")
    return size


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s")
    try:
        return run(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ProvenanceError as exc:
        print(f"provenance error: {exc}", file=sys.stderr)
        return EXIT_PROVENANCE
    except NumericalError as exc:
        print(f"numerical divergence: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ZSKDError, ParameterError, FileNotFoundError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
