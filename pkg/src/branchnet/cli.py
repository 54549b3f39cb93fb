"""``branchnet`` command line: train / eval / impact / bench / gen-data."""

import argparse
import json
import logging
import sys

from . import _env, kernels

EXIT_OK = 0
EXIT_FAILED = 1
EXIT_CONFIG = 2
EXIT_BUSY = 3


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, help="YAML experiment config (may 'extends' a preset)")
    common.add_argument("--out", required=True, help="output directory (one run per directory)")
    common.add_argument("--seed", type=int, help="run only this seed instead of the config's list")
    common.add_argument("--device", default="cpu", choices=["cpu"])
    common.add_argument("--threads", type=int, help="BLAS/numba threads (forced to 1 in deterministic mode)")
    common.add_argument("--kernels", choices=["numba", "numpy"], help="override BRANCHNET_KERNELS")
    common.add_argument("--log-level", default="INFO")

    parser = argparse.ArgumentParser(prog="branchnet", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("train", parents=[common], help="train and write checkpoints + metrics.csv")
    for name, text in (
        ("eval", "evaluate a checkpoint (or a fresh init) and write metrics.csv"),
        ("impact", "inside-impact sweep, writes impact.csv"),
        ("bench", "inference timing, writes timing.csv"),
    ):
        p = sub.add_parser(name, parents=[common], help=text)
        p.add_argument("--checkpoint", help="model file; '{seed}' is replaced per seed")
    sub.add_parser("gen-data", parents=[common], help="write the configured dataset as tensor files")
    return parser


def _emit_error(rec: dict) -> None:
    print(json.dumps(rec), file=sys.stderr)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=getattr(logging, str(args.log_level).upper(), logging.INFO),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    if args.kernels:
        kernels.use(args.kernels)
    if _env.deterministic():
        _env.set_threads(1)
    elif args.threads:
        _env.set_threads(args.threads)

    # heavy imports after the thread settings
    from .config import ConfigError, parse_config
    from .runner import RunDirBusy, error_record, run

    try:
        cfg = parse_config(args.config)
        if args.seed is not None:
            cfg.seeds = [args.seed]
    except ConfigError as exc:
        _emit_error(error_record(exc, args.command))
        return EXIT_CONFIG
    try:
        run(args.command, cfg, args.out, getattr(args, "checkpoint", None))
    except RunDirBusy as exc:
        _emit_error(error_record(exc, args.command))
        return EXIT_BUSY
    except ConfigError as exc:
        _emit_error(error_record(exc, args.command))
        return EXIT_CONFIG
    except Exception as exc:
        logging.getLogger("branchnet").debug("run failed", exc_info=True)
        _emit_error(error_record(exc, args.command))
        return EXIT_FAILED
    return EXIT_OK


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
