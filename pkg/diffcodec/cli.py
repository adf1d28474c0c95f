#!/usr/bin/env python3
"""
CLI entry point for diffcodec
"""

import argparse
import logging
import sys
from typing import List, Optional

from rich.console import Console
from rich.logging import RichHandler
from rich.table import Table

from . import harness
from .config import RunConfig, load_config
from .errors import ConfigError, DiffCodecError
from .metrics import CSV_COLUMNS

logger = logging.getLogger("diffcodec")

EXIT_OK = 0
EXIT_UNEXPECTED = 1
EXIT_USAGE = 2
EXIT_DATA = 4


def setup_logging(level: str) -> None:
    numeric = logging.getLevelName(level.upper())
    if not isinstance(numeric, int):
        raise ConfigError(f"unknown log level '{level}'")
    logger.handlers.clear()
    logger.addHandler(RichHandler(console=Console(stderr=True), show_path=False))
    logger.setLevel(numeric)


def resolve_config(args: argparse.Namespace) -> RunConfig:
    """Config file values with command-line flags layered on top"""
    config = load_config(args.config)
    if args.seed is not None:
        config = config.with_overrides("run", seed=args.seed)
    if args.rmax_bits is not None:
        config = config.with_overrides("budget", rmax_bits=float(args.rmax_bits), target_ratio=0.0)
    if args.target_ratio is not None:
        config = config.with_overrides("budget", target_ratio=float(args.target_ratio), rmax_bits=0.0)
    if getattr(args, "mode", None):
        config = config.with_overrides("run", mode=args.mode)
    if args.reset_per_image:
        config = config.with_overrides("ppo", reset_per_image=True)
    if args.policy_checkpoint is not None:
        config = config.with_overrides("paths", policy_checkpoint=args.policy_checkpoint)
    if args.checkpoint is not None:
        config = config.with_overrides("paths", checkpoint=args.checkpoint)
    if args.log_level is not None:
        config = config.with_overrides("run", log_level=args.log_level)
    return config


def print_table(title: str, columns, rows) -> None:
    table = Table(title=title)
    for column in columns:
        table.add_column(str(column))
    for row in rows:
        table.add_row(*(str(v) for v in row))
    Console().print(table)


def run_train(args, config: RunConfig) -> int:
    harness.cmd_train(config, args.train_dir)
    return EXIT_OK


def run_compress(args, config: RunConfig) -> int:
    result = harness.cmd_compress(config, args.image, args.output, mode=config.run.mode)
    print(f"{args.output}: {result.r_tot} bits ({result.mode}, budget {result.r_max:.0f})")
    return EXIT_OK


def run_decompress(args, config: RunConfig) -> int:
    output = harness.cmd_decompress(config, args.bitstream, args.output, seed=args.seed)
    print(f"wrote {output}")
    return EXIT_OK


def run_evaluate(args, config: RunConfig) -> int:
    result = harness.cmd_evaluate(config, args.originals, args.reconstructions, args.output)
    if result.rows:
        print_table(f"mean over {len(result.rows)} pairs", CSV_COLUMNS,
                    [[f"{v:.4f}" for v in result.means()]])
    if result.unpaired:
        logger.error("unpaired files: %s", ", ".join(result.unpaired))
        return EXIT_DATA
    return EXIT_OK


def run_rd_sweep(args, config: RunConfig) -> int:
    modes = tuple(args.modes.split(",")) if args.modes else ("ppo", "uniform")
    records = harness.cmd_rd_sweep(config, args.image_dir, args.budgets, args.output, modes=modes)
    print_table("rate-distortion", ("image", "method", "bpp", "psnr_db", "utility"),
                [[r.image_id, r.method, f"{r.bpp:.4f}", f"{r.report.psnr_db:.2f}",
                  f"{r.report.utility:.4f}"] for r in records])
    return EXIT_OK


def run_compare(args, config: RunConfig) -> int:
    comparison = harness.cmd_compare(config, args.image_dir, args.output)
    r = comparison.result
    print_table(f"ppo against uniform over {len(comparison.pairs)} images",
                ("mean ppo", "mean uniform", "wins", "losses", "ties", "p_value"),
                [[f"{r.mean_ppo:.5f}", f"{r.mean_uniform:.5f}", r.wins, r.losses, r.ties, f"{r.p_value:.4g}"]])
    return EXIT_OK


def run_make_data(args, config: RunConfig) -> int:
    paths = harness.cmd_make_data(args.output_dir, args.count, size=args.size, seed=config.seed)
    print(f"wrote {len(paths)} images to {args.output_dir}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="Run configuration file")
    common.add_argument("--seed", type=int, help="Seed for every random generator")
    budget = common.add_mutually_exclusive_group()
    budget.add_argument("--rmax-bits", type=float, help="Bit budget per image")
    budget.add_argument("--target-ratio", type=float, help="Budget as a 24-bit compression ratio")
    common.add_argument("--reset-per-image", action="store_true",
                        help="Start every image from a fresh policy")
    common.add_argument("--policy-checkpoint", help="Allocator checkpoint to warm-start from and save to")
    common.add_argument("--checkpoint", help="Codec checkpoint path")
    common.add_argument("--log-level", help="DEBUG, INFO, WARNING or ERROR")

    parser = argparse.ArgumentParser(
        prog="diffcodec",
        description="diffcodec - diffusion image codec with learned block bit allocation",
    )
    commands = parser.add_subparsers(dest="command", required=True)

    train = commands.add_parser("train", parents=[common], help="Train encoder, entropy model and denoiser")
    train.add_argument("--train-dir", help="Directory of training images")
    train.set_defaults(handler=run_train)

    compress = commands.add_parser("compress", parents=[common], help="Compress one image")
    compress.add_argument("image")
    compress.add_argument("output")
    compress.add_argument("--mode", help="ppo, uniform or uniform-1..uniform-K")
    compress.set_defaults(handler=run_compress)

    decompress = commands.add_parser("decompress", parents=[common], help="Reconstruct an image")
    decompress.add_argument("bitstream")
    decompress.add_argument("output")
    decompress.set_defaults(handler=run_decompress)

    evaluate = commands.add_parser("evaluate", parents=[common], help="Score reconstructions")
    evaluate.add_argument("originals")
    evaluate.add_argument("reconstructions")
    evaluate.add_argument("output", help="Metrics CSV")
    evaluate.set_defaults(handler=run_evaluate)

    sweep = commands.add_parser("rd-sweep", parents=[common], help="Rate-distortion sweep")
    sweep.add_argument("image_dir")
    sweep.add_argument("output", help="RD CSV")
    sweep.add_argument("--budgets", type=float, nargs="+", required=True, help="Bit budgets")
    sweep.add_argument("--modes", help="Comma-separated modes, default ppo,uniform")
    sweep.set_defaults(handler=run_rd_sweep)

    compare = commands.add_parser("compare", parents=[common],
                                  help="Paired sign test of ppo against the best fitting uniform level")
    compare.add_argument("image_dir")
    compare.add_argument("output", help="Per-image utilities CSV")
    compare.set_defaults(handler=run_compare)

    data = commands.add_parser("make-data", parents=[common], help="Write synthetic toy images")
    data.add_argument("output_dir")
    data.add_argument("--count", type=int, default=20)
    data.add_argument("--size", type=int, default=64)
    data.set_defaults(handler=run_make_data)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    """Main CLI entry point"""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE

    try:
        config = resolve_config(args)
        setup_logging(config.run.log_level)
        return args.handler(args, config)
    except DiffCodecError as exc:
        if not logger.handlers:
            setup_logging("INFO")
        logger.error("%s", exc)
        return exc.exit_code
    except KeyboardInterrupt:
        logger.error("interrupted")
        return EXIT_UNEXPECTED
    except Exception:
        logger.exception("unexpected failure")
        return EXIT_UNEXPECTED


if __name__ == "__main__":
    sys.exit(main())
