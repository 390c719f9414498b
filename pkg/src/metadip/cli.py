"""Command line entry point: ``metadip <command> [--config FILE] [--seed N] [--out-dir DIR]``.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import logging
import sys

from . import harness
from .config import load_config
from .errors import ConfigError, DataError, IncompatibleCheckpointError, MetaDIPError, RegistryError

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="INI configuration file (defaults apply to missing keys)")
    p.add_argument("--seed", type=int, help="master seed; overrides [run] seed")
    p.add_argument("--out-dir", default="out", help="directory for all outputs")
    p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE", help="override one config value")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="metadip", description="Meta-learned Deep Image Prior reconstructions")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("meta-train", help="meta-learn a DIP (or SIREN) initialization on denoising tasks")
    _common(p)

    p = sub.add_parser("solve", help="reconstruct one image with one method")
    _common(p)
    p.add_argument("--method", default="metadip")
    p.add_argument("--problem", choices=("denoise", "cs", "cpr"))
    p.add_argument("--ratio", type=float, help="m/n for compressive problems")
    p.add_argument("--sigma", type=float, help="noise std on the 0-255 scale")
    p.add_argument("--steps", type=int, help="fitting iterations (DIP methods)")
    p.add_argument("--checkpoint", help="checkpoint for meta methods; overrides [methods]")
    src = p.add_mutually_exclusive_group()
    src.add_argument("--input", help="ground-truth image to measure (PNG/BMP)")
    src.add_argument("--measurement", help="measurement file written by a previous solve (.npz)")

    for name, text in (
        ("benchmark", "run every method on every task and problem"),
        ("gridsearch", "3x3x3 PnP-ADMM hyperparameter search"),
        ("convergence", "NMSE-vs-iteration curves on one task"),
    ):
        p = sub.add_parser(name, help=text)
        _common(p)
    return parser


def _apply_overrides(cfg, args) -> None:
    for item in args.set:
        key, sep, value = item.partition("=")
        section, dot, name = key.partition(".")
        if not sep or not dot:
            raise ConfigError(f"--set expects SECTION.KEY=VALUE, got {item!r}")
        cfg.set(section.strip(), name.strip(), value.strip())
    if args.seed is not None:
        cfg.set("run", "seed", str(args.seed))
    if getattr(args, "checkpoint", None):
        cfg.set("methods", "siren_checkpoint" if args.method == "metasiren" else "checkpoint", args.checkpoint)
    for flag, section, key in (("problem", "problem", "kind"), ("ratio", "problem", "ratio"), ("sigma", "problem", "sigma")):
        value = getattr(args, flag, None)
        if value is not None:
            cfg.set(section, key, str(value))


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config)
        _apply_overrides(cfg, args)
        if args.command == "meta-train":
            ckpt = harness.run_meta_train(cfg, args.out_dir)
            print(f"checkpoint written to {ckpt}")
        elif args.command == "solve":
            outcome = harness.run_solve(
                cfg,
                args.out_dir,
                args.method,
                harness.problem_from_config(cfg),
                input_path=args.input,
                measurement_path=args.measurement,
                steps=args.steps,
            )
            if outcome.psnr is not None:
                print(f"PSNR {outcome.psnr:.2f} dB")
            print(f"reconstruction written to {outcome.image_path}")
        elif args.command == "benchmark":
            report = harness.run_benchmark(cfg, args.out_dir)
            print(report.table())
        elif args.command == "gridsearch":
            best, _ = harness.run_gridsearch(cfg, args.out_dir)
            print(f"best: strength={best.strength:g} rho={best.rho:g} iterations={best.iterations}")
        elif args.command == "convergence":
            harness.run_convergence(cfg, args.out_dir)
            print(f"curves written to {args.out_dir}")
    except (ConfigError, RegistryError, DataError) as exc:
        print(f"metadip: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except IncompatibleCheckpointError as exc:
        print(f"metadip: incompatible checkpoint: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (MetaDIPError, RuntimeError, OSError, ValueError) as exc:
        print(f"metadip: failed: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
