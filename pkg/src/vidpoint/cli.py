"""``vidpoint`` command line.

Exit codes: 0 success, 1 configuration or other error, 2 missing
artifact, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import harness
from .errors import ConfigError, MissingArtifactError, NumericalError, VidpointError

EXIT_OK, EXIT_CONFIG, EXIT_MISSING, EXIT_NUMERIC = 0, 1, 2, 3
COMMANDS = ("gen-data", "train-viewnet", "train-encoder", "eval", "bench")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="vidpoint")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", type=Path, help="YAML run config (defaults if omitted)")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--out", type=Path, default=Path("runs/default"))
    p.add_argument("--ablate", choices=harness.ABLATIONS)
    p.add_argument("--oracle", action="store_true",
                   help="eval only: score oracle embeddings instead of a checkpoint")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def run(args) -> dict:
    cfg = harness.load_config(args.config) if args.config else harness.config_from_dict({})
    if args.seed is not None:
        cfg = harness.with_seed(cfg, args.seed)
    if args.ablate and args.command not in ("train-encoder", "eval"):
        raise ConfigError(f"--ablate does not apply to {args.command}")
    if args.oracle and args.command != "eval":
        raise ConfigError("--oracle applies to eval only")
    out = args.out
    if args.command == "gen-data":
        return harness.cmd_gen_data(cfg, out)
    if args.command == "bench":
        return harness.cmd_bench(cfg, out)
    if not out.is_dir():
        raise MissingArtifactError(f"output directory {out} does not exist; run gen-data")
    if args.command == "train-viewnet":
        return harness.cmd_train_viewnet(cfg, out)
    if args.command == "train-encoder":
        return harness.cmd_train_encoder(cfg, out, args.ablate)
    return harness.cmd_eval(cfg, out, args.ablate, args.oracle)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        result = run(args)
    except ConfigError as e:
        print(f"vidpoint {args.command}: [config] {e}", file=sys.stderr)
        return EXIT_CONFIG
    except MissingArtifactError as e:
        print(f"vidpoint {args.command}: [missing] {e}", file=sys.stderr)
        return EXIT_MISSING
    except NumericalError as e:
        print(f"vidpoint {args.command}: [numeric] {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except VidpointError as e:
        print(f"vidpoint {args.command}: [{type(e).__name__}] {e}", file=sys.stderr)
        return EXIT_CONFIG
    if args.command in ("eval", "bench"):
        print(json.dumps(result, indent=2, sort_keys=True))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
