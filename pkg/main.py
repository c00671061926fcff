from __future__ import annotations
from config import __version__

print(f"BOOT: unig-bench starting — version {__version__}")

import argparse
import importlib
import logging
import sys
import traceback
import warnings
from typing import Dict, List, Optional

from config import parse_flag_overrides, resolve_config, settings
from engine.errors import (
    ConfigError,
    DegenerateBatchWarning,
    FormatError,
    InputDomainError,
    TrainingFailure,
)

EXIT_CELL_ERRORS = 1
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_TRAINING = 4

COMMANDS = (
    "commands.train_cmd",
    "commands.evaluate_cmd",
    "commands.sweep_cmd",
    "commands.report_cmd",
)


# ----------------------------
# Always print crashes
# ----------------------------
def _excepthook(exc_type, exc, tb):
    traceback.print_exception(exc_type, exc, tb)
    sys.exit(1)

sys.excepthook = _excepthook


# ----------------------------
# Logging
# ----------------------------
def _setup_logging() -> None:
    logging.basicConfig(
        level=getattr(logging, settings.log_level, logging.INFO),
        format="[%(name)s] %(message)s",
        stream=sys.stderr,
    )
    # logged by the defense itself
    warnings.simplefilter("ignore", DegenerateBatchWarning)


# ----------------------------
# Argument parsing + command loading
# ----------------------------
def build_parser() -> argparse.ArgumentParser:
    parent = argparse.ArgumentParser(add_help=False, allow_abbrev=False)
    parent.add_argument("--config", help="key = value config file")
    parent.add_argument("--seed", type=int, help="model.seed for train, eval.seeds otherwise")
    parent.add_argument("--out", help="output root (UNIG_OUT wins when set)")
    parent.add_argument("--workers", type=int, help="parallel cells (0 = one per core)")

    parser = argparse.ArgumentParser(
        prog="unig-bench",
        description="Gradient-unifying defense against score-based query attacks.",
        epilog="Any config key can be given as --ns.key VALUE, e.g. --defense.delta 0.3",
        allow_abbrev=False,
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        importlib.import_module(name).setup(sub, parent)
    return parser


def flags_from_args(ns: argparse.Namespace, extra: List[str]) -> Dict[str, str]:
    flags = parse_flag_overrides(extra)
    if ns.seed is not None:
        if ns.command == "train":
            flags["model.seed"] = str(ns.seed)
        else:
            flags["eval.seeds"] = str(ns.seed)
    if ns.out:
        flags["out.dir"] = ns.out
    if ns.workers is not None:
        flags["eval.workers"] = str(ns.workers)
    for attr, key in (("axis", "eval.axis"), ("values", "eval.values"),
                      ("seeds", "eval.seeds"), ("report_from", "out.from")):
        val = getattr(ns, attr, None)
        if val:
            flags[key] = val
    return flags


def main(argv: Optional[List[str]] = None) -> int:
    _setup_logging()
    parser = build_parser()
    ns, extra = parser.parse_known_args(argv)

    try:
        config = resolve_config(ns.config, flags_from_args(ns, extra))
        return int(ns.handler(config))
    except TrainingFailure as e:
        print(f"[train] {e}", file=sys.stderr)
        return EXIT_TRAINING
    except FormatError as e:
        print(f"[error] {e}", file=sys.stderr)
        return EXIT_IO
    except (ConfigError, InputDomainError) as e:
        print(f"[config] {e}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as e:
        print(f"[error] {e}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
