# ============================================================
# commands/sweep_cmd.py
# ============================================================

from __future__ import annotations

import logging
from dataclasses import asdict
from typing import List

from config import Config
from engine.errors import ConfigError
from engine.harness import SWEEP_AXES, CellError, EvalReport, SweepSpec, run_sweep
from engine.reports import write_report, write_sweep_table
from storage import RunStore

from commands.common import (
    attack_configs,
    defense_specs,
    format_cell_errors,
    load_split,
    model_from_config,
    tuned_alpha,
)

log = logging.getLogger("sweep")

# defense-parameter axes only make sense for their own defense
_AXIS_DEFENSE = {"delta": "unig", "p": "unig", "alpha": "unig", "rnd_sigma": "rnd"}


def cmd_sweep(config: Config) -> int:
    axis = config["eval.axis"]
    values = tuple(config["eval.values"])
    if axis not in SWEEP_AXES:
        raise ConfigError(f"unknown sweep axis {axis!r} (expected one of {', '.join(SWEEP_AXES)})")
    if not values:
        raise ConfigError("sweep needs --values")

    kinds = list(config["defense.kinds"])
    if axis in _AXIS_DEFENSE:
        kinds = [k for k in kinds if k == _AXIS_DEFENSE[axis]] or [_AXIS_DEFENSE[axis]]

    model, model_id = model_from_config(config)
    attacks = attack_configs(config)
    store = RunStore.open("sweep", config)

    split = load_split(config)
    defenses = defense_specs(config, kinds, tuned_alpha(config, model, split.train, kinds))
    data = split.eval_set(config["data.eval_n"])
    reservoir = split.reservoir() if any(d.single_sample for d in defenses) else None

    reports: List[EvalReport] = []
    errors: List[CellError] = []
    for defense in defenses:
        for attack in attacks:
            spec = SweepSpec(
                axis=axis,
                values=values,
                defense=defense,
                attack=attack,
                budgets=tuple(config["eval.budgets"]),
                seeds=tuple(config["eval.seeds"]),
                batch_size=config["eval.batch_size"],
            )
            r, e = run_sweep(spec, model, data, workers=config["eval.workers"],
                             reservoir=reservoir, model_id=model_id,
                             timing=config["out.timing"])
            reports += r
            errors += e

    if reports:
        print(f"[sweep] table: {write_sweep_table(reports, store.path)}")
        write_report(reports, store.path, config["out.formats"])

    store.set_cell_errors([asdict(e) for e in errors])
    if errors:
        print(format_cell_errors(errors))
        store.set_status("failed")
        return 1
    store.set_status("ok")
    return 0


def run(config: Config) -> int:
    return cmd_sweep(config)


# ============================================================
# Setup
# ============================================================

def setup(subparsers, parent) -> None:
    p = subparsers.add_parser("sweep", parents=[parent],
                              help="sweep one parameter axis over values and seeds")
    p.add_argument("--axis", help=f"one of: {', '.join(SWEEP_AXES)}")
    p.add_argument("--values", help="comma-separated axis values")
    p.add_argument("--seeds", help="comma-separated seeds")
    p.set_defaults(handler=run)
