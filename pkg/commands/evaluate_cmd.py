# ============================================================
# commands/evaluate_cmd.py
# ============================================================

from __future__ import annotations

import logging
from dataclasses import asdict
from typing import List

from config import Config
from engine.harness import CellError, EvalReport, eval_defense
from engine.reports import write_report
from storage import RunStore

from commands.common import (
    attack_configs,
    defense_specs,
    format_cell_errors,
    load_split,
    model_from_config,
    tuned_alpha,
)

log = logging.getLogger("eval")


def cmd_evaluate(config: Config) -> int:
    model, model_id = model_from_config(config)
    attacks = attack_configs(config)
    store = RunStore.open("evaluate", config)

    split = load_split(config)
    defenses = defense_specs(config, alpha=tuned_alpha(config, model, split.train))
    data = split.eval_set(config["data.eval_n"])
    reservoir = split.reservoir() if any(d.single_sample for d in defenses) else None
    log.info(f"{len(defenses)} defenses x {len(attacks)} attacks x "
             f"{len(config['eval.seeds'])} seeds on {len(data)} images")

    reports: List[EvalReport] = []
    errors: List[CellError] = []
    for defense in defenses:
        r, e = eval_defense(
            model, defense, attacks, data,
            budgets=config["eval.budgets"],
            seeds=config["eval.seeds"],
            batch_size=config["eval.batch_size"],
            workers=config["eval.workers"],
            reservoir=reservoir,
            model_id=model_id,
            timing=config["out.timing"],
        )
        reports += r
        errors += e

    if reports:
        for fmt, path in write_report(reports, store.path, config["out.formats"]).items():
            print(f"[eval] {fmt}: {path}")

    store.set_cell_errors([asdict(e) for e in errors])
    if errors:
        print(format_cell_errors(errors))
        store.set_status("failed")
        return 1
    store.set_status("ok")
    return 0


def run(config: Config) -> int:
    return cmd_evaluate(config)


# ============================================================
# Setup
# ============================================================

def setup(subparsers, parent) -> None:
    p = subparsers.add_parser("evaluate", parents=[parent],
                              help="evaluate defenses under every configured attack")
    p.set_defaults(handler=run)
