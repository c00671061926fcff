# ============================================================
# commands/report_cmd.py
# ============================================================

from __future__ import annotations

import logging
from collections import defaultdict
from pathlib import Path
from typing import Dict, List, Sequence, Tuple

import numpy as np

from config import Config
from engine.errors import ConfigError
from engine.harness import EvalReport, model_overhead
from engine.reports import read_report_json, write_report
from storage import RunStore

from commands.common import model_from_config, unig_config

log = logging.getLogger("eval")


def summary_table(reports: Sequence[EvalReport]) -> str:
    """Seed-averaged clean / robust accuracy and logit-diff per (defense, attack, budget)."""
    groups: Dict[Tuple[str, str, str, int], List[EvalReport]] = defaultdict(list)
    for r in reports:
        groups[(r.defense, r.defense_params, r.attack, r.budget)].append(r)

    header = f"{'defense':<28} {'attack':<14} {'budget':>6} {'clean':>7} {'robust':>7} {'ldiff':>8} {'seeds':>5}"
    lines = [header, "-" * len(header)]
    for (defense, params, attack, budget), rs in groups.items():
        name = f"{defense}({params})" if params else defense
        lines.append(
            f"{name[:28]:<28} {attack:<14} {budget:>6} "
            f"{np.mean([r.clean_acc for r in rs]) * 100:>7.2f} "
            f"{np.mean([r.robust_acc for r in rs]) * 100:>7.2f} "
            f"{np.mean([r.logit_diff for r in rs]):>8.4f} {len(rs):>5}"
        )
    return "\n".join(lines)


def cmd_report(config: Config) -> int:
    src = config["out.from"]
    if not src:
        raise ConfigError("report needs out.from (a run directory or report.json)")
    src_path = Path(src)
    if src_path.is_dir():
        failed = RunStore.load(src_path).get_cell_errors()
        if failed:
            log.warning(f"{src_path} recorded {len(failed)} failed cells; their rows are missing")
        src_path = src_path / "report.json"

    reports = read_report_json(src_path)
    store = RunStore.open("report", config)
    if reports:
        write_report(reports, store.path, config["out.formats"])
        print(summary_table(reports))

    if config["model.path"]:
        model, model_id = model_from_config(config)
        # alpha does not enter the cost
        ov = model_overhead(model, unig_config(config, alpha=1.0), config["eval.batch_size"])
        print(f"\n[overhead] {model_id} (batch {config['eval.batch_size']})")
        print(f"  params  vanilla={ov['params_vanilla']:,}  unig={ov['params_unig']:,}")
        print(f"  MACs/img vanilla={ov['macs_vanilla']:,}  unig={ov['macs_unig']:,}")

    store.set_status("ok")
    return 0


def run(config: Config) -> int:
    return cmd_report(config)


# ============================================================
# Setup
# ============================================================

def setup(subparsers, parent) -> None:
    p = subparsers.add_parser("report", parents=[parent],
                              help="re-emit CSV/curves from a run's report.json and summarize")
    p.add_argument("--from", dest="report_from", help="run directory or report.json")
    p.set_defaults(handler=run)
