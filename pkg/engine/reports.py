# engine/reports.py
from __future__ import annotations

import csv
import json
import logging
from pathlib import Path
from typing import Dict, Iterable, List, Sequence

from engine.errors import FormatError, InputDomainError
from engine.harness import EvalReport

log = logging.getLogger("store")

CSV_COLUMNS = (
    "model", "defense", "defense_params", "attack", "norm", "epsilon", "budget",
    "seed", "clean_acc", "robust_acc", "logit_diff", "universality", "wall_time_s",
)
SWEEP_COLUMNS = ("axis", "value") + CSV_COLUMNS
REPORT_FORMATS = ("csv", "json", "curves")
JSON_VERSION = 1


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return format(v, ".10g")
    return str(v)


def _row(r: EvalReport, columns: Sequence[str]) -> Dict[str, str]:
    d = r.to_dict()
    d["axis"] = r.sweep_axis
    d["value"] = r.sweep_value
    return {c: _fmt(d[c]) for c in columns}


def _write_csv(path: Path, reports: Iterable[EvalReport], columns: Sequence[str]) -> Path:
    with path.open("w", encoding="utf-8", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(columns), lineterminator="\n")
        writer.writeheader()
        for r in reports:
            writer.writerow(_row(r, columns))
    return path


def _write_json(path: Path, reports: Sequence[EvalReport]) -> Path:
    doc = {"version": JSON_VERSION, "reports": [r.to_dict() for r in reports]}
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def _write_curves(path: Path, reports: Sequence[EvalReport]) -> Path:
    """
    One block per (defense, params, attack, seed, sweep value): a `#` header
    line, then `query margin` lines. Blocks are separated by two blank lines.
    """
    seen = set()
    blocks: List[str] = []
    for r in reports:
        key = (r.defense, r.defense_params, r.attack, r.seed, r.sweep_axis, r.sweep_value)
        if key in seen or not r.margin_curve:
            continue
        seen.add(key)
        head = (f"# defense={r.defense} params={r.defense_params or '-'} "
                f"attack={r.attack} norm={r.norm} seed={r.seed}")
        if r.sweep_axis:
            head += f" {r.sweep_axis}={_fmt(r.sweep_value)}"
        lines = [head] + [f"{q} {_fmt(m)}" for q, m in r.margin_curve]
        blocks.append("\n".join(lines))
    path.write_text("\n\n\n".join(blocks) + ("\n" if blocks else ""), encoding="utf-8")
    return path


def write_report(
    reports: Sequence[EvalReport],
    out_dir: Path,
    formats: Sequence[str] = REPORT_FORMATS,
) -> Dict[str, Path]:
    """Write report.csv / report.json / curves.txt into out_dir; returns {format: path}."""
    if not reports:
        raise InputDomainError("write_report needs at least one report")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    written: Dict[str, Path] = {}
    for fmt in formats:
        if fmt == "csv":
            written[fmt] = _write_csv(out_dir / "report.csv", reports, CSV_COLUMNS)
        elif fmt == "json":
            written[fmt] = _write_json(out_dir / "report.json", reports)
        elif fmt == "curves":
            written[fmt] = _write_curves(out_dir / "curves.txt", reports)
        else:
            raise InputDomainError(f"unknown report format {fmt!r}")
    log.info(f"wrote {', '.join(written)} for {len(reports)} reports to {out_dir}")
    return written


def write_sweep_table(reports: Sequence[EvalReport], out_dir: Path) -> Path:
    """Tidy long-format table: axis, value, then the report columns."""
    if not reports:
        raise InputDomainError("write_sweep_table needs at least one report")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    return _write_csv(out_dir / "sweep.csv", reports, SWEEP_COLUMNS)


def read_report_json(path: Path) -> List[EvalReport]:
    text = Path(path).read_text(encoding="utf-8")
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise FormatError(f"{path}: invalid JSON: {e.msg}", e.pos)
    if not isinstance(doc, dict) or not isinstance(doc.get("reports"), list):
        raise FormatError(f"{path}: missing 'reports' list", 0)
    if doc.get("version") != JSON_VERSION:
        raise FormatError(f"{path}: unsupported report version {doc.get('version')!r}", 0)
    try:
        return [EvalReport.from_dict(d) for d in doc["reports"]]
    except TypeError as e:
        raise FormatError(f"{path}: malformed report entry ({e})", 0)
