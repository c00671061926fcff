# engine/harness.py
"""
Evaluation protocol: clean accuracy, output distortion, and robust accuracy
of a defended model under each attack, over budgets and seeds.

Work is split into independent cells (defense, attack, seed). Each cell owns
its oracles, its random streams and its report slots; cells may run in a
process pool and are reduced in submission order.
"""
from __future__ import annotations

import logging
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
from tqdm import tqdm

from config import settings
from engine.attacks import ATTACK_KINDS, AttackConfig, run_attack
from engine.defenses import DefenseSpec, logit_diff, make_oracle
from engine.errors import ConfigError, InputDomainError, UndefinedMetricError
from engine.model import ClassifierModel, Dataset, forward_features, parameter_count
from engine.numerics import RngStream, batch_chunks, derive_seed, pairwise_cosine
from engine.unig import UniGConfig, unig_forward_features

log = logging.getLogger("eval")
sweep_log = logging.getLogger("sweep")

SWEEP_AXES: Tuple[str, ...] = (
    "delta", "p", "alpha", "batch_size", "square_size", "update_step", "rnd_sigma",
)

# stream keys
_CLEAN_KEY = 0xC1EA
_ORACLE_KEY = 0x0AC1
_ATTACK_KEY = 0xA77A


# ============================================================
# Types
# ============================================================

@dataclass
class EvalReport:
    model: str
    defense: str
    defense_params: str
    attack: str
    norm: str
    epsilon: float
    budget: int
    seed: int
    clean_acc: float
    robust_acc: float
    logit_diff: float
    universality: Optional[float]                       # None when fewer than 2 nonzero perturbations
    wall_time_s: Optional[float] = None
    robust_curve: List[Tuple[int, float]] = field(default_factory=list)   # (budget, robust acc)
    margin_curve: List[Tuple[int, float]] = field(default_factory=list)   # (queries, mean best margin)
    n_images: int = 0
    n_attacked: int = 0
    mean_queries: Optional[float] = None                # over images broken within `budget`
    sweep_axis: Optional[str] = None
    sweep_value: Optional[float] = None

    def to_dict(self) -> Dict[str, Any]:
        d = asdict(self)
        d["robust_curve"] = [[int(b), float(a)] for b, a in self.robust_curve]
        d["margin_curve"] = [[int(q), float(m)] for q, m in self.margin_curve]
        return d

    @classmethod
    def from_dict(cls, d: Dict[str, Any]) -> "EvalReport":
        d = dict(d)
        d["robust_curve"] = [(int(b), float(a)) for b, a in d.get("robust_curve", [])]
        d["margin_curve"] = [(int(q), float(m)) for q, m in d.get("margin_curve", [])]
        return cls(**d)


@dataclass(frozen=True)
class Cell:
    defense: DefenseSpec
    attack: AttackConfig
    seed: int
    batch_size: int = 128
    sweep_axis: Optional[str] = None
    sweep_value: Optional[float] = None

    @property
    def label(self) -> str:
        tag = f"{self.defense.kind}/{self.attack.label}/seed={self.seed}"
        if self.sweep_axis:
            tag += f"/{self.sweep_axis}={self.sweep_value:g}"
        return tag


@dataclass(frozen=True)
class CellError:
    cell: str
    error: str


@dataclass(frozen=True)
class EvalContext:
    model: ClassifierModel
    dataset: Dataset
    budgets: Tuple[int, ...]
    model_id: str = "model"
    reservoir: Optional[Dataset] = None
    timing: bool = False


@dataclass(frozen=True)
class SweepSpec:
    axis: str
    values: Tuple[float, ...]
    defense: DefenseSpec
    attack: AttackConfig
    budgets: Tuple[int, ...] = (100, 2500)
    seeds: Tuple[int, ...] = (0, 1, 2)
    batch_size: int = 128

    def __post_init__(self) -> None:
        if self.axis not in SWEEP_AXES:
            raise ConfigError(f"unknown sweep axis {self.axis!r} (expected one of {', '.join(SWEEP_AXES)})")
        if not self.values:
            raise ConfigError("sweep needs at least one value")
        if not self.seeds:
            raise ConfigError("sweep needs at least one seed")


# ============================================================
# One cell
# ============================================================

def _clean_predictions(ctx: EvalContext, defense: DefenseSpec, seed: int, batch_size: int) -> np.ndarray:
    oracle = make_oracle(defense, ctx.model, seed=derive_seed(seed, _CLEAN_KEY),
                         reservoir=ctx.reservoir)
    images = ctx.dataset.images
    preds = [np.argmax(oracle.defended_logits(images[rows]), axis=1)
             for rows in batch_chunks(len(images), batch_size)]
    return np.concatenate(preds) if preds else np.zeros(0, dtype=np.int64)


def _run_cell(ctx: EvalContext, cell: Cell) -> List[EvalReport]:
    started = time.perf_counter()
    data = ctx.dataset
    n = len(data)
    budgets = ctx.budgets
    top = budgets[-1]
    bs = cell.batch_size

    correct = _clean_predictions(ctx, cell.defense, cell.seed, bs) == data.labels
    clean_acc = float(correct.mean()) if n else 0.0
    ldiff = logit_diff(cell.defense, ctx.model, data, seed=cell.seed,
                       batch_size=bs, reservoir=ctx.reservoir)

    idx = np.flatnonzero(correct)
    success_query = np.zeros(idx.size, dtype=np.int64)
    success = np.zeros(idx.size, dtype=bool)
    traces: List[np.ndarray] = []
    perturbations: List[np.ndarray] = []
    checkpoints: Tuple[int, ...] = ()
    kind_no = ATTACK_KINDS.index(cell.attack.kind)

    for chunk_no, part in enumerate(batch_chunks(idx.size, bs)):
        rows = idx[part]
        oracle = make_oracle(cell.defense, ctx.model,
                             seed=derive_seed(cell.seed, _ORACLE_KEY, chunk_no),
                             budget=rows.size * top, reservoir=ctx.reservoir)
        acfg = replace(cell.attack, budget=top,
                       seed=derive_seed(cell.seed, _ATTACK_KEY, kind_no, chunk_no))
        run = run_attack(oracle, data.images[rows], data.labels[rows], acfg)
        success_query[part] = run.success_query
        success[part] = run.success
        traces.append(run.trace)
        perturbations.append(run.perturbation.reshape(rows.size, -1))
        checkpoints = run.checkpoints

    margin_curve: List[Tuple[int, float]] = []
    if traces:
        trace = np.concatenate(traces, axis=1)
        margin_curve = [(int(q), float(np.mean(trace[i]))) for i, q in enumerate(checkpoints)]

    universality: Optional[float] = None
    if perturbations:
        try:
            universality = pairwise_cosine(np.concatenate(perturbations, axis=0))
        except UndefinedMetricError:
            universality = None

    def robust_at(b: int) -> float:
        if n == 0:
            return 0.0
        broken = success & (success_query <= b)
        return float((idx.size - int(broken.sum())) / n)

    robust_curve = [(int(b), robust_at(b)) for b in budgets]
    wall = round(time.perf_counter() - started, 3) if ctx.timing else None

    reports: List[EvalReport] = []
    for b, acc in robust_curve:
        broken = success & (success_query <= b)
        reports.append(EvalReport(
            model=ctx.model_id,
            defense=cell.defense.kind,
            defense_params=cell.defense.params_str(),
            attack=cell.attack.label,
            norm=cell.attack.norm,
            epsilon=float(cell.attack.epsilon),
            budget=int(b),
            seed=int(cell.seed),
            clean_acc=clean_acc,
            robust_acc=acc,
            logit_diff=ldiff,
            universality=universality,
            wall_time_s=wall,
            robust_curve=list(robust_curve),
            margin_curve=list(margin_curve),
            n_images=n,
            n_attacked=int(idx.size),
            mean_queries=float(success_query[broken].mean()) if broken.any() else None,
            sweep_axis=cell.sweep_axis,
            sweep_value=cell.sweep_value,
        ))
    log.info(f"{cell.label}: clean={clean_acc:.3f} robust@{top}={robust_curve[-1][1]:.3f}")
    return reports


# ============================================================
# Runner
# ============================================================

_WORKER_CTX: Optional[EvalContext] = None


def _init_worker(ctx: EvalContext) -> None:
    global _WORKER_CTX
    _WORKER_CTX = ctx


def _guarded(ctx: EvalContext, cell: Cell):
    try:
        return _run_cell(ctx, cell)
    except Exception as e:
        return CellError(cell.label, f"{type(e).__name__}: {e}")


def _pool_task(cell: Cell):
    return _guarded(_WORKER_CTX, cell)


def _check_budgets(budgets: Sequence[int]) -> Tuple[int, ...]:
    budgets = tuple(int(b) for b in budgets)
    if not budgets:
        raise InputDomainError("at least one budget is required")
    if any(b < 0 for b in budgets):
        raise InputDomainError("budgets must be >= 0")
    if list(budgets) != sorted(budgets):
        raise InputDomainError(f"budgets must be sorted ascending (got {budgets})")
    return budgets


def run_cells(
    ctx: EvalContext, cells: Sequence[Cell], workers: int = 1
) -> Tuple[List[EvalReport], List[CellError]]:
    """Run every cell; reports come back in cell order, failures as CellError records."""
    workers = workers if workers > 0 else (os.cpu_count() or 1)
    workers = min(workers, max(1, len(cells)))
    bar = dict(total=len(cells), desc="cells", disable=not settings.progress)

    if workers == 1:
        results = [_guarded(ctx, c) for c in tqdm(cells, **bar)]
    else:
        with ProcessPoolExecutor(max_workers=workers, initializer=_init_worker,
                                 initargs=(ctx,)) as pool:
            results = list(tqdm(pool.map(_pool_task, cells), **bar))

    reports: List[EvalReport] = []
    errors: List[CellError] = []
    for r in results:
        if isinstance(r, CellError):
            log.error(f"{r.cell}: {r.error}")
            errors.append(r)
        else:
            reports.extend(r)
    return reports, errors


def eval_defense(
    model: ClassifierModel,
    defense: DefenseSpec,
    attack_cfgs: Sequence[AttackConfig],
    dataset: Dataset,
    budgets: Sequence[int],
    seeds: Sequence[int],
    *,
    batch_size: int = 128,
    workers: int = 1,
    reservoir: Optional[Dataset] = None,
    model_id: str = "model",
    timing: bool = False,
) -> Tuple[List[EvalReport], List[CellError]]:
    """
    One report per (attack, seed, budget). Only clean-correct images are
    attacked; misclassified ones count as non-robust at every budget, so
    robust accuracy never exceeds clean accuracy.
    """
    ctx = EvalContext(model, dataset, _check_budgets(budgets), model_id, reservoir, timing)
    cells = [Cell(defense, a, int(s), batch_size) for a in attack_cfgs for s in seeds]
    return run_cells(ctx, cells, workers)


# ============================================================
# Sweeps
# ============================================================

def apply_axis(spec: SweepSpec, value: float) -> Tuple[DefenseSpec, AttackConfig, int]:
    d, a, bs = spec.defense, spec.attack, spec.batch_size
    axis = spec.axis
    if axis == "delta":
        d = replace(d, unig=replace(d.unig, delta=float(value)))
    elif axis == "p":
        d = replace(d, unig=replace(d.unig, p=int(value)))
    elif axis == "alpha":
        d = replace(d, unig=replace(d.unig, alpha=float(value)))
    elif axis == "rnd_sigma":
        d = replace(d, rnd_sigma=float(value))
    elif axis == "batch_size":
        bs = int(value)
    elif axis == "square_size":
        a = replace(a, p_init=float(value))
    elif axis == "update_step":
        a = replace(a, nes_step=float(value), bandits_step=float(value))
    else:
        raise ConfigError(f"unknown sweep axis {axis!r}")
    if bs < 1:
        raise ConfigError(f"batch_size must be >= 1 (got {bs})")
    return d, a, bs


def run_sweep(
    spec: SweepSpec,
    model: ClassifierModel,
    dataset: Dataset,
    *,
    workers: int = 1,
    reservoir: Optional[Dataset] = None,
    model_id: str = "model",
    timing: bool = False,
) -> Tuple[List[EvalReport], List[CellError]]:
    """One report per (value, seed, budget), tagged with the axis value."""
    ctx = EvalContext(model, dataset, _check_budgets(spec.budgets), model_id, reservoir, timing)
    cells: List[Cell] = []
    for value in spec.values:
        d, a, bs = apply_axis(spec, value)
        cells += [Cell(d, a, int(s), bs, spec.axis, float(value)) for s in spec.seeds]
    sweep_log.info(f"{spec.axis}: {len(spec.values)} values x {len(spec.seeds)} seeds")
    return run_cells(ctx, cells, workers)


# ============================================================
# UniG diagnostics
# ============================================================

def _random_batches(n: int, batch_size: int, n_batches: int, seed: int):
    rng = RngStream(seed)
    for _ in range(n_batches):
        yield rng.permutation(n)[:batch_size]


def descent_rate(
    model: ClassifierModel,
    dataset: Dataset,
    cfg: UniGConfig,
    batch_size: int = 128,
    n_batches: int = 100,
    seed: int = 0,
) -> float:
    """Fraction of random batches whose unification loss strictly drops after the p updates."""
    if len(dataset) < 2:
        raise InputDomainError("descent_rate needs at least 2 images")
    f = forward_features(model, dataset.images)
    rng = RngStream(seed).spawn(1)
    wins = 0
    for i, idx in enumerate(_random_batches(len(dataset), batch_size, n_batches, seed)):
        _, state = unig_forward_features(model, f[idx], cfg, rng.spawn(i))
        wins += int(state.trace[-1] < state.trace[0])
    return wins / n_batches


def argmax_change_rate(
    model: ClassifierModel,
    dataset: Dataset,
    cfg: UniGConfig,
    batch_size: int = 128,
    seed: int = 0,
) -> float:
    """Fraction of images whose defended prediction differs from the vanilla one."""
    if len(dataset) == 0:
        raise InputDomainError("argmax_change_rate needs a non-empty dataset")
    f = forward_features(model, dataset.images)
    rng = RngStream(seed)
    changed = 0
    for i, rows in enumerate(batch_chunks(len(dataset), batch_size)):
        fb = f[rows]
        if fb.shape[0] < 2:
            continue
        _, state = unig_forward_features(model, fb, cfg, rng.spawn(i))
        changed += int(np.sum(np.argmax(state.logits, 1) != np.argmax(model.head(fb), 1)))
    return changed / len(dataset)


def tune_alpha(
    model: ClassifierModel,
    dataset: Dataset,
    base: UniGConfig,
    alphas: Sequence[float] = (0.01, 0.03, 0.1, 0.3, 1.0, 3.0, 10.0),
    batch_size: int = 128,
    n_batches: int = 20,
    min_descent: float = 0.95,
    max_change: float = 0.01,
    seed: int = 0,
) -> Tuple[float, List[Dict[str, float]]]:
    """
    Largest alpha whose descent rate is at least `min_descent` while changing
    at most `max_change` of the vanilla predictions. Falls back to the
    smallest candidate when none qualifies.
    """
    if not alphas:
        raise InputDomainError("tune_alpha needs candidate values")
    table: List[Dict[str, float]] = []
    best: Optional[float] = None
    for alpha in sorted(alphas):
        cfg = replace(base, alpha=float(alpha))
        rate = descent_rate(model, dataset, cfg, batch_size, n_batches, seed)
        change = argmax_change_rate(model, dataset, cfg, batch_size, seed)
        table.append({"alpha": float(alpha), "descent_rate": rate, "argmax_change": change})
        log.info(f"alpha={alpha:g} descent={rate:.3f} argmax_change={change:.4f}")
        if rate >= min_descent and change <= max_change:
            best = float(alpha)
    return (best if best is not None else float(min(alphas))), table


def _extractor_macs(model: ClassifierModel) -> int:
    c, h, w = model.input_shape
    macs = 0
    for layer in model.layers:
        if layer.kind == "conv":
            out_c, in_c, k, _ = layer.weight.shape
            h = (h + 2 * layer.padding - k) // layer.stride + 1
            w = (w + 2 * layer.padding - k) // layer.stride + 1
            macs += out_c * in_c * k * k * h * w
            c = out_c
        else:
            macs += int(layer.weight.size)
    return int(macs)


def model_overhead(model: ClassifierModel, cfg: UniGConfig, batch_size: int = 128) -> Dict[str, int]:
    """
    Parameter and per-image multiply-accumulate counts of the vanilla model
    and of the UniG forward. A is (batch_size, d); every update costs four
    head-sized products (defended logits, g, the softmax-Jacobian term and
    its projection back), plus one for the vanilla prediction, one for the
    final loss and one for the defended output.
    """
    head = model.d * model.classes
    vanilla_macs = _extractor_macs(model) + head
    unig_macs = _extractor_macs(model) + head * (3 + 4 * cfg.p)
    params = parameter_count(model)
    return {
        "params_vanilla": params,
        "params_unig": params + batch_size * model.d,
        "macs_vanilla": int(vanilla_macs),
        "macs_unig": int(unig_macs),
    }
