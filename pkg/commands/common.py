# ============================================================
# commands/common.py
# ============================================================

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np

from config import Config
from engine.attacks import AttackConfig
from engine.datasets import gen_synthetic_dataset, load_idx_dataset
from engine.defenses import DefenseSpec
from engine.errors import ConfigError
from engine.harness import CellError, tune_alpha
from engine.model import ArchConfig, ClassifierModel, Dataset, TrainConfig, load_model, split_holdout
from engine.unig import UniGConfig

log = logging.getLogger("eval")

RESERVOIR_SIZE = 512


# ============================================================
# Data
# ============================================================

@dataclass(frozen=True)
class DataSplit:
    train: Dataset
    heldout: Dataset

    def eval_set(self, n: int) -> Dataset:
        n = min(n, len(self.heldout)) if n > 0 else len(self.heldout)
        return self.heldout.subset(np.arange(n), f"{self.heldout.name}[:{n}]")

    def reservoir(self, n: int = RESERVOIR_SIZE) -> Dataset:
        n = min(n, len(self.train))
        return self.train.subset(np.arange(n), f"{self.train.name}/reservoir")


def load_dataset(config: Config) -> Dataset:
    if config["data.source"] == "idx":
        images, labels = config["data.images"], config["data.labels"]
        if not images or not labels:
            raise ConfigError("data.source = idx needs data.images and data.labels")
        return load_idx_dataset(Path(images), Path(labels))
    return gen_synthetic_dataset(
        classes=config["data.classes"],
        n=config["data.n"],
        image_side=config["data.side"],
        seed=config["data.seed"],
        noise=config["data.noise"],
    )


def load_split(config: Config) -> DataSplit:
    # the held-out set depends on the data only, never on model or eval seeds
    train, held = split_holdout(load_dataset(config), config["model.holdout"], config["data.seed"])
    return DataSplit(train, held)


# ============================================================
# Model
# ============================================================

def arch_config(config: Config, classes: int) -> ArchConfig:
    return ArchConfig(
        classes=classes,
        conv_channels=tuple(config["model.conv_channels"]),
        kernel=config["model.kernel"],
        stride=config["model.stride"],
        feature_dim=config["model.feature_dim"],
        target_accuracy=config["model.target_accuracy"],
    )


def train_config(config: Config) -> TrainConfig:
    return TrainConfig(
        seed=config["model.seed"],
        epochs=config["model.epochs"],
        lr=config["model.lr"],
        momentum=config["model.momentum"],
        batch_size=config["model.batch_size"],
        holdout_fraction=config["model.holdout"],
        split_seed=config["data.seed"],
    )


def model_from_config(config: Config) -> Tuple[ClassifierModel, str]:
    path = config["model.path"]
    if not path:
        raise ConfigError("model.path is required (train a model first)")
    return load_model(Path(path)), Path(path).stem


# ============================================================
# Defenses and attacks
# ============================================================

def unig_config(config: Config, alpha: Optional[float] = None) -> UniGConfig:
    if alpha is None:
        alpha = config["defense.alpha"]
    if alpha == "auto":
        raise ConfigError("defense.alpha = auto must be resolved against a model first")
    return UniGConfig(
        delta=config["defense.delta"],
        p=config["defense.p"],
        alpha=float(alpha),
        eps_norm=config["defense.eps_norm"],
        cascade_k=config["defense.cascade_k"],
        frozen_p=config["defense.frozen_p"],
    )


def tuned_alpha(config: Config, model: ClassifierModel, train: Dataset,
                kinds: Optional[Sequence[str]] = None) -> Optional[float]:
    """Run the alpha sweep when defense.alpha = auto and UniG is among the defenses."""
    kinds = kinds if kinds is not None else config["defense.kinds"]
    if config["defense.alpha"] != "auto" or "unig" not in kinds:
        return None
    base = unig_config(config, alpha=1.0)
    alpha, _table = tune_alpha(model, train, base, batch_size=config["eval.batch_size"],
                               seed=config["model.seed"])
    log.info(f"defense.alpha = auto resolved to {alpha:g}")
    return alpha


def defense_specs(
    config: Config,
    kinds: Optional[Sequence[str]] = None,
    alpha: Optional[float] = None,
) -> List[DefenseSpec]:
    single = config["defense.single_sample"]
    if single and config["defense.cascade_k"] < 1:
        raise ConfigError("defense.single_sample needs defense.cascade_k >= 1")
    kinds = kinds if kinds is not None else config["defense.kinds"]
    unig = unig_config(config, alpha) if "unig" in kinds else UniGConfig()
    return [
        DefenseSpec(kind=k, rnd_sigma=config["defense.rnd_sigma"], unig=unig,
                    single_sample=single and k == "unig")
        for k in kinds
    ]


def attack_configs(config: Config) -> List[AttackConfig]:
    budgets = config["eval.budgets"]
    return [
        AttackConfig(
            kind=kind,
            norm=config["attack.norm"],
            epsilon=config["attack.epsilon"],
            budget=max(budgets) if budgets else 0,
            targeted=config["attack.targeted"],
            p_init=config["attack.p_init"],
            simba_step=config["attack.simba_step"],
            simba_basis=config["attack.simba_basis"],
            nes_samples=config["attack.nes_samples"],
            nes_sigma=config["attack.nes_sigma"],
            nes_step=config["attack.nes_step"],
            bandits_prior_lr=config["attack.bandits_prior_lr"],
            bandits_exploration=config["attack.bandits_exploration"],
            bandits_tile=config["attack.bandits_tile"],
            bandits_fd_eta=config["attack.bandits_fd_eta"],
            bandits_step=config["attack.bandits_step"],
            freeze=config["attack.freeze"],
            batch_composition=config["attack.batch_composition"],
        )
        for kind in config["attack.kinds"]
    ]


# ============================================================
# Output
# ============================================================

def format_cell_errors(errors: Sequence[CellError]) -> str:
    width = max(len(e.cell) for e in errors)
    lines = [f"{'cell'.ljust(width)}  error", f"{'-' * width}  -----"]
    lines += [f"{e.cell.ljust(width)}  {e.error}" for e in errors]
    return "\n".join(lines)
