# ============================================================
# commands/train_cmd.py
# ============================================================

from __future__ import annotations

import hashlib
import logging

from config import Config
from engine.model import accuracy, parameter_count, save_model, split_holdout, train_classifier
from storage import RunStore

from commands.common import arch_config, load_dataset, train_config

log = logging.getLogger("train")


def cmd_train(config: Config) -> int:
    store = RunStore.open("train", config)
    dataset = load_dataset(config)
    tcfg = train_config(config)

    log.info(f"training on {dataset.name} ({len(dataset)} images, {dataset.classes} classes)")
    model = train_classifier(dataset, arch_config(config, dataset.classes), tcfg)
    save_model(model, store.model_path)

    # same split train_classifier used
    train, held = split_holdout(dataset, tcfg.holdout_fraction, tcfg.holdout_seed)
    record = {
        "run_id": store.run_id,
        "model": str(store.model_path),
        "sha256": hashlib.sha256(store.model_path.read_bytes()).hexdigest(),
        "heldout_acc": round(accuracy(model, held), 6),
        "train_acc": round(accuracy(model, train), 6),
        "params": parameter_count(model),
        "classes": model.classes,
        "feature_dim": model.d,
    }
    print(store.write_metrics_line(record))
    store.set_status("ok")
    return 0


def run(config: Config) -> int:
    return cmd_train(config)


# ============================================================
# Setup
# ============================================================

def setup(subparsers, parent) -> None:
    p = subparsers.add_parser("train", parents=[parent],
                              help="train the classifier and write model.ungw")
    p.set_defaults(handler=run)
