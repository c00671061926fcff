import csv
import json

import numpy as np
import pytest

import config
from commands.common import defense_specs, load_split, train_config, tuned_alpha, unig_config
from config import Settings, build_config, parse_flag_overrides
from engine.errors import ConfigError
from main import EXIT_CONFIG, EXIT_IO, EXIT_TRAINING, main
from storage import RunStore

SMALL_DATA = ["--data.classes", "2", "--data.n", "60", "--data.side", "8",
              "--model.conv_channels", "2", "--model.feature_dim", "4", "--eval.workers", "1"]


@pytest.fixture(autouse=True)
def no_env_out(monkeypatch):
    monkeypatch.setattr(config, "settings", Settings(None, 1, "INFO", False))


def last_json_line(capsys):
    return json.loads(capsys.readouterr().out.strip().splitlines()[-1])


@pytest.fixture
def trained(tmp_path, capsys):
    rc = main(["train", "--out", str(tmp_path / "t"), "--model.epochs", "0", *SMALL_DATA])
    assert rc == 0
    return last_json_line(capsys)


def run_dir(root, command):
    dirs = list(root.glob(f"{command}-*"))
    assert len(dirs) == 1
    return dirs[0]


class TestTrain:
    def test_writes_model_metrics_and_config(self, tmp_path, trained):
        out = run_dir(tmp_path / "t", "train")
        assert (out / "model.ungw").exists()
        assert (out / "config.resolved").exists()
        assert json.loads((out / "metrics.json").read_text()) == trained
        assert 0.0 <= trained["heldout_acc"] <= 1.0

    def test_same_seed_same_model(self, tmp_path, capsys):
        hashes = []
        for name in ("a", "b"):
            assert main(["train", "--seed", "3", "--out", str(tmp_path / name),
                         "--model.epochs", "1", "--model.target_accuracy", "0", *SMALL_DATA]) == 0
            hashes.append(last_json_line(capsys)["sha256"])
        assert hashes[0] == hashes[1]

    def test_resolved_config_reproduces(self, tmp_path, trained):
        resolved = run_dir(tmp_path / "t", "train") / "config.resolved"
        assert main(["train", "--config", str(resolved)]) == 0
        assert len(list((tmp_path / "t").glob("train-*"))) == 1

    def test_training_failure_exit(self, tmp_path):
        rc = main(["train", "--out", str(tmp_path), "--model.epochs", "1",
                   "--model.target_accuracy", "1.01", *SMALL_DATA])
        assert rc == EXIT_TRAINING

    def test_bad_dataset_path(self, tmp_path):
        rc = main(["train", "--out", str(tmp_path), "--data.source", "idx",
                   "--data.images", str(tmp_path / "x"), "--data.labels", str(tmp_path / "y")])
        assert rc == EXIT_IO

    def test_unknown_key(self, tmp_path):
        assert main(["train", "--out", str(tmp_path), "--model.epoch", "3"]) == EXIT_CONFIG


class TestEvaluate:
    def eval_args(self, tmp_path, trained, *extra):
        return ["evaluate", "--out", str(tmp_path / "e"), "--model.path", trained["model"],
                "--eval.seeds", "0", "--data.eval_n", "10", *SMALL_DATA, *extra]

    def test_budget_zero_robust_equals_clean(self, tmp_path, trained):
        rc = main(self.eval_args(tmp_path, trained, "--defense.kinds", "vanilla",
                                 "--attack.kinds", "square", "--eval.budgets", "0"))
        assert rc == 0
        with (run_dir(tmp_path / "e", "evaluate") / "report.csv").open() as fh:
            rows = list(csv.DictReader(fh))
        assert len(rows) == 1
        assert rows[0]["robust_acc"] == rows[0]["clean_acc"]

    def test_unig_delta_zero_logit_diff(self, tmp_path, trained):
        rc = main(self.eval_args(tmp_path, trained, "--defense.kinds", "unig",
                                 "--defense.delta", "0", "--attack.kinds", "simba",
                                 "--eval.budgets", "5"))
        assert rc == 0
        with (run_dir(tmp_path / "e", "evaluate") / "report.csv").open() as fh:
            row = next(csv.DictReader(fh))
        assert abs(float(row["logit_diff"])) <= 1e-6

    def test_missing_model(self, tmp_path):
        rc = main(["evaluate", "--out", str(tmp_path), "--model.path", str(tmp_path / "none.ungw")])
        assert rc == EXIT_IO

    def test_seed_flag_sets_eval_seeds_only(self, tmp_path, trained):
        rc = main(["evaluate", "--seed", "4", "--out", str(tmp_path / "e"),
                   "--model.path", trained["model"], "--data.eval_n", "6",
                   "--defense.kinds", "vanilla", "--attack.kinds", "square",
                   "--eval.budgets", "2", *SMALL_DATA])
        assert rc == 0
        out = run_dir(tmp_path / "e", "evaluate")
        resolved = (out / "config.resolved").read_text().splitlines()
        assert "eval.seeds = 4" in resolved
        assert "model.seed = 0" in resolved
        with (out / "report.csv").open() as fh:
            assert {r["seed"] for r in csv.DictReader(fh)} == {"4"}

    def test_alpha_auto_is_tuned(self, tmp_path, trained):
        rc = main(self.eval_args(tmp_path, trained, "--defense.kinds", "unig",
                                 "--defense.alpha", "auto", "--attack.kinds", "square",
                                 "--eval.budgets", "2"))
        assert rc == 0
        with (run_dir(tmp_path / "e", "evaluate") / "report.csv").open() as fh:
            params = next(csv.DictReader(fh))["defense_params"]
        alpha = float(dict(kv.split("=") for kv in params.split(";"))["alpha"])
        assert alpha in (0.01, 0.03, 0.1, 0.3, 1.0, 3.0, 10.0)

    def test_report_reemits(self, tmp_path, trained, capsys):
        assert main(self.eval_args(tmp_path, trained, "--defense.kinds", "vanilla,rnd",
                                   "--attack.kinds", "square", "--eval.budgets", "3,6")) == 0
        src = run_dir(tmp_path / "e", "evaluate")
        rc = main(["report", "--out", str(tmp_path / "r"), "--from", str(src),
                   "--model.path", trained["model"]])
        assert rc == 0
        out = capsys.readouterr().out
        assert "robust" in out and "[overhead]" in out
        dst = run_dir(tmp_path / "r", "report")
        assert (dst / "report.csv").read_bytes() == (src / "report.csv").read_bytes()


class TestSweep:
    def test_delta_rows(self, tmp_path, trained):
        rc = main(["sweep", "--out", str(tmp_path / "s"), "--model.path", trained["model"],
                   "--axis", "delta", "--values", "0.1,0.3,0.5", "--seeds", "0,1",
                   "--defense.kinds", "unig", "--attack.kinds", "square",
                   "--eval.budgets", "4", "--data.eval_n", "8", *SMALL_DATA])
        assert rc == 0
        with (run_dir(tmp_path / "s", "sweep") / "sweep.csv").open() as fh:
            rows = list(csv.DictReader(fh))
        assert len(rows) == 3 * 2
        assert {r["axis"] for r in rows} == {"delta"}

    def test_unknown_axis(self, tmp_path, trained):
        rc = main(["sweep", "--out", str(tmp_path), "--model.path", trained["model"],
                   "--axis", "momentum", "--values", "1"])
        assert rc == EXIT_CONFIG


class TestCommon:
    def small_config(self, *extra):
        return build_config(parse_flag_overrides([*SMALL_DATA, *extra]))

    def test_heldout_split_ignores_model_seed(self):
        a = load_split(self.small_config("--model.seed", "0")).heldout
        b = load_split(self.small_config("--model.seed", "9")).heldout
        assert np.array_equal(a.images, b.images)
        assert np.array_equal(a.labels, b.labels)

    def test_train_split_matches_eval_split(self):
        cfg = self.small_config("--model.seed", "5", "--data.seed", "2")
        assert train_config(cfg).holdout_seed == 2

    def test_unresolved_auto_alpha(self):
        cfg = self.small_config("--defense.alpha", "auto")
        with pytest.raises(ConfigError):
            unig_config(cfg)
        assert unig_config(cfg, alpha=0.3).alpha == 0.3

    def test_fixed_alpha_skips_tuning(self):
        cfg = self.small_config("--defense.alpha", "0.5")
        assert tuned_alpha(cfg, model=None, train=None) is None
        assert defense_specs(cfg, kinds=("unig",))[0].unig.alpha == 0.5

    def test_auto_alpha_only_tunes_for_unig(self):
        cfg = self.small_config("--defense.alpha", "auto", "--defense.kinds", "vanilla,rnd")
        assert tuned_alpha(cfg, model=None, train=None) is None


class TestRunStore:
    def test_status_and_errors_survive_reload(self, tmp_path):
        cfg = build_config({"out.dir": str(tmp_path), "out.run_id": "r1"})
        store = RunStore.open("evaluate", cfg)
        assert store.get_status() is None
        store.set_cell_errors([{"cell": "unig/square/seed=0", "error": "ValueError: x"}])
        store.set_status("failed")
        again = RunStore.open("evaluate", cfg)
        assert again.get_status() == "failed"
        assert again.get_cell_errors() == [{"cell": "unig/square/seed=0", "error": "ValueError: x"}]

    def test_malformed_state_reads_empty(self, tmp_path):
        (tmp_path / "run.json").write_text("[1, 2]", encoding="utf-8")
        store = RunStore.load(tmp_path)
        assert store.get_status() is None
        assert store.get_cell_errors() == []
