import json

import pandas as pd
import pytest

from ticketlab.cli import main, parse_p_grid
from ticketlab.errors import ConfigurationError

CONFIG = """
model:
  input_shape: [2]
  class_count: 3
  layers:
    - {type: dense, in_features: 2, out_features: 8}
    - {type: relu}
    - {type: dense, in_features: 8, out_features: 8}
    - {type: relu}
    - {type: dense, in_features: 8, out_features: 3}
data:
  kind: blobs
  n: 90
  classes: 3
train:
  epochs: 2
  lr0: 0.05
  milestones: [1]
  batch_size: 16
prune:
  algorithm: one_shot
regimes: [ticket, finetune]
sparsity_grid: [0.5]
p_grid: [0.1, 0.2]
seeds: [0]
null_trials: 50
"""


@pytest.fixture
def config_path(tmp_path):
    path = tmp_path / "config.yaml"
    path.write_text(CONFIG + f"output_dir: {tmp_path / 'out'}\n")
    return path


def run(*argv):
    return main(["-q", *[str(a) for a in argv]])


class TestRun:
    def test_minimal_run(self, tmp_path, config_path):
        assert run("run", "--config", config_path) == 0
        out = tmp_path / "out"
        raw = pd.read_csv(out / "raw.csv")
        assert raw["regime"].tolist() == ["pretrain", "ticket", "finetune"]
        assert (raw["status"] == "ok").all()
        for name in ("aggregate.csv", "correlation.csv", "report.json", "config.sha256"):
            assert (out / name).exists()
        assert (out / "checkpoints" / "lr0.05-seed0" / "thetaT.tklb").exists()
        assert raw.loc[2, "r_thetaT"] > 0

    def test_rerun_is_idempotent(self, tmp_path, config_path):
        assert run("run", "--config", config_path) == 0
        raw = (tmp_path / "out" / "raw.csv").stat().st_mtime_ns
        assert run("run", "--config", config_path) == 0
        assert (tmp_path / "out" / "raw.csv").stat().st_mtime_ns == raw

    def test_untrained_run(self, tmp_path, config_path):
        assert run("run", "--config", config_path, "--set", "train.epochs=0", "train.milestones=[]") == 0
        raw = pd.read_csv(tmp_path / "out" / "raw.csv").set_index("regime")
        assert raw.loc["ticket", "accuracy"] == raw.loc["finetune", "accuracy"]

    def test_config_error(self, config_path):
        assert run("run", "--config", config_path, "--set", "sparsity_grid=[1.5]") == 2

    def test_unsplittable_data_is_a_config_error(self, config_path):
        # 9 samples of 3 classes leave 2 test samples for 3 strata
        assert run("run", "--config", config_path, "--set", "data.n=9") == 2

    def test_workers_do_not_change_results(self, tmp_path, config_path):
        grid = ("--set", "seeds=[0,1,2]", "sparsity_grid=[0.3,0.5]")
        assert run("run", "--config", config_path, "--workers", 1, "--output_dir", tmp_path / "w1", *grid) == 0
        assert run("run", "--config", config_path, "--workers", 4, "--output_dir", tmp_path / "w4", *grid) == 0
        for name in ("raw.csv", "aggregate.csv", "correlation.csv"):
            assert (tmp_path / "w1" / name).read_bytes() == (tmp_path / "w4" / name).read_bytes()


class TestStages:
    def test_sparse_train_needs_a_mask(self, config_path):
        assert run("sparse-train", "--config", config_path, "--alg", "one_shot", "--sparsity", 0.5) == 3

    def test_pipeline(self, tmp_path, config_path, capsys):
        assert run("pretrain", "--config", config_path) == 0
        assert run("prune", "--config", config_path, "--alg", "one_shot", "--sparsity", 0.5) == 0
        capsys.readouterr()
        assert run("correlate", "--config", config_path, "--a", "theta0", "--b", "thetaT", "--p", "0.1..0.5") == 0
        rows = json.loads(capsys.readouterr().out)
        assert [row["p"] for row in rows] == [0.1, 0.2, 0.3, 0.4, 0.5]
        assert (tmp_path / "out" / "stages" / "seed0" / "correlate-theta0-thetaT.json").exists()

        assert run("sparse-train", "--config", config_path, "--alg", "one_shot", "--sparsity", 0.5) == 0
        assert run("finetune", "--config", config_path, "--alg", "one_shot", "--sparsity", 0.5) == 0
        capsys.readouterr()
        assert run(
            "correlate", "--config", config_path, "--a", "finetune-one_shot-s0.5", "--b", "thetaT",
            "--p", "0.2", "--scenario", "sparse_dense", "--mask", "mask-one_shot-s0.5",
        ) == 0
        (row,) = json.loads(capsys.readouterr().out)
        assert row["scenario"] == "sparse_dense"

    def test_prune_reports_per_layer_sparsity(self, config_path, capsys):
        assert run("pretrain", "--config", config_path) == 0
        capsys.readouterr()
        assert run("prune", "--config", config_path, "--alg", "one_shot", "--sparsity", 0.5) == 0
        out = json.loads(capsys.readouterr().out)
        assert out["per_layer_sparsity"] == {"layer0.weight": 0.0, "layer2.weight": 0.5, "layer4.weight": 0.5}

    def test_report_subcommand(self, tmp_path, config_path):
        assert run("run", "--config", config_path) == 0
        assert run("report", "--raw", tmp_path / "out" / "raw.csv", "--out", tmp_path / "agg.csv") == 0
        assert len(pd.read_csv(tmp_path / "agg.csv")) == 3


@pytest.mark.parametrize(
    "text, expected",
    [("0.1..0.5", [0.1, 0.2, 0.3, 0.4, 0.5]), ("0.2", [0.2]), ("0.1,0.3", [0.1, 0.3]), ("0.1..0.2:0.05", [0.1, 0.15, 0.2])],
)
def test_parse_p_grid(text, expected):
    assert parse_p_grid(text) == pytest.approx(expected)


def test_parse_p_grid_rejects_garbage():
    with pytest.raises(ConfigurationError):
        parse_p_grid("a..b")
