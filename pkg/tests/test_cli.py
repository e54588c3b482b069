from __future__ import annotations

import json

import numpy as np
import pytest

from rulkit import cli, cmapss
from rulkit.models import MODEL_TAGS


@pytest.fixture(autouse=True)
def _no_env_data_dir(monkeypatch):
    monkeypatch.delenv(cmapss.DATA_DIR_ENV, raising=False)


def test_version_flag(capsys):
    with pytest.raises(SystemExit) as exc:
        cli.main(["--version"])
    assert exc.value.code == 0
    assert "rulkit" in capsys.readouterr().out


def test_parse_seeds():
    assert cli._parse_seeds("0,1,2") == [0, 1, 2]
    assert cli._parse_seeds("3 4") == [3, 4]
    assert cli._parse_seeds("5, 6") == [5, 6]


def test_reference_results_table():
    assert len(cli.REFERENCE_RESULTS) == 10
    for (model, subset), row in cli.REFERENCE_RESULTS.items():
        assert model in MODEL_TAGS
        assert subset in ("FD001", "FD003")
        for metric in ("rmse", "score"):
            mean, std = row[metric]
            assert mean > 0
            assert std is None or std > 0
    assert cli.REFERENCE_RESULTS[("tfim", "FD003")]["rmse"][0] == 10.90
    assert cli.REFERENCE_RESULTS[("tfm", "FD001")]["rmse"][0] == 11.73


def test_demo_data_tiny(tmp_path, capsys):
    out = tmp_path / "demo"
    assert cli.main(["demo-data", "--out", str(out), "--tiny"]) == 0
    for name in ("train_FD001.txt", "test_FD001.txt", "RUL_FD001.txt"):
        assert (out / name).exists()
    assert "synthetic FD001" in capsys.readouterr().out
    data = cmapss.parse_subset(out, "FD001")
    assert data.counts()[0] == 8


def test_ingest_fullsize(fullsize_data_dir, tmp_path, capsys):
    cache = tmp_path / "cache"
    code = cli.main(
        [
            "ingest",
            "--data-dir",
            str(fullsize_data_dir),
            "--subset",
            "FD001",
            "--out",
            str(cache),
        ]
    )
    assert code == 0
    out = capsys.readouterr().out
    assert "counts OK" in out
    assert (cache / "stats_FD001.json").exists()
    npz = np.load(cache / "normalized_FD001.npz")
    assert npz["test_rul"].shape == (100,)


def test_ingest_rejects_wrong_counts(tiny_data_dir, capsys):
    code = cli.main(["ingest", "--data-dir", str(tiny_data_dir)])
    assert code == 2
    assert capsys.readouterr().err.startswith("error:")


def test_missing_data_dir_fails(tmp_path, monkeypatch, capsys):
    monkeypatch.chdir(tmp_path)
    code = cli.main(["train", "--out", str(tmp_path / "run"), "--quiet"])
    assert code == 2
    assert "no data directory" in capsys.readouterr().err


def _train_args(data_dir, out, extra=()):
    return [
        "train",
        "--data-dir",
        str(data_dir),
        "--out",
        str(out),
        "--model",
        "tfim",
        "--window",
        "16",
        "--epochs",
        "2",
        "--folds",
        "2",
        "--engines",
        "4",
        "--avg-epochs",
        "2",
        "--batch-size",
        "256",
        "--quiet",
        *extra,
    ]


@pytest.fixture(scope="module")
def cli_runs(tiny_data_dir, tmp_path_factory):
    base = tmp_path_factory.mktemp("cli_runs")
    a, b = base / "a", base / "b"
    assert cli.main(_train_args(tiny_data_dir, a)) == 0
    assert cli.main(_train_args(tiny_data_dir, b)) == 0
    return {"data": tiny_data_dir, "a": a, "b": b}


def test_train_smoke_artifacts(cli_runs, capsys):
    run = cli_runs["a"]
    assert (run / "manifest.json").exists()
    assert (run / "eval" / "report.json").exists()
    manifest = json.loads((run / "manifest.json").read_text())
    assert manifest["config"]["model"] == "tfim"
    assert manifest["config"]["max_engines"] == 4


def test_train_repeat_is_byte_identical(cli_runs):
    for rel in ("eval/per_engine.csv", "eval/report.json", "cv/plateau.json"):
        a = (cli_runs["a"] / rel).read_bytes()
        b = (cli_runs["b"] / rel).read_bytes()
        assert a == b, rel


def test_evaluate_rescores_run(cli_runs, capsys):
    before = json.loads((cli_runs["a"] / "eval" / "report.json").read_text())
    code = cli.main(
        [
            "evaluate",
            "--run-dir",
            str(cli_runs["a"]),
            "--data-dir",
            str(cli_runs["data"]),
        ]
    )
    assert code == 0
    assert "rmse" in capsys.readouterr().out
    after = json.loads((cli_runs["a"] / "eval" / "report.json").read_text())
    assert after["rmse"] == pytest.approx(before["rmse"])


def test_ablate_writes_mask_sweep(cli_runs, capsys):
    code = cli.main(
        [
            "ablate",
            "--run-dir",
            str(cli_runs["a"]),
            "--data-dir",
            str(cli_runs["data"]),
        ]
    )
    assert code == 0
    csv = cli_runs["a"] / "eval" / "ablation.csv"
    lines = csv.read_text().strip().splitlines()
    # tfim has three maskable blocks: 8 combinations plus the header
    assert len(lines) == 9
    assert lines[1].startswith("111,3,")
    assert (cli_runs["a"] / "eval" / "ablation.png").exists()


def test_plot_trajectory_file(cli_runs, capsys):
    code = cli.main(
        [
            "plot",
            "--run-dir",
            str(cli_runs["a"]),
            "--data-dir",
            str(cli_runs["data"]),
            "--engine",
            "1",
            "--smooth",
            "0.11",
        ]
    )
    assert code == 0
    assert (cli_runs["a"] / "plots" / "test_engine_1.png").exists()


def test_plot_engine_out_of_range(cli_runs, capsys):
    code = cli.main(
        [
            "plot",
            "--run-dir",
            str(cli_runs["a"]),
            "--data-dir",
            str(cli_runs["data"]),
            "--engine",
            "99",
        ]
    )
    assert code == 2
    assert "outside" in capsys.readouterr().err


def test_evaluate_missing_run_dir(tmp_path, capsys):
    code = cli.main(
        ["evaluate", "--run-dir", str(tmp_path / "nope"), "--data-dir", str(tmp_path)]
    )
    assert code == 2


def test_config_file_and_flag_precedence(tmp_path):
    cfg_file = tmp_path / "cfg.json"
    cfg_file.write_text(json.dumps({"model": "lstm", "max_epochs": 7, "n_folds": 3}))
    args = cli.build_parser().parse_args(
        ["train", "--config", str(cfg_file), "--model", "tfm", "--out", "x"]
    )
    cfg = cli._build_train_config(args)
    assert cfg.model == "tfm"
    assert cfg.max_epochs == 7
    assert cfg.n_folds == 3


def test_config_file_unknown_key(tmp_path, tiny_data_dir, capsys):
    cfg_file = tmp_path / "cfg.json"
    cfg_file.write_text(json.dumps({"learning_rate": 1e-3}))
    code = cli.main(
        [
            "train",
            "--data-dir",
            str(tiny_data_dir),
            "--config",
            str(cfg_file),
            "--out",
            str(tmp_path / "run"),
            "--quiet",
        ]
    )
    assert code == 2
    assert "unknown config keys" in capsys.readouterr().err


def test_unsupported_subset_rejected_by_parser():
    with pytest.raises(SystemExit):
        cli.build_parser().parse_args(["train", "--subset", "FD002", "--out", "x"])


def test_unsupported_subset_in_config_file(tmp_path, tiny_data_dir, capsys):
    cfg_file = tmp_path / "cfg.json"
    cfg_file.write_text(json.dumps({"subset": "FD004"}))
    code = cli.main(
        [
            "train",
            "--data-dir",
            str(tiny_data_dir),
            "--config",
            str(cfg_file),
            "--out",
            str(tmp_path / "run"),
            "--quiet",
        ]
    )
    assert code == 2
    assert "not supported" in capsys.readouterr().err


def test_train_multi_seed(tiny_data_dir, tmp_path, capsys):
    out = tmp_path / "multi"
    code = cli.main(
        [
            "train",
            "--data-dir",
            str(tiny_data_dir),
            "--out",
            str(out),
            "--model",
            "lstm",
            "--window",
            "16",
            "--epochs",
            "1",
            "--folds",
            "2",
            "--engines",
            "4",
            "--avg-epochs",
            "1",
            "--seeds",
            "0,1",
            "--quiet",
        ]
    )
    assert code == 0
    assert "+-" in capsys.readouterr().out
    assert (out / "aggregate.json").exists()
    assert (out / "seed_0" / "eval" / "report.json").exists()
    assert (out / "seed_1" / "eval" / "report.json").exists()


def test_reproduce_table_output(tiny_data_dir, tmp_path, capsys):
    code = cli.main(
        [
            "reproduce-table",
            "--data-dir",
            str(tiny_data_dir),
            "--out",
            str(tmp_path / "repro"),
            "--model",
            "lstm",
            "--window",
            "16",
            "--epochs",
            "1",
            "--folds",
            "2",
            "--engines",
            "4",
            "--avg-epochs",
            "1",
            "--seeds",
            "0",
            "--quiet",
        ]
    )
    assert code == 0
    out = capsys.readouterr().out
    assert "measured" in out
    assert "reference" in out
    assert "delta" in out
