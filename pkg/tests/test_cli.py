"""End-to-end command line: gen-data -> train -> eval -> plot."""

import csv
import json
import os
from pathlib import Path

import numpy as np
import pytest

from modbalance.cli import main
from modbalance.corpus import read_corpus


def run_cli(*argv):
    return main(list(argv))


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """One full CLI pass shared by the assertions below."""
    root = tmp_path_factory.mktemp("cli")
    corpus = root / "corpus"
    run = root / "run"
    report = root / "report"
    plots = root / "plots"
    assert run_cli(
        "gen-data", "--out", str(corpus), "--n-samples", "4", "--size", "16x16",
        "--classes", "3", "--mode", "idt", "--rates", "0.0,0.25,0.5", "--seed", "3",
    ) == 0
    config = {
        "net": {"n_modalities": 3, "n_classes": 3, "n_levels": 2, "base_channels": 4,
                "token_grid": [4, 4], "attn_layers": 1},
        "val_fraction": 0.0,
    }
    config_path = root / "config.json"
    config_path.write_text(json.dumps(config))
    assert run_cli(
        "train", "--config", str(config_path), "--corpus", str(corpus),
        "--out", str(run), "--epochs", "1", "--seed", "1",
    ) == 0
    assert run_cli(
        "eval", "--checkpoint", str(run / "checkpoint.pt"), "--corpus", str(corpus),
        "--out", str(report),
    ) == 0
    assert run_cli(
        "plot", "--runlog", str(run / "runlog.csv"), "--report", str(report),
        "--out", str(plots),
    ) == 0
    return root


class TestGenData:
    def test_corpus_written_with_exact_rates(self, pipeline):
        _, presence, manifest = read_corpus(pipeline / "corpus")
        assert manifest["realized_missing_rates"] == [0.0, 0.25, 0.5]
        assert presence.n_samples == 4

    def test_gen_data_is_bit_reproducible(self, tmp_path):
        for sub in ("a", "b"):
            assert run_cli(
                "gen-data", "--out", str(tmp_path / sub), "--n-samples", "2",
                "--size", "16x16", "--rates", "0.0,0.5", "--mode", "idt", "--seed", "7",
            ) == 0
        for rel in ("samples/sample_0000/modality_00.raw", "samples/sample_0001/label.raw"):
            assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()

    def test_pdt_needs_modalities_or_rates(self, capsys):
        assert run_cli("gen-data", "--out", "x", "--n-samples", "2") == 2

    def test_pdt_with_modalities(self, tmp_path):
        assert run_cli(
            "gen-data", "--out", str(tmp_path / "pdt"), "--n-samples", "2",
            "--size", "16x16", "--modalities", "3",
        ) == 0
        _, presence, manifest = read_corpus(tmp_path / "pdt")
        assert (presence.entries == 1).all()
        assert manifest["mode"] == "pdt"


class TestTrainEval:
    def test_artifacts_exist(self, pipeline):
        assert (pipeline / "run" / "checkpoint.pt").exists()
        rows = list(csv.reader(open(pipeline / "run" / "runlog.csv")))
        assert len(rows) == 1 + 4

    def test_report_row_count(self, pipeline):
        with open(pipeline / "report" / "combinations.csv") as fh:
            rows = list(csv.DictReader(fh))
        assert len(rows) == 2**3 - 1
        assert {r["combination"] for r in rows} >= {"m0", "m0+m1+m2"}

    def test_missing_corpus_is_a_clean_failure(self, tmp_path, capsys):
        code = run_cli("train", "--corpus", str(tmp_path / "nope"), "--out", str(tmp_path / "o"))
        assert code == 1
        assert "error:" in capsys.readouterr().err

    def test_train_requires_corpus(self, capsys):
        assert run_cli("train", "--out", "x") == 1


class TestPlot:
    def test_artifacts_exist(self, pipeline):
        for name in ("loss_curves.png", "rebalance_trajectories.png",
                     "trajectories.csv", "combination_dsc.png", "combination_table.csv"):
            assert (pipeline / "plots" / name).exists()

    def test_plot_is_idempotent(self, pipeline, tmp_path):
        out_a, out_b = tmp_path / "pa", tmp_path / "pb"
        for out in (out_a, out_b):
            assert run_cli(
                "plot", "--runlog", str(pipeline / "run" / "runlog.csv"),
                "--report", str(pipeline / "report"), "--out", str(out),
            ) == 0
        for name in ("loss_curves.png", "trajectories.csv", "combination_table.csv",
                     "combination_dsc.png", "rebalance_trajectories.png"):
            assert (out_a / name).read_bytes() == (out_b / name).read_bytes()

    def test_weight_columns_sum_to_one_in_emitted_file(self, pipeline):
        with open(pipeline / "plots" / "trajectories.csv") as fh:
            rows = list(csv.DictReader(fh))
        for row in rows:
            total = sum(float(row[f"w_m{m}"]) for m in range(3))
            assert total == pytest.approx(1.0, abs=1e-9)

    def test_missing_columns_are_named(self, tmp_path, capsys):
        bad = tmp_path / "bad.csv"
        bad.write_text("step,loss_total\n1,2.0\n")
        assert run_cli("plot", "--runlog", str(bad), "--out", str(tmp_path / "o")) == 1
        assert "loss_fuse" in capsys.readouterr().err

    def test_plot_needs_an_input(self, tmp_path):
        assert run_cli("plot", "--out", str(tmp_path / "o")) == 2


class TestOutRoot:
    def test_env_var_resolves_relative_outputs(self, tmp_path, monkeypatch):
        monkeypatch.setenv("MODBALANCE_OUT_ROOT", str(tmp_path))
        assert run_cli(
            "gen-data", "--out", "nested/corpus", "--n-samples", "2",
            "--size", "16x16", "--modalities", "2",
        ) == 0
        assert (tmp_path / "nested" / "corpus" / "manifest.json").exists()
