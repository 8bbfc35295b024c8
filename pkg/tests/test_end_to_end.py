#!/usr/bin/env python3
"""
End-to-end test of the command-line workflow on a small generated dataset.
"""
from unittest.mock import patch
import pytest
from misdd.cli import main
from misdd.metrics import MEAN_ROW, read_report_csv


@pytest.mark.slow
def test_generate_train_eval_params(tmp_path, capsys):
    """Test generate, train, eval and params chained through the CLI."""
    data, run = str(tmp_path / "data"), str(tmp_path / "run")
    generate = ["generate", "--out", data, "--classes", "2", "--image-size", "32"]
    generate += ["--train-normals", "6", "--test-normals", "3", "--test-anomalous", "4"]
    train = ["train", "--dataset", data, "--out", run, "--missing-type", "rgb", "--eta", "0.5"]
    train += ["--epochs", "2", "--warmup-epochs", "2", "--prompt-len", "2", "--seed", "1"]

    with patch("misdd.cli.setup_logger"):
        assert main(generate) == 0
        assert main(train) == 0
        assert main(["eval", "--run", run, "--export-heatmaps"]) == 0
        assert main(["params", "--checkpoint", run]) == 0

    rows = read_report_csv(tmp_path / "run" / "metrics.csv")
    assert [r.class_name for r in rows] == ["foam", "tile", MEAN_ROW]
    assert all(r.missing_type == "rgb" and r.eta == 0.5 for r in rows)
    assert len(list((tmp_path / "run" / "heatmaps").glob("*.png"))) == 2 * 14
    assert "Learnable" in capsys.readouterr().out
