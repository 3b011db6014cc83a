"""Command line behaviour, including the handoff to the toolkit CLI."""

from __future__ import annotations

import csv
import json
import subprocess
import sys

import pytest

pytest.importorskip("torch", reason="fine-tuning tests need torch")
pytest.importorskip("qtrn_gnn", reason="fine-tuning package not installed")

import gnn_testutil as tu  # noqa: E402
from qtrn_gnn.cli import main  # noqa: E402


@pytest.fixture(scope="module")
def runs(data, tmp_path_factory):
    """One short training run per variant, through the CLI."""
    root = tmp_path_factory.mktemp("cli_runs")
    out = {}
    for variant in ("m1", "m2"):
        run_dir = root / f"run_{variant}"
        rc = main(
            [
                "train",
                str(getattr(data, f"train_{variant}")),
                "--out",
                str(run_dir),
                "--epochs",
                "2",
                "--batch-size",
                "4",
                "--epoch-fraction",
                "1.0",
            ]
        )
        assert rc == 0
        out[variant] = run_dir
    return out


def _read_csv(path):
    with open(path, newline="") as fp:
        rows = list(csv.reader(fp))
    return rows[0], rows[1:]


class TestTrainCommand:
    def test_writes_run_directory(self, runs):
        for run_dir in runs.values():
            names = {p.name for p in run_dir.iterdir()}
            assert "best.ckpt" in names and "history.json" in names

    def test_validation_flags(self, data, tmp_path, capsys):
        rc = main(
            [
                "train",
                str(data.train_m2),
                "--val",
                str(data.val_m2[0]),
                "--val",
                str(data.val_m2[1]),
                "--out",
                str(tmp_path / "run"),
                "--epochs",
                "1",
                "--batch-size",
                "4",
                "--epoch-fraction",
                "1.0",
            ]
        )
        assert rc == 0
        hist = json.loads((tmp_path / "run" / "history.json").read_text())
        assert len(hist["epochs"][0]["val_mape"]) == 2

    def test_missing_dataset_exits_one(self, tmp_path, capsys):
        rc = main(["train", str(tmp_path / "nothing"), "--out", str(tmp_path / "run")])
        assert rc == 1
        assert "error:" in capsys.readouterr().err


class TestPredictCommand:
    def test_csv_schema_and_content(self, data, runs, tmp_path):
        out = tmp_path / "pred.csv"
        rc = main(["predict", str(runs["m2"] / "best.ckpt"), str(data.train_m2), "--out", str(out)])
        assert rc == 0
        header, rows = _read_csv(out)
        assert header == ["sample_id", "path_id", "predicted_delay", "source"]
        assert len(rows) == 40  # 10 samples x 4 paths
        keys = [(r[0], int(r[1])) for r in rows]
        assert keys == sorted(keys)
        assert all(float(r[2]) > 0 for r in rows)
        assert {r[3] for r in rows} == {"gnn-m2"}

    def test_source_flag(self, data, runs, tmp_path):
        out = tmp_path / "pred.csv"
        main(["predict", str(runs["m2"] / "best.ckpt"), str(data.train_m2), "--out", str(out), "--source", "mine"])
        _, rows = _read_csv(out)
        assert {r[3] for r in rows} == {"mine"}

    def test_predict_twice_identical_bytes(self, data, runs, tmp_path):
        a, b = tmp_path / "a.csv", tmp_path / "b.csv"
        ckpt = str(runs["m2"] / "best.ckpt")
        main(["predict", ckpt, str(data.train_m2), "--out", str(a)])
        main(["predict", ckpt, str(data.train_m2), "--out", str(b)])
        assert a.read_bytes() == b.read_bytes()

    def test_variant_mismatch_exits_one(self, data, runs, tmp_path, capsys):
        rc = main(
            ["predict", str(runs["m1"] / "best.ckpt"), str(data.train_m2), "--out", str(tmp_path / "x.csv")]
        )
        assert rc == 1
        assert "variant" in capsys.readouterr().err

    def test_missing_checkpoint_exits_one(self, data, tmp_path, capsys):
        rc = main(["predict", str(tmp_path / "no.ckpt"), str(data.train_m2), "--out", str(tmp_path / "x.csv")])
        assert rc == 1
        assert "error:" in capsys.readouterr().err


class TestToolkitHandoff:
    def test_ensemble_and_evaluate_accept_gnn_predictions(self, data, runs, tmp_path):
        pred_m1 = tmp_path / "m1.csv"
        pred_m2 = tmp_path / "m2.csv"
        main(["predict", str(runs["m1"] / "best.ckpt"), str(data.train_m1), "--out", str(pred_m1)])
        main(["predict", str(runs["m2"] / "best.ckpt"), str(data.train_m2), "--out", str(pred_m2)])

        ens = tmp_path / "ens.csv"
        tu.run_qtrn("ensemble", str(pred_m1), str(pred_m2), "--out", str(ens))
        _, rows_m1 = _read_csv(pred_m1)
        _, rows_m2 = _read_csv(pred_m2)
        _, rows_ens = _read_csv(ens)
        assert len(rows_ens) == len(rows_m1)
        for r1, r2, re in zip(rows_m1, rows_m2, rows_ens):
            assert float(re[2]) == pytest.approx((float(r1[2]) + float(r2[2])) / 2.0, rel=1e-12)

        report = tmp_path / "report.json"
        tu.run_qtrn(
            "evaluate",
            "--predictions",
            str(ens),
            "--labels",
            str(data.train_jsonl),
            "--out",
            str(report),
        )
        doc = json.loads(report.read_text())
        assert doc["overall"]["n_paths"] == 40
        assert doc["overall"]["mape"] > 0


class TestEntryPoints:
    def test_module_invocation(self):
        proc = subprocess.run(
            [sys.executable, "-m", "qtrn_gnn.cli", "--version"],
            capture_output=True,
            text=True,
        )
        assert proc.returncode == 0
        assert "qtrn-gnn" in proc.stdout

    def test_no_subcommand_exits_two(self):
        with pytest.raises(SystemExit) as exc:
            main([])
        assert exc.value.code == 2

    def test_bad_log_level_rejected(self, data, tmp_path, monkeypatch):
        monkeypatch.setenv("QTRN_GNN_LOG", "LOUD")
        with pytest.raises(SystemExit, match="LOUD"):
            main(["predict", "x.ckpt", str(data.train_m2), "--out", str(tmp_path / "x.csv")])
