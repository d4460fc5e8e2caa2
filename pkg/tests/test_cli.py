import json

import numpy as np
import pytest

from layerfuse.cli import main
from layerfuse.reprstore import read_store


def _strip_seconds(obj):
    if isinstance(obj, dict):
        return {k: _strip_seconds(v) for k, v in obj.items() if k != "seconds"}
    if isinstance(obj, list):
        return [_strip_seconds(v) for v in obj]
    return obj


@pytest.fixture(scope="module")
def separable_lfr(tmp_path_factory):
    path = tmp_path_factory.mktemp("stores") / "sep.lfr"
    code = main(
        [
            "synth", "--preset", "separable", "--out", str(path),
            "--train-n", "60", "--val-n", "20", "--test-n", "20",
            "--layers", "2", "--dim", "8", "--classes", "2", "--seed", "1",
        ]
    )
    assert code == 0
    return path


@pytest.fixture(scope="module")
def patch_lfr(tmp_path_factory):
    path = tmp_path_factory.mktemp("stores") / "patch.lfr"
    code = main(
        [
            "synth", "--preset", "separable", "--out", str(path),
            "--train-n", "60", "--val-n", "20", "--test-n", "20",
            "--layers", "2", "--dim", "8", "--patches", "3", "--classes", "2", "--seed", "2",
        ]
    )
    assert code == 0
    return path


class TestSynth:
    def test_writes_valid_store(self, separable_lfr):
        store = read_store(separable_lfr)
        assert store.meta.num_layers == 2
        assert store.meta.split_sizes == {"train": 60, "val": 20, "test": 20}

    def test_invalid_planted_layer_exits_2(self, tmp_path, capsys):
        code = main(
            [
                "synth", "--preset", "planted", "--layer", "9", "--kind", "ap",
                "--layers", "4", "--out", str(tmp_path / "x.lfr"),
            ]
        )
        assert code == 2
        assert "planted_layer" in capsys.readouterr().err

    def test_planted_preset(self, tmp_path):
        out = tmp_path / "p.lfr"
        code = main(
            [
                "synth", "--preset", "planted", "--layer", "2", "--kind", "ap",
                "--layers", "3", "--dim", "8", "--out", str(out),
            ]
        )
        assert code == 0 and read_store(out).meta.num_layers == 3


class TestTrain:
    def test_end_to_end_writes_artifacts(self, separable_lfr, tmp_path, capsys):
        out = tmp_path / "run"
        code = main(
            [
                "train", "--features", str(separable_lfr), "--probe", "attentive-fusion",
                "--layers", "all", "--tokens", "cls+ap", "--heads", "auto",
                "--lr", "0.01", "--seed", "0", "--out", str(out),
            ]
        )
        assert code == 0
        assert (out / "probe.lfpb").exists()
        assert (out / "history.csv").exists()
        report = json.loads((out / "report.json").read_text())
        assert report["config"]["kind"] == "attentive_fusion"
        assert report["config"]["num_heads"] == 4  # R = 2 layers x 2 kinds, 2d=16 divisible
        assert report["param_count"] == report["enumerated_param_count"]
        assert report["history"]["final_train_bal_acc"] >= 0.99
        assert report["provenance"]["artifact"] == "layerfuse"

    def test_auto_heads_match_rows_on_12_layer_store(self, tmp_path):
        store_path = tmp_path / "l12.lfr"
        assert 0 == main(
            [
                "synth", "--preset", "separable", "--out", str(store_path),
                "--train-n", "50", "--val-n", "10", "--test-n", "10",
                "--layers", "12", "--dim", "12", "--classes", "2", "--seed", "0",
            ]
        )
        out = tmp_path / "run"
        code = main(
            [
                "train", "--features", str(store_path), "--probe", "attentive-fusion",
                "--layers", "all", "--tokens", "cls+ap", "--heads", "auto",
                "--out", str(out),
            ]
        )
        assert code == 0
        report = json.loads((out / "report.json").read_text())
        assert report["config"]["num_rows"] == 24
        assert report["config"]["num_heads"] == 24
        assert report["config"]["heads_fallback"] is False

    def test_linear_last_cls_is_baseline_probe(self, separable_lfr, tmp_path):
        out = tmp_path / "base"
        code = main(
            [
                "train", "--features", str(separable_lfr), "--probe", "linear",
                "--layers", "last", "--tokens", "cls", "--out", str(out),
            ]
        )
        assert code == 0
        report = json.loads((out / "report.json").read_text())
        assert report["config"]["kind"] == "linear_cls"
        assert report["config"]["num_rows"] == 1

    def test_aat_without_patches_exits_2(self, separable_lfr, tmp_path, capsys):
        code = main(
            [
                "train", "--features", str(separable_lfr), "--probe", "aat",
                "--out", str(tmp_path / "x"),
            ]
        )
        assert code == 2
        assert "PATCH" in capsys.readouterr().err

    def test_aat_trains_on_patch_store(self, patch_lfr, tmp_path):
        out = tmp_path / "aat"
        code = main(
            ["train", "--features", str(patch_lfr), "--probe", "aat", "--out", str(out)]
        )
        assert code == 0
        report = json.loads((out / "report.json").read_text())
        assert report["config"]["num_rows"] == 4  # CLS + 3 patches
        assert report["config"]["num_heads"] == 8

    def test_idempotent_outputs(self, separable_lfr, tmp_path):
        outs = []
        for name in ("a", "b"):
            out = tmp_path / name
            assert 0 == main(
                [
                    "train", "--features", str(separable_lfr), "--probe", "linear",
                    "--layers", "all", "--tokens", "cls+ap", "--seed", "7",
                    "--out", str(out),
                ]
            )
            outs.append(out)
        a, b = outs
        assert (a / "probe.lfpb").read_bytes() == (b / "probe.lfpb").read_bytes()
        assert (a / "history.csv").read_bytes() == (b / "history.csv").read_bytes()
        ra = _strip_seconds(json.loads((a / "report.json").read_text()))
        rb = _strip_seconds(json.loads((b / "report.json").read_text()))
        ra["provenance"]["flags"].pop("out")
        rb["provenance"]["flags"].pop("out")
        assert ra == rb


class TestEvalHeatmapCka:
    @pytest.fixture(scope="class")
    @staticmethod
    def trained(separable_lfr, tmp_path_factory):
        out = tmp_path_factory.mktemp("trained")
        assert 0 == main(
            [
                "train", "--features", str(separable_lfr), "--probe", "attentive-fusion",
                "--layers", "all", "--tokens", "cls+ap", "--out", str(out / "fusion"),
            ]
        )
        assert 0 == main(
            [
                "train", "--features", str(separable_lfr), "--probe", "linear",
                "--layers", "last", "--tokens", "cls", "--out", str(out / "base"),
            ]
        )
        return out

    def test_eval_gain_matches_reports(self, separable_lfr, trained, tmp_path):
        out = tmp_path / "eval"
        code = main(
            [
                "eval", "--checkpoint", str(trained / "fusion" / "probe.lfpb"),
                "--features", str(separable_lfr),
                "--baseline", str(trained / "base" / "report.json"),
                "--out", str(out),
            ]
        )
        assert code == 0
        payload = json.loads((out / "eval.json").read_text())
        assert payload["gain_pp"] == pytest.approx(
            100 * (payload["bal_acc"] - payload["baseline_bal_acc"]), abs=1e-12
        )

    def test_heatmap_csv(self, separable_lfr, trained, tmp_path):
        out = tmp_path / "hm"
        code = main(
            [
                "heatmap", "--checkpoint", str(trained / "fusion" / "probe.lfpb"),
                "--features", str(separable_lfr), "--out", str(out),
            ]
        )
        assert code == 0
        rows = (out / "heatmap.csv").read_text().strip().splitlines()
        assert rows[0] == "kind,layer_1,layer_2"
        total = sum(float(v) for row in rows[1:] for v in row.split(",")[1:])
        assert total == pytest.approx(1.0, abs=1e-9)

    def test_heatmap_rejects_linear_checkpoint(self, separable_lfr, trained, tmp_path, capsys):
        code = main(
            [
                "heatmap", "--checkpoint", str(trained / "base" / "probe.lfpb"),
                "--features", str(separable_lfr), "--out", str(tmp_path / "x"),
            ]
        )
        assert code == 2

    def test_cka_curve_ends_at_one(self, separable_lfr, tmp_path):
        out = tmp_path / "cka"
        code = main(
            ["cka", "--features", str(separable_lfr), "--kind", "cls", "--out", str(out)]
        )
        assert code == 0
        rows = (out / "cka_cls.csv").read_text().strip().splitlines()
        assert len(rows) == 3  # header + L=2 layers
        assert float(rows[-1].split(",")[1]) == 1.0


class TestParams:
    def test_reference_value(self, capsys):
        assert 0 == main(["params", "--probe", "attentive-fusion", "--d", "768", "--classes", "10"])
        assert capsys.readouterr().out.strip() == "4,733,962"

    def test_linear_needs_layer_count(self, capsys):
        assert 0 == main(
            ["params", "--probe", "linear", "--d", "384", "--classes", "2", "--layers-count", "12"]
        )
        assert capsys.readouterr().out.strip() == "18,434"


class TestSeedStudy:
    def test_rows_and_stats(self, separable_lfr, tmp_path):
        out = tmp_path / "seeds"
        code = main(
            [
                "seedstudy", "--features", str(separable_lfr), "--probe", "linear",
                "--layers", "last", "--tokens", "cls", "--seeds", "0,1,2",
                "--out", str(out),
            ]
        )
        assert code == 0
        payload = json.loads((out / "seedstudy.json").read_text())
        assert len(payload["rows"]) == 3
        assert payload["std"] >= 0.0


class TestGridSearch:
    def test_aat_grid_is_pinned_and_ranked(self, patch_lfr, tmp_path):
        out = tmp_path / "grid"
        code = main(
            [
                "gridsearch", "--features", str(patch_lfr), "--probe", "aat",
                "--seed", "0", "--out", str(out),
            ]
        )
        assert code == 0
        board = json.loads((out / "leaderboard.json").read_text())
        assert len(board["cells"]) == 9
        assert all(c["wd"] == 0.1 for c in board["cells"])
        assert (out / "probe.lfpb").exists()
        winner = board["cells"][board["winner"]]
        best = max(c["val_bal_acc"] for c in board["cells"])
        assert winner["val_bal_acc"] == best


def test_unknown_subcommand_exits_2():
    with pytest.raises(SystemExit) as exc:
        main(["frobnicate"])
    assert exc.value.code == 2


def test_missing_store_exits_2(tmp_path, capsys):
    code = main(["train", "--features", str(tmp_path / "no.lfr"), "--probe", "linear", "--out", str(tmp_path / "o")])
    assert code == 2
