"""CLI: exit codes, artifacts, determinism, and config merging."""

import json
from pathlib import Path

import numpy as np
import pytest

from topicmatch.cli import main
from topicmatch.storage import read_pgm, write_pgm
from topicmatch.synth import DatasetManifest


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """Dataset plus a briefly trained checkpoint shared by CLI tests."""
    root = tmp_path_factory.mktemp("cli")
    data = root / "data"
    rc = main(
        [
            "gen-data", "--n", "6", "--out", str(data), "--seed", "13",
            "--dims", "64x64", "--max-rotation-deg", "6.0",
            "--pose-range", "0.03,0.08",
        ]
    )
    assert rc == 0
    run = root / "run"
    rc = main(
        [
            "train", "--data", str(data), "--out", str(run),
            "--variant", "fast", "--epochs", "40", "--seed", "0",
            "--train-split", "all", "--num-topics", "8", "--covis", "4",
            "--widths", "8,16,32", "--fine-dim", "16",
        ]
    )
    assert rc == 0
    return {"root": root, "data": data, "ckpt": run / "checkpoint_final.ckpt", "run": run}


class TestGenData:
    def test_manifest_written_with_split(self, workspace):
        manifest = DatasetManifest.load(workspace["data"])
        assert len(manifest.pairs) == 6
        assert {e["split"] for e in manifest.pairs} == {"train"}

    def test_zero_pairs_is_config_error(self, tmp_path, capsys):
        rc = main(["gen-data", "--n", "0", "--out", str(tmp_path / "d")])
        assert rc == 2
        assert "positive" in capsys.readouterr().err

    def test_same_flags_identical_hashes(self, tmp_path):
        for sub in ("a", "b"):
            assert main(
                ["gen-data", "--n", "2", "--out", str(tmp_path / sub), "--seed", "5",
                 "--dims", "64x64"]
            ) == 0
        ma = DatasetManifest.load(tmp_path / "a")
        mb = DatasetManifest.load(tmp_path / "b")
        for ea, eb in zip(ma.pairs, mb.pairs):
            assert ea["images_sha256"] == eb["images_sha256"]

    def test_help_exits_zero(self, capsys):
        with pytest.raises(SystemExit) as exc:
            main(["gen-data", "--help"])
        assert exc.value.code == 0
        assert "usage" in capsys.readouterr().out


class TestTrain:
    def test_artifacts_exist(self, workspace):
        assert workspace["ckpt"].exists()
        lines = (workspace["run"] / "train_report.jsonl").read_text().strip().splitlines()
        assert len(lines) == 40
        assert json.loads(lines[0])["variant"] == "fast"

    def test_missing_data_flag_exits_two(self):
        with pytest.raises(SystemExit) as exc:
            main(["train", "--out", "/tmp/x"])
        assert exc.value.code == 2

    def test_config_file_profile_merge(self, workspace, tmp_path):
        cfg = {
            "version": 1,
            "train": {"epochs": 1, "lr": 0.0005},
            "matcher": {"num_topics": 8, "num_covisible": 4,
                        "backbone_widths": [8, 16, 32], "fine_dim": 16},
        }
        cfg_path = tmp_path / "cfg.json"
        cfg_path.write_text(json.dumps(cfg))
        out = tmp_path / "run"
        rc = main(
            ["train", "--data", str(workspace["data"]), "--out", str(out),
             "--config", str(cfg_path), "--epochs", "2", "--train-split", "all"]
        )
        assert rc == 0
        lines = (out / "train_report.jsonl").read_text().strip().splitlines()
        assert len(lines) == 2  # flag overrides file epochs=1

    def test_unknown_config_key_rejected(self, workspace, tmp_path):
        cfg_path = tmp_path / "cfg.json"
        cfg_path.write_text(json.dumps({"version": 1, "train": {"bogus_knob": 3}}))
        rc = main(
            ["train", "--data", str(workspace["data"]), "--out", str(tmp_path / "r"),
             "--config", str(cfg_path)]
        )
        assert rc == 2


class TestMatch:
    def test_self_match_accuracy(self, workspace, tmp_path):
        manifest = DatasetManifest.load(workspace["data"])
        img_path = manifest.root / manifest.pairs[0]["image_a"]
        out_csv = tmp_path / "m.csv"
        rc = main(
            ["match", str(img_path), str(img_path),
             "--checkpoint", str(workspace["ckpt"]), "--out-matches", str(out_csv)]
        )
        assert rc == 0
        rows = out_csv.read_text().strip().splitlines()
        assert rows[0] == "xa,ya,xb,yb,conf"
        arr = np.array([[float(v) for v in r.split(",")] for r in rows[1:]])
        assert len(arr) >= 10
        displacement = np.abs(arr[:, 0] - arr[:, 2]) + np.abs(arr[:, 1] - arr[:, 3])
        assert (displacement < 2.0).mean() > 0.9

    def test_tau_one_gives_header_only(self, workspace, tmp_path):
        manifest = DatasetManifest.load(workspace["data"])
        img_path = manifest.root / manifest.pairs[0]["image_a"]
        out_csv = tmp_path / "m.csv"
        rc = main(
            ["match", str(img_path), str(img_path), "--checkpoint", str(workspace["ckpt"]),
             "--tau", "1.0", "--out-matches", str(out_csv)]
        )
        assert rc == 0
        assert out_csv.read_text().strip() == "xa,ya,xb,yb,conf"

    def test_viz_overlay_written(self, workspace, tmp_path):
        manifest = DatasetManifest.load(workspace["data"])
        entry = manifest.pairs[0]
        out_csv = tmp_path / "m.csv"
        viz = tmp_path / "overlay.ppm"
        rc = main(
            ["match", str(manifest.root / entry["image_a"]),
             str(manifest.root / entry["image_b"]),
             "--checkpoint", str(workspace["ckpt"]),
             "--out-matches", str(out_csv), "--viz", str(viz)]
        )
        assert rc == 0
        data = viz.read_bytes()
        assert data.startswith(b"P6")
        # side-by-side canvas: width doubles
        dims = data.split(b"\n")[1].split()
        assert int(dims[0]) == 128 and int(dims[1]) == 64

    def test_unreadable_image_exits_three(self, workspace, tmp_path):
        bad = tmp_path / "bad.png"
        bad.write_bytes(b"nope")
        rc = main(
            ["match", str(bad), str(bad), "--checkpoint", str(workspace["ckpt"]),
             "--out-matches", str(tmp_path / "m.csv")]
        )
        assert rc == 3


class TestEvalProfileViz:
    def test_oracle_eval_upper_bound(self, workspace, tmp_path):
        out = tmp_path / "report.json"
        rc = main(
            ["eval", "--data", str(workspace["data"]), "--oracle",
             "--split", "all", "--out", str(out)]
        )
        assert rc == 0
        report = json.loads(out.read_text())
        assert report["auc"]["3"] > 0.99

    def test_profile_rows_sum_to_total(self, tmp_path):
        out = tmp_path / "cost.csv"
        rc = main(["profile", "--n", "1024", "--k", "100", "--out", str(out)])
        assert rc == 0
        rows = [r.split(",") for r in out.read_text().strip().splitlines()[1:]]
        stage_sum = sum(int(v) for name, v in rows if name != "total")
        total = next(int(v) for name, v in rows if name == "total")
        assert stage_sum == total

    def test_viz_topics_artifacts(self, workspace, tmp_path):
        out = tmp_path / "viz"
        rc = main(
            ["viz-topics", "--checkpoint", str(workspace["ckpt"]),
             "--data", str(workspace["data"]), "--out", str(out)]
        )
        assert rc == 0
        for name in ("overlay_a.ppm", "overlay_b.ppm", "index_a.pgm", "index_b.pgm", "palette.json"):
            assert (out / name).exists(), name

    def test_missing_checkpoint_exits_three(self, workspace, tmp_path):
        rc = main(
            ["eval", "--data", str(workspace["data"]), "--checkpoint",
             str(tmp_path / "missing.ckpt"), "--out", str(tmp_path / "r.json")]
        )
        assert rc == 3
