import json

import numpy as np
import pytest
import yaml
from PIL import Image

from unisurf.cli import main

from test_datasets import _mvtec_tree


@pytest.fixture(scope="module")
def toy_yaml(tmp_path_factory):
    """Config file + tiny dataset for CLI runs."""
    from unisurf import generate_toy_dataset

    root = tmp_path_factory.mktemp("cli_toy")
    manifest = generate_toy_dataset(
        root / "data", n_train_normal=8, n_train_anomalous=6,
        n_test_normal=4, n_test_anomalous=4, size=64, seed=3,
    )
    cfg = {
        "regime": "unsupervised",
        "seed": 0,
        "backbone": {"name": "toy", "pretrained": False},
        "train": {
            "epochs": 2,
            "batch_size": 6,
            "lr_decay_epochs": [],
            "cache_features": True,
        },
        "heads": {"cls_width": 32},
        "synth": {"sigma": 0.2},
        "data": {"root": str(manifest), "layout": "manifest", "image_size": [64, 64]},
    }
    path = root / "toy.yaml"
    path.write_text(yaml.safe_dump(cfg))
    return path, root


@pytest.fixture(scope="module")
def trained_run(toy_yaml, tmp_path_factory):
    path, root = toy_yaml
    out = tmp_path_factory.mktemp("cli_run")
    rc = main(["train", "--config", str(path), "--output-dir", str(out)])
    assert rc == 0
    return path, out


class TestTrain:
    def test_train_outputs(self, trained_run):
        _, out = trained_run
        assert (out / "checkpoint.pt").is_file()
        assert (out / "train_log.jsonl").is_file()
        assert (out / "resolved_config.yaml").is_file()
        resolved = yaml.safe_load((out / "resolved_config.yaml").read_text())
        assert resolved["synth"]["perlin_threshold"] == 0.2

    def test_invalid_override_names_field(self, toy_yaml, tmp_path, capsys):
        path, _ = toy_yaml
        rc = main([
            "train", "--config", str(path), "--output-dir", str(tmp_path),
            "--override", "loss.th=-1",
        ])
        assert rc == 2
        assert "loss.th" in capsys.readouterr().err

    def test_unknown_key_rejected(self, toy_yaml, tmp_path, capsys):
        path, _ = toy_yaml
        rc = main([
            "train", "--config", str(path), "--output-dir", str(tmp_path),
            "--override", "loss.thh=0.5",
        ])
        assert rc == 2
        assert "loss.thh" in capsys.readouterr().err

    def test_mixed_without_plan_rejected(self, toy_yaml, tmp_path, capsys):
        path, _ = toy_yaml
        rc = main([
            "train", "--config", str(path), "--output-dir", str(tmp_path),
            "--override", "regime=mixed",
        ])
        assert rc == 2
        assert "mixed" in capsys.readouterr().err


class TestEval:
    def test_eval_report(self, trained_run, tmp_path):
        cfg_path, run_dir = trained_run
        out = tmp_path / "eval"
        rc = main([
            "eval", "--config", str(cfg_path), "--output-dir", str(out),
            "--checkpoint", str(run_dir / "checkpoint.pt"),
        ])
        assert rc == 0
        report = json.loads((out / "eval_report.json").read_text())
        for key in ("det_auroc", "det_ap", "loc_aupro", "loc_ap"):
            assert report[key] is not None
            assert 0.0 <= report[key] <= 1.0
        assert report["n_images"] == 8
        csvs = list(out.glob("scores_*.csv"))
        assert len(csvs) == 1

    def test_seeds_aggregation(self, trained_run, tmp_path):
        cfg_path, run_dir = trained_run
        out = tmp_path / "eval_seeds"
        ckpt = str(run_dir / "checkpoint.pt")
        rc = main([
            "eval", "--config", str(cfg_path), "--output-dir", str(out),
            "--checkpoint", ckpt, ckpt, "--seeds", "2",
        ])
        assert rc == 0
        report = json.loads((out / "eval_report.json").read_text())
        assert report["n_runs"] == 2
        assert "det_auroc" in report["mean"]
        assert report["std"]["det_auroc"] == pytest.approx(0.0)

    def test_seeds_count_mismatch(self, trained_run, tmp_path):
        cfg_path, run_dir = trained_run
        rc = main([
            "eval", "--config", str(cfg_path), "--output-dir", str(tmp_path),
            "--checkpoint", str(run_dir / "checkpoint.pt"), "--seeds", "3",
        ])
        assert rc == 2

    def test_checkpoint_mismatch_is_data_error(self, trained_run, tmp_path, capsys):
        cfg_path, run_dir = trained_run
        bogus = tmp_path / "bogus.pt"
        bogus.write_bytes(b"not a checkpoint")
        rc = main([
            "eval", "--config", str(cfg_path), "--output-dir", str(tmp_path),
            "--checkpoint", str(bogus),
        ])
        assert rc == 3


class TestPredict:
    def test_overlays_and_raw_maps(self, trained_run, tmp_path):
        cfg_path, run_dir = trained_run
        cfg = yaml.safe_load(cfg_path.read_text())
        manifest = cfg["data"]["root"]
        from unisurf import read_manifest

        samples = [s for s in read_manifest(manifest) if s.split == "test"][:3]
        paths = [str(s.image_path) for s in samples]
        out = tmp_path / "pred"
        rc = main([
            "predict", "--checkpoint", str(run_dir / "checkpoint.pt"),
            "--output-dir", str(out), "--inputs", *paths,
        ])
        assert rc == 0
        overlays = sorted(out.glob("*_overlay.png"))
        raw_maps = sorted(out.glob("*_map.png"))
        assert len(overlays) == 3 and len(raw_maps) == 3
        scores = json.loads((out / "scores.json").read_text())
        assert len(scores) == 3
        for entry in scores.values():
            assert entry["score_text"] == f"{entry['score']:.3f}"

        raw = np.asarray(Image.open(raw_maps[0]))
        assert raw.dtype == np.uint16

        # rerun produces byte-identical raw maps
        out2 = tmp_path / "pred2"
        rc = main([
            "export-overlays", "--checkpoint", str(run_dir / "checkpoint.pt"),
            "--output-dir", str(out2), "--inputs", *paths,
        ])
        assert rc == 0
        for p in raw_maps:
            assert (out2 / p.name).read_bytes() == p.read_bytes()

    def test_unreadable_inputs_skip_then_fail(self, trained_run, tmp_path, capsys):
        cfg_path, run_dir = trained_run
        rc = main([
            "predict", "--checkpoint", str(run_dir / "checkpoint.pt"),
            "--output-dir", str(tmp_path / "pred"), "--inputs", "/no/such/img.png",
        ])
        assert rc == 3


class TestBench:
    def test_bench_report(self, toy_yaml, tmp_path):
        cfg_path, _ = toy_yaml
        out = tmp_path / "bench"
        rc = main([
            "bench", "--config", str(cfg_path), "--output-dir", str(out),
            "--warmup-iters", "1", "--timed-iters", "3",
        ])
        assert rc == 0
        report = json.loads((out / "bench_report.json").read_text())
        assert report["mean_ms"] > 0


class TestMakeManifest:
    def test_compiles_layout(self, tmp_path):
        root = _mvtec_tree(tmp_path / "cat")
        out = tmp_path / "manifest.tsv"
        rc = main([
            "make-manifest", "--root", str(root), "--layout", "mvtec",
            "--output", str(out),
        ])
        assert rc == 0
        from unisurf import read_manifest

        samples = read_manifest(out)
        assert len(samples) == 7

    def test_bad_root(self, tmp_path):
        rc = main([
            "make-manifest", "--root", str(tmp_path / "missing"), "--layout", "mvtec",
            "--output", str(tmp_path / "m.tsv"),
        ])
        assert rc == 3
