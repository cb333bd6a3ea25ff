"""CLI plumbing: subcommands wire together and exit codes follow the contract."""

import json
from pathlib import Path

import numpy as np
import pytest

from layoutflow.cli import main
from layoutflow.dataset import read_image, read_manifest


def _run(argv):
    return main([str(a) for a in argv])


def _write_train_config(path: Path, manifest: Path, out: Path, **train_overrides):
    train = {
        "total_steps": 4,
        "warmup_steps": 2,
        "batch_size": 2,
        "seed": 1,
        "lr": 1e-3,
    }
    train.update(train_overrides)
    cfg = {
        "dataset": str(manifest),
        "out": str(out),
        "init_seed": 0,
        "model": {
            "image_size": 16,
            "patch": 4,
            "d_model": 8,
            "heads": 2,
            "head_dim": 4,
            "depth": 2,
            "text_len": 16,
            "max_entities": 2,
        },
        "control": {"interval": 1},
        "train": train,
    }
    path.write_text(json.dumps(cfg, indent=2))
    return path


@pytest.fixture(scope="module")
def tiny_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("data")
    code = _run(
        [
            "build-dataset",
            "--count", 6,
            "--seed", 9,
            "--out", root,
            "--image-size", 16,
            "--max-entities", 2,
        ]
    )
    assert code == 0
    return root


def test_selfcheck_passes(capsys):
    assert _run(["selfcheck"]) == 0
    out = capsys.readouterr().out
    assert out.count("PASS") == 4
    assert "FAIL" not in out


def test_build_dataset_outputs(tiny_dataset):
    header, records = read_manifest(tiny_dataset / "manifest.jsonl")
    assert header["count"] == 6 and len(records) == 6
    for idx, rec in enumerate(records):
        img = read_image(tiny_dataset / rec["image"])
        assert img.shape == (16, 16, 3) and img.dtype == np.uint8
        assert rec["image"] == f"images/{idx:06d}.lsim"


def test_train_sample_eval_pipeline(tiny_dataset, tmp_path, capsys):
    run_dir = tmp_path / "run"
    cfg = _write_train_config(tmp_path / "cfg.json", tiny_dataset / "manifest.jsonl", run_dir)
    assert _run(["train", "--config", cfg]) == 0
    assert (run_dir / "model.ckpt").exists()
    metrics = [json.loads(l) for l in (run_dir / "metrics.jsonl").read_text().splitlines()]
    assert len(metrics) == 4
    assert set(metrics[0]) == {"step", "loss", "lr", "t_mean"}

    samples = tmp_path / "samples"
    code = _run(
        [
            "sample",
            "--checkpoint", run_dir / "model.ckpt",
            "--layouts", tiny_dataset / "manifest.jsonl",
            "--out", samples,
            "--steps", 2,
            "--seed", 3,
        ]
    )
    assert code == 0
    assert sorted(p.name for p in samples.glob("*.lsim"))[0] == "000000.lsim"
    assert len(list(samples.glob("*.lsim"))) == 6

    report_path = tmp_path / "report.json"
    capsys.readouterr()
    code = _run(
        [
            "eval",
            "--images", samples,
            "--manifest", tiny_dataset / "manifest.jsonl",
            "--report", report_path,
        ]
    )
    assert code == 0
    report = json.loads(report_path.read_text())
    assert {"miou", "success_rate", "n_entities"} <= set(report)
    assert report["n_entities"] > 0
    line = capsys.readouterr().out.strip().splitlines()[-1]
    assert line.startswith("miou=") and "success_rate=" in line


def test_two_stage_train_reuses_backbone(tiny_dataset, tmp_path):
    base_dir = tmp_path / "base"
    cfg = _write_train_config(tmp_path / "b.json", tiny_dataset / "manifest.jsonl", base_dir)
    raw = json.loads(cfg.read_text())
    raw["stage"] = "base"
    cfg.write_text(json.dumps(raw))
    assert _run(["train", "--config", cfg]) == 0

    from layoutflow.checkpoint import load_base, load_model

    base = load_base(base_dir / "model.ckpt")

    ctl_dir = tmp_path / "ctl"
    cfg2 = _write_train_config(tmp_path / "c.json", tiny_dataset / "manifest.jsonl", ctl_dir)
    raw2 = json.loads(cfg2.read_text())
    raw2["base_checkpoint"] = str(base_dir / "model.ckpt")
    cfg2.write_text(json.dumps(raw2))
    assert _run(["train", "--config", cfg2]) == 0

    model = load_model(ctl_dir / "model.ckpt")
    for name, p in model.base.params.items():
        np.testing.assert_array_equal(p.value.data, base.params[name].value.data)


def test_sample_zero_fusion_flag(tiny_dataset, tmp_path):
    run_dir = tmp_path / "run"
    cfg = _write_train_config(
        tmp_path / "cfg.json", tiny_dataset / "manifest.jsonl", run_dir, total_steps=1, warmup_steps=0
    )
    assert _run(["train", "--config", cfg]) == 0
    out = tmp_path / "uncond"
    code = _run(
        [
            "sample",
            "--checkpoint", run_dir / "model.ckpt",
            "--layouts", tiny_dataset / "manifest.jsonl",
            "--out", out,
            "--steps", 2,
            "--zero-fusion",
        ]
    )
    assert code == 0
    assert len(list(out.glob("*.lsim"))) == 6


def test_train_is_deterministic_across_runs(tiny_dataset, tmp_path):
    outs = []
    for name in ("one", "two"):
        run_dir = tmp_path / name
        cfg = _write_train_config(
            tmp_path / f"{name}.json", tiny_dataset / "manifest.jsonl", run_dir
        )
        assert _run(["train", "--config", cfg]) == 0
        outs.append(run_dir)
    assert (outs[0] / "model.ckpt").read_bytes() == (outs[1] / "model.ckpt").read_bytes()
    assert (outs[0] / "metrics.jsonl").read_bytes() == (outs[1] / "metrics.jsonl").read_bytes()


def test_validation_failures_exit_1(tiny_dataset, tmp_path):
    assert _run(["build-dataset", "--count", 2, "--seed", 0, "--out", tmp_path / "d", "--p-pos", 1.5]) == 1
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"out": str(tmp_path)}))
    assert _run(["train", "--config", bad]) == 1
    unknown = tmp_path / "unknown.json"
    unknown.write_text(
        json.dumps({"dataset": "x", "out": "y", "model": {"no_such_field": 1}})
    )
    assert _run(["train", "--config", unknown]) == 1
    assert (
        _run(
            [
                "eval",
                "--images", tiny_dataset / "images",
                "--manifest", tiny_dataset / "manifest.jsonl",
                "--report", tmp_path / "r.json",
                "--iou-thresh", 1.5,
            ]
        )
        == 1
    )


def test_io_failures_exit_2(tmp_path):
    assert (
        _run(
            [
                "sample",
                "--checkpoint", tmp_path / "absent.ckpt",
                "--layouts", tmp_path / "absent.jsonl",
                "--out", tmp_path / "s",
            ]
        )
        == 2
    )
    assert (
        _run(
            [
                "eval",
                "--images", tmp_path,
                "--manifest", tmp_path / "absent.jsonl",
                "--report", tmp_path / "r.json",
            ]
        )
        == 2
    )
