from __future__ import annotations

import json

import pytest

from reconalign.cli import run_subcommand
from reconalign.detector import DetectorCheckpoint
from reconalign.manifest import read_manifest, verify_manifest
from reconalign.recipe import RunConfig

SMALL_AUG = ["--set", "augmentation.rrc_side=64", "--set", "augmentation.train_crop_side=48",
             "--set", "backbone.widths=[4,8]"]


def test_macs_with_bundled_configs(tmp_path, capsys):
    assert run_subcommand(["macs", "--steps", "50", "--out", str(tmp_path / "m")]) == 0
    rep = json.loads((tmp_path / "m" / "macs.json").read_text())
    assert rep["ratio"] > 10 and rep["steps"] == 50
    assert (tmp_path / "m" / "run_config.json").is_file()
    snap = json.loads((tmp_path / "m" / "run_config.json").read_text())
    assert snap["accounting"]["steps"] == 50


def test_train_with_missing_manifest_leaves_nothing(tmp_path, capsys):
    out = tmp_path / "ck"
    code = run_subcommand(["train", "--train", str(tmp_path / "nope.jsonl"), "--val", str(tmp_path / "v.jsonl"),
                           "--out", str(out)])
    assert code == 2 and not out.exists()
    err = capsys.readouterr().err.strip().splitlines()
    assert len(err) == 1 and err[0].startswith("reconalign train: error:")


def test_unknown_flag_prints_usage(capsys):
    assert run_subcommand(["macs", "--bogus"]) == 2
    assert "usage:" in capsys.readouterr().err


def test_unknown_subcommand_and_bad_config(tmp_path, capsys):
    assert run_subcommand(["frobnicate"]) == 2
    bad = tmp_path / "c.json"
    bad.write_text('{"nonsense": 1}')
    assert run_subcommand(["macs", "--config", str(bad), "--out", str(tmp_path / "o")]) == 2
    assert not (tmp_path / "o").exists()
    assert run_subcommand(["macs", "--set", "noequals", "--out", str(tmp_path / "o")]) == 2


def test_default_out_uses_environment(tmp_path, monkeypatch):
    monkeypatch.setenv("RECONALIGN_OUT", str(tmp_path / "runs"))
    assert run_subcommand(["macs", "--pipeline", "reconstruct"]) == 0
    assert (tmp_path / "runs" / "macs" / "macs.json").is_file()


def test_preset_and_override_precedence():
    cfg = RunConfig.load("desk").override(["train.lr=0.5", "tag=x"])
    assert cfg.train["lr"] == 0.5 and cfg.tag == "x" and cfg.textures["n"] == 2000


def test_end_to_end_smoke(tmp_path, capsys):
    t = tmp_path
    common = ["--seed", "3", "--log-level", "WARNING"]
    assert run_subcommand(["gen-textures", "--n", "30", "--side", "64", "--quality", "70:100",
                           "--out", str(t / "tex"), *common]) == 0
    assert run_subcommand(["train-ae", "--manifest", str(t / "tex" / "manifest.jsonl"), "--epochs", "1",
                           "--out", str(t / "ae"), *common]) == 0
    assert run_subcommand(["reconstruct", "--manifest", str(t / "tex" / "manifest.jsonl"),
                           "--ae", f"toy:{t / 'ae' / 'autoencoder.pt'}", "--save-policy", "jpeg:70-100",
                           "--out", str(t / "rec"), *common]) == 0
    paired = read_manifest(t / "rec" / "paired.jsonl")
    assert paired.is_paired() and len(paired) == 60 and verify_manifest(paired) == []
    assert run_subcommand(["split", "--manifest", str(t / "rec" / "paired.jsonl"), "--fractions", "0.6,0.2,0.2",
                           "--out", str(t / "split"), *common]) == 0
    parts = {n: read_manifest(t / "split" / f"{n}.jsonl") for n in ("train", "val", "test")}
    assert [len(parts[n]) for n in ("train", "val", "test")] == [36, 12, 12]
    assert run_subcommand(["train", "--train", str(t / "split" / "train.jsonl"), "--val",
                           str(t / "split" / "val.jsonl"), "--epochs", "2", "--batch-size", "8",
                           "--out", str(t / "ck"), *SMALL_AUG, *common]) == 0
    ck = DetectorCheckpoint.load(t / "ck")
    assert len(ck.history) == 3
    assert run_subcommand(["eval", "--checkpoint", str(t / "ck"), "--manifest", str(t / "split" / "test.jsonl"),
                           "--calibrate", str(t / "split" / "val.jsonl"), "--out", str(t / "ev"), *common]) == 0
    report = json.loads((t / "ev" / "report.json").read_text())
    assert 0 <= report["ap"] <= 1
    assert run_subcommand(["calibrate", "--checkpoint", str(t / "ck"), "--val", str(t / "split" / "val.jsonl"),
                           "--out", str(t / "ck2"), *common]) == 0
    assert DetectorCheckpoint.load(t / "ck").threshold == 0.5
    assert run_subcommand(["calibrate", "--checkpoint", str(t / "ck"), "--val", str(t / "split" / "val.jsonl"),
                           "--out", str(t / "ck"), *common]) == 2
    assert run_subcommand(["sweep", "--checkpoint", str(t / "ck2"), "--manifest", str(t / "split" / "test.jsonl"),
                           "--kind", "resize", "--grid", "0.75,1.0,1.5", "--min-side", "32",
                           "--out", str(t / "sw"), *common]) == 0
    for ext in ("csv", "json", "png"):
        assert (t / "sw" / f"resize_scale.{ext}").is_file()
    policy = t / "pp.json"
    policy.write_text(json.dumps({"jpeg_prob": 1.0, "resize_prob": 0.0, "min_side": 32}))
    assert run_subcommand(["postprocess", "--manifest", str(t / "split" / "test.jsonl"), "--policy", str(policy),
                           "--out", str(t / "pp"), *common]) == 0
    assert len(read_manifest(t / "pp" / "manifest.jsonl")) == 12
    assert run_subcommand(["ingest", "--root", str(t / "tex"), "--label", "real", "--source", "tex",
                           "--out", str(t / "ing" / "m.jsonl"), *common]) == 0
    assert len(read_manifest(t / "ing" / "m.jsonl")) == 30
    assert (t / "ing" / "m.run_config.json").is_file()
    for d in ("tex", "ae", "rec", "split", "ck", "ev", "ck2", "sw", "pp"):
        snap = json.loads((t / d / "run_config.json").read_text())
        assert snap["seed"] == 3, d
