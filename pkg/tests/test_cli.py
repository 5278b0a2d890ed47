"""End-to-end CLI behavior: exit codes, config echo, artifact layout,
byte-identical reruns, and the classify-stream lead invariant."""

import csv
import json

import pytest

from cgap2.cli import main

MODEL = {"image_size": 32, "feature_spatial": 4, "feature_channels": 48,
         "bottleneck_channels": 8, "heatmap_size": 8, "context_n": 3,
         "gap_g": 4, "k_value": 2, "num_classes": 3, "fc_dims": [64, 32],
         "classifier_conv_channels": 16, "temporal_depth": 2}


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    config = {
        "seed": 5,
        "model": MODEL,
        "optim": {"epochs": 2, "lr_drop_epoch": 1},
        "data": {"num_classes": 3, "sequences_per_class": 4, "length": 40,
                 "cameras": 1, "image_size": 32, "background": "plain"},
        "train": {"frame_stride": 8, "hop": 4},
    }
    cfg_path = root / "config.json"
    cfg_path.write_text(json.dumps(config))
    ds = root / "dataset"
    assert main(["generate", "--config", str(cfg_path), "--dataset", str(ds)]) == 0
    return root, cfg_path, ds


def test_generate_refuses_existing(workspace):
    root, cfg, ds = workspace
    assert main(["generate", "--config", str(cfg), "--dataset", str(ds)]) == 2


def test_train_all_and_artifacts(workspace):
    root, cfg, ds = workspace
    out = root / "run"
    assert main(["train", "--config", str(cfg), "--dataset", str(ds),
                 "--out", str(out)]) == 0
    for name in ("pretrain.ckpt", "pose.ckpt", "classifier.ckpt",
                 "train_pretrain.csv", "train_pose.csv", "train_classifier.csv",
                 "train_pretrain.json", "config.json"):
        assert (out / name).exists(), name
    # config echoed with resolved values
    echoed = json.loads((out / "config.json").read_text())
    assert echoed["seed"] == 5
    assert echoed["model"]["gap_g"] == 4
    # loss CSV: header + exactly epochs rows
    lines = (out / "train_pose.csv").read_text().strip().splitlines()
    assert len(lines) == 1 + 2


def test_train_rerun_byte_identical(workspace):
    root, cfg, ds = workspace
    out2 = root / "run2"
    assert main(["train", "--config", str(cfg), "--dataset", str(ds),
                 "--out", str(out2)]) == 0
    for name in ("train_pretrain.csv", "train_pose.csv", "train_classifier.csv",
                 "classifier.ckpt"):
        assert (root / "run" / name).read_bytes() == (out2 / name).read_bytes(), name


def test_phase_precondition_exit_code(workspace):
    root, cfg, ds = workspace
    assert main(["train", "--config", str(cfg), "--dataset", str(ds),
                 "--out", str(root / "empty_run"), "--phase", "pose"]) == 3


def test_eval_trained_and_untrained(workspace):
    root, cfg, ds = workspace
    out = root / "eval"
    assert main(["eval", "--config", str(cfg), "--dataset", str(ds),
                 "--out", str(out), "--checkpoint",
                 str(root / "run" / "classifier.ckpt")]) == 0
    rows = list(csv.reader((out / "eval.csv").open()))
    assert rows[0] == ["class_0", "class_1", "class_2", "Avg"]
    assert len(rows) == 2
    report = json.loads((out / "eval.json").read_text())
    assert 0.0 <= report["accuracy"] <= 1.0
    # evaluating without a checkpoint (fresh weights) still succeeds
    assert main(["eval", "--config", str(cfg), "--dataset", str(ds),
                 "--out", str(root / "eval_fresh")]) == 0


def test_classify_stream_lead_invariant(workspace):
    root, cfg, ds = workspace
    out = root / "stream"
    assert main(["classify-stream", "--config", str(cfg), "--dataset", str(ds),
                 "--out", str(out), "--checkpoint",
                 str(root / "run" / "classifier.ckpt"),
                 "--sequence", "c00_s000", "--hop", "3"]) == 0
    rows = list(csv.DictReader((out / "stream.csv").open()))
    assert rows
    for r in rows:
        # target frame always leads the last observed frame by exactly g
        assert int(r["target"]) - int(r["last_input"]) == 4
        assert int(r["lead_frames"]) == 4


def test_usage_errors(workspace):
    root, cfg, ds = workspace
    assert main(["train", "--no-such-flag"]) == 1
    assert main(["ablate", "--config", str(cfg), "--out", str(root / "x"),
                 "--axis", "bogus"]) == 1
    assert main(["train", "--config", str(root / "missing.json"),
                 "--dataset", str(ds), "--out", str(root / "y")]) == 1
    # no output dir
    assert main(["train", "--config", str(cfg), "--dataset", str(ds)]) == 1


def test_data_errors(workspace):
    root, cfg, ds = workspace
    assert main(["train", "--config", str(cfg), "--dataset",
                 str(root / "no_ds"), "--out", str(root / "z")]) == 2
    assert main(["eval", "--config", str(cfg), "--dataset", str(ds),
                 "--out", str(root / "z2"), "--checkpoint",
                 str(root / "nope.ckpt")]) == 2
    assert main(["classify-stream", "--config", str(cfg), "--dataset", str(ds),
                 "--out", str(root / "z3"), "--sequence", "zzz"]) == 2


def test_ablate_sweep_layout(workspace):
    root, cfg, ds = workspace
    out = root / "abl"
    assert main(["ablate", "--config", str(cfg), "--dataset", str(ds),
                 "--out", str(out), "--axis", "gap", "--values", "2,6"]) == 0
    sweep = list(csv.DictReader((out / "sweep.csv").open()))
    assert [r["value"] for r in sweep] == ["2", "6"]
    assert sweep[0]["time_advantage_s"] == "0.133"
    assert sweep[1]["time_advantage_s"] == "0.400"
    curves = list(csv.DictReader((out / "curves.csv").open()))
    assert curves and {"axis", "value", "global step", "validation loss"} == set(curves[0])
    assert (out / "gap_2" / "pose.ckpt").exists()
    assert (out / "gap_6" / "train_pose.csv").exists()
