"""Acceptance suite: ten pinned criteria, one recorded pass/fail line
each (printed again in the terminal summary via conftest).

The heavyweight fixtures (default-scale dataset and the phase 0-1
training run) are session-scoped and shared across criteria 6 and 7.
"""

import csv
import json
import statistics
import time

import numpy as np
import pytest

from conftest import record_criterion
from test_model import CONFIGS, expected_classifier, expected_decoder, \
    expected_encoder, expected_temporal
from test_tensor_ops import _rand_conv_case, naive_conv3d

from cgap2 import ops
from cgap2.cli import cmd_ablate, main as cli_main
from cgap2.gradcheck import grad_check, model_grad_check
from cgap2.metrics import accuracy, mpjpe
from cgap2.model import CGAP2Model, ModelConfig, TemporalModule, paper_config
from cgap2.sampler import SamplerConfig, WindowError, enumerate_windows, \
    sample_window
from cgap2.synthdata import Dataset, build_dataset
from cgap2.tensor import Tensor
from cgap2.training import (OptimConfig, evaluate_classifier, evaluate_pose,
                            pretrain_encoder, train_classifier_phase,
                            train_pose_phase)

TINY_MODEL = dict(image_size=16, feature_spatial=4, feature_channels=8,
                  bottleneck_channels=4, heatmap_size=8, context_n=2, gap_g=1,
                  k_value=1, num_classes=2, fc_dims=(8, 8),
                  classifier_conv_channels=4, temporal_depth=1)

SMALL_MODEL = dict(image_size=32, feature_spatial=4, feature_channels=48,
                   bottleneck_channels=8, heatmap_size=8, context_n=3, gap_g=4,
                   k_value=2, num_classes=3, fc_dims=(64, 32),
                   classifier_conv_channels=16, temporal_depth=2)


# ---------------------------------------------------------------------------
# shared fixtures

@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("small_ds")
    build_dataset(num_classes=3, sequences_per_class=4, length=40, cameras=1,
                  seed=11, out_dir=root, image_size=32)
    return Dataset(root)


@pytest.fixture(scope="session")
def desk_dataset(tmp_path_factory):
    """The default configuration: 6 classes, seed 7."""
    root = tmp_path_factory.mktemp("desk_ds")
    build_dataset(num_classes=6, sequences_per_class=15, length=104, cameras=1,
                  seed=7, out_dir=root, image_size=64)
    return Dataset(root)


@pytest.fixture(scope="session")
def desk_run(desk_dataset):
    """Phases 0-1 at the stock recipe (15 epochs each), timed."""
    model = CGAP2Model(ModelConfig(), seed=7)
    optim = OptimConfig(seed=7)
    t0 = time.perf_counter()
    pretrain_encoder(model, desk_dataset, optim)
    model.set_stage_frozen("encoder", True)
    model.set_stage_frozen("decoder", True)
    preds, targets, _ = evaluate_pose(model, desk_dataset)
    baseline = mpjpe(preds, targets)
    train_pose_phase(model, desk_dataset, optim)
    elapsed = time.perf_counter() - t0
    preds, targets, _ = evaluate_pose(model, desk_dataset)
    trained = mpjpe(preds, targets)
    return {"model": model, "dataset": desk_dataset, "baseline": baseline,
            "trained": trained, "elapsed": elapsed}


# ---------------------------------------------------------------------------
# criteria

def test_criterion_1_gradient_correctness():
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    worst_op = 0.0

    def check(f, inputs, tol=1e-6):
        nonlocal worst_op
        rep = grad_check(f, inputs, tol=tol)
        worst_op = max(worst_op, rep.max_rel_err)
        return rep.passed

    def t(shape, scale=1.0, off=0.0):
        return Tensor(rng.standard_normal(shape) * scale + off, requires_grad=True)

    ok = True
    ok &= check(lambda x, w, b: ops.conv3d(x, w, b, (2, 1, 1), (1, 1, 0)).sum(),
                [t((1, 2, 4, 4, 4)), t((2, 2, 3, 3, 3), 0.5), t(2)])
    ok &= check(lambda x, w, b: ops.conv2d(x, w, b, padding=1).sum(),
                [t((2, 2, 5, 5)), t((3, 2, 3, 3), 0.5), t(3)])
    x = rng.standard_normal((1, 1, 4, 4, 4))
    ok &= check(lambda x: ops.maxpool3d(x, (2, 2, 2)).sum(),
                [Tensor(np.argsort(x, axis=None).reshape(x.shape) * 0.3,
                        requires_grad=True)])
    ok &= check(lambda x, g, b: (ops.batchnorm3d(x, g, b, np.zeros(2), np.ones(2),
                                                 mode="train")
                                 * Tensor(np.arange(54.0).reshape(1, 2, 3, 3, 3))).sum(),
                [t((1, 2, 3, 3, 3)), t(2, off=2.0), t(2)], tol=1e-5)
    ok &= check(lambda x: (ops.upsample_nearest3d(x, (2, 2, 2))
                           * Tensor(np.arange(128.0).reshape(1, 2, 4, 4, 4))).sum(),
                [t((1, 2, 2, 2, 2))])
    ok &= check(lambda x, w, b: ops.linear(x, w, b).sum(),
                [t((3, 4), 0.1), t((2, 4), 0.1), t(2, 0.1)])
    x = rng.standard_normal((2, 3, 4, 4))
    ok &= check(lambda x: ops.relu(x).sum(),
                [Tensor(x + np.sign(x) * 0.2, requires_grad=True)])
    ok &= check(lambda h: (ops.soft_argmax3d(h)
                           * Tensor(np.arange(6.0).reshape(1, 2, 3))).sum(),
                [t((1, 2, 3, 4, 4))])
    d = rng.standard_normal((2, 17, 3))
    ok &= check(lambda p: ops.l1_pose_loss(p, Tensor(np.zeros((2, 17, 3)))),
                [Tensor(d + np.sign(d) * 0.2, requires_grad=True)])
    ok &= check(lambda z: ops.softmax_cross_entropy(z, np.array([0, 2, 1])),
                [t((3, 4))])

    # end-to-end tiny model, pose path (classifier frozen: no grads there)
    model = CGAP2Model(ModelConfig(**TINY_MODEL), seed=0)
    model.set_volume([-1.0, -1.0, -1.0], [1.0, 1.0, 1.0])
    model.set_stage_frozen("classifier", True)
    frames = np.random.default_rng(1).random((1, 2, 3, 16, 16))
    target = np.random.default_rng(2).standard_normal((1, 1, 17, 3)) * 0.3
    rep_pose = model_grad_check(
        model, frames,
        lambda m, img: ops.l1_pose_loss(m.pose_predict(img).reshape(1, 17, 3),
                                        Tensor(target.reshape(1, 17, 3))),
        tol=1e-5, max_coords_per_input=4)

    # end-to-end classifier path (temporal/decoder receive no gradient)
    model2 = CGAP2Model(ModelConfig(**TINY_MODEL), seed=3)
    model2.set_stage_frozen("temporal", True)
    model2.set_stage_frozen("decoder", True)
    out = model2.classifier.out.weight
    out.value.data[...] = np.random.default_rng(4).standard_normal(
        out.value.shape).astype(np.float32) * 0.1
    # classifier_forward stop-gradients the predicted future features, so
    # the check feeds a constant future tensor to keep analytic == numeric
    const_future = np.random.default_rng(5).standard_normal(
        (1, 8, 1, 4, 4)).astype(np.float64)
    rep_cls = model_grad_check(
        model2, frames,
        lambda m, img: ops.softmax_cross_entropy(
            m.classifier_features_forward(m._frames_to_features(img),
                                          Tensor(const_future)),
            np.array([1])),
        tol=1e-5, max_coords_per_input=4)

    elapsed = time.perf_counter() - t0
    passed = ok and rep_pose.passed and rep_cls.passed and elapsed <= 120.0
    assert record_criterion(
        1, "gradient correctness (ops <= 1e-6, end-to-end <= 1e-5)", passed,
        f"op max {worst_op:.2e}, pose {rep_pose.max_rel_err:.2e}, "
        f"classifier {rep_cls.max_rel_err:.2e}, {elapsed:.0f}s")


def test_criterion_2_convolution_oracle():
    t0 = time.perf_counter()
    rng = np.random.default_rng(7)
    exact = True
    for i in range(60):
        x, w, b, stride, padding = _rand_conv_case(rng)
        got = ops.conv3d(Tensor(x), Tensor(w), Tensor(b), stride, padding).data
        exact &= np.array_equal(got, naive_conv3d(x, w, b, stride, padding))
        if i < 20:  # conv2d as the depth-1 specialization of the oracle
            x2, w2 = x[:, :, 0], w[:, :, 0]
            got2 = ops.conv2d(Tensor(x2), Tensor(w2), Tensor(b),
                              stride=stride[1], padding=padding[1]).data
            want2 = naive_conv3d(x2[:, :, None], w2[:, :, None], b,
                                 (1, stride[1], stride[1]),
                                 (0, padding[1], padding[1]))[:, :, 0]
            exact &= np.array_equal(got2, want2)
    elapsed = time.perf_counter() - t0
    passed = exact and elapsed <= 60.0
    assert record_criterion(
        2, "conv3d/conv2d bit-exact vs naive-loop oracle (60 cases)", passed,
        f"{elapsed:.0f}s")


def test_criterion_3_sampler_equivalence():
    anchor = sample_window(SamplerConfig(context_n=5, gap_g=15, k_value=1), 76)
    ok = (anchor.input_indices == (0, 15, 30, 45, 60)
          and anchor.target_indices == (75,))
    mismatches = 0
    for n in range(1, 7):
        for g in range(1, 7):
            for k in range(1, 7):
                cfg = SamplerConfig(context_n=n, gap_g=g, k_value=k)
                for length in range(0, 65):
                    got = {w.start_j for w in enumerate_windows(cfg, length)}
                    want = set()
                    for j in range(length):
                        idx = [j + i * g for i in range(n + k)]
                        if all(0 <= t < length for t in idx):
                            want.add(j)
                    if got != want:
                        mismatches += 1
                    try:
                        sample_window(cfg, length, start_j=0)
                        fits = True
                    except WindowError:
                        fits = False
                    if fits != (0 in want):
                        mismatches += 1
    passed = ok and mismatches == 0
    assert record_criterion(
        3, "sampler matches brute-force filter (n,g,k <= 6, length <= 64)",
        passed, f"anchor {anchor.input_indices}->{anchor.target_indices}")


def test_criterion_4_metric_oracles():
    rng = np.random.default_rng(3)
    pred = rng.standard_normal((8, 17, 3))
    target = rng.standard_normal((8, 17, 3))
    oracle = 0.0
    for i in range(8):
        for j in range(17):
            d = sum((pred[i, j, c] - target[i, j, c]) ** 2 for c in range(3))
            oracle += d ** 0.5
    oracle /= 8 * 17
    err = abs(mpjpe(pred, target) - oracle)
    hand = np.zeros((1, 17, 3))
    off = hand.copy()
    off[0, 0] = (3.0, 4.0, 0.0)
    hand_err = abs(mpjpe(off, hand) - 5.0 / 17.0)
    passed = err <= 1e-12 and hand_err <= 1e-12
    assert record_criterion(
        4, "mpjpe matches scalar-loop oracle and hand case to 1e-12", passed,
        f"oracle err {err:.1e}, hand err {hand_err:.1e}")


def test_criterion_5_recipe_fidelity(small_dataset):
    cfg_pose = OptimConfig(seed=5)           # defaults: batch 32, 15 epochs
    cfg_cls = OptimConfig(seed=5, batch_size=64)
    ok = cfg_pose.batch_size == 32 and cfg_cls.batch_size == 64
    model = CGAP2Model(ModelConfig(**SMALL_MODEL), seed=5)
    pretrain_encoder(model, small_dataset, cfg_pose)
    model.set_stage_frozen("encoder", True)
    model.set_stage_frozen("decoder", True)
    frozen = {n: p.value.data.copy() for n, p in model.named_parameters()
              if n.startswith(("encoder.", "decoder."))}
    report = train_pose_phase(model, small_dataset, cfg_pose, hop=4)
    ok &= all(np.array_equal(p.value.data, frozen[n])
              for n, p in model.named_parameters() if n in frozen)
    # LR drop 0.001 -> 0.0001 at epoch 5, visible in the report
    lrs = [r["lr"] for r in report.rows if r["split"] == "train"]
    ok &= lrs[4] == pytest.approx(0.001) and lrs[5] == pytest.approx(0.0001)
    ok &= len(lrs) == 15
    model.set_stage_frozen("temporal", True)
    frozen.update({n: p.value.data.copy()
                   for n, p in model.named_parameters("temporal")})
    train_classifier_phase(model, small_dataset, cfg_cls)
    ok &= all(np.array_equal(p.value.data, frozen[n])
              for n, p in model.named_parameters() if n in frozen)
    assert record_criterion(
        5, "phase freezes bit-identical; batch 32/64; LR drop at epoch 5", ok,
        f"lr[4]={lrs[4]}, lr[5]={lrs[5]}")


def test_criterion_6_desk_scale_learning(desk_run):
    improvement = 1.0 - desk_run["trained"] / desk_run["baseline"]
    passed = improvement >= 0.30 and desk_run["elapsed"] <= 600.0
    assert record_criterion(
        6, "phases 0-1 improve val MPJPE >= 30% in <= 10 min", passed,
        f"{desk_run['baseline']:.1f} -> {desk_run['trained']:.1f} mm "
        f"({improvement:.0%}), {desk_run['elapsed']:.0f}s")


def test_criterion_7_anticipation_advantage(desk_run):
    from cgap2.cli import _copy_stage
    trained = desk_run["model"]
    dataset = desk_run["dataset"]
    accs, hist_accs = [], []
    for seed in (0, 1, 2):
        model = CGAP2Model(ModelConfig(), seed=seed)
        for stage in ("encoder", "decoder", "temporal"):
            _copy_stage(trained, model, stage)
            model.set_stage_frozen(stage, True)
        train_classifier_phase(model, dataset, OptimConfig(seed=seed, batch_size=64))
        logits, labels = evaluate_classifier(model, dataset)
        accs.append(accuracy(logits, labels))
        logits_h, labels_h = evaluate_classifier(model, dataset,
                                                 historical_only=True)
        hist_accs.append(accuracy(logits_h, labels_h))
    acc = statistics.median(accs)
    hist = statistics.median(hist_accs)
    chance = 1.0 / dataset.num_classes
    passed = acc >= chance + 0.15 and acc >= hist + 0.05
    assert record_criterion(
        7, "classifier beats chance by >= 15 pts and historical-only by >= 5 pts "
           "(median of 3 seeds)", passed,
        f"acc {acc:.3f}, chance {chance:.3f}, historical-only {hist:.3f}")


def test_criterion_8_gap_ablation(tmp_path_factory):
    finals = {2: [], 35: []}
    advantages = {}
    for seed in (0, 1, 2):
        out = tmp_path_factory.mktemp(f"gap_seed{seed}")
        config = {
            "seed": seed, "dataset": "", "out": str(out),
            "model": dict(SMALL_MODEL, k_value=1),
            "optim": {"epochs": 8, "seed": seed},
            "data": {"num_classes": 3, "sequences_per_class": 6, "length": 104,
                     "cameras": 1, "image_size": 32, "background": "plain"},
            "train": {"frame_stride": 12, "hop": 5},
        }
        assert cmd_ablate(config, axis="gap", values=[2, 15, 25, 35]) == 0
        with open(out / "sweep.csv") as fh:
            for row in csv.DictReader(fh):
                g = int(row["value"])
                if g in finals:
                    finals[g].append(float(row["final_val_mpjpe_mm"]))
                advantages[g] = row["time_advantage_s"]
    med2 = statistics.median(finals[2])
    med35 = statistics.median(finals[35])
    passed = (med2 < med35
              and advantages[15] == "1.000" and advantages[2] == "0.133")
    assert record_criterion(
        8, "gap sweep: median MPJPE(g=2) < MPJPE(g=35); time advantage "
           "1.000 s / 0.133 s exact", passed,
        f"g=2 {med2:.1f} mm vs g=35 {med35:.1f} mm")


def test_criterion_9_parameter_accounting():
    ok = True
    for cfg in CONFIGS:
        model = CGAP2Model(cfg, seed=0)
        ok &= model.count_parameters("encoder") == expected_encoder(cfg)
        ok &= model.count_parameters("temporal") == expected_temporal(cfg)
        ok &= model.count_parameters("decoder") == expected_decoder(cfg)
        ok &= model.count_parameters("classifier") == expected_classifier(cfg)
    full = paper_config()
    stage = TemporalModule(full, np.random.default_rng(0))
    count = sum(p.value.size for _, p in stage.named_parameters())
    ok &= count == expected_temporal(full)
    ok &= 10_000_000 <= count <= 100_000_000
    assert record_criterion(
        9, "count_parameters matches closed-form formulas for every stage", ok,
        f"full-scale temporal module {count / 1e6:.1f}M parameters "
        f"(reference design ~26M)")


def test_criterion_10_determinism(tmp_path_factory):
    root = tmp_path_factory.mktemp("det")
    cfg = {
        "seed": 5,
        "model": SMALL_MODEL,
        "optim": {"epochs": 2, "lr_drop_epoch": 1},
        "data": {"num_classes": 3, "sequences_per_class": 4, "length": 40,
                 "cameras": 1, "image_size": 32, "background": "plain"},
        "train": {"frame_stride": 8, "hop": 4},
    }
    cfg_path = root / "config.json"
    cfg_path.write_text(json.dumps(cfg))
    ds = root / "ds"
    assert cli_main(["generate", "--config", str(cfg_path),
                     "--dataset", str(ds)]) == 0
    identical = True
    for cmd, outs in (
        (["train"], ("train_pretrain.csv", "train_pose.csv",
                     "train_classifier.csv")),
        (["ablate", "--axis", "gap", "--values", "2,6"],
         ("sweep.csv", "curves.csv")),
    ):
        dirs = [root / f"{cmd[0]}_{i}" for i in (0, 1)]
        for d in dirs:
            assert cli_main(cmd + ["--config", str(cfg_path), "--dataset",
                                   str(ds), "--out", str(d)]) == 0
        for name in outs:
            identical &= ((dirs[0] / name).read_bytes()
                          == (dirs[1] / name).read_bytes())
    assert record_criterion(
        10, "train and ablate re-runs produce byte-identical CSVs", identical)
