"""Phase-wise training: phase 0 pretrains the encoder/decoder on
single-frame pose estimation, phase 1 trains only the temporal module on
future-pose prediction, phase 2 trains only the classifier head.

SGD with classical momentum; weight decay is folded into the gradient
before the momentum update. The learning rate drops once, by
lr_drop_factor at epoch lr_drop_epoch. All shuffling derives from the
config seed, so identical configs reproduce identical loss sequences.
"""

from __future__ import annotations

import csv
import json
import time
from dataclasses import dataclass, field

import numpy as np

from . import ops
from .metrics import accuracy as accuracy_metric
from .metrics import mpjpe as mpjpe_metric
from .sampler import SamplerConfig, enumerate_windows
from .tensor import Tensor, no_grad


class OptimizerError(RuntimeError):
    """Missing gradient on an unfrozen parameter."""


class PhaseError(RuntimeError):
    """A training phase's freeze/precondition contract is violated."""


@dataclass(frozen=True)
class OptimConfig:
    learning_rate: float = 0.001
    momentum: float = 0.9
    weight_decay: float = 0.0001
    lr_drop_epoch: int = 5
    lr_drop_factor: float = 0.1
    epochs: int = 15
    batch_size: int = 32
    seed: int = 0
    # added stabilizer: training from scratch (no pretrained encoder) at
    # the stock learning rate needs bounded gradients; 0 disables
    clip_norm: float = 300.0

    def __post_init__(self):
        if min(self.learning_rate, self.momentum + 1e-12, self.weight_decay + 1e-12,
               self.lr_drop_factor) <= 0:
            raise ValueError("rates must be positive (momentum/decay non-negative)")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


@dataclass
class TrainReport:
    phase: str
    rows: list = field(default_factory=list)  # dicts: epoch, split, loss, metric, lr, seconds
    checkpoint_path: str = ""

    def add(self, epoch, split, loss, metric, lr, seconds):
        self.rows.append({"epoch": epoch, "split": split, "loss": float(loss),
                          "metric": None if metric is None else float(metric),
                          "lr": float(lr), "seconds": float(seconds)})

    def epoch_losses(self, split="train"):
        return [r["loss"] for r in self.rows if r["split"] == split]

    def epoch_metrics(self, split="val"):
        return [r["metric"] for r in self.rows if r["split"] == split]

    def write_csv(self, path):
        """One row per epoch. Wall-clock stays out of the CSV (it lives in
        the JSON report) so identical runs produce byte-identical files."""
        by_epoch = {}
        for r in self.rows:
            by_epoch.setdefault(r["epoch"], {})[r["split"]] = r
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "train_loss", "val_loss", "metric", "lr"])
            for epoch in sorted(by_epoch):
                tr = by_epoch[epoch].get("train", {})
                va = by_epoch[epoch].get("val", {})
                metric = va.get("metric")
                w.writerow([epoch,
                            f"{tr['loss']:.8g}" if tr else "",
                            f"{va['loss']:.8g}" if va else "",
                            "" if metric is None else f"{metric:.8g}",
                            f"{tr.get('lr', va.get('lr', 0.0)):.8g}"])

    def write_json(self, path):
        with open(path, "w") as fh:
            json.dump({"phase": self.phase, "rows": self.rows,
                       "checkpoint": self.checkpoint_path}, fh, indent=2)


# ---------------------------------------------------------------------------
# optimizer

def clip_gradients(named_params, max_norm):
    """Scale all unfrozen-parameter gradients so their global L2 norm is
    at most ``max_norm``; returns the pre-clip norm."""
    grads = [p.value.grad for _, p in named_params
             if not p.frozen and p.value.grad is not None]
    total = float(np.sqrt(sum(float((g * g).sum()) for g in grads)))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / total
        for g in grads:
            g *= scale
    return total


def sgd_step(named_params, config: OptimConfig, lr_now):
    """One SGD+momentum update over (name, Parameter) pairs; frozen
    parameters are untouched and gradients are cleared afterwards."""
    for name, p in named_params:
        if p.frozen:
            continue
        if p.value.grad is None:
            raise OptimizerError(f"parameter {name!r} has no gradient")
        g = p.value.grad + config.weight_decay * p.value.data
        p.momentum_buffer *= config.momentum
        p.momentum_buffer += g
        p.value.data -= lr_now * p.momentum_buffer
        p.value.grad = None


def lr_schedule(config: OptimConfig, epoch):
    """Single drop by lr_drop_factor at lr_drop_epoch."""
    if epoch < config.lr_drop_epoch:
        return config.learning_rate
    return config.learning_rate * config.lr_drop_factor


# ---------------------------------------------------------------------------
# sample selection

def phase0_samples(dataset, split, frame_stride=12):
    """(record, frame_index) pairs for single-frame pose pretraining."""
    samples = []
    for rec in dataset.split_records(split):
        for t in range(0, rec["length"], frame_stride):
            samples.append((rec, t))
    return samples


def pose_windows(dataset, split, sampler: SamplerConfig, hop=5):
    """(record, WindowSample) pairs for future-pose training."""
    out = []
    for rec in dataset.split_records(split):
        for w in enumerate_windows(sampler, rec["length"], hop=hop,
                                   sequence_id=rec["id"]):
            out.append((rec, w))
    return out


def classification_windows(dataset, split, sampler: SamplerConfig,
                           jitter=(-8, -6, -4, -2, 0, 2, 4, 6, 8)):
    """Windows anchored so the prediction target lands at (or near) each
    sequence's likelihood peak: the regime where the anticipation signal
    lives. One window per jitter offset, deduplicated after clamping."""
    span = (sampler.context_n + sampler.k_value - 1) * sampler.gap_g
    out = []
    for rec in dataset.split_records(split):
        max_j = rec["length"] - 1 - span
        if max_j < 0:
            continue
        anchor = rec["peak_frame"] - sampler.context_n * sampler.gap_g
        starts = sorted({min(max(anchor + o, 0), max_j) for o in jitter})
        ws = enumerate_windows(sampler, rec["length"], hop=1, sequence_id=rec["id"])
        for j in starts:
            out.append((rec, ws[j]))
    return out


def _frames(dataset, rec, indices):
    seq = dataset.load(rec)
    return seq.frames[list(indices)].astype(np.float32) / 255.0


def _poses(dataset, rec, indices):
    seq = dataset.load(rec)
    return seq.poses[list(indices)].astype(np.float32)


class EncoderFeatureCache:
    """Per-frame encoder features, valid while the encoder is frozen."""

    def __init__(self, model, dataset, batch=64):
        self.model = model
        self.dataset = dataset
        self.batch = batch
        self._store = {}

    def features(self, rec, indices):
        """[len(indices), F, s, s] float32."""
        missing = [t for t in indices if (rec["id"], t) not in self._store]
        if missing:
            frames = _frames(self.dataset, rec, missing)
            for i in range(0, len(missing), self.batch):
                chunk = frames[i:i + self.batch]
                with no_grad():
                    feats = self.model.encoder_forward(chunk).data
                for t, f in zip(missing[i:i + self.batch], feats):
                    self._store[(rec["id"], t)] = f
        return np.stack([self._store[(rec["id"], t)] for t in indices])

    def window_features(self, rec, window):
        """Context features as [F, n, s, s] (model temporal layout)."""
        f = self.features(rec, window.input_indices)
        return np.ascontiguousarray(f.transpose(1, 0, 2, 3))


def _batches(n, batch_size, rng):
    order = rng.permutation(n)
    for i in range(0, n, batch_size):
        yield order[i:i + batch_size]


def _epoch_rng(config, phase_idx, epoch):
    return np.random.default_rng(np.random.SeedSequence((config.seed, phase_idx, epoch)))


# ---------------------------------------------------------------------------
# phases

def pretrain_encoder(model, dataset, config: OptimConfig, frame_stride=12,
                     checkpoint_path=None):
    """Phase 0: encoder+decoder on single-frame pose estimation with the
    L1 pose loss; temporal module and classifier are untouched."""
    train = phase0_samples(dataset, "train", frame_stride)
    val = phase0_samples(dataset, "val", frame_stride)
    if not train:
        raise PhaseError("phase 0: empty training set")
    model.set_volume(*dataset.volume)
    report = TrainReport(phase="pretrain")
    params = model.named_parameters("encoder") + model.named_parameters("decoder")
    for epoch in range(config.epochs):
        t0 = time.perf_counter()
        lr = lr_schedule(config, epoch)
        rng = _epoch_rng(config, 0, epoch)
        model.training = True
        losses = []
        for idx in _batches(len(train), config.batch_size, rng):
            frames = np.stack([_frames(dataset, train[i][0], [train[i][1]])[0] for i in idx])
            targets = np.stack([_poses(dataset, train[i][0], [train[i][1]])[0] for i in idx])
            pred = model.decode_single_frames(frames)
            loss = ops.l1_pose_loss(pred, Tensor(targets))
            loss.backward()
            clip_gradients(params, config.clip_norm)
            sgd_step(params, config, lr)
            losses.append(float(loss.data))
        report.add(epoch, "train", np.mean(losses), None, lr, time.perf_counter() - t0)
        t0 = time.perf_counter()
        val_loss, val_mpjpe = _eval_single_frame(model, dataset, val)
        report.add(epoch, "val", val_loss, val_mpjpe, lr, time.perf_counter() - t0)
    if checkpoint_path:
        model.save_checkpoint(checkpoint_path)
        report.checkpoint_path = str(checkpoint_path)
    return report


def _eval_single_frame(model, dataset, samples, batch=64):
    model.training = False
    losses, preds, targets = [], [], []
    for i in range(0, len(samples), batch):
        chunk = samples[i:i + batch]
        frames = np.stack([_frames(dataset, r, [t])[0] for r, t in chunk])
        tgt = np.stack([_poses(dataset, r, [t])[0] for r, t in chunk])
        with no_grad():
            pred = model.decode_single_frames(frames)
        losses.append(float(ops.l1_pose_loss(pred, Tensor(tgt)).data) * len(chunk))
        preds.append(pred.data)
        targets.append(tgt)
    n = len(samples)
    return (sum(losses) / n,
            mpjpe_metric(np.concatenate(preds), np.concatenate(targets)))


def _pose_forward(model, feats_np):
    """Cached context features [B, F, n, s, s] -> predicted poses [B*k, 17, 3]."""
    cfg = model.config
    feats = Tensor(feats_np)
    future = model.temporal_forward(feats)
    b = future.shape[0]
    flat = future.transpose(0, 2, 1, 3, 4).reshape(
        b * cfg.k_value, cfg.feature_channels, cfg.feature_spatial, cfg.feature_spatial)
    heat = model.decoder_forward(flat)
    return model.heatmaps_to_pose(heat)


def train_pose_phase(model, dataset, config: OptimConfig, hop=5,
                     checkpoint_path=None, report_val_steps=None):
    """Phase 1: only the temporal module trains; encoder and decoder must
    arrive frozen. Loss is the L1 distance between predicted and ground
    truth future poses in millimeter space."""
    for stage in ("encoder", "decoder"):
        if not model.stage_frozen(stage):
            raise PhaseError(f"phase 1 requires a frozen {stage}")
    sampler = SamplerConfig(context_n=model.config.context_n,
                            gap_g=model.config.gap_g,
                            k_value=model.config.k_value)
    train = pose_windows(dataset, "train", sampler, hop)
    val = pose_windows(dataset, "val", sampler, hop)
    if not train:
        raise PhaseError("phase 1: no windows fit the training sequences")
    model.set_volume(*dataset.volume)
    cache = EncoderFeatureCache(model, dataset)
    report = TrainReport(phase="pose")
    params = model.named_parameters("temporal")
    val_curve = []  # (global_step, val_loss) pairs for sweep curve outputs
    step = 0
    for epoch in range(config.epochs):
        t0 = time.perf_counter()
        lr = lr_schedule(config, epoch)
        rng = _epoch_rng(config, 1, epoch)
        model.training = True
        losses = []
        for idx in _batches(len(train), config.batch_size, rng):
            feats = np.stack([cache.window_features(*train[i]) for i in idx])
            tgts = np.concatenate([_poses(dataset, train[i][0], train[i][1].target_indices)
                                   for i in idx])
            pred = _pose_forward(model, feats)
            loss = ops.l1_pose_loss(pred, Tensor(tgts))
            loss.backward()
            clip_gradients(params, config.clip_norm)
            sgd_step(params, config, lr)
            losses.append(float(loss.data))
            step += 1
        report.add(epoch, "train", np.mean(losses), None, lr, time.perf_counter() - t0)
        t0 = time.perf_counter()
        val_loss, val_mpjpe = _eval_pose_windows(model, dataset, val, cache)
        val_curve.append((step, val_loss))
        report.add(epoch, "val", val_loss, val_mpjpe, lr, time.perf_counter() - t0)
    if checkpoint_path:
        model.save_checkpoint(checkpoint_path)
        report.checkpoint_path = str(checkpoint_path)
    if report_val_steps is not None:
        report_val_steps.extend(val_curve)
    return report


def _eval_pose_windows(model, dataset, windows, cache, batch=64):
    model.training = False
    losses, preds, targets = [], [], []
    for i in range(0, len(windows), batch):
        chunk = windows[i:i + batch]
        feats = np.stack([cache.window_features(r, w) for r, w in chunk])
        tgt = np.concatenate([_poses(dataset, r, w.target_indices) for r, w in chunk])
        with no_grad():
            pred = _pose_forward(model, feats)
        losses.append(float(ops.l1_pose_loss(pred, Tensor(tgt)).data) * len(chunk))
        preds.append(pred.data)
        targets.append(tgt)
    n = len(windows)
    return (sum(losses) / n,
            mpjpe_metric(np.concatenate(preds), np.concatenate(targets)))


def evaluate_pose(model, dataset, split="val", hop=5):
    """Validation MPJPE plus per-window predictions and labels."""
    sampler = SamplerConfig(context_n=model.config.context_n,
                            gap_g=model.config.gap_g,
                            k_value=model.config.k_value)
    windows = pose_windows(dataset, split, sampler, hop)
    cache = EncoderFeatureCache(model, dataset)
    model.training = False
    preds, targets, labels = [], [], []
    for i in range(0, len(windows), 64):
        chunk = windows[i:i + 64]
        feats = np.stack([cache.window_features(r, w) for r, w in chunk])
        with no_grad():
            pred = _pose_forward(model, feats)
        preds.append(pred.data)
        targets.append(np.concatenate([_poses(dataset, r, w.target_indices)
                                       for r, w in chunk]))
        labels.extend(r["class"] for r, w in chunk for _ in w.target_indices)
    preds = np.concatenate(preds)
    targets = np.concatenate(targets)
    return preds, targets, np.array(labels)


class _ClassifierFeatures:
    """Frozen encoder+temporal features per classification window."""

    def __init__(self, model, dataset, windows):
        cache = EncoderFeatureCache(model, dataset)
        model.training = False
        enc, fut = [], []
        for i in range(0, len(windows), 64):
            chunk = windows[i:i + 64]
            feats = np.stack([cache.window_features(r, w) for r, w in chunk])
            with no_grad():
                future = model.temporal_forward(Tensor(feats))
            enc.append(feats)
            fut.append(future.data)
        self.encoder = np.concatenate(enc) if enc else np.empty(0)
        self.future = np.concatenate(fut) if fut else np.empty(0)
        self.labels = np.array([r["class"] for r, _ in windows], dtype=np.int64)


def train_classifier_phase(model, dataset, config: OptimConfig,
                           jitter=(-8, -6, -4, -2, 0, 2, 4, 6, 8), checkpoint_path=None):
    """Phase 2: only the classifier trains; encoder and temporal module
    must arrive frozen and the decoder is never evaluated."""
    for stage in ("encoder", "temporal"):
        if not model.stage_frozen(stage):
            raise PhaseError(f"phase 2 requires a frozen {stage}")
    sampler = SamplerConfig(context_n=model.config.context_n,
                            gap_g=model.config.gap_g,
                            k_value=model.config.k_value)
    train_w = classification_windows(dataset, "train", sampler, jitter)
    val_w = classification_windows(dataset, "val", sampler, jitter)
    if not train_w:
        raise PhaseError("phase 2: no classification windows fit")
    train_f = _ClassifierFeatures(model, dataset, train_w)
    val_f = _ClassifierFeatures(model, dataset, val_w)
    report = TrainReport(phase="classifier")
    params = model.named_parameters("classifier")
    for epoch in range(config.epochs):
        t0 = time.perf_counter()
        lr = lr_schedule(config, epoch)
        rng = _epoch_rng(config, 2, epoch)
        model.training = True
        losses = []
        for idx in _batches(len(train_w), config.batch_size, rng):
            logits = model.classifier_features_forward(
                Tensor(train_f.encoder[idx]), Tensor(train_f.future[idx]))
            loss = ops.softmax_cross_entropy(logits, train_f.labels[idx])
            loss.backward()
            clip_gradients(params, config.clip_norm)
            sgd_step(params, config, lr)
            losses.append(float(loss.data))
        report.add(epoch, "train", np.mean(losses), None, lr, time.perf_counter() - t0)
        t0 = time.perf_counter()
        model.training = False
        with no_grad():
            logits = model.classifier_features_forward(
                Tensor(val_f.encoder), Tensor(val_f.future))
        val_loss = float(ops.softmax_cross_entropy(logits, val_f.labels).data)
        val_acc = accuracy_metric(logits.data, val_f.labels)
        report.add(epoch, "val", val_loss, val_acc, lr, time.perf_counter() - t0)
    if checkpoint_path:
        model.save_checkpoint(checkpoint_path)
        report.checkpoint_path = str(checkpoint_path)
    return report


def evaluate_classifier(model, dataset, split="val", jitter=(-8, -6, -4, -2, 0, 2, 4, 6, 8),
                        historical_only=False):
    """Logits and labels on the anchored classification windows."""
    sampler = SamplerConfig(context_n=model.config.context_n,
                            gap_g=model.config.gap_g,
                            k_value=model.config.k_value)
    windows = classification_windows(dataset, split, sampler, jitter)
    feats = _ClassifierFeatures(model, dataset, windows)
    future = np.zeros_like(feats.future) if historical_only else feats.future
    model.training = False
    with no_grad():
        logits = model.classifier_features_forward(Tensor(feats.encoder), Tensor(future))
    return logits.data, feats.labels
