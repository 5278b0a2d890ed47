"""Command-line interface.

Commands: generate, train, eval, ablate, classify-stream. Every command
resolves a RunConfig (JSON file + flag overrides), echoes the resolved
config into its output directory, and writes deterministic CSV/JSON
artifacts: re-running with the same config and seed reproduces the CSV
files byte for byte.

Exit codes: 0 success, 1 usage error, 2 data error, 3 phase-precondition
error.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import time
from pathlib import Path

# honor the thread cap before the numeric libraries spin up their pools
_threads = os.environ.get("CGAP2_THREADS")
if _threads:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
                 "NUMBA_NUM_THREADS"):
        os.environ.setdefault(_var, _threads)

import numpy as np

from .metrics import accuracy, mpjpe, mpjpe_per_class
from .model import CGAP2Model, CheckpointError, ConfigError, ModelConfig
from .sampler import SamplerConfig, enumerate_windows
from .synthdata import Dataset, DataError, build_dataset
from .tensor import no_grad
from .training import (OptimConfig, PhaseError, evaluate_classifier,
                       evaluate_pose, pretrain_encoder, train_classifier_phase,
                       train_pose_phase)

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_PHASE = 0, 1, 2, 3

GAP_AXIS_DEFAULT = (2, 15, 25, 35)
CONTEXT_AXIS_DEFAULT = (5, 10, 15, 20)
CONTEXT_AXIS_GAP = 25
ARCH_AXIS_DEFAULT = (1, 2, 3, 4, 5)
FPS = 15.0


class UsageError(ValueError):
    """Bad flags or config values."""


DEFAULT_CONFIG = {
    "seed": 7,
    "dataset": "",
    "out": "",
    "model": {},     # ModelConfig overrides
    "optim": {},     # OptimConfig overrides
    "data": {         # build_dataset arguments
        "num_classes": 6,
        "sequences_per_class": 15,
        "length": 104,
        "cameras": 1,
        "image_size": 64,
        "background": "plain",
    },
    "train": {
        "frame_stride": 12,  # phase 0 frame subsampling
        "hop": 5,            # phase 1 window hop
    },
}


def _deep_update(base, extra):
    for key, value in extra.items():
        if isinstance(value, dict) and isinstance(base.get(key), dict):
            _deep_update(base[key], value)
        else:
            base[key] = value
    return base


def load_run_config(args):
    """DEFAULT_CONFIG <- config file <- command-line flags."""
    config = json.loads(json.dumps(DEFAULT_CONFIG))
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.exists():
            raise UsageError(f"config file not found: {path}")
        try:
            _deep_update(config, json.loads(path.read_text()))
        except json.JSONDecodeError as exc:
            raise UsageError(f"config file {path} is not valid JSON: {exc}")
    for key in ("seed", "dataset", "out"):
        value = getattr(args, key, None)
        if value not in (None, ""):
            config[key] = value
    if getattr(args, "hop", None) is not None:
        config["train"]["hop"] = args.hop
    return config


def echo_config(config, out_dir):
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.json").write_text(json.dumps(config, indent=2, sort_keys=True))


def _model_config(config):
    return ModelConfig(**config["model"])


def _optim_config(config, batch_size=32):
    fields = dict(config["optim"])
    fields.setdefault("batch_size", batch_size)
    fields.setdefault("seed", config["seed"])
    return OptimConfig(**fields)


def _require_out(config):
    if not config["out"]:
        raise UsageError("an output directory is required (--out or config)")
    return Path(config["out"])


def _open_dataset(config):
    path = config["dataset"]
    if not path:
        raise UsageError("a dataset path is required (--dataset or config)")
    if not (Path(path) / "manifest.json").exists():
        raise DataError(f"no dataset manifest under {path}")
    return Dataset(Path(path))


# ---------------------------------------------------------------------------
# commands

def cmd_generate(config, overwrite=False):
    out = Path(config["dataset"] or config["out"])
    if not str(out):
        raise UsageError("generate needs --dataset (or --out) for the dataset directory")
    manifest = build_dataset(seed=config["seed"], out_dir=out, overwrite=overwrite,
                             **config["data"])
    echo_config(config, out)
    counts = {}
    for rec in manifest["sequences"]:
        counts[rec["split"]] = counts.get(rec["split"], 0) + 1
    print(f"dataset written to {out}")
    print(f"classes: {manifest['config']['num_classes']}  "
          f"sequences: {len(manifest['sequences'])} "
          f"({counts.get('train', 0)} train / {counts.get('val', 0)} val)  "
          f"length: {manifest['config']['length']}  seed: {config['seed']}")
    return EXIT_OK


def _phase_checkpoint(out, phase):
    return out / f"{phase}.ckpt"


def _run_phase(model, dataset, config, out, phase):
    t0 = time.perf_counter()
    if phase == "pretrain":
        report = pretrain_encoder(model, dataset, _optim_config(config, 32),
                                  frame_stride=config["train"]["frame_stride"],
                                  checkpoint_path=_phase_checkpoint(out, phase))
    elif phase == "pose":
        model.set_stage_frozen("encoder", True)
        model.set_stage_frozen("decoder", True)
        report = train_pose_phase(model, dataset, _optim_config(config, 32),
                                  hop=config["train"]["hop"],
                                  checkpoint_path=_phase_checkpoint(out, phase))
    elif phase == "classifier":
        model.set_stage_frozen("encoder", True)
        model.set_stage_frozen("decoder", True)
        model.set_stage_frozen("temporal", True)
        report = train_classifier_phase(model, dataset, _optim_config(config, 64),
                                        checkpoint_path=_phase_checkpoint(out, phase))
    else:
        raise UsageError(f"unknown phase {phase!r}")
    report.write_csv(out / f"train_{phase}.csv")
    report.write_json(out / f"train_{phase}.json")
    val = report.epoch_metrics()[-1]
    print(f"phase {phase}: {len(report.epoch_losses())} epochs in "
          f"{time.perf_counter() - t0:.1f}s, final val metric "
          f"{'n/a' if val is None else f'{val:.3f}'}")
    return report


_PHASE_ORDER = ("pretrain", "pose", "classifier")
_PHASE_REQUIRES = {"pose": "pretrain", "classifier": "pose"}


def cmd_train(config, phase="all"):
    out = _require_out(config)
    dataset = _open_dataset(config)
    echo_config(config, out)
    phases = _PHASE_ORDER if phase == "all" else (phase,)
    if phase != "all" and phase not in _PHASE_ORDER:
        raise UsageError(f"unknown phase {phase!r}; choose from "
                         f"{', '.join(_PHASE_ORDER)}, all")
    model = CGAP2Model(_model_config(config), seed=config["seed"])
    first = phases[0]
    if first in _PHASE_REQUIRES:
        needed = _phase_checkpoint(out, _PHASE_REQUIRES[first])
        if not needed.exists():
            raise PhaseError(f"phase {first!r} needs the {_PHASE_REQUIRES[first]} "
                             f"checkpoint at {needed}; run that phase first")
        model.load_checkpoint(needed)
    for p in phases:
        _run_phase(model, dataset, config, out, p)
    return EXIT_OK


def cmd_eval(config, checkpoint=None):
    out = _require_out(config)
    dataset = _open_dataset(config)
    echo_config(config, out)
    model = CGAP2Model(_model_config(config), seed=config["seed"])
    model.set_volume(*dataset.volume)
    if checkpoint:
        path = Path(checkpoint)
        if not path.exists():
            raise DataError(f"checkpoint not found: {path}")
        model.load_checkpoint(path)
    model.set_stage_frozen("encoder", True)
    model.set_stage_frozen("decoder", True)
    model.set_stage_frozen("temporal", True)
    preds, targets, labels = evaluate_pose(model, dataset, split="val",
                                           hop=config["train"]["hop"])
    names = {c: f"class_{c}" for c in range(dataset.num_classes)}
    report = mpjpe_per_class(preds, targets, labels, class_names=names)
    logits, cls_labels = evaluate_classifier(model, dataset, split="val")
    report.accuracy = accuracy(logits, cls_labels)
    report.write_csv(out / "eval.csv")
    (out / "eval.json").write_text(report.to_json())
    print(f"validation MPJPE {report.overall_mpjpe:.2f} mm, "
          f"accuracy {report.accuracy:.3f} over {len(cls_labels)} windows")
    return EXIT_OK


def _copy_stage(src_model, dst_model, stage):
    src_p = dict(src_model.named_parameters(stage))
    for name, p in dst_model.named_parameters(stage):
        p.value.data[...] = src_p[name].value.data
    src_b = dict(src_model.named_buffers())
    for name, buf in dst_model.named_buffers():
        if name.startswith(stage + ".") or name.startswith("meta."):
            buf[...] = src_b[name]


def _axis_cells(axis, values, base_model_cfg):
    """Per-cell ModelConfig overrides for one ablation axis."""
    cells = []
    for v in values:
        if axis == "gap":
            cfg = dict(gap_g=int(v))
        elif axis == "context":
            cfg = dict(context_n=int(v), gap_g=CONTEXT_AXIS_GAP)
        elif axis == "arch":
            cfg = dict(temporal_depth=int(v))
        else:
            raise UsageError(f"unknown ablation axis {axis!r}")
        cells.append((int(v), cfg))
    return cells


def cmd_ablate(config, axis, values=None, overwrite=False):
    out = _require_out(config)
    defaults = {"gap": GAP_AXIS_DEFAULT, "context": CONTEXT_AXIS_DEFAULT,
                "arch": ARCH_AXIS_DEFAULT}
    if axis not in defaults:
        raise UsageError(f"unknown ablation axis {axis!r}; choose gap, context or arch")
    values = tuple(values) if values else defaults[axis]
    base_cfg = _model_config(config)
    cells = _axis_cells(axis, values, base_cfg)

    # one dataset long enough for the largest cell in the sweep
    spans = []
    for _, overrides in cells:
        merged = {**config["model"], **overrides}
        cfg = ModelConfig(**merged)
        spans.append(SamplerConfig(cfg.context_n, cfg.gap_g, cfg.k_value).required_length())
    length = max(max(spans) + 40, config["data"]["length"])
    dataset_dir = Path(config["dataset"]) if config["dataset"] else out / "dataset"
    if not (dataset_dir / "manifest.json").exists():
        data_args = dict(config["data"])
        data_args["length"] = length
        build_dataset(seed=config["seed"], out_dir=dataset_dir,
                      overwrite=overwrite, **data_args)
    dataset = Dataset(dataset_dir)
    echo_config(config, out)

    # shared phase-0 checkpoint: every cell starts from the same frozen
    # encoder/decoder so the sweep isolates the temporal module
    base_model = CGAP2Model(base_cfg, seed=config["seed"])
    optim = _optim_config(config, 32)
    pretrain_encoder(base_model, dataset, optim,
                     frame_stride=config["train"]["frame_stride"],
                     checkpoint_path=out / "pretrain.ckpt")

    curve_rows, summary_rows = [], []
    for value, overrides in cells:
        cell_cfg = ModelConfig(**{**config["model"], **overrides})
        cell_dir = out / f"{axis}_{value}"
        cell_dir.mkdir(parents=True, exist_ok=True)
        model = CGAP2Model(cell_cfg, seed=config["seed"])
        for stage in ("encoder", "decoder"):
            _copy_stage(base_model, model, stage)
            model.set_stage_frozen(stage, True)
        span = SamplerConfig(cell_cfg.context_n, cell_cfg.gap_g,
                             cell_cfg.k_value).required_length() - 1
        hop = max(1, (dataset.records[0]["length"] - span) // 8)
        val_steps = []
        report = train_pose_phase(model, dataset, optim, hop=hop,
                                  checkpoint_path=cell_dir / "pose.ckpt",
                                  report_val_steps=val_steps)
        report.write_csv(cell_dir / "train_pose.csv")
        report.write_json(cell_dir / "train_pose.json")
        preds, targets, _ = evaluate_pose(model, dataset, split="val", hop=hop)
        final = mpjpe(preds, targets)
        advantage = cell_cfg.gap_g / FPS
        for step, vloss in val_steps:
            curve_rows.append([axis, value, step, f"{vloss:.8g}"])
        summary_rows.append([axis, value, f"{final:.6f}", f"{advantage:.3f}"])
        print(f"{axis}={value}: final val MPJPE {final:.2f} mm "
              f"(time advantage {advantage:.3f} s)")

    with open(out / "curves.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["axis", "value", "global step", "validation loss"])
        w.writerows(curve_rows)
    with open(out / "sweep.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["axis", "value", "final_val_mpjpe_mm", "time_advantage_s"])
        w.writerows(summary_rows)
    return EXIT_OK


def cmd_classify_stream(config, checkpoint, sequence_id, hop=1):
    out = _require_out(config)
    dataset = _open_dataset(config)
    echo_config(config, out)
    records = {r["id"]: r for r in dataset.records}
    if sequence_id not in records:
        raise DataError(f"sequence {sequence_id!r} not in dataset "
                        f"({len(records)} sequences)")
    rec = records[sequence_id]
    model = CGAP2Model(_model_config(config), seed=config["seed"])
    model.set_volume(*dataset.volume)
    if checkpoint:
        path = Path(checkpoint)
        if not path.exists():
            raise DataError(f"checkpoint not found: {path}")
        model.load_checkpoint(path)
    for stage in ("encoder", "temporal", "decoder", "classifier"):
        model.set_stage_frozen(stage, True)
    cfg = model.config
    sampler = SamplerConfig(cfg.context_n, cfg.gap_g, cfg.k_value)
    windows = enumerate_windows(sampler, rec["length"], hop=hop,
                                sequence_id=sequence_id)
    if not windows:
        raise DataError(f"sequence {sequence_id!r} is too short for the window "
                        f"(needs {sampler.required_length()} frames)")
    seq = dataset.load(rec)
    t0 = time.perf_counter()
    rows = []
    for i in range(0, len(windows), 32):
        chunk = windows[i:i + 32]
        frames = np.stack([seq.frames[list(w.input_indices)] for w in chunk]
                          ).astype(np.float32) / 255.0
        with no_grad():
            logits = model.classifier_forward(frames).data
        for w, row in zip(chunk, logits):
            rows.append([w.start_j, w.input_indices[-1], w.target_indices[0],
                         w.target_indices[0] - w.input_indices[-1],
                         int(row.argmax())] + [f"{v:.6f}" for v in row])
    elapsed = time.perf_counter() - t0
    with open(out / "stream.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["start", "last_input", "target", "lead_frames", "pred_class"]
                   + [f"logit_{c}" for c in range(cfg.num_classes)])
        w.writerows(rows)
    print(f"{len(windows)} windows, lead {cfg.gap_g} frames "
          f"({cfg.gap_g / FPS:.3f} s at {FPS:.0f} FPS), "
          f"throughput {len(windows) / max(elapsed, 1e-9):.1f} windows/s")
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing

class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse default exits with 2; we reserve that
        raise UsageError(message)


def build_parser():
    parser = _Parser(prog="cgap2", description=__doc__,
                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON run-config file")
        p.add_argument("--seed", type=int, help="master seed")
        p.add_argument("--dataset", help="dataset directory")
        p.add_argument("--out", help="output directory")

    p = sub.add_parser("generate", help="build the synthetic gesture dataset")
    common(p)
    p.add_argument("--overwrite", action="store_true")

    p = sub.add_parser("train", help="run the phase-wise training recipe")
    common(p)
    p.add_argument("--phase", default="all",
                   choices=["pretrain", "pose", "classifier", "all"])
    p.add_argument("--hop", type=int, help="phase-1 window hop")

    p = sub.add_parser("eval", help="MPJPE + accuracy on the validation split")
    common(p)
    p.add_argument("--checkpoint", help="checkpoint file to evaluate")
    p.add_argument("--hop", type=int, help="evaluation window hop")

    p = sub.add_parser("ablate", help="gap/context/architecture sweeps")
    common(p)
    p.add_argument("--axis", required=True, choices=["gap", "context", "arch"])
    p.add_argument("--values", help="comma-separated sweep values")
    p.add_argument("--overwrite", action="store_true")

    p = sub.add_parser("classify-stream",
                       help="slide the classifier along one sequence")
    common(p)
    p.add_argument("--checkpoint", help="classifier checkpoint")
    p.add_argument("--sequence", required=True, help="sequence id")
    p.add_argument("--hop", type=int, default=1)
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        config = load_run_config(args)
        if args.command == "generate":
            return cmd_generate(config, overwrite=args.overwrite)
        if args.command == "train":
            return cmd_train(config, phase=args.phase)
        if args.command == "eval":
            return cmd_eval(config, checkpoint=args.checkpoint)
        if args.command == "ablate":
            values = ([int(v) for v in args.values.split(",")]
                      if args.values else None)
            return cmd_ablate(config, axis=args.axis, values=values,
                              overwrite=args.overwrite)
        if args.command == "classify-stream":
            return cmd_classify_stream(config, checkpoint=args.checkpoint,
                                       sequence_id=args.sequence, hop=args.hop)
        raise UsageError(f"unknown command {args.command!r}")
    except (DataError, CheckpointError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except PhaseError as exc:
        print(f"phase error: {exc}", file=sys.stderr)
        return EXIT_PHASE
    except (UsageError, ConfigError, ValueError) as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
