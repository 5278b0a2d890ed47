"""Synthetic 17-joint gesture sequences with camera projection and
stick-figure rendering.

Every class shares the same base limb motion; a class-specific
perturbation is blended in under a Gaussian temporal envelope centered
on the class peak frame, so early frames are inter-class ambiguous and
frames at/after the peak are separable. Limbs are generated by forward
kinematics with normalized direction vectors, so bone lengths are exact.
All randomness flows from a single dataset seed through
``numpy.random.SeedSequence``.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MANIFEST_VERSION = 1
NUM_JOINTS = 17

# Human3.6M kinematic tree, pelvis-rooted.
# 0 pelvis, 1-3 right leg, 4-6 left leg, 7 spine, 8 thorax, 9 neck,
# 10 head, 11-13 left arm, 14-16 right arm.
PARENTS = (-1, 0, 1, 2, 0, 4, 5, 0, 7, 8, 9, 8, 11, 12, 8, 14, 15)
BONES = tuple((PARENTS[j], j) for j in range(1, NUM_JOINTS))

BONE_LENGTHS = np.array([
    0.0,            # pelvis (root)
    130.0, 450.0, 440.0,   # right hip, knee, ankle
    130.0, 450.0, 440.0,   # left hip, knee, ankle
    230.0, 250.0, 120.0, 150.0,  # spine, thorax, neck, head
    180.0, 280.0, 250.0,   # left shoulder, elbow, wrist
    180.0, 280.0, 250.0,   # right shoulder, elbow, wrist
])

REST_DIRS = np.array([
    [0.0, 0.0, 0.0],
    [1.0, 0.0, 0.0], [0.0, -1.0, 0.0], [0.0, -1.0, 0.0],
    [-1.0, 0.0, 0.0], [0.0, -1.0, 0.0], [0.0, -1.0, 0.0],
    [0.0, 1.0, 0.0], [0.0, 1.0, 0.0], [0.0, 1.0, 0.0], [0.0, 1.0, 0.0],
    [-1.0, 0.0, 0.0], [-0.3, -1.0, 0.1], [0.0, -1.0, 0.2],
    [1.0, 0.0, 0.0], [0.3, -1.0, 0.1], [0.0, -1.0, 0.2],
])

# joints that swing during the base motion / class divergence
_MOVING = (2, 3, 5, 6, 9, 10, 12, 13, 15, 16)
_DIVERGING = (12, 13, 15, 16, 2, 5)  # arms mostly, a little leg

# rendering groups -> RGB channel (right / left / center)
_JOINT_CHANNEL = np.array([2, 0, 0, 0, 1, 1, 1, 2, 2, 2, 2, 1, 1, 1, 0, 0, 0])


class DataError(ValueError):
    """Bad generation request or on-disk dataset problem."""


@dataclass(frozen=True)
class GestureClassSpec:
    class_id: int
    peak_time_fraction: float = 0.8
    divergence_width: float = 10.0  # frames (Gaussian sigma)
    divergence_amp: float = 2.6     # direction-space units
    motion_seed: int = 1234         # shared across classes: same base motion

    def peak_frame(self, length):
        return int(round(self.peak_time_fraction * (length - 1)))


@dataclass(frozen=True)
class CameraModel:
    focal: float
    center: tuple          # (cx, cy) pixels
    rotation: np.ndarray   # 3x3 world->camera
    translation: np.ndarray  # camera position in world, mm
    image_size: int

    def project(self, points):
        """Pinhole projection of [..., 3] world points to [..., 2] pixels."""
        pts = np.asarray(points, dtype=np.float64)
        cam = (pts - self.translation) @ self.rotation.T
        z = cam[..., 2]
        return np.stack([
            self.focal * cam[..., 0] / z + self.center[0],
            self.focal * cam[..., 1] / z + self.center[1],
        ], axis=-1)


def make_camera(camera_id, image_size, look_at, distance=4200.0, num_cameras=4):
    """Camera on a horizontal ring around ``look_at``, facing it."""
    angle = 2.0 * np.pi * camera_id / max(num_cameras, 1)
    look_at = np.asarray(look_at, dtype=np.float64)
    pos = look_at + distance * np.array([np.sin(angle), 0.0, -np.cos(angle)])
    fwd = look_at - pos
    fwd /= np.linalg.norm(fwd)
    up = np.array([0.0, -1.0, 0.0])  # image y grows downward
    right = np.cross(up, fwd)
    right /= np.linalg.norm(right)
    up2 = np.cross(fwd, right)
    rot = np.stack([right, up2, fwd])
    focal = image_size * distance / 2600.0  # frame a ~2.6 m tall volume
    return CameraModel(focal=focal, center=(image_size / 2.0, image_size / 2.0),
                       rotation=rot, translation=pos, image_size=image_size)


# ---------------------------------------------------------------------------
# pose generation

def _motion_params(spec: GestureClassSpec):
    """Base (class-shared) and divergence (class-specific) motion terms."""
    base_rng = np.random.default_rng(np.random.SeedSequence((spec.motion_seed, 77)))
    base = {}
    for j in _MOVING:
        base[j] = (
            base_rng.uniform(0.25, 0.55),                 # amplitude
            base_rng.uniform(0.8, 1.6),                   # cycles per sequence
            base_rng.uniform(0.0, 2.0 * np.pi),           # phase
            _unit(base_rng.normal(size=3)),               # swing axis
        )
    div_rng = np.random.default_rng(np.random.SeedSequence((spec.motion_seed, 99, spec.class_id)))
    divergence = {j: _unit(div_rng.normal(size=3)) for j in _DIVERGING}
    return base, divergence


def _unit(v):
    return v / np.linalg.norm(v)


def generate_poses(spec: GestureClassSpec, length: int, seed_seq) -> np.ndarray:
    """[length, 17, 3] float64 world-space poses in mm; bone lengths exact."""
    rng = np.random.default_rng(seed_seq)
    base, divergence = _motion_params(spec)
    peak = spec.peak_frame(length)
    t = np.arange(length, dtype=np.float64)
    envelope = np.exp(-0.5 * ((t - peak) / spec.divergence_width) ** 2)

    # small per-sequence nuisance variation (identical pre/post peak)
    phase_jitter = {j: rng.normal(0.0, 0.12) for j in _MOVING}
    amp_jitter = {j: rng.normal(1.0, 0.06) for j in _MOVING}
    root0 = np.array([rng.normal(0.0, 60.0), 880.0 + rng.normal(0.0, 25.0),
                      rng.normal(0.0, 60.0)])
    sway_phase = rng.uniform(0.0, 2.0 * np.pi)

    poses = np.zeros((length, NUM_JOINTS, 3))
    for i in range(length):
        frac = t[i] / max(length - 1, 1)
        pos = np.zeros((NUM_JOINTS, 3))
        pos[0] = root0 + np.array([
            40.0 * np.sin(2.0 * np.pi * frac + sway_phase),
            12.0 * np.sin(4.0 * np.pi * frac + sway_phase),
            40.0 * np.cos(2.0 * np.pi * frac + sway_phase),
        ])
        for j in range(1, NUM_JOINTS):
            d = REST_DIRS[j].copy()
            if j in base:
                amp, freq, phase, axis = base[j]
                swing = amp * amp_jitter[j] * np.sin(
                    2.0 * np.pi * freq * frac + phase + phase_jitter[j])
                d = d + swing * axis
            if j in divergence:
                d = d + spec.divergence_amp * envelope[i] * divergence[j]
            pos[j] = pos[PARENTS[j]] + BONE_LENGTHS[j] * _unit(d)
        poses[i] = pos
    return poses


# ---------------------------------------------------------------------------
# rendering

def rasterize_frame(joint_pixels, image_size, background=None, line_width=1.2,
                    joint_radius=1.6):
    """Anti-aliased stick figure as a [3, S, S] float image in [0, 1].

    ``background`` is either None (plain dark) or a precomputed [3, S, S]
    clutter image to draw over.
    """
    if background is None:
        img = np.full((3, image_size, image_size), 0.05, dtype=np.float64)
    else:
        img = background.astype(np.float64).copy()
    pix = np.asarray(joint_pixels, dtype=np.float64)
    if pix.size == 0:
        return img
    yy, xx = np.mgrid[0:image_size, 0:image_size].astype(np.float64)
    for parent, child in BONES:
        _draw_segment(img[_JOINT_CHANNEL[child]], xx, yy, pix[parent], pix[child], line_width)
    for j in range(pix.shape[0]):
        _draw_disc(img[_JOINT_CHANNEL[j]], xx, yy, pix[j], joint_radius)
    return np.clip(img, 0.0, 1.0)


def _draw_segment(channel, xx, yy, p0, p1, width):
    d = p1 - p0
    seg_len2 = d @ d
    if seg_len2 < 1e-12:
        return
    tpar = ((xx - p0[0]) * d[0] + (yy - p0[1]) * d[1]) / seg_len2
    tpar = np.clip(tpar, 0.0, 1.0)
    dist = np.hypot(xx - (p0[0] + tpar * d[0]), yy - (p0[1] + tpar * d[1]))
    np.maximum(channel, np.clip(1.0 - dist / width, 0.0, 1.0), out=channel)


def _draw_disc(channel, xx, yy, p, radius):
    dist = np.hypot(xx - p[0], yy - p[1])
    np.maximum(channel, np.clip(radius + 1.0 - dist, 0.0, 1.0), out=channel)


def make_clutter(image_size, seed_seq, num_blobs=6):
    """Seeded soft-blob background clutter, [3, S, S] in [0, 0.45]."""
    rng = np.random.default_rng(seed_seq)
    yy, xx = np.mgrid[0:image_size, 0:image_size].astype(np.float64)
    img = np.zeros((3, image_size, image_size))
    for _ in range(num_blobs):
        cx, cy = rng.uniform(0, image_size, size=2)
        sigma = rng.uniform(image_size / 16, image_size / 6)
        amp = rng.uniform(0.1, 0.45)
        ch = rng.integers(0, 3)
        img[ch] += amp * np.exp(-((xx - cx) ** 2 + (yy - cy) ** 2) / (2 * sigma ** 2))
    return np.clip(img, 0.0, 0.45)


# ---------------------------------------------------------------------------
# sequences and datasets

@dataclass
class SyntheticSequence:
    sequence_id: str
    frames: np.ndarray   # [T, 3, S, S] uint8
    poses: np.ndarray    # [T, 17, 3] float32 mm
    class_id: int
    peak_frame: int
    camera_id: int
    split: str = "train"


def generate_sequence(spec: GestureClassSpec, length: int, seed,
                      image_size=64, camera=None, num_cameras=1,
                      camera_id=0, background="plain",
                      sequence_id="") -> SyntheticSequence:
    """Deterministic sequence for one class: poses, projection, frames."""
    min_len = int(3 * spec.divergence_width) + 2
    if length < min_len:
        raise DataError(f"length {length} too short for divergence width "
                        f"{spec.divergence_width}; need >= {min_len}")
    seed_seq = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    poses = generate_poses(spec, length, seed_seq)
    if camera is None:
        camera = make_camera(camera_id, image_size, look_at=(0.0, 880.0, 0.0),
                             num_cameras=max(num_cameras, 1))
    clutter = None
    if background == "clutter":
        clutter = make_clutter(image_size, np.random.SeedSequence((spec.motion_seed, 55, camera_id)))
    frames = np.empty((length, 3, image_size, image_size), dtype=np.uint8)
    for i in range(length):
        pix = camera.project(poses[i])
        img = rasterize_frame(pix, image_size, background=clutter)
        frames[i] = np.round(img * 255.0).astype(np.uint8)
    return SyntheticSequence(sequence_id=sequence_id, frames=frames,
                             poses=poses.astype(np.float32), class_id=spec.class_id,
                             peak_frame=spec.peak_frame(length), camera_id=camera_id)


# -- binary array files ------------------------------------------------------

def write_array(path, arr):
    """rank u32 LE, dims u64 LE each, then the raw little-endian payload."""
    arr = np.ascontiguousarray(arr)
    with open(path, "wb") as fh:
        fh.write(struct.pack("<I", arr.ndim))
        for d in arr.shape:
            fh.write(struct.pack("<Q", d))
        fh.write(arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes())


def read_array(path, dtype):
    with open(path, "rb") as fh:
        rank = struct.unpack("<I", fh.read(4))[0]
        shape = tuple(struct.unpack("<Q", fh.read(8))[0] for _ in range(rank))
        data = np.frombuffer(fh.read(), dtype=np.dtype(dtype).newbyteorder("<"))
    expected = int(np.prod(shape)) if shape else 1
    if data.size != expected:
        raise DataError(f"{path}: payload has {data.size} items, header implies {expected}")
    return data.reshape(shape).astype(dtype)


def default_class_specs(num_classes, length, motion_seed=1234):
    """Peaks staggered inside the tail of the sequence so each class has a
    characteristic peak time."""
    specs = []
    for c in range(num_classes):
        frac = 0.74 + 0.12 * (c / max(num_classes - 1, 1))
        specs.append(GestureClassSpec(class_id=c, peak_time_fraction=frac,
                                      motion_seed=motion_seed))
    return specs


def build_dataset(num_classes, sequences_per_class, length, cameras, seed,
                  out_dir, image_size=64, background="plain", overwrite=False,
                  train_fraction=0.8):
    """Generate and write a dataset; returns the manifest dict.

    Split is per class: the first round(0.8 * m) sequences (in seed order)
    are train, the rest val.
    """
    out = Path(out_dir)
    if out.exists() and any(out.iterdir()) and not overwrite:
        raise DataError(f"output directory {out} is not empty (use overwrite)")
    out.mkdir(parents=True, exist_ok=True)
    specs = default_class_specs(num_classes, length)
    n_train = int(round(train_fraction * sequences_per_class))
    records = []
    all_poses_min = np.full(3, np.inf)
    all_poses_max = np.full(3, -np.inf)
    for spec in specs:
        for s in range(sequences_per_class):
            seq_seed = np.random.SeedSequence((seed, spec.class_id, s))
            camera_id = s % max(cameras, 1)
            seq_id = f"c{spec.class_id:02d}_s{s:03d}"
            seq = generate_sequence(spec, length, seq_seed, image_size=image_size,
                                    num_cameras=cameras, camera_id=camera_id,
                                    background=background, sequence_id=seq_id)
            seq.split = "train" if s < n_train else "val"
            poses_file = f"{seq_id}_poses.bin"
            frames_file = f"{seq_id}_frames.bin"
            write_array(out / poses_file, seq.poses)
            write_array(out / frames_file, seq.frames)
            all_poses_min = np.minimum(all_poses_min, seq.poses.reshape(-1, 3).min(axis=0))
            all_poses_max = np.maximum(all_poses_max, seq.poses.reshape(-1, 3).max(axis=0))
            records.append({
                "id": seq_id, "class": spec.class_id, "split": seq.split,
                "peak_frame": seq.peak_frame, "camera": camera_id,
                "length": length, "poses_file": poses_file, "frames_file": frames_file,
            })
    margin = 0.1 * (all_poses_max - all_poses_min)
    manifest = {
        "version": MANIFEST_VERSION,
        "config": {
            "num_classes": num_classes, "sequences_per_class": sequences_per_class,
            "length": length, "cameras": cameras, "seed": seed,
            "image_size": image_size, "background": background,
            "train_fraction": train_fraction,
            "class_peak_fractions": [sp.peak_time_fraction for sp in specs],
        },
        "volume_min": (all_poses_min - margin).tolist(),
        "volume_max": (all_poses_max + margin).tolist(),
        "sequences": records,
    }
    with open(out / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    return manifest


class Dataset:
    """On-disk dataset handle: manifest plus lazy per-sequence loading."""

    def __init__(self, root):
        self.root = Path(root)
        manifest_path = self.root / "manifest.json"
        if not manifest_path.exists():
            raise DataError(f"no manifest.json under {self.root}")
        with open(manifest_path) as fh:
            self.manifest = json.load(fh)
        if self.manifest.get("version") != MANIFEST_VERSION:
            raise DataError(f"unsupported manifest version {self.manifest.get('version')}")
        self._cache = {}

    @property
    def records(self):
        return self.manifest["sequences"]

    @property
    def num_classes(self):
        return self.manifest["config"]["num_classes"]

    @property
    def image_size(self):
        return self.manifest["config"]["image_size"]

    @property
    def volume(self):
        return (np.array(self.manifest["volume_min"]),
                np.array(self.manifest["volume_max"]))

    def split_records(self, split):
        return [r for r in self.records if r["split"] == split]

    def load(self, record) -> SyntheticSequence:
        seq_id = record["id"]
        if seq_id not in self._cache:
            poses = read_array(self.root / record["poses_file"], np.float32)
            frames = read_array(self.root / record["frames_file"], np.uint8)
            self._cache[seq_id] = SyntheticSequence(
                sequence_id=seq_id, frames=frames, poses=poses,
                class_id=record["class"], peak_frame=record["peak_frame"],
                camera_id=record["camera"], split=record["split"])
        return self._cache[seq_id]
