"""Synthetic data contracts: determinism, exact bone lengths, an
independent pinhole-projection oracle, the ambiguity-then-separability
temporal structure, splits, and the binary array format."""

import numpy as np
import pytest

from cgap2.synthdata import (BONE_LENGTHS, PARENTS, CameraModel, DataError,
                             Dataset, GestureClassSpec, build_dataset,
                             generate_poses, generate_sequence, make_camera,
                             read_array, write_array)


def scalar_project(camera: CameraModel, point):
    """Independent pinhole oracle: one point, plain Python arithmetic."""
    rel = [point[k] - camera.translation[k] for k in range(3)]
    cam = [sum(camera.rotation[r][k] * rel[k] for k in range(3)) for r in range(3)]
    return (camera.focal * cam[0] / cam[2] + camera.center[0],
            camera.focal * cam[1] / cam[2] + camera.center[1])


class TestPoses:
    def test_bone_lengths_exact(self):
        spec = GestureClassSpec(class_id=0)
        poses = generate_poses(spec, 60, np.random.SeedSequence(5))
        for j in range(1, 17):
            d = np.linalg.norm(poses[:, j] - poses[:, PARENTS[j]], axis=-1)
            assert np.allclose(d, BONE_LENGTHS[j], atol=1e-9)

    def test_deterministic(self):
        spec = GestureClassSpec(class_id=1)
        a = generate_poses(spec, 50, np.random.SeedSequence(9))
        b = generate_poses(spec, 50, np.random.SeedSequence(9))
        assert np.array_equal(a, b)
        c = generate_poses(spec, 50, np.random.SeedSequence(10))
        assert not np.array_equal(a, c)

    def test_ambiguous_early_separable_at_peak(self):
        # same sequence seed, different classes: far from the peak the
        # divergence envelope is ~0, so class gap collapses; at the peak
        # it must be large
        length = 100
        specs = [GestureClassSpec(class_id=c, peak_time_fraction=0.8)
                 for c in (0, 1)]
        a, b = (generate_poses(s, length, np.random.SeedSequence(3)) for s in specs)
        peak = specs[0].peak_frame(length)
        gap = np.linalg.norm(a - b, axis=-1).mean(axis=-1)  # per-frame mm
        early = gap[: length // 3].mean()
        at_peak = gap[peak]
        assert at_peak > 5.0 * early
        assert at_peak > 50.0  # separable in absolute mm terms


class TestCamera:
    def test_projection_matches_scalar_oracle(self):
        cam = make_camera(2, 64, look_at=(0.0, 880.0, 0.0), num_cameras=4)
        rng = np.random.default_rng(0)
        pts = rng.uniform(-800, 800, size=(20, 3)) + np.array([0, 880.0, 0])
        proj = cam.project(pts)
        for p, q in zip(pts, proj):
            ox, oy = scalar_project(cam, p)
            assert q[0] == pytest.approx(ox, abs=1e-9)
            assert q[1] == pytest.approx(oy, abs=1e-9)

    def test_subject_lands_in_frame(self):
        cam = make_camera(0, 64, look_at=(0.0, 880.0, 0.0), num_cameras=1)
        poses = generate_poses(GestureClassSpec(class_id=0), 40,
                               np.random.SeedSequence(1))
        pix = cam.project(poses.reshape(-1, 3))
        assert pix.min() > -5 and pix.max() < 69


class TestSequences:
    def test_frames_deterministic_and_nonempty(self):
        spec = GestureClassSpec(class_id=0)
        s1 = generate_sequence(spec, 40, 7, image_size=32)
        s2 = generate_sequence(spec, 40, 7, image_size=32)
        assert np.array_equal(s1.frames, s2.frames)
        assert s1.frames.shape == (40, 3, 32, 32)
        assert s1.frames.dtype == np.uint8
        assert s1.frames.max() > 100  # the figure is actually drawn

    def test_too_short_rejected(self):
        with pytest.raises(DataError, match="too short"):
            generate_sequence(GestureClassSpec(class_id=0), 10, 0)


class TestArrayFormat:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(2)
        for arr in (rng.random((3, 4, 5)).astype(np.float32),
                    rng.integers(0, 255, (2, 7), dtype=np.uint8)):
            path = tmp_path / "a.bin"
            write_array(path, arr)
            back = read_array(path, arr.dtype)
            assert np.array_equal(back, arr)

    def test_corrupt_payload_rejected(self, tmp_path):
        path = tmp_path / "b.bin"
        write_array(path, np.zeros((4, 4), dtype=np.float32))
        data = path.read_bytes()
        path.write_bytes(data[:-8])
        with pytest.raises(DataError, match="payload"):
            read_array(path, np.float32)


class TestDataset:
    def test_build_split_and_reload(self, tmp_path):
        manifest = build_dataset(num_classes=2, sequences_per_class=5, length=40,
                                 cameras=1, seed=4, out_dir=tmp_path, image_size=32)
        ds = Dataset(tmp_path)
        assert ds.num_classes == 2
        assert len(ds.records) == 10
        # 0.8 split per class
        for c in range(2):
            recs = [r for r in ds.records if r["class"] == c]
            assert sum(r["split"] == "train" for r in recs) == 4
            assert sum(r["split"] == "val" for r in recs) == 1
        seq = ds.load(ds.records[0])
        assert seq.frames.shape == (40, 3, 32, 32)
        assert seq.poses.shape == (40, 17, 3)
        vmin, vmax = ds.volume
        assert np.all(seq.poses.reshape(-1, 3) >= vmin - 1e-3)
        assert np.all(seq.poses.reshape(-1, 3) <= vmax + 1e-3)
        assert manifest["sequences"] == ds.records

    def test_rebuild_is_byte_identical(self, tmp_path):
        kw = dict(num_classes=2, sequences_per_class=2, length=40, cameras=1,
                  seed=6, image_size=32)
        build_dataset(out_dir=tmp_path / "a", **kw)
        build_dataset(out_dir=tmp_path / "b", **kw)
        for f in sorted((tmp_path / "a").iterdir()):
            assert f.read_bytes() == (tmp_path / "b" / f.name).read_bytes(), f.name

    def test_refuses_nonempty_dir(self, tmp_path):
        (tmp_path / "junk.txt").write_text("x")
        with pytest.raises(DataError, match="not empty"):
            build_dataset(num_classes=1, sequences_per_class=1, length=40,
                          cameras=1, seed=0, out_dir=tmp_path)
