import json
import math
from dataclasses import replace

import numpy as np
import pytest

from stgaze.errors import FormatError, InvalidArgument, ValidationError
from stgaze.synth import (DiskDataset, SceneParams, SyntheticDataset, centroid_gaze, dataset_write, file_sha256,
                          gaze_trajectory, gen_sequence, offset_augment, pupil_centroid, read_manifest,
                          read_sequence, render_eye, render_face, sequence_seed, write_sequence)

CLEAN = SceneParams(noise_std=0.0)


class TestRenderEye:
    def test_straight_ahead_iris_centred(self):
        cx, cy = pupil_centroid(render_eye((0.0, 0.0), "left", CLEAN), CLEAN)
        assert cx == pytest.approx(64.0, abs=0.05) and cy == pytest.approx(64.0, abs=0.05)

    def test_iris_offset_20px(self):
        yaw = math.asin(20 / CLEAN.pupil_gain)
        cx, cy = pupil_centroid(render_eye((0.0, yaw), "left", CLEAN), CLEAN)
        assert cx == pytest.approx(84.0, abs=0.05) and cy == pytest.approx(64.0, abs=0.05)

    def test_pitch_moves_iris_up(self):
        _, cy = pupil_centroid(render_eye((0.2, 0.0), "left", CLEAN), CLEAN)
        assert cy == pytest.approx(64 - CLEAN.pupil_gain * math.sin(0.2), abs=0.05)

    def test_deterministic(self):
        a = render_eye((0.1, -0.2), "right", SceneParams(), seed=7, key=(3,))
        b = render_eye((0.1, -0.2), "right", SceneParams(), seed=7, key=(3,))
        assert a.tobytes() == b.tobytes()
        c = render_eye((0.1, -0.2), "right", SceneParams(), seed=8, key=(3,))
        assert a.tobytes() != c.tobytes()

    def test_format(self):
        img = render_eye((0.3, 0.3), "left", SceneParams(), seed=0)
        assert img.shape == (3, 128, 128) and img.dtype == np.float32
        assert img.min() >= 0 and img.max() <= 1

    @pytest.mark.parametrize("pitch,yaw", [(0.0, 0.2), (0.3, -0.4), (-0.1, 0.0)])
    def test_mirror_property(self, pitch, yaw):
        left = render_eye((pitch, -yaw), "left", CLEAN)
        right = render_eye((pitch, yaw), "right", CLEAN)
        assert np.array_equal(left, right[..., ::-1])

    def test_bad_side(self):
        with pytest.raises(InvalidArgument):
            render_eye((0, 0), "middle", CLEAN)


def test_centroid_oracle_recovers_labels():
    lim = CLEAN.gaze_range
    worst = 0.0
    for pitch in np.linspace(-lim, lim, 7):
        for yaw in np.linspace(-lim, lim, 7):
            p, y = centroid_gaze(render_eye((pitch, yaw), "left", CLEAN), CLEAN)
            worst = max(worst, abs(math.degrees(y - yaw)), abs(math.degrees(p - pitch)))
    assert worst < 0.5


class TestRenderFace:
    def test_symmetric_at_zero_gaze(self):
        img = render_face((0.0, 0.0), CLEAN)
        assert np.array_equal(img, img[..., ::-1])

    def test_not_symmetric_off_axis(self):
        img = render_face((0.0, 0.3), CLEAN)
        assert not np.array_equal(img, img[..., ::-1])

    def test_contains_eye_renderings(self):
        from stgaze.synth import _eye_side
        img = render_face((0.1, 0.2), CLEAN)
        small = _eye_side(0.1, 0.2, "left", CLEAN, size=32).astype(np.float32)
        np.testing.assert_allclose(img[0, 36:68, 72:104], small, atol=1e-6)

    def test_deterministic(self):
        a, b = render_face((0.1, 0.1), SceneParams(), seed=3), render_face((0.1, 0.1), SceneParams(), seed=3)
        assert a.tobytes() == b.tobytes()


class TestSequences:
    def test_degenerate_walk(self):
        p = replace(CLEAN, step_deg=0.0)
        g = gaze_trajectory(6, p, np.random.default_rng(0), start=(0.0, 0.0))
        np.testing.assert_array_equal(g, 0.0)

    def test_labels_in_range(self):
        p = SceneParams(step_deg=15.0)
        g = gaze_trajectory(200, p, np.random.default_rng(0))
        assert np.all(np.abs(g) <= p.gaze_range)

    def test_reverting_walk(self):
        p = replace(CLEAN, step_deg=0.0)
        g = gaze_trajectory(3, p, np.random.default_rng(0), start=(0.2, -0.1))
        np.testing.assert_allclose(g[1], 0.9 * g[0])
        np.testing.assert_allclose(g[2], 0.81 * g[0])

    def test_seeded_reproduction(self):
        a, b, c = gen_sequence(2, SceneParams(), 5), gen_sequence(2, SceneParams(), 5), gen_sequence(2, SceneParams(), 6)
        assert a.eye_left.tobytes() == b.eye_left.tobytes() and np.array_equal(a.labels, b.labels)
        assert not np.array_equal(a.labels, c.labels)

    def test_sequence_seeds_unique(self):
        seeds = {sequence_seed(0, i) for i in range(2000)}
        assert len(seeds) == 2000

    def test_dataset_item_independent_of_access_order(self):
        ds = SyntheticDataset(5, 2, SceneParams(), seed=1)
        late = ds[4]
        ds2 = SyntheticDataset(5, 2, SceneParams(), seed=1)
        _ = [ds2[i] for i in range(4)]
        assert ds2[4].face.tobytes() == late.face.tobytes()

    def test_zero_length_rejected(self):
        with pytest.raises(InvalidArgument):
            gaze_trajectory(0, CLEAN, np.random.default_rng(0))


class TestOffsetAugment:
    def test_zero_std_is_identity(self):
        s = gen_sequence(3, SceneParams(), 0)
        assert offset_augment(s, np.random.default_rng(0), 0.0) is s

    def test_same_offset_for_all_frames(self):
        s = gen_sequence(4, SceneParams(), 0)
        out = offset_augment(s, np.random.default_rng(0), 3.0)
        d = out.labels.astype(np.float64) - s.labels
        np.testing.assert_allclose(d, np.broadcast_to(d[0], d.shape), atol=1e-6)
        assert np.abs(d[0]).max() > 0
        assert out.eye_left is s.eye_left

    def test_sampler_statistics(self):
        s = gen_sequence(1, replace(CLEAN), 0)
        rng = np.random.default_rng(0)
        base = s.labels[0].astype(np.float64)
        # rendering is skipped: only the label arithmetic is exercised
        deltas = np.array([np.degrees(offset_augment(s, rng, 3.0).labels[0] - base) for _ in range(100_000)])
        assert np.all(np.abs(deltas.mean(axis=0)) < 0.05)
        np.testing.assert_allclose(deltas.std(axis=0), 3.0, rtol=0.02)


class TestFiles:
    def test_round_trip(self, tmp_path):
        s = gen_sequence(3, SceneParams(), 11)
        write_sequence(tmp_path / "a.stgz", s)
        r = read_sequence(tmp_path / "a.stgz")
        for name in ("eye_left", "eye_right", "face", "labels", "origin"):
            assert getattr(r, name).tobytes() == getattr(s, name).tobytes()

    def test_layout(self, tmp_path):
        s = gen_sequence(2, SceneParams(), 11)
        write_sequence(tmp_path / "a.stgz", s)
        raw = (tmp_path / "a.stgz").read_bytes()
        img = 3 * 128 * 128 * 4
        assert raw[:4] == b"STGZ" and raw[4:8] == (1).to_bytes(4, "little") and raw[8:12] == (2).to_bytes(4, "little")
        assert raw[12:12 + img] == s.eye_left[0].astype("<f4").tobytes()
        assert raw[12 + img:12 + 2 * img] == s.eye_right[0].astype("<f4").tobytes()
        assert raw[12 + 2 * img:12 + 3 * img] == s.face[0].astype("<f4").tobytes()
        assert raw[12 + 6 * img:12 + 6 * img + 16] == s.labels.astype("<f4").tobytes()
        assert raw[-12:] == s.origin.astype("<f4").tobytes()
        assert len(raw) == 12 + 6 * img + 16 + 12

    def test_bad_magic(self, tmp_path):
        (tmp_path / "a.stgz").write_bytes(b"XXXX" + bytes(20))
        with pytest.raises(FormatError) as exc:
            read_sequence(tmp_path / "a.stgz")
        assert exc.value.offset == 0

    def test_bad_version(self, tmp_path):
        write_sequence(tmp_path / "a.stgz", gen_sequence(1, SceneParams(), 0))
        raw = bytearray((tmp_path / "a.stgz").read_bytes())
        raw[4] = 9
        (tmp_path / "a.stgz").write_bytes(bytes(raw))
        with pytest.raises(FormatError) as exc:
            read_sequence(tmp_path / "a.stgz")
        assert exc.value.offset == 4

    def test_truncated(self, tmp_path):
        write_sequence(tmp_path / "a.stgz", gen_sequence(1, SceneParams(), 0))
        raw = (tmp_path / "a.stgz").read_bytes()
        (tmp_path / "a.stgz").write_bytes(raw[:1000])
        with pytest.raises(FormatError) as exc:
            read_sequence(tmp_path / "a.stgz")
        assert exc.value.offset == 1000


class TestDataset:
    def test_write_read(self, tmp_path):
        manifest = dataset_write(tmp_path, 3, 2, SceneParams(), seed=4, split="val")
        d = json.loads(manifest.read_text())
        assert set(d) == {"version", "split", "params", "seed", "files", "T"}
        assert d["files"] == ["val_00000.stgz", "val_00001.stgz", "val_00002.stgz"]
        ds = DiskDataset(manifest)
        mem = SyntheticDataset(3, 2, SceneParams(), seed=4)
        assert len(ds) == 3
        for i in range(3):
            assert ds[i].face.tobytes() == mem[i].face.tobytes()
            assert np.array_equal(ds[i].labels, mem[i].labels)

    def test_deterministic_hashes(self, tmp_path):
        a = dataset_write(tmp_path / "a", 2, 2, SceneParams(), seed=9)
        b = dataset_write(tmp_path / "b", 2, 2, SceneParams(), seed=9)
        for name in ["train.json", "train_00000.stgz", "train_00001.stgz"]:
            assert file_sha256(a.parent / name) == file_sha256(b.parent / name)

    def test_missing_file_named(self, tmp_path):
        manifest = dataset_write(tmp_path, 2, 1, SceneParams(), seed=0)
        (tmp_path / "train_00001.stgz").unlink()
        with pytest.raises(ValidationError, match="train_00001.stgz"):
            read_manifest(manifest)


def test_scene_params_validation():
    with pytest.raises(InvalidArgument):
        SceneParams(gaze_range_deg=95)
    with pytest.raises(InvalidArgument):
        SceneParams(pupil_gain=200)
    p = SceneParams(noise_std=0.1)
    assert SceneParams.from_dict(json.loads(json.dumps(p.to_dict()))) == p
