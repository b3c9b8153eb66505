"""Dataset loading and preprocessing: manifest order, augmentation masks,
and the z-score pipeline."""

import numpy as np
import pytest

from dropsort import data, scenarios
from dropsort.synth import generate_dataset, read_manifest, scaled_config


@pytest.fixture(scope="module")
def small_set(tmp_path_factory):
    out = tmp_path_factory.mktemp("ds")
    spec = scenarios.scenario("pa_single")
    cfg = scaled_config(64)
    manifest = generate_dataset(spec.classes, 3, cfg, out, seed=0,
                                template=spec.template,
                                focus_jitter_um=spec.focus_jitter_um)
    return manifest


class TestLoadFrames:
    def test_order_and_labels_follow_manifest(self, small_set):
        frames, labels, rows = data.load_frames(small_set)
        assert len(frames) == len(labels) == len(rows) == 9
        assert labels == [r.label for r in rows]
        assert sorted(labels) == [0, 0, 0, 1, 1, 1, 2, 2, 2]
        assert all(f.pixels.shape == (64, 64) for f in frames)
        assert all(f.pixels.dtype == np.float64 for f in frames)

    def test_frames_match_direct_read(self, small_set):
        from dropsort.pgmio import read_pgm
        frames, _, rows = data.load_frames(small_set)
        direct = read_pgm(small_set.parent / rows[4].path)
        assert np.array_equal(frames[4].pixels, direct.astype(np.float64))


class TestAugmentationMask:
    def test_geometry_and_fill(self, small_set):
        frames, _, _ = data.load_frames(small_set)
        mask = data.augmentation_mask(frames)
        assert mask.center_px == (31.5, 31.5)
        assert mask.radius_px == 31.0
        corners = [f.pixels[r, c] for f in frames
                   for r in (0, -1) for c in (0, -1)]
        assert mask.fill_value == float(np.median(corners))


class TestPreprocess:
    def test_zero_mean_unit_std(self, small_set):
        frames, _, _ = data.load_frames(small_set)
        out = data.preprocess(frames[0])
        assert abs(out.mean()) < 1e-12
        assert out.std() == pytest.approx(1.0, abs=1e-12)

    def test_to_arrays(self, small_set):
        frames, labels, _ = data.load_frames(small_set)
        x, y = data.to_arrays(frames, labels)
        assert x.shape == (9, 64, 64)
        assert y.dtype == np.int64
        assert np.array_equal(y, np.array(labels))


class TestLoadDataset:
    def test_plain_load_equals_manual_pipeline(self, small_set):
        x, y = data.load_dataset(small_set)
        frames, labels, _ = data.load_frames(small_set)
        mx, my = data.to_arrays(frames, labels)
        assert np.array_equal(x, mx) and np.array_equal(y, my)

    def test_plan_multiplies_and_replicates_labels(self, small_set):
        x, y = data.load_dataset(small_set, plan="rot10")
        assert x.shape == (99, 64, 64)
        base_y = data.load_dataset(small_set)[1]
        assert np.array_equal(y, np.repeat(base_y, 11))

    def test_augmented_frames_are_z_scored(self, small_set):
        x, _ = data.load_dataset(small_set, plan="mirror")
        means = x.mean(axis=(1, 2))
        stds = x.std(axis=(1, 2))
        assert np.all(np.abs(means) < 1e-10)
        assert np.allclose(stds, 1.0, atol=1e-10)

    def test_translation_plans_are_seeded(self, small_set):
        a = data.load_dataset(small_set, plan="trans5", seed=3)[0]
        b = data.load_dataset(small_set, plan="trans5", seed=3)[0]
        c = data.load_dataset(small_set, plan="trans5", seed=4)[0]
        assert np.array_equal(a, b)
        assert not np.array_equal(a, c)

    def test_missing_manifest_raises(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            data.load_dataset(tmp_path / "nope" / "manifest.tsv")
