"""Synthetic scene generator: determinism, layout invariants, manifest IO."""

import numpy as np
import pytest

from fbdet.scenes import (
    CLASSES,
    SceneObject,
    SceneSpec,
    SyntheticScene,
    gen_dataset,
    gen_scene,
    manifest_lines,
    read_manifest,
    write_manifest,
)


class TestRendering:
    def test_centered_disc_analytic_box(self):
        scene = SyntheticScene(
            seed=(0, 0),
            noise_level=0.0,
            objects=(SceneObject("disc", (16.0, 16.0, 16.0, 16.0), intensity=0.9),),
        )
        img = scene.image
        assert img.shape == (1, 48, 48)
        # interior of the disc carries the object intensity
        assert img[0, 24, 24] == pytest.approx(0.9)
        # far corner stays at the background level
        assert img[0, 2, 2] == pytest.approx(0.08)
        # the rendered disc's support matches the analytic box
        ys, xs = np.nonzero(img[0] > 0.5)
        assert xs.min() >= 15 and xs.max() <= 32
        assert ys.min() >= 15 and ys.max() <= 32

    def test_square_exact_coverage(self):
        scene = SyntheticScene(
            seed=(0, 0),
            noise_level=0.0,
            objects=(SceneObject("square", (10.0, 10.0, 8.0, 8.0), intensity=1.0),),
        )
        img = scene.image[0]
        assert img[14, 14] == pytest.approx(1.0)  # interior
        assert img[14, 9] == pytest.approx(0.08)  # outside
        assert img[14, 10] == pytest.approx(0.5, abs=0.5)  # edge pixel partially covered

    def test_image_range(self):
        scene = gen_scene((5, 1), SceneSpec(noise_level=0.5))
        assert scene.image.min() >= 0.0
        assert scene.image.max() <= 1.0


class TestGeneration:
    def test_same_seed_identical(self):
        a = gen_scene((7, 3))
        b = gen_scene((7, 3))
        assert a.objects == b.objects
        assert np.array_equal(a.image, b.image)

    def test_different_seeds_differ(self):
        a = gen_scene((7, 3))
        b = gen_scene((7, 4))
        assert not np.array_equal(a.image, b.image)

    def test_boxes_inside_image_and_count_bounds(self):
        spec = SceneSpec()
        for i in range(100):
            scene = gen_scene((11, i), spec)
            assert 1 <= len(scene.objects) <= 4
            for obj in scene.objects:
                x, y, w, h = obj.box
                assert x >= 0 and y >= 0
                assert x + w <= 48 and y + h <= 48

    def test_class_balance(self):
        scenes = gen_dataset(1000, 13)
        counts = {c: 0 for c in CLASSES}
        for s in scenes:
            for o in s.objects:
                counts[o.label] += 1
        total = sum(counts.values())
        for c in CLASSES:
            assert 0.45 <= counts[c] / total <= 0.55

    def test_noiseless_clean_image_equals_noisy_render_at_zero_noise(self):
        scene = gen_scene((3, 9), SceneSpec(noise_level=0.0))
        assert np.array_equal(scene.image, scene.clean_image)

    def test_count_validated(self):
        with pytest.raises(ValueError, match="positive"):
            gen_dataset(0, 1)


class TestManifest:
    def test_roundtrip(self, tmp_path):
        scenes = gen_dataset(20, 42)
        path = tmp_path / "scenes.jsonl"
        write_manifest(path, scenes)
        loaded = read_manifest(path)
        assert len(loaded) == 20
        for a, b in zip(scenes, loaded):
            assert a.seed == b.seed
            assert a.objects == b.objects
            assert np.array_equal(a.image, b.image)

    def test_byte_determinism(self):
        a = manifest_lines(gen_dataset(10, 7))
        b = manifest_lines(gen_dataset(10, 7))
        assert a == b

    def test_one_line_per_scene(self, tmp_path):
        path = tmp_path / "m.jsonl"
        write_manifest(path, gen_dataset(17, 0))
        assert len(path.read_text().strip().split("\n")) == 17


class TestSceneObject:
    def test_unknown_class_rejected(self):
        with pytest.raises(ValueError, match="class"):
            SceneObject("triangle", (0, 0, 4, 4))

    def test_degenerate_box_rejected(self):
        with pytest.raises(ValueError, match="positive"):
            SceneObject("disc", (0, 0, 0, 4))
