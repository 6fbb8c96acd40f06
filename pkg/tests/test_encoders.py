import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from ov3d.encoders import (
    EncoderConfig,
    TextEmbeddings,
    Vocabulary,
    default_vocabulary,
    encode_image_crop,
    encode_text,
    semantic_distribution,
    semantic_distribution_with_background,
    softmax,
)
from ov3d.errors import EmbeddingCollision, EmptyCrop
from ov3d.geometry import Box2D, Box3D, CameraIntrinsics, project_box
from ov3d.world import Scene, SceneObject


def one_object_scene(category_id=0, is_base=True):
    intr = CameraIntrinsics(fx=400, fy=400, cx=320, cy=240, width=640, height=480)
    box = Box3D(np.array([0.0, 0.0, 4.0]), np.array([0.8, 0.8, 0.8]), 0.3)
    obj = SceneObject(box=box, category_id=category_id, is_base=is_base)
    points = np.zeros((8, 3), dtype=np.float32)
    return Scene(scene_id="s0", points=points, objects=(obj,), intrinsics=intr)


def orthonormal_embeddings():
    matrix = np.eye(2)
    background = np.array([-1.0, 0.0])
    return TextEmbeddings(names=("a", "b"), matrix=matrix, background=background)


class TestEncodeText:
    def test_deterministic(self):
        vocab = default_vocabulary(5, 5)
        cfg = EncoderConfig(seed=3)
        a = encode_text(vocab, cfg)
        b = encode_text(vocab, cfg)
        assert np.array_equal(a.matrix, b.matrix)
        assert np.array_equal(a.background, b.background)

    def test_unit_rows(self):
        text = encode_text(default_vocabulary(10, 10), EncoderConfig())
        norms = np.linalg.norm(text.matrix, axis=1)
        assert np.allclose(norms, 1.0, atol=1e-6)
        assert np.isclose(np.linalg.norm(text.background), 1.0, atol=1e-6)

    def test_pairwise_separation_at_c40(self):
        # 40 categories in 32 dims: the rejection sampler must succeed
        names = tuple(f"cat{i:02d}" for i in range(40))
        vocab = Vocabulary(names=names, seen_mask=tuple([True] * 20 + [False] * 20))
        text = encode_text(vocab, EncoderConfig(embedding_dim=32))
        ext = text.extended_matrix()
        gram = ext @ ext.T
        off_diag = gram[~np.eye(len(ext), dtype=bool)]
        assert np.all(np.abs(off_diag) <= 0.5 + 1e-12)

    def test_collision_when_dim_too_small(self):
        names = tuple(f"cat{i:02d}" for i in range(30))
        vocab = Vocabulary(names=names, seen_mask=tuple([True] * 15 + [False] * 15))
        with pytest.raises(EmbeddingCollision):
            encode_text(vocab, EncoderConfig(embedding_dim=2, max_resample_attempts=50))

    def test_save_load_roundtrip(self, tmp_path):
        text = encode_text(default_vocabulary(6, 6), EncoderConfig(seed=9))
        path = tmp_path / "text.json"
        text.save(path)
        loaded = TextEmbeddings.load(path)
        assert loaded.names == text.names
        assert np.array_equal(loaded.matrix, text.matrix)
        assert np.array_equal(loaded.background, text.background)


class TestEncodeImageCrop:
    def setup_method(self):
        self.vocab = default_vocabulary(3, 3)
        self.cfg = EncoderConfig(image_noise_sigma=0.0, seed=5)
        self.text = encode_text(self.vocab, self.cfg)

    def test_perfect_crop_zero_noise_is_exact_text_row(self):
        scene = one_object_scene(category_id=2)
        crop = project_box(scene.objects[0].box, scene.intrinsics)
        feat = encode_image_crop(scene, crop, self.text, self.cfg, np.random.default_rng(0))
        assert np.allclose(feat, self.text.matrix[2], atol=1e-12)

    def test_background_crop(self):
        scene = one_object_scene()
        crop = Box2D(np.array([0.0, 0.0]), np.array([30.0, 30.0]))
        feat = encode_image_crop(scene, crop, self.text, self.cfg, np.random.default_rng(0))
        assert np.array_equal(feat, self.text.background)

    def test_empty_crop_raises(self):
        scene = one_object_scene()
        crop = Box2D(np.array([10.0, 10.0]), np.array([10.0, 10.0]))
        with pytest.raises(EmptyCrop):
            encode_image_crop(scene, crop, self.text, self.cfg, np.random.default_rng(0))

    def test_deterministic_given_rng_state(self):
        cfg = EncoderConfig(image_noise_sigma=0.2, seed=5)
        scene = one_object_scene()
        crop = project_box(scene.objects[0].box, scene.intrinsics)
        shifted = Box2D(crop.min_xy + 3.0, crop.max_xy + 3.0)
        a = encode_image_crop(scene, shifted, self.text, cfg, np.random.default_rng(42))
        b = encode_image_crop(scene, shifted, self.text, cfg, np.random.default_rng(42))
        assert np.array_equal(a, b)

    def test_perfect_crop_classified_correctly(self):
        scene = one_object_scene(category_id=1)
        crop = project_box(scene.objects[0].box, scene.intrinsics)
        feat = encode_image_crop(scene, crop, self.text, self.cfg, np.random.default_rng(0))
        _, c_star, _ = semantic_distribution(feat, self.text)
        assert c_star == 1

    def test_fidelity_monotone_in_crop_iou(self):
        cfg = EncoderConfig(image_noise_sigma=0.3, seed=5)
        text = encode_text(self.vocab, cfg)
        scene = one_object_scene(category_id=0)
        proj = project_box(scene.objects[0].box, scene.intrinsics)
        w = proj.max_xy[0] - proj.min_xy[0]
        rng = np.random.default_rng(123)
        means = []
        for target_iou in (1.0, 0.8, 0.6):
            dx = w * (1.0 - target_iou) / (1.0 + target_iou)
            crop = Box2D(proj.min_xy + np.array([dx, 0.0]), proj.max_xy + np.array([dx, 0.0]))
            probs = []
            for _ in range(1000):
                feat = encode_image_crop(scene, crop, text, cfg, rng)
                dist, _, _ = semantic_distribution(feat, text, temperature=cfg.temperature)
                probs.append(dist[0])
            means.append(float(np.mean(probs)))
        assert means[0] >= means[1] - 0.005
        assert means[1] >= means[2] - 0.005


class TestSemanticDistribution:
    def test_uniform_for_equal_logits(self):
        text = encode_text(default_vocabulary(4, 4), EncoderConfig())
        dist, _, p = semantic_distribution(np.zeros(text.dim), text)
        assert np.allclose(dist, 1.0 / 8.0, atol=1e-12)
        assert p == pytest.approx(1.0 / 8.0)

    def test_orthonormal_two_category_closed_form(self):
        text = orthonormal_embeddings()
        dist, c_star, p = semantic_distribution(np.array([1.0, 0.0]), text)
        expected = math.e / (math.e + 1.0)
        assert c_star == 0
        assert p == pytest.approx(expected, abs=1e-12)
        assert dist[1] == pytest.approx(1.0 / (math.e + 1.0), abs=1e-12)

    @given(
        feat=arrays(np.float64, 8, elements=st.floats(-20, 20)),
    )
    @settings(max_examples=100, deadline=None)
    def test_simplex_output(self, feat):
        names = tuple(f"c{i}" for i in range(5))
        matrix = np.random.default_rng(0).standard_normal((5, 8))
        matrix /= np.linalg.norm(matrix, axis=1, keepdims=True)
        text = TextEmbeddings(names=names, matrix=matrix, background=matrix[0] * -1)
        dist, c_star, p = semantic_distribution(feat, text)
        assert dist.sum() == pytest.approx(1.0, abs=1e-9)
        assert np.all(dist >= 0)
        assert 0 <= c_star < 5

    def test_argmax_invariant_under_logit_shift(self):
        rng = np.random.default_rng(4)
        for _ in range(50):
            logits = rng.standard_normal(7)
            assert np.argmax(softmax(logits)) == np.argmax(softmax(logits + 13.7))

    def test_background_extension(self):
        text = orthonormal_embeddings()
        dist, c_star, p = semantic_distribution_with_background(
            np.array([-1.0, 0.0]), text, temperature=0.1
        )
        assert c_star == text.background_index
        assert len(dist) == 3

    def test_rejects_nonfinite(self):
        text = orthonormal_embeddings()
        with pytest.raises(ValueError):
            semantic_distribution(np.array([np.nan, 0.0]), text)
