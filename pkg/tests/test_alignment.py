import math

import numpy as np
import pytest

from ov3d.alignment import (
    AlignmentBatch,
    AlignmentItem,
    build_alignment_batch,
    contrastive_loss,
    distill_loss,
    similarity,
)
from ov3d.discovery import SOURCE_BASE, SOURCE_DISCOVERED, LabelPool, PoolEntry
from ov3d.encoders import EncoderConfig, TextEmbeddings, encode_text
from ov3d.geometry import Box3D, CameraIntrinsics
from ov3d.matching import Assignment
from ov3d.world import Scene, SceneObject, WorldConfig, build_vocabulary

from oracles import central_difference, max_relative_error

INTR = CameraIntrinsics(fx=400, fy=400, cx=320, cy=240, width=640, height=480)


def box_at(center, size=(0.8, 0.8, 0.8), yaw=0.0):
    return Box3D(np.array(center, dtype=float), np.array(size, dtype=float), yaw)


class FakeOutput:
    """Duck-typed detector output for batch construction tests."""

    def __init__(self, boxes, objectness, feature_dim=6, seed=0):
        from ov3d.detector import QueryPrediction

        rng = np.random.default_rng(seed)
        self.features = rng.normal(0, 0.5, size=(len(boxes), feature_dim))
        self.objectness = np.asarray(objectness, dtype=float)
        self.predictions = [
            QueryPrediction(box=b, objectness=float(o), feature=self.features[i])
            for i, (b, o) in enumerate(zip(boxes, objectness))
        ]

    def __len__(self):
        return len(self.predictions)


def make_world():
    vocab = build_vocabulary(WorldConfig(num_base_categories=3, num_novel_categories=3))
    enc_cfg = EncoderConfig(image_noise_sigma=0.0, seed=2)
    text = encode_text(vocab, enc_cfg)
    base = SceneObject(box=box_at((-1.2, 0, 4)), category_id=0, is_base=True)
    novel = SceneObject(box=box_at((1.2, 0, 4)), category_id=4, is_base=False)
    scene = Scene(
        scene_id="s0",
        points=np.zeros((4, 3), dtype=np.float32),
        objects=(base, novel),
        intrinsics=INTR,
    )
    pool = LabelPool.from_scenes([scene])
    discovered = PoolEntry(
        box=novel.box, category_id=4, source=SOURCE_DISCOVERED,
        discovery_epoch=1, objectness_score=0.9, semantic_score=0.8,
    )
    pool = pool.with_novel({"s0": (discovered,)})
    return vocab, enc_cfg, text, scene, pool


class TestBuildBatch:
    def test_counts_matched_plus_extra(self):
        vocab, enc_cfg, text, scene, pool = make_world()
        boxes = [box_at((-1.2, 0, 4)), box_at((1.2, 0, 4))] + [
            box_at((0.0, -0.8, 4.5 + 0.1 * i)) for i in range(6)
        ]
        output = FakeOutput(boxes, objectness=[0.9, 0.8, 0.7, 0.6, 0.5, 0.4, 0.3, 0.2])
        assignment = Assignment(
            pairs=((0, 0), (1, 1)),
            unmatched_queries=tuple(range(2, 8)),
            unmatched_labels=(),
        )
        batch = build_alignment_batch(
            scene, output, pool, assignment, text, enc_cfg,
            np.random.default_rng(0), k_extra=3,
        )
        assert len(batch.items) == 5
        assert len(batch.matched_items()) == 2
        # extras are the highest-objectness unmatched queries
        extra_idx = {i.query_index for i in batch.items if i.matched_entry is None}
        assert extra_idx == {2, 3, 4}

    def test_k_extra_zero_is_matched_only(self):
        vocab, enc_cfg, text, scene, pool = make_world()
        output = FakeOutput([box_at((-1.2, 0, 4)), box_at((0.5, 0, 4))], [0.9, 0.8])
        assignment = Assignment(pairs=((0, 0),), unmatched_queries=(1,), unmatched_labels=(1,))
        batch = build_alignment_batch(
            scene, output, pool, assignment, text, enc_cfg,
            np.random.default_rng(0), k_extra=0,
        )
        assert [i.query_index for i in batch.items] == [0]

    def test_one_hot_sources(self):
        vocab, enc_cfg, text, scene, pool = make_world()
        output = FakeOutput([box_at((-1.2, 0, 4)), box_at((1.2, 0, 4))], [0.9, 0.8])
        # label order in pool.entries: base first, then discovered
        assignment = Assignment(pairs=((0, 0), (1, 1)), unmatched_queries=(), unmatched_labels=())
        batch = build_alignment_batch(
            scene, output, pool, assignment, text, enc_cfg,
            np.random.default_rng(0), k_extra=0,
        )
        by_q = {i.query_index: i for i in batch.items}
        assert by_q[0].matched_entry.source == SOURCE_BASE
        assert np.argmax(by_q[0].one_hot) == 0  # annotated category
        assert by_q[1].matched_entry.source == SOURCE_DISCOVERED
        assert np.argmax(by_q[1].one_hot) == 4  # frozen discovery-time category
        for item in batch.items:
            assert item.one_hot.sum() == 1.0

    def test_behind_camera_query_excluded(self):
        vocab, enc_cfg, text, scene, pool = make_world()
        output = FakeOutput([box_at((0, 0, -3.0)), box_at((1.2, 0, 4))], [0.9, 0.8])
        assignment = Assignment(pairs=((0, 0),), unmatched_queries=(1,), unmatched_labels=(1,))
        batch = build_alignment_batch(
            scene, output, pool, assignment, text, enc_cfg,
            np.random.default_rng(0), k_extra=1,
        )
        assert [i.query_index for i in batch.items] == [1]

    def test_crop_features_come_from_predicted_boxes(self):
        vocab, enc_cfg, text, scene, pool = make_world()
        output = FakeOutput([box_at((1.2, 0, 4))], [0.9])
        assignment = Assignment(pairs=(), unmatched_queries=(0,), unmatched_labels=(0, 1))
        batch = build_alignment_batch(
            scene, output, pool, assignment, text, enc_cfg,
            np.random.default_rng(0), k_extra=4,
        )
        # the box sits exactly on the novel object; zero noise -> exact text row
        assert np.allclose(batch.items[0].feature_2d, text.matrix[4], atol=1e-12)


def manual_batch(features_3d, features_2d, matched_categories, num_queries, c=6):
    """matched_categories[i] is None for unmatched items."""
    items = []
    for q, (f3, f2, cat) in enumerate(zip(features_3d, features_2d, matched_categories)):
        if cat is None:
            entry, one_hot = None, None
        else:
            entry = PoolEntry(
                box=box_at((0, 0, 4)), category_id=cat,
                source=SOURCE_DISCOVERED if cat >= 3 else SOURCE_BASE,
                discovery_epoch=0, objectness_score=0.9, semantic_score=0.9,
            )
            one_hot = np.zeros(c)
            one_hot[cat] = 1.0
        items.append(AlignmentItem(
            query_index=q, feature_3d=np.asarray(f3, dtype=float),
            feature_2d=np.asarray(f2, dtype=float),
            matched_entry=entry, one_hot=one_hot,
        ))
    return AlignmentBatch(items=tuple(items), num_queries=num_queries,
                          feature_dim=len(features_3d[0]))


class TestDistillLoss:
    def test_identical_features_zero(self):
        f = np.random.default_rng(0).normal(size=(3, 4))
        batch = manual_batch(f, f.copy(), [None, None, None], num_queries=3)
        loss, grad = distill_loss(batch)
        assert loss == 0.0
        assert np.all(grad == 0.0)

    def test_l1_arithmetic(self):
        f3 = [np.array([1.0, -2.0])]
        f2 = [np.array([0.0, 0.0])]
        batch = manual_batch(f3, f2, [None], num_queries=1)
        loss, grad = distill_loss(batch)
        assert loss == 3.0
        assert np.array_equal(grad[0], [1.0, -1.0])

    def test_gradient_is_sign_pattern(self):
        rng = np.random.default_rng(1)
        f3 = rng.normal(size=(4, 5))
        f2 = rng.normal(size=(4, 5))
        batch = manual_batch(f3, f2, [None] * 4, num_queries=4)
        _, grad = distill_loss(batch)
        assert np.array_equal(grad[:4], np.sign(f3 - f2))

    def test_matches_finite_differences(self):
        rng = np.random.default_rng(2)
        n, d = 5, 6
        f3 = rng.normal(size=(n, d))
        f2 = rng.normal(size=(n, d))
        batch = manual_batch(f3, f2, [None] * n, num_queries=n)
        loss, grad = distill_loss(batch)

        def fn(flat):
            return distill_loss(batch.with_features(flat.reshape(n, d)))[0]

        numeric = central_difference(fn, f3.ravel().copy(), step=1e-6)
        assert max_relative_error(grad.ravel(), numeric) <= 1e-4


class TestSimilarity:
    def make_text(self):
        matrix = np.eye(2)
        return TextEmbeddings(names=("a", "b"), matrix=matrix, background=np.array([-1.0, 0.0]))

    def test_zero_feature_uniform(self):
        text = self.make_text()
        s = similarity(np.zeros(2), text)
        assert np.allclose(s, 0.5)

    def test_orthonormal_closed_form(self):
        text = self.make_text()
        s = similarity(np.array([1.0, 0.0]), text)
        assert s[0] == pytest.approx(math.e / (math.e + 1.0), abs=1e-12)
        assert s[1] == pytest.approx(1.0 / (math.e + 1.0), abs=1e-12)

    def test_simplex(self):
        text = encode_text(
            build_vocabulary(WorldConfig(num_base_categories=4, num_novel_categories=4)),
            EncoderConfig(),
        )
        rng = np.random.default_rng(3)
        for _ in range(20):
            s = similarity(rng.normal(size=text.dim), text, temperature=0.3, normalize=True)
            assert s.sum() == pytest.approx(1.0, abs=1e-9)
            assert np.all(s >= 0)


class TestContrastiveLoss:
    def make_text(self, c=6, d=6):
        names = tuple(f"c{i}" for i in range(c))
        rng = np.random.default_rng(7)
        m = rng.normal(size=(c, d))
        m /= np.linalg.norm(m, axis=1, keepdims=True)
        return TextEmbeddings(names=names, matrix=m, background=-m[0])

    def test_no_matches_zero_loss(self):
        text = self.make_text()
        rng = np.random.default_rng(0)
        f = rng.normal(size=(3, 6))
        batch = manual_batch(f, f, [None, None, None], num_queries=3)
        loss, grad = contrastive_loss(batch, text)
        assert loss == 0.0
        assert np.all(grad == 0.0)

    def test_uniform_similarity_gives_log_c(self):
        text = self.make_text()
        batch = manual_batch(
            [np.zeros(6)], [np.zeros(6)], [2], num_queries=1
        )
        loss, _ = contrastive_loss(batch, text, normalize=False)
        assert loss == pytest.approx(math.log(6), abs=1e-12)

    def test_matches_finite_differences(self):
        text = self.make_text()
        rng = np.random.default_rng(4)
        n, d = 5, 6
        f3 = rng.normal(size=(n, d)) + 0.3
        batch = manual_batch(f3, f3, [0, 4, None, 2, None], num_queries=n)
        loss, grad = contrastive_loss(batch, text, temperature=0.25, normalize=True)
        assert loss > 0

        def fn(flat):
            b = batch.with_features(flat.reshape(n, d))
            return contrastive_loss(b, text, temperature=0.25, normalize=True)[0]

        numeric = central_difference(fn, f3.ravel().copy(), step=1e-6)
        assert max_relative_error(grad.ravel(), numeric) <= 1e-4

    def test_descent_on_frozen_batch(self):
        text = self.make_text()
        rng = np.random.default_rng(5)
        n, d = 4, 6
        feats = rng.normal(size=(n, d))
        batch = manual_batch(feats, feats, [1, 3, 5, 0], num_queries=n)
        losses = []
        for _ in range(100):
            batch = batch.with_features(feats)
            loss, grad = contrastive_loss(batch, text, temperature=0.25)
            losses.append(loss)
            feats = feats - 0.05 * grad
        assert all(b < a for a, b in zip(losses, losses[1:]))

    def test_source_restriction_reproduces_plain_alignment(self):
        text = self.make_text()
        rng = np.random.default_rng(6)
        f = rng.normal(size=(3, 6))
        # categories 0..2 are "seen" in this toy; 4 is a discovered novel match
        batch = manual_batch(f, f, [0, 4, None], num_queries=3)
        full_loss, _ = contrastive_loss(batch, text)
        plain_loss, plain_grad = contrastive_loss(
            batch, text, category_subset=[0, 1, 2], allowed_sources=(SOURCE_BASE,)
        )
        base_only = manual_batch(f[:1], f[:1], [0], num_queries=3)
        expected, _ = contrastive_loss(base_only, text, category_subset=[0, 1, 2])
        assert plain_loss == pytest.approx(expected)
        assert plain_loss != pytest.approx(full_loss)
        assert np.all(plain_grad[1] == 0.0)  # discovered match contributes nothing
