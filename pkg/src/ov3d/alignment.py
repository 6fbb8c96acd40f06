"""Cross-modal alignment losses.

Two parts: a class-agnostic L1 distillation that pulls every selected
query's 3D feature toward the frozen crop feature of its own predicted
box (background crops included), and a class-specific contrastive loss
that pulls pool-matched queries toward the text embedding of the matched
entry's category. Gradients flow to the 3D features only; crop and text
features are constant targets.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .discovery import SOURCE_BASE, SOURCE_DISCOVERED, LabelPool, PoolEntry
from .encoders import EncoderConfig, TextEmbeddings, encode_image_crop, softmax
from .errors import BehindCamera
from .geometry import project_box

ALL_SOURCES = (SOURCE_BASE, SOURCE_DISCOVERED)


@dataclass(frozen=True)
class AlignmentItem:
    query_index: int
    feature_3d: np.ndarray
    feature_2d: np.ndarray  # constant target, no gradient
    matched_entry: PoolEntry | None
    one_hot: np.ndarray | None  # over the full vocabulary, present iff matched


@dataclass(frozen=True)
class AlignmentBatch:
    items: tuple[AlignmentItem, ...]
    num_queries: int
    feature_dim: int

    def matched_items(self) -> list[AlignmentItem]:
        return [i for i in self.items if i.matched_entry is not None]

    def with_features(self, features: np.ndarray) -> "AlignmentBatch":
        """Rebind 3D features from an (N, D) matrix (used by checks)."""
        items = tuple(
            replace(item, feature_3d=features[item.query_index]) for item in self.items
        )
        return AlignmentBatch(items=items, num_queries=self.num_queries,
                              feature_dim=self.feature_dim)


def build_alignment_batch(
    scene,
    output,
    pool: LabelPool,
    assignment,
    text: TextEmbeddings,
    enc_cfg: EncoderConfig,
    rng: np.random.Generator,
    k_extra: int = 32,
    extra_selection: str = "objectness",
) -> AlignmentBatch:
    """Select queries for alignment and compute their crop features.

    All pool-matched queries are taken, plus the k_extra highest-objectness
    unmatched ones (or a random sample with extra_selection="random").
    Queries whose predicted box is unobservable (behind the camera or with
    a zero-area crop) are excluded.
    """
    entries = pool.entries(scene.scene_id)
    matched = {q: entries[li] for q, li in assignment.pairs}
    unmatched = list(assignment.unmatched_queries)
    if extra_selection == "objectness":
        unmatched.sort(key=lambda q: (-output.objectness[q], q))
        extra = unmatched[:k_extra]
    elif extra_selection == "random":
        extra = list(rng.permutation(unmatched)[:k_extra])
    else:
        raise ValueError(f"unknown extra_selection {extra_selection!r}")

    c = text.matrix.shape[0]
    items = []
    for q in sorted(set(matched) | set(int(e) for e in extra)):
        pred = output.predictions[q]
        try:
            crop = project_box(pred.box, scene.intrinsics)
        except BehindCamera:
            continue
        if crop.area() <= 0.0:
            continue
        feat_2d = encode_image_crop(scene, crop, text, enc_cfg, rng)
        entry = matched.get(q)
        one_hot = None
        if entry is not None:
            one_hot = np.zeros(c)
            one_hot[entry.category_id] = 1.0
        items.append(
            AlignmentItem(
                query_index=q,
                feature_3d=output.features[q],
                feature_2d=feat_2d,
                matched_entry=entry,
                one_hot=one_hot,
            )
        )
    return AlignmentBatch(
        items=tuple(items),
        num_queries=len(output),
        feature_dim=output.features.shape[1],
    )


def distill_loss(batch: AlignmentBatch) -> tuple[float, np.ndarray]:
    """Box-wise L1 distillation over every batch query, matched or not.

    Returns the loss and its gradient w.r.t. the 3D features as an
    (N, D) array (zero rows for queries outside the batch). The gradient
    is the sign pattern of the feature difference, 0 at exact zeros.
    """
    loss = 0.0
    d_feat = np.zeros((batch.num_queries, batch.feature_dim))
    for item in batch.items:
        diff = item.feature_3d - item.feature_2d
        loss += float(np.abs(diff).sum())
        d_feat[item.query_index] += np.sign(diff)
    return loss, d_feat


def similarity(
    feat: np.ndarray,
    text: TextEmbeddings,
    temperature: float = 1.0,
    normalize: bool = False,
) -> np.ndarray:
    """Softmax-normalized dot-product similarities against every text row."""
    f = np.asarray(feat, dtype=np.float64)
    if normalize:
        f = f / max(np.linalg.norm(f), 1e-12)
    return softmax(text.matrix @ f / temperature)


def contrastive_loss(
    batch: AlignmentBatch,
    text: TextEmbeddings,
    temperature: float = 1.0,
    normalize: bool = True,
    category_subset: list[int] | None = None,
    allowed_sources: tuple[str, ...] = ALL_SOURCES,
) -> tuple[float, np.ndarray]:
    """Cross-entropy between each matched query's similarity distribution
    and the one-hot of its matched category; unmatched queries contribute
    exactly zero. Returns (loss, gradient w.r.t. 3D features, shape (N, D)).

    ``category_subset`` restricts the softmax to a sub-vocabulary (the
    plain-alignment ablation uses the seen categories only) and
    ``allowed_sources`` restricts which pool entries count as matches.
    """
    rows = text.matrix if category_subset is None else text.matrix[category_subset]
    loss = 0.0
    d_feat = np.zeros((batch.num_queries, batch.feature_dim))
    for item in batch.matched_items():
        if item.matched_entry.source not in allowed_sources:
            continue
        category = item.matched_entry.category_id
        if category_subset is None:
            target = category
        else:
            if category not in category_subset:
                continue
            target = category_subset.index(category)
        x = np.asarray(item.feature_3d, dtype=np.float64)
        if normalize:
            norm = max(np.linalg.norm(x), 1e-12)
            u = x / norm
        else:
            u = x
        s = softmax(rows @ u / temperature)
        loss += float(-np.log(max(s[target], 1e-300)))
        grad_logits = s.copy()
        grad_logits[target] -= 1.0
        grad_u = rows.T @ grad_logits / temperature
        if normalize:
            grad_x = (grad_u - u * float(u @ grad_u)) / norm
        else:
            grad_x = grad_u
        d_feat[item.query_index] += grad_x
    return loss, d_feat
