"""Novel-object discovery: per-epoch gating of predictions into a growing
per-scene label pool.

A prediction is accepted as a discovered novel object only if all gates
hold: (a) its 3D IoU with every base annotation of the scene is below the
gate, (b) objectness clears the geometry threshold, (c) the semantic
probability of its projected crop clears the semantic threshold, and
(d) the crop's argmax category is neither a seen category nor background.
Accepted boxes join the pool by union with same-scene deduplication.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from .detector import DetectorParams, forward
from .encoders import (
    EncoderConfig,
    TextEmbeddings,
    Vocabulary,
    encode_image_crop,
    semantic_distribution_with_background,
)
from .errors import BehindCamera, ConfigError
from .geometry import Box3D, iou3d, project_box
from .world import Scene, base_annotations

POOL_FORMAT = "ov3d-pool-v1"

SOURCE_BASE = "base"
SOURCE_DISCOVERED = "discovered"


@dataclass(frozen=True)
class DiscoveryConfig:
    objectness_threshold: float = 0.3  # geometry prior gate
    semantic_threshold: float = 0.3  # semantic prior gate
    iou_gate: float = 0.25
    update_period_epochs: int = 5

    def __post_init__(self):
        for name in ("objectness_threshold", "semantic_threshold", "iou_gate"):
            v = getattr(self, name)
            if not (0.0 <= v <= 1.0):
                raise ConfigError(f"{name} must be in [0, 1], got {v}")
        if self.update_period_epochs < 1:
            raise ConfigError("update_period_epochs must be >= 1")


@dataclass(frozen=True)
class PoolEntry:
    box: Box3D
    category_id: int
    source: str  # SOURCE_BASE or SOURCE_DISCOVERED
    discovery_epoch: int = 0
    objectness_score: float | None = None
    semantic_score: float | None = None

    def __post_init__(self):
        if self.source not in (SOURCE_BASE, SOURCE_DISCOVERED):
            raise ValueError(f"unknown source {self.source!r}")
        if self.source == SOURCE_DISCOVERED and (
            self.objectness_score is None or self.semantic_score is None
        ):
            raise ValueError("discovered entries must record their gate scores")


class LabelPool:
    """Per-scene union of immutable base annotations and discovered boxes."""

    def __init__(
        self,
        base: Mapping[str, tuple[PoolEntry, ...]],
        novel: Mapping[str, tuple[PoolEntry, ...]] | None = None,
    ):
        self._base = {sid: tuple(entries) for sid, entries in base.items()}
        self._novel = {sid: tuple() for sid in self._base}
        if novel:
            for sid, entries in novel.items():
                if sid not in self._base:
                    raise KeyError(f"unknown scene {sid!r}")
                self._novel[sid] = tuple(entries)

    @classmethod
    def from_scenes(cls, scenes: list[Scene]) -> "LabelPool":
        base = {
            s.scene_id: tuple(
                PoolEntry(box=o.box, category_id=o.category_id, source=SOURCE_BASE)
                for o in base_annotations(s)
            )
            for s in scenes
        }
        return cls(base)

    def scene_ids(self) -> list[str]:
        return list(self._base)

    def base_entries(self, scene_id: str) -> tuple[PoolEntry, ...]:
        return self._base[scene_id]

    def novel_entries(self, scene_id: str) -> tuple[PoolEntry, ...]:
        return self._novel[scene_id]

    def entries(self, scene_id: str) -> tuple[PoolEntry, ...]:
        return self._base[scene_id] + self._novel[scene_id]

    def novel_size(self) -> int:
        return sum(len(v) for v in self._novel.values())

    def base_size(self) -> int:
        return sum(len(v) for v in self._base.values())

    def with_novel(self, novel: Mapping[str, tuple[PoolEntry, ...]]) -> "LabelPool":
        merged = dict(self._novel)
        merged.update({sid: tuple(entries) for sid, entries in novel.items()})
        return LabelPool(self._base, merged)

    def save(self, path, vocab: Vocabulary) -> None:
        def encode_entry(e: PoolEntry) -> dict:
            return {
                "center": e.box.center.tolist(),
                "size": e.box.size.tolist(),
                "yaw": e.box.yaw,
                "category_id": e.category_id,
                "category": vocab.names[e.category_id],
                "source": e.source,
                "discovery_epoch": e.discovery_epoch,
                "objectness_score": e.objectness_score,
                "semantic_score": e.semantic_score,
            }

        payload = {
            "format": POOL_FORMAT,
            "scenes": {
                sid: [encode_entry(e) for e in self.entries(sid)]
                for sid in self.scene_ids()
            },
        }
        Path(path).write_text(json.dumps(payload))

    @classmethod
    def load(cls, path, vocab: Vocabulary) -> "LabelPool":
        payload = json.loads(Path(path).read_text())
        if payload.get("format") != POOL_FORMAT:
            raise ConfigError(f"unsupported pool format {payload.get('format')!r}")
        base: dict[str, tuple[PoolEntry, ...]] = {}
        novel: dict[str, tuple[PoolEntry, ...]] = {}
        for sid, raw_entries in payload["scenes"].items():
            b, n = [], []
            for raw in raw_entries:
                if vocab.names[raw["category_id"]] != raw["category"]:
                    raise ConfigError(
                        f"pool category {raw['category']!r} does not match vocabulary"
                    )
                entry = PoolEntry(
                    box=Box3D(np.array(raw["center"]), np.array(raw["size"]), raw["yaw"]),
                    category_id=int(raw["category_id"]),
                    source=raw["source"],
                    discovery_epoch=int(raw["discovery_epoch"]),
                    objectness_score=raw["objectness_score"],
                    semantic_score=raw["semantic_score"],
                )
                (b if entry.source == SOURCE_BASE else n).append(entry)
            base[sid] = tuple(b)
            novel[sid] = tuple(n)
        return cls(base, novel)


@dataclass
class DiscoveryReport:
    """Gate-by-gate accounting of one discovery pass.

    ``accepted`` counts gate-passing discoveries (the sum of the per-scene
    counts); ``added``/``replaced``/``dropped_duplicates`` describe what the
    pool union then did with them.
    """

    epoch: int
    candidates: int = 0
    rejected_base_overlap: int = 0  # gate (a)
    rejected_objectness: int = 0  # gate (b)
    rejected_semantic: int = 0  # gate (c)
    rejected_category: int = 0  # gate (d)
    skipped_unobservable: int = 0
    accepted: int = 0
    added: int = 0
    replaced: int = 0
    dropped_duplicates: int = 0
    per_scene_accepted: dict = field(default_factory=dict)

    def merge_scene(self, scene_id: str, other: "DiscoveryReport") -> None:
        for name in (
            "candidates",
            "rejected_base_overlap",
            "rejected_objectness",
            "rejected_semantic",
            "rejected_category",
            "skipped_unobservable",
            "accepted",
        ):
            setattr(self, name, getattr(self, name) + getattr(other, name))
        self.per_scene_accepted[scene_id] = other.per_scene_accepted.get(scene_id, 0)


def discover_scene(
    scene: Scene,
    preds,
    pool: LabelPool,
    vocab: Vocabulary,
    text: TextEmbeddings,
    cfg: DiscoveryConfig,
    enc_cfg: EncoderConfig,
    rng: np.random.Generator,
    epoch: int = 0,
) -> tuple[list[PoolEntry], DiscoveryReport]:
    """Apply the four discovery gates to one scene's predictions."""
    report = DiscoveryReport(epoch=epoch)
    base_boxes = [e.box for e in pool.base_entries(scene.scene_id)]
    discovered: list[PoolEntry] = []
    for pred in preds:
        report.candidates += 1
        if any(iou3d(pred.box, b) >= cfg.iou_gate for b in base_boxes):
            report.rejected_base_overlap += 1
            continue
        if not pred.objectness > cfg.objectness_threshold:
            report.rejected_objectness += 1
            continue
        try:
            crop = project_box(pred.box, scene.intrinsics)
        except BehindCamera:
            report.skipped_unobservable += 1
            continue
        if crop.area() <= 0.0:
            report.skipped_unobservable += 1
            continue
        feat = encode_image_crop(scene, crop, text, enc_cfg, rng)
        _, c_star, p_star = semantic_distribution_with_background(
            feat, text, temperature=enc_cfg.temperature
        )
        if not p_star > cfg.semantic_threshold:
            report.rejected_semantic += 1
            continue
        if c_star == text.background_index or vocab.is_seen(c_star):
            report.rejected_category += 1
            continue
        discovered.append(
            PoolEntry(
                box=pred.box,
                category_id=c_star,
                source=SOURCE_DISCOVERED,
                discovery_epoch=epoch,
                objectness_score=float(pred.objectness),
                semantic_score=p_star,
            )
        )
    report.accepted = len(discovered)
    report.per_scene_accepted[scene.scene_id] = len(discovered)
    return discovered, report


def update_pool(
    pool: LabelPool,
    discovered: Mapping[str, list[PoolEntry]],
    cfg: DiscoveryConfig,
) -> tuple[LabelPool, dict[str, int]]:
    """Union new discoveries into the pool with same-scene deduplication.

    A new entry overlapping an existing novel entry (IoU >= gate) replaces
    the most-overlapping one only when its semantic score is strictly
    higher, otherwise it is dropped. Pool size per scene never decreases
    and base entries are untouched.
    """
    stats = {"added": 0, "replaced": 0, "dropped": 0}
    updated: dict[str, tuple[PoolEntry, ...]] = {}
    for scene_id, entries in discovered.items():
        novel = list(pool.novel_entries(scene_id))
        for new in entries:
            ious = [iou3d(new.box, e.box) for e in novel]
            overlaps = [(v, i) for i, v in enumerate(ious) if v >= cfg.iou_gate]
            if not overlaps:
                novel.append(new)
                stats["added"] += 1
                continue
            _, j = max(overlaps)
            if (new.semantic_score or 0.0) > (novel[j].semantic_score or 0.0):
                novel[j] = new
                stats["replaced"] += 1
            else:
                stats["dropped"] += 1
        updated[scene_id] = tuple(novel)
    return pool.with_novel(updated), stats


def run_discovery_epoch(
    scenes: list[Scene],
    params: DetectorParams,
    pool: LabelPool,
    vocab: Vocabulary,
    text: TextEmbeddings,
    cfg: DiscoveryConfig,
    enc_cfg: EncoderConfig,
    epoch: int,
    seed: int = 0,
) -> tuple[LabelPool, DiscoveryReport]:
    """Run discovery over every scene and fold the results into the pool."""
    report = DiscoveryReport(epoch=epoch)
    discovered: dict[str, list[PoolEntry]] = {}
    for index, scene in enumerate(scenes):
        rng = np.random.default_rng([seed, 0xD15C, epoch, index])
        output = forward(scene, params)
        entries, scene_report = discover_scene(
            scene, output.predictions, pool, vocab, text, cfg, enc_cfg, rng, epoch
        )
        discovered[scene.scene_id] = entries
        report.merge_scene(scene.scene_id, scene_report)
    new_pool, stats = update_pool(pool, discovered, cfg)
    report.added = stats["added"]
    report.replaced = stats["replaced"]
    report.dropped_duplicates = stats["dropped"]
    return new_pool, report
