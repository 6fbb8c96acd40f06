"""Detection evaluation: per-category AP/AR at a 3D IoU threshold,
aggregated over the novel/base/mean splits.

Classification of raw query predictions happens against the text
embeddings (there is no trained classification head): the category is the
argmax similarity, the ranking score is objectness times that similarity.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .encoders import EncoderConfig, TextEmbeddings, encode_image_crop, softmax
from .errors import BehindCamera
from .geometry import Box3D, iou3d, project_box


@dataclass(frozen=True)
class Detection:
    scene_id: str
    box: Box3D
    category_id: int
    confidence: float


@dataclass(frozen=True)
class EvalResult:
    ap_per_category: dict[int, float]
    ar_per_category: dict[int, float]
    ap_novel: float
    ap_base: float
    ap_mean: float
    ar_novel: float
    ar_base: float
    ar_mean: float

    def csv_row(self) -> list[float]:
        return [
            self.ap_novel, self.ap_base, self.ap_mean,
            self.ar_novel, self.ar_base, self.ar_mean,
        ]


def classify_predictions(
    output,
    scene,
    text: TextEmbeddings,
    enc_cfg: EncoderConfig,
    feature_source: str = "3d",
    rng: np.random.Generator | None = None,
) -> list[Detection]:
    """Turn query predictions into labeled detections.

    feature_source "3d" classifies the query's own feature; "2d" swaps in
    the crop feature of the projected box (the detector+frozen-encoder
    baseline, which needs the image at test time). Queries whose argmax is
    the background row are dropped, as are unobservable boxes in 2d mode.
    """
    ext = text.extended_matrix()
    detections = []
    for pred in output.predictions:
        if feature_source == "3d":
            feat = np.asarray(pred.feature, dtype=np.float64)
            if enc_cfg.normalize_features:
                feat = feat / max(np.linalg.norm(feat), 1e-12)
        elif feature_source == "2d":
            if rng is None:
                raise ValueError("2d feature source needs an rng for the encoder")
            try:
                crop = project_box(pred.box, scene.intrinsics)
            except BehindCamera:
                continue
            if crop.area() <= 0.0:
                continue
            feat = encode_image_crop(scene, crop, text, enc_cfg, rng)
        else:
            raise ValueError(f"unknown feature_source {feature_source!r}")
        dist = softmax(ext @ feat / enc_cfg.temperature)
        c_star = int(np.argmax(dist))
        if c_star == text.background_index:
            continue
        detections.append(
            Detection(
                scene_id=scene.scene_id,
                box=pred.box,
                category_id=c_star,
                confidence=float(pred.objectness) * float(dist[c_star]),
            )
        )
    return detections


def _average_precision(flags: list[bool], n_gt: int, eleven_point: bool) -> float:
    """AP from an ordered TP/FP flag sequence.

    All-point interpolation (monotone precision envelope) by default;
    eleven_point switches to the 11-recall-point convention.
    """
    if n_gt == 0 or not flags:
        return 0.0
    recalls, precisions = [], []
    tp = fp = 0
    for flag in flags:
        if flag:
            tp += 1
        else:
            fp += 1
        recalls.append(tp / n_gt)
        precisions.append(tp / (tp + fp))
    # monotone non-increasing precision envelope, right to left
    env = list(precisions)
    for i in range(len(env) - 2, -1, -1):
        if env[i] < env[i + 1]:
            env[i] = env[i + 1]
    if eleven_point:
        total = 0.0
        for r in [i / 10.0 for i in range(11)]:
            candidates = [p for p, rec in zip(env, recalls) if rec >= r]
            total += max(candidates) if candidates else 0.0
        return total / 11.0
    ap = 0.0
    prev_recall = 0.0
    for i, flag in enumerate(flags):
        if flag:
            ap += (recalls[i] - prev_recall) * env[i]
            prev_recall = recalls[i]
    return ap


def evaluate(
    detections: list[Detection],
    ground_truth: dict[str, list],
    vocab,
    iou_threshold: float = 0.25,
    eleven_point: bool = False,
) -> EvalResult:
    """Greedy-matched AP and AR per category, aggregated per split.

    ground_truth maps scene_id to objects exposing .box and .category_id.
    Detections are ranked by descending confidence with deterministic ties
    (scene id, then insertion order); each detection greedily claims the
    unmatched same-scene ground-truth box with the highest IoU above the
    threshold (ties to the lowest box index). Categories absent from the
    ground truth are skipped; splits are means over present categories.
    """
    gt_categories = sorted({
        o.category_id for objs in ground_truth.values() for o in objs
    })
    ap_per, ar_per = {}, {}
    for category in gt_categories:
        gt_boxes = {
            sid: [o.box for o in objs if o.category_id == category]
            for sid, objs in ground_truth.items()
        }
        n_gt = sum(len(v) for v in gt_boxes.values())
        dets = [
            (d, idx) for idx, d in enumerate(detections) if d.category_id == category
        ]
        dets.sort(key=lambda t: (-t[0].confidence, t[0].scene_id, t[1]))
        used: dict[str, set[int]] = {sid: set() for sid in ground_truth}
        flags: list[bool] = []
        tp = 0
        for det, _ in dets:
            boxes = gt_boxes.get(det.scene_id, [])
            best_iou, best_j = 0.0, -1
            for j, box in enumerate(boxes):
                if j in used.get(det.scene_id, set()):
                    continue
                v = iou3d(det.box, box)
                if v >= iou_threshold and v > best_iou:
                    best_iou, best_j = v, j
            if best_j >= 0:
                used[det.scene_id].add(best_j)
                flags.append(True)
                tp += 1
            else:
                flags.append(False)
        ap_per[category] = _average_precision(flags, n_gt, eleven_point)
        ar_per[category] = tp / n_gt if n_gt else 0.0

    def split_mean(values: dict[int, float], ids: set[int]) -> float:
        present = [values[c] for c in values if c in ids]
        return float(np.mean(present)) if present else 0.0

    novel = set(vocab.novel_ids())
    base = set(vocab.seen_ids())
    everything = novel | base
    return EvalResult(
        ap_per_category=ap_per,
        ar_per_category=ar_per,
        ap_novel=split_mean(ap_per, novel),
        ap_base=split_mean(ap_per, base),
        ap_mean=split_mean(ap_per, everything),
        ar_novel=split_mean(ar_per, novel),
        ar_base=split_mean(ar_per, base),
        ar_mean=split_mean(ar_per, everything),
    )
