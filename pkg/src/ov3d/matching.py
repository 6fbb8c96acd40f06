"""Bipartite assignment between query predictions and label boxes."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment

from .geometry import iou3d

OBJECTNESS_FLOOR = 1e-12


@dataclass(frozen=True)
class MatchWeights:
    """Cost term weights: w_iou*(1-IoU) + w_center*||dc|| - w_obj*log(p)."""

    iou: float = 2.0
    center: float = 1.0
    objectness: float = 1.0


@dataclass(frozen=True)
class Assignment:
    pairs: tuple[tuple[int, int], ...]
    unmatched_queries: tuple[int, ...]
    unmatched_labels: tuple[int, ...]

    def label_for_query(self) -> dict[int, int]:
        return {q: l for q, l in self.pairs}


def solve_assignment(cost: np.ndarray) -> list[tuple[int, int]]:
    """Minimum-total-cost one-to-one assignment of a rectangular cost matrix.

    Returns min(n_rows, n_cols) pairs sorted by row index. Among equal-cost
    optima the solver's deterministic choice is kept.
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.size == 0:
        return []
    if not np.all(np.isfinite(cost)):
        raise ValueError("cost matrix must be finite")
    rows, cols = linear_sum_assignment(cost)
    return sorted(zip(rows.tolist(), cols.tolist()))


def build_cost_matrix(preds, labels, weights: MatchWeights = MatchWeights()) -> np.ndarray:
    """(num_queries, num_labels) geometry+objectness matching cost.

    IoU is computed only for pairs whose vertical intervals and BEV
    circumscribed circles overlap; everything else has IoU exactly 0.
    """
    pred_boxes = [p.box for p in preds]
    label_boxes = [l.box for l in labels]
    pc = np.array([b.center for b in pred_boxes])
    lc = np.array([b.center for b in label_boxes])
    ps = np.array([b.size for b in pred_boxes])
    ls = np.array([b.size for b in label_boxes])
    diff = pc[:, None, :] - lc[None, :, :]
    center_dist = np.sqrt((diff ** 2).sum(axis=2))
    obj = np.array([max(float(p.objectness), OBJECTNESS_FLOOR) for p in preds])
    cost = (
        weights.iou  # placeholder for w_iou * (1 - iou); refined below
        + weights.center * center_dist
        - weights.objectness * np.log(obj)[:, None]
    )
    y_gap = (
        np.abs(diff[:, :, 1])
        - 0.5 * (ps[:, None, 2] + ls[None, :, 2])
    )
    xz = np.sqrt(diff[:, :, 0] ** 2 + diff[:, :, 2] ** 2)
    reach = 0.5 * (
        np.hypot(ps[:, 0], ps[:, 1])[:, None] + np.hypot(ls[:, 0], ls[:, 1])[None, :]
    )
    candidates = (y_gap < 0.0) & (xz < reach)
    for qi, li in zip(*np.nonzero(candidates)):
        cost[qi, li] -= weights.iou * iou3d(pred_boxes[qi], label_boxes[li])
    return cost


def match(preds, labels, weights: MatchWeights = MatchWeights()) -> Assignment:
    """Optimal assignment of predictions to label boxes.

    ``preds`` expose .box and .objectness; ``labels`` expose .box. With no
    labels every query is unmatched.
    """
    if len(labels) == 0 or len(preds) == 0:
        return Assignment(
            pairs=(),
            unmatched_queries=tuple(range(len(preds))),
            unmatched_labels=tuple(range(len(labels))),
        )
    pairs = solve_assignment(build_cost_matrix(preds, labels, weights))
    matched_q = {q for q, _ in pairs}
    matched_l = {l for _, l in pairs}
    return Assignment(
        pairs=tuple(pairs),
        unmatched_queries=tuple(q for q in range(len(preds)) if q not in matched_q),
        unmatched_labels=tuple(l for l in range(len(labels)) if l not in matched_l),
    )
