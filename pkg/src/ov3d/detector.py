"""Miniature query-based 3D detector.

Query seeds come from farthest-point sampling of the cloud; each query
aggregates its k nearest points through a small shared perceptron (tanh,
mean-pooled) and three heads decode a box residual, a binary objectness and
an alignment feature. All gradients are computed in closed form; smooth
activations keep finite-difference checks tight.

Box decoding per query: center = seed + residual, size = exp(raw) (keeps
sizes positive), yaw = pi * tanh(raw) (keeps yaw bounded), objectness =
sigmoid(raw).
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import NonFiniteGradient, TooFewPoints
from .geometry import Box3D

CHECKPOINT_MAGIC = b"OV3DCKPT"
SIGMOID_CLIP = 1e-7

HEAD_NAMES = ("box", "obj", "feat")
HEAD_DIMS = {"box": 7, "obj": 1}  # feat dim comes from the config


@dataclass(frozen=True)
class DetectorConfig:
    num_queries: int = 128
    k_neighbors: int = 32
    trunk_hidden: int = 64
    head_hidden: int = 64
    feature_dim: int = 32

    def head_out_dim(self, head: str) -> int:
        return HEAD_DIMS.get(head, self.feature_dim)


@dataclass(frozen=True)
class QueryPrediction:
    box: Box3D
    objectness: float
    feature: np.ndarray


class DetectorParams:
    """All trainable weights, stored as a flat name -> array mapping."""

    def __init__(self, config: DetectorConfig, arrays: dict[str, np.ndarray]):
        self.config = config
        self.arrays = {k: np.asarray(v, dtype=np.float64) for k, v in arrays.items()}
        expected = set(param_shapes(config))
        if set(self.arrays) != expected:
            raise ValueError(f"parameter keys {set(self.arrays)} != expected {expected}")
        for key, arr in self.arrays.items():
            if arr.shape != param_shapes(config)[key]:
                raise ValueError(f"bad shape for {key}: {arr.shape}")
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"non-finite parameter {key}")

    @classmethod
    def initialize(cls, config: DetectorConfig, seed: int = 0) -> "DetectorParams":
        rng = np.random.default_rng([seed, 0xDE7])
        arrays = {}
        for key, shape in param_shapes(config).items():
            if key.endswith("_b"):
                arrays[key] = np.zeros(shape)
            else:
                fan_in = shape[0]
                arrays[key] = rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=shape)
        return cls(config, arrays)

    @classmethod
    def zeros(cls, config: DetectorConfig) -> "DetectorParams":
        return cls(config, {k: np.zeros(s) for k, s in param_shapes(config).items()})

    def copy(self) -> "DetectorParams":
        return DetectorParams(self.config, {k: v.copy() for k, v in self.arrays.items()})


PATCH_STAT_DIM = 6  # per-axis mean and spread of the neighbor patch


def param_shapes(config: DetectorConfig) -> dict[str, tuple[int, ...]]:
    shapes = {
        "trunk_w": (3, config.trunk_hidden),
        "trunk_b": (config.trunk_hidden,),
    }
    for head in HEAD_NAMES:
        out = config.head_out_dim(head)
        shapes[f"{head}_w1"] = (config.trunk_hidden + PATCH_STAT_DIM, config.head_hidden)
        shapes[f"{head}_b1"] = (config.head_hidden,)
        shapes[f"{head}_w2"] = (config.head_hidden, out)
        shapes[f"{head}_b2"] = (out,)
    return shapes


def zero_grads(config: DetectorConfig) -> dict[str, np.ndarray]:
    return {k: np.zeros(s) for k, s in param_shapes(config).items()}


def add_grads(a: dict[str, np.ndarray], b: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    return {k: a[k] + b[k] for k in a}


def scale_grads(g: dict[str, np.ndarray], factor: float) -> dict[str, np.ndarray]:
    return {k: v * factor for k, v in g.items()}


def params_to_vector(params: DetectorParams) -> np.ndarray:
    return np.concatenate([params.arrays[k].ravel() for k in sorted(params.arrays)])


def vector_to_params(vec: np.ndarray, config: DetectorConfig) -> DetectorParams:
    arrays = {}
    offset = 0
    for key in sorted(param_shapes(config)):
        shape = param_shapes(config)[key]
        size = int(np.prod(shape))
        arrays[key] = vec[offset:offset + size].reshape(shape).copy()
        offset += size
    return DetectorParams(config, arrays)


def grads_to_vector(grads: dict[str, np.ndarray]) -> np.ndarray:
    return np.concatenate([grads[k].ravel() for k in sorted(grads)])


def _squared_dist_to(points: np.ndarray, p: np.ndarray) -> np.ndarray:
    dx = points[:, 0] - p[0]
    dy = points[:, 1] - p[1]
    dz = points[:, 2] - p[2]
    return dx * dx + dy * dy + dz * dz


def farthest_point_indices(points: np.ndarray, count: int) -> np.ndarray:
    """Deterministic FPS. The walk starts from the lexicographically
    smallest point and distance ties resolve to the lexicographically
    smallest candidate, so the result depends only on the point SET."""
    order = np.lexsort((points[:, 2], points[:, 1], points[:, 0]))
    start = int(order[0])
    chosen = np.empty(count, dtype=np.int64)
    chosen[0] = start
    dist = _squared_dist_to(points, points[start])
    for i in range(1, count):
        top = dist.max()
        cand = np.flatnonzero(dist == top)
        if len(cand) > 1:
            sub = np.lexsort((points[cand, 2], points[cand, 1], points[cand, 0]))
            pick = int(cand[sub[0]])
        else:
            pick = int(cand[0])
        chosen[i] = pick
        np.minimum(dist, _squared_dist_to(points, points[pick]), out=dist)
    return chosen


def knn_indices(points: np.ndarray, seeds: np.ndarray, k: int) -> np.ndarray:
    """(num_seeds, k) nearest-point indices ordered by increasing distance.

    Assumes distinct distances (true almost surely for noisy clouds);
    exact ties fall back to index order.
    """
    # |s - p|^2 = |s|^2 + |p|^2 - 2 s.p, up to the constant |s|^2 per row
    d2 = (points * points).sum(axis=1)[None, :] - 2.0 * (seeds @ points.T)
    part = np.argpartition(d2, kth=k - 1, axis=1)[:, :k]
    rows = np.arange(len(seeds))[:, None]
    order = np.argsort(d2[rows, part], axis=1, kind="stable")
    return part[rows, order]


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


class DetectorOutput:
    """Predictions plus the activation cache needed for backprop.

    Behaves as a sequence of QueryPrediction. ``geometry_cache`` may hold
    previously computed (seeds, rel) for the same point cloud: seeding and
    neighbor gathering depend only on the points, never on the params.
    """

    def __init__(
        self,
        params: DetectorParams,
        points: np.ndarray,
        geometry_cache: dict | None = None,
    ):
        cfg = params.config
        if len(points) < cfg.num_queries:
            raise TooFewPoints(
                f"need at least {cfg.num_queries} points, got {len(points)}"
            )
        a = params.arrays
        self.params = params
        geom_key = (cfg.num_queries, cfg.k_neighbors)
        cached = geometry_cache.get(geom_key) if geometry_cache is not None else None
        if cached is None:
            pts = np.asarray(points, dtype=np.float64)
            seed_idx = farthest_point_indices(pts, cfg.num_queries)
            seeds = pts[seed_idx]
            nn = knn_indices(pts, seeds, cfg.k_neighbors)
            rel = pts[nn] - seeds[:, None, :]  # (S, k, 3)
            if geometry_cache is not None:
                geometry_cache[geom_key] = (seeds, rel)
        else:
            seeds, rel = cached
        self.seeds = seeds
        self.rel = rel
        self.z_trunk = np.tanh(self.rel @ a["trunk_w"] + a["trunk_b"])  # (S, k, H)
        self.pooled = self.z_trunk.mean(axis=1)  # (S, H)
        # patch statistics are parameter-free head inputs: the neighbor
        # centroid and per-axis spread carry extent information directly
        patch_mean = self.rel.mean(axis=1)
        patch_var = (self.rel ** 2).mean(axis=1) - patch_mean ** 2
        patch_spread = np.sqrt(np.clip(patch_var, 0.0, None))
        self.head_input = np.concatenate(
            [self.pooled, patch_mean, patch_spread], axis=1
        )

        self.head_hidden = {}
        self.head_raw = {}
        for head in HEAD_NAMES:
            z = np.tanh(self.head_input @ a[f"{head}_w1"] + a[f"{head}_b1"])
            self.head_hidden[head] = z
            self.head_raw[head] = z @ a[f"{head}_w2"] + a[f"{head}_b2"]

        raw_box = self.head_raw["box"]
        self.centers = self.seeds + raw_box[:, 0:3]
        self.sizes = np.exp(raw_box[:, 3:6])
        self.yaw_tanh = np.tanh(raw_box[:, 6])
        self.yaws = np.pi * self.yaw_tanh
        self.objectness = _sigmoid(self.head_raw["obj"][:, 0])
        self.features = self.head_raw["feat"]

        self.predictions = [
            QueryPrediction(
                box=Box3D(self.centers[i], self.sizes[i], self.yaws[i]),
                objectness=float(self.objectness[i]),
                feature=self.features[i],
            )
            for i in range(cfg.num_queries)
        ]

    def __len__(self):
        return len(self.predictions)

    def __getitem__(self, i):
        return self.predictions[i]

    def __iter__(self):
        return iter(self.predictions)

    def backprop(
        self,
        d_center: np.ndarray | None = None,
        d_size: np.ndarray | None = None,
        d_yaw: np.ndarray | None = None,
        d_objectness: np.ndarray | None = None,
        d_feature: np.ndarray | None = None,
    ) -> dict[str, np.ndarray]:
        """Map gradients w.r.t. decoded outputs to gradients w.r.t. params."""
        cfg = self.params.config
        s = cfg.num_queries
        d_raw = {
            "box": np.zeros((s, 7)),
            "obj": np.zeros((s, 1)),
            "feat": np.zeros((s, cfg.feature_dim)),
        }
        if d_center is not None:
            d_raw["box"][:, 0:3] = d_center
        if d_size is not None:
            d_raw["box"][:, 3:6] = d_size * self.sizes
        if d_yaw is not None:
            d_raw["box"][:, 6] = d_yaw * np.pi * (1.0 - self.yaw_tanh ** 2)
        if d_objectness is not None:
            p = np.clip(self.objectness, SIGMOID_CLIP, 1.0 - SIGMOID_CLIP)
            d_raw["obj"][:, 0] = d_objectness * p * (1.0 - p)
        if d_feature is not None:
            d_raw["feat"][:] = d_feature

        a = self.params.arrays
        grads = zero_grads(cfg)
        d_pooled = np.zeros_like(self.pooled)
        h = cfg.trunk_hidden
        for head in HEAD_NAMES:
            dr = d_raw[head]
            z = self.head_hidden[head]
            grads[f"{head}_w2"] = z.T @ dr
            grads[f"{head}_b2"] = dr.sum(axis=0)
            dz = dr @ a[f"{head}_w2"].T
            da = dz * (1.0 - z ** 2)
            grads[f"{head}_w1"] = self.head_input.T @ da
            grads[f"{head}_b1"] = da.sum(axis=0)
            # patch statistics are parameter-independent, so only the
            # pooled slice of the head input propagates further
            d_pooled += (da @ a[f"{head}_w1"].T)[:, :h]

        # d_a = (d_pooled / k) * (1 - z^2), built with one large temporary
        d_a_trunk = self.z_trunk * self.z_trunk
        np.subtract(1.0, d_a_trunk, out=d_a_trunk)
        d_a_trunk *= d_pooled[:, None, :]
        d_a_trunk *= 1.0 / cfg.k_neighbors
        flat_rel = self.rel.reshape(-1, 3)
        flat_da = d_a_trunk.reshape(-1, cfg.trunk_hidden)
        grads["trunk_w"] = flat_rel.T @ flat_da
        grads["trunk_b"] = flat_da.sum(axis=0)
        return grads

    def backprop_features(self, d_feature: np.ndarray) -> dict[str, np.ndarray]:
        return self.backprop(d_feature=d_feature)


def forward(scene, params: DetectorParams) -> DetectorOutput:
    """Run the detector on a scene. Deterministic; permuting the points
    leaves the predictions unchanged (FPS and kNN are canonicalized)."""
    cache = scene.__dict__.get("_detector_geometry")
    if cache is None:
        cache = {}
        object.__setattr__(scene, "_detector_geometry", cache)
    return DetectorOutput(params, scene.points, geometry_cache=cache)


def _wrap_angle(delta: np.ndarray) -> np.ndarray:
    return np.arctan2(np.sin(delta), np.cos(delta))


def detection_pred_grads(
    output: DetectorOutput, labels, assignment
) -> tuple[float, dict[str, np.ndarray]]:
    """Detection loss value and its gradients w.r.t. the decoded outputs.

    Kept separate from the parameter-space gradients so a caller can fold
    the feature-space gradients of other losses into a single backprop.
    """
    s = len(output)
    d_center = np.zeros((s, 3))
    d_size = np.zeros((s, 3))
    d_yaw = np.zeros(s)
    targets = np.zeros(s)
    loss = 0.0
    for q, li in assignment.pairs:
        label_box = labels[li].box
        dc = output.centers[q] - label_box.center
        ds = output.sizes[q] - label_box.size
        dy = _wrap_angle(np.array([output.yaws[q] - label_box.yaw]))[0]
        loss += float(np.abs(dc).sum() + np.abs(ds).sum() + abs(dy))
        d_center[q] = np.sign(dc)
        d_size[q] = np.sign(ds)
        d_yaw[q] = np.sign(dy)
        targets[q] = 1.0
    p = np.clip(output.objectness, SIGMOID_CLIP, 1.0 - SIGMOID_CLIP)
    loss += float(-(targets * np.log(p) + (1.0 - targets) * np.log(1.0 - p)).sum())
    d_obj = (p - targets) / (p * (1.0 - p))
    return loss, {
        "d_center": d_center, "d_size": d_size, "d_yaw": d_yaw, "d_objectness": d_obj,
    }


def detection_loss(
    output: DetectorOutput, labels, assignment
) -> tuple[float, dict[str, np.ndarray]]:
    """Class-agnostic box regression + binary objectness.

    Sum over matched (query, label) pairs of L1 on center, size and wrapped
    yaw, plus binary cross-entropy on objectness with target 1 for matched
    and 0 for unmatched queries. No category term. Returns the loss and its
    exact gradients w.r.t. the detector parameters (at fixed assignment).
    """
    loss, pg = detection_pred_grads(output, labels, assignment)
    return loss, output.backprop(**pg)


def apply_update(
    params: DetectorParams,
    grads: dict[str, np.ndarray],
    learning_rate: float,
    momentum: float = 0.0,
    velocity: dict[str, np.ndarray] | None = None,
) -> tuple[DetectorParams, dict[str, np.ndarray]]:
    """Gradient step with optional momentum. Returns (params', velocity').

    Raises NonFiniteGradient naming the offending array; the step is not
    applied in that case.
    """
    for key, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradient(f"non-finite gradient in {key!r}")
    if velocity is None:
        velocity = zero_grads(params.config)
    new_velocity = {}
    new_arrays = {}
    for key, arr in params.arrays.items():
        v = momentum * velocity[key] + grads[key]
        new_velocity[key] = v
        new_arrays[key] = arr - learning_rate * v
    return DetectorParams(params.config, new_arrays), new_velocity


# ---------------------------------------------------------------------------
# checkpoint: JSON header + raw little-endian float64 blob, exact round-trip


def save_checkpoint(params: DetectorParams, path, step: int = 0, extra: dict | None = None) -> None:
    keys = sorted(params.arrays)
    header = {
        "config": {
            "num_queries": params.config.num_queries,
            "k_neighbors": params.config.k_neighbors,
            "trunk_hidden": params.config.trunk_hidden,
            "head_hidden": params.config.head_hidden,
            "feature_dim": params.config.feature_dim,
        },
        "step": int(step),
        "arrays": [{"key": k, "shape": list(params.arrays[k].shape)} for k in keys],
        "extra": extra or {},
    }
    blob = b"".join(params.arrays[k].astype("<f8").tobytes(order="C") for k in keys)
    header_bytes = json.dumps(header).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(header_bytes)))
        fh.write(header_bytes)
        fh.write(blob)


def load_checkpoint(path) -> tuple[DetectorParams, int, dict]:
    raw = Path(path).read_bytes()
    if raw[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path} is not a detector checkpoint")
    off = len(CHECKPOINT_MAGIC)
    (header_len,) = struct.unpack_from("<I", raw, off)
    off += 4
    header = json.loads(raw[off:off + header_len].decode())
    off += header_len
    config = DetectorConfig(**header["config"])
    arrays = {}
    for entry in header["arrays"]:
        shape = tuple(entry["shape"])
        size = int(np.prod(shape)) * 8
        arrays[entry["key"]] = (
            np.frombuffer(raw[off:off + size], dtype="<f8").reshape(shape).copy()
        )
        off += size
    return DetectorParams(config, arrays), int(header["step"]), header.get("extra", {})
