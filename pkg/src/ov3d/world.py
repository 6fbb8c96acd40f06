"""Seeded synthetic scene generator.

Scenes are generated directly in the camera frame (camera at the origin
looking down +z) so projection needs intrinsics only. Every category gets a
distinct size signature so object extent is recoverable from geometry
alone, and every generated box projects fully inside the image.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np

from .encoders import Vocabulary, default_vocabulary
from .errors import ConfigError
from .geometry import Box3D, CameraIntrinsics

DATASET_FORMAT = "ov3d-dataset-v1"


@dataclass(frozen=True)
class SceneObject:
    box: Box3D
    category_id: int
    is_base: bool


@dataclass(frozen=True, eq=False)
class Scene:
    scene_id: str
    points: np.ndarray  # (P, 3) float32
    objects: tuple[SceneObject, ...]
    intrinsics: CameraIntrinsics

    def __post_init__(self):
        pts = np.ascontiguousarray(self.points, dtype=np.float32)
        if not np.all(np.isfinite(pts)):
            raise ValueError("scene points must be finite")
        pts.flags.writeable = False
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "objects", tuple(self.objects))


@dataclass(frozen=True)
class WorldConfig:
    num_base_categories: int = 10
    num_novel_categories: int = 10
    num_scenes: int = 200
    points_per_scene: int = 1024
    objects_per_scene: tuple[int, int] = (3, 6)
    min_object_points: int = 48
    object_point_fraction: float = 0.55
    point_noise_sigma: float = 0.01
    size_jitter: float = 0.12
    seed: int = 0
    fx: float = 400.0
    fy: float = 400.0
    cx: float = 320.0
    cy: float = 240.0
    width: int = 640
    height: int = 480

    def __post_init__(self):
        lo, hi = self.objects_per_scene
        if lo < 0 or hi < lo:
            raise ConfigError(f"invalid objects_per_scene range ({lo}, {hi})")
        if self.num_base_categories < 0 or self.num_novel_categories < 0:
            raise ConfigError("category counts must be non-negative")
        if self.num_base_categories + self.num_novel_categories < 1:
            raise ConfigError("need at least one category")
        if self.points_per_scene < 1:
            raise ConfigError("points_per_scene must be positive")
        if self.min_object_points < 1:
            raise ConfigError("min_object_points must be positive")
        if not (0.0 < self.object_point_fraction < 1.0):
            raise ConfigError("object_point_fraction must be in (0, 1)")
        if self.point_noise_sigma < 0:
            raise ConfigError("point_noise_sigma must be >= 0")
        if self.num_scenes < 0:
            raise ConfigError("num_scenes must be >= 0")
        max_objects = self.objects_per_scene[1]
        budget = (1.0 - self.object_point_fraction) * self.points_per_scene
        if max_objects * self.min_object_points > budget:
            raise ConfigError(
                "points_per_scene too small for objects_per_scene * min_object_points"
            )

    def intrinsics(self) -> CameraIntrinsics:
        return CameraIntrinsics(
            fx=self.fx, fy=self.fy, cx=self.cx, cy=self.cy,
            width=self.width, height=self.height,
        )

    def to_dict(self) -> dict:
        d = asdict(self)
        d["objects_per_scene"] = list(self.objects_per_scene)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "WorldConfig":
        kwargs = dict(d)
        kwargs["objects_per_scene"] = tuple(kwargs["objects_per_scene"])
        return cls(**kwargs)


def build_vocabulary(config: WorldConfig) -> Vocabulary:
    return default_vocabulary(config.num_base_categories, config.num_novel_categories)


def category_size_signatures(config: WorldConfig) -> np.ndarray:
    """Per-category nominal (width, depth, height), derived from the seed.

    Distinct signatures are what lets a class-agnostic detector recover
    extent from point geometry alone.
    """
    n = config.num_base_categories + config.num_novel_categories
    rng = np.random.default_rng([config.seed, 0xC0DE])
    return rng.uniform(0.35, 1.25, size=(n, 3))


def _sample_surface_points(box: Box3D, count: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform area-weighted samples on the cuboid surface, in world frame."""
    w, d, h = box.size  # local x, z, y extents
    # face areas: +-x, +-y, +-z in local coords
    areas = np.array([d * h, d * h, w * d, w * d, w * h, w * h], dtype=np.float64)
    faces = rng.choice(6, size=count, p=areas / areas.sum())
    uv = rng.uniform(-0.5, 0.5, size=(count, 2))
    local = np.empty((count, 3))
    for f in range(6):
        m = faces == f
        if not np.any(m):
            continue
        axis = f // 2  # 0: local x, 1: local y, 2: local z
        sign = 1.0 if f % 2 == 0 else -1.0
        if axis == 0:
            local[m, 0] = sign * w / 2
            local[m, 1] = uv[m, 0] * h
            local[m, 2] = uv[m, 1] * d
        elif axis == 1:
            local[m, 1] = sign * h / 2
            local[m, 0] = uv[m, 0] * w
            local[m, 2] = uv[m, 1] * d
        else:
            local[m, 2] = sign * d / 2
            local[m, 0] = uv[m, 0] * w
            local[m, 1] = uv[m, 1] * h
    c, s = np.cos(box.yaw), np.sin(box.yaw)
    rot = np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])
    return local @ rot.T + box.center


def _box_fully_visible(box: Box3D, intr: CameraIntrinsics, margin: float = 4.0) -> bool:
    corners = box.corners()
    z = corners[:, 2]
    if np.any(z < 0.5):
        return False
    u = intr.fx * corners[:, 0] / z + intr.cx
    v = intr.fy * corners[:, 1] / z + intr.cy
    return bool(
        np.all(u >= margin)
        and np.all(u <= intr.width - margin)
        and np.all(v >= margin)
        and np.all(v <= intr.height - margin)
    )


def _place_objects(
    config: WorldConfig,
    vocab: Vocabulary,
    signatures: np.ndarray,
    rng: np.random.Generator,
) -> list[SceneObject]:
    from .geometry import iou3d

    lo, hi = config.objects_per_scene
    target = int(rng.integers(lo, hi + 1))
    intr = config.intrinsics()
    objects: list[SceneObject] = []
    for _ in range(target):
        category = int(rng.integers(0, vocab.size))
        placed = False
        for _attempt in range(200):
            jitter = 1.0 + rng.uniform(-config.size_jitter, config.size_jitter, size=3)
            size = signatures[category] * jitter
            center = np.array([
                rng.uniform(-1.8, 1.8),
                rng.uniform(-1.0, 1.0),
                rng.uniform(3.0, 5.5),
            ])
            # half-circle headings keep yaw identifiable from geometry
            # (a cuboid is symmetric under a half-turn)
            yaw = rng.uniform(-np.pi / 2, np.pi / 2)
            box = Box3D(center, size, yaw)
            if not _box_fully_visible(box, intr):
                continue
            if any(iou3d(box, o.box) > 0.0 for o in objects):
                continue
            objects.append(
                SceneObject(box=box, category_id=category, is_base=vocab.is_seen(category))
            )
            placed = True
            break
        if not placed:
            # crowded scene; live with fewer objects
            continue
    return objects


def _scene_points(
    config: WorldConfig, objects: list[SceneObject], rng: np.random.Generator
) -> np.ndarray:
    total = config.points_per_scene
    chunks: list[np.ndarray] = []
    n_obj_points = 0
    if objects:
        budget = int(config.object_point_fraction * total)
        areas = np.array([
            2 * (o.box.size[0] * o.box.size[1]
                 + o.box.size[0] * o.box.size[2]
                 + o.box.size[1] * o.box.size[2])
            for o in objects
        ])
        weights = np.sqrt(areas)
        raw = weights / weights.sum() * budget
        counts = np.maximum(config.min_object_points, raw.astype(int))
        for obj, count in zip(objects, counts):
            pts = _sample_surface_points(obj.box, int(count), rng)
            pts += rng.normal(0.0, config.point_noise_sigma, size=pts.shape)
            chunks.append(pts)
            n_obj_points += int(count)
    n_background = max(total - n_obj_points, 0)
    n_floor = int(0.7 * n_background)
    if n_floor:
        floor = np.column_stack([
            rng.uniform(-3.0, 3.0, size=n_floor),
            np.full(n_floor, 2.0) + rng.normal(0.0, config.point_noise_sigma, size=n_floor),
            rng.uniform(2.5, 7.0, size=n_floor),
        ])
        chunks.append(floor)
    n_clutter = n_background - n_floor
    if n_clutter:
        clutter = np.column_stack([
            rng.uniform(-2.5, 2.5, size=n_clutter),
            rng.uniform(-1.6, 1.9, size=n_clutter),
            rng.uniform(2.0, 7.0, size=n_clutter),
        ])
        chunks.append(clutter)
    points = np.vstack(chunks) if chunks else np.zeros((0, 3))
    return points[:total] if len(points) > total else points


def generate_scene(
    config: WorldConfig, vocab: Vocabulary, index: int, scene_id_prefix: str = "scene"
) -> Scene:
    signatures = category_size_signatures(config)
    rng = np.random.default_rng([config.seed, 1, index])
    objects = _place_objects(config, vocab, signatures, rng)
    points = _scene_points(config, objects, rng)
    return Scene(
        scene_id=f"{scene_id_prefix}-{index:04d}",
        points=points.astype(np.float32),
        objects=tuple(objects),
        intrinsics=config.intrinsics(),
    )


def generate_dataset(
    config: WorldConfig,
    vocab: Vocabulary | None = None,
    scene_id_prefix: str = "scene",
) -> list[Scene]:
    """Deterministic function of the config seed."""
    if vocab is None:
        vocab = build_vocabulary(config)
    if vocab.size != config.num_base_categories + config.num_novel_categories:
        raise ConfigError("vocabulary size does not match configured category counts")
    return [
        generate_scene(config, vocab, i, scene_id_prefix)
        for i in range(config.num_scenes)
    ]


def base_annotations(scene: Scene) -> list[SceneObject]:
    """The annotated objects: exactly those from seen categories."""
    return [o for o in scene.objects if o.is_base]


# ---------------------------------------------------------------------------
# dataset serialization: manifest JSON + per-scene little-endian float32
# point blob + per-scene object JSON. Lossless at 32-bit precision.


def save_dataset(scenes: list[Scene], vocab: Vocabulary, config: WorldConfig, out_dir) -> None:
    out = Path(out_dir)
    (out / "scenes").mkdir(parents=True, exist_ok=True)
    index = []
    for scene in scenes:
        points_file = f"scenes/{scene.scene_id}.f32"
        objects_file = f"scenes/{scene.scene_id}.json"
        blob = scene.points.astype("<f4").tobytes(order="C")
        (out / points_file).write_bytes(blob)
        payload = [
            {
                "center": o.box.center.tolist(),
                "size": o.box.size.tolist(),
                "yaw": o.box.yaw,
                "category_id": o.category_id,
                "is_base": o.is_base,
            }
            for o in scene.objects
        ]
        (out / objects_file).write_text(json.dumps(payload))
        index.append({
            "scene_id": scene.scene_id,
            "points_file": points_file,
            "objects_file": objects_file,
            "num_points": int(scene.points.shape[0]),
        })
    manifest = {
        "format": DATASET_FORMAT,
        "config": config.to_dict(),
        "vocabulary": {"names": list(vocab.names), "seen_mask": list(vocab.seen_mask)},
        "scenes": index,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2))


def load_dataset(dataset_dir) -> tuple[list[Scene], Vocabulary, WorldConfig]:
    root = Path(dataset_dir)
    manifest_path = root / "manifest.json"
    if not manifest_path.exists():
        raise ConfigError(f"no manifest.json in {root}")
    manifest = json.loads(manifest_path.read_text())
    if manifest.get("format") != DATASET_FORMAT:
        raise ConfigError(f"unsupported dataset format {manifest.get('format')!r}")
    config = WorldConfig.from_dict(manifest["config"])
    vocab = Vocabulary(
        names=tuple(manifest["vocabulary"]["names"]),
        seen_mask=tuple(bool(b) for b in manifest["vocabulary"]["seen_mask"]),
    )
    intr = config.intrinsics()
    scenes = []
    for entry in manifest["scenes"]:
        blob = (root / entry["points_file"]).read_bytes()
        points = np.frombuffer(blob, dtype="<f4").reshape(entry["num_points"], 3)
        raw_objects = json.loads((root / entry["objects_file"]).read_text())
        objects = tuple(
            SceneObject(
                box=Box3D(np.array(o["center"]), np.array(o["size"]), o["yaw"]),
                category_id=int(o["category_id"]),
                is_base=bool(o["is_base"]),
            )
            for o in raw_objects
        )
        scenes.append(Scene(
            scene_id=entry["scene_id"], points=points, objects=objects, intrinsics=intr
        ))
    return scenes, vocab, config
