"""Paired text/image-region encoders sharing one latent space.

The image encoder is a controllable surrogate for a frozen vision-language
model: a crop that lines up with an object returns a noisy copy of that
object's text embedding, anything else returns a dedicated background
embedding. Fidelity degrades smoothly with crop misalignment.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import TYPE_CHECKING

import numpy as np

from .errors import BehindCamera, EmbeddingCollision, EmptyCrop
from .geometry import Box2D, iou2d, project_box

if TYPE_CHECKING:
    from .world import Scene

DEFAULT_CATEGORY_NAMES = (
    # annotated ("seen") half of the default vocabulary
    "chair", "table", "bed", "sofa", "desk",
    "toilet", "dresser", "nightstand", "bookshelf", "bathtub",
    # novel half
    "lamp", "pillow", "sink", "cabinet", "monitor",
    "door", "counter", "fridge", "plant", "bin",
)


@dataclass(frozen=True)
class Vocabulary:
    """Superset category list with a seen/novel split."""

    names: tuple[str, ...]
    seen_mask: tuple[bool, ...]

    def __post_init__(self):
        if len(self.names) != len(self.seen_mask):
            raise ValueError("names and seen_mask must have equal length")
        if len(set(self.names)) != len(self.names):
            raise ValueError("category names must be unique")
        if not self.names:
            raise ValueError("vocabulary must not be empty")

    @property
    def size(self) -> int:
        return len(self.names)

    def seen_ids(self) -> list[int]:
        return [i for i, s in enumerate(self.seen_mask) if s]

    def novel_ids(self) -> list[int]:
        return [i for i, s in enumerate(self.seen_mask) if not s]

    def is_seen(self, category_id: int) -> bool:
        return self.seen_mask[category_id]


@dataclass(frozen=True)
class EncoderConfig:
    """Knobs of the encoder surrogate.

    temperature is the softmax temperature applied wherever the pipeline
    turns embedding similarities into probabilities. The sharp default
    mirrors the scaled-logit convention of contrastive image-text models;
    a plain temperature of 1 flattens the distribution so far at realistic
    vocabulary sizes that no crop can clear a 0.3 probability gate.
    """

    embedding_dim: int = 32
    crop_iou_threshold: float = 0.5
    image_noise_sigma: float = 0.1
    temperature: float = 0.07
    normalize_features: bool = True
    max_resample_attempts: int = 200
    seed: int = 0

    def __post_init__(self):
        if not (0.0 < self.crop_iou_threshold <= 1.0):
            raise ValueError("crop_iou_threshold must be in (0, 1]")
        if self.image_noise_sigma < 0.0:
            raise ValueError("image_noise_sigma must be >= 0")
        if self.temperature <= 0.0:
            raise ValueError("temperature must be positive")
        if self.embedding_dim < 2:
            raise ValueError("embedding_dim must be at least 2")


@dataclass(frozen=True)
class TextEmbeddings:
    """Unit-norm embedding row per category, plus one background row."""

    names: tuple[str, ...]
    matrix: np.ndarray  # (C, D), rows unit norm
    background: np.ndarray  # (D,), unit norm

    @property
    def dim(self) -> int:
        return self.matrix.shape[1]

    @property
    def background_index(self) -> int:
        """Index of the background row in the extended (C+1)-row matrix."""
        return self.matrix.shape[0]

    def extended_matrix(self) -> np.ndarray:
        return np.vstack([self.matrix, self.background[None, :]])

    def save(self, path) -> None:
        payload = {
            "names": list(self.names),
            "dim": int(self.dim),
            "rows": self.matrix.ravel().tolist(),
            "background": self.background.tolist(),
        }
        Path(path).write_text(json.dumps(payload))

    @classmethod
    def load(cls, path) -> "TextEmbeddings":
        payload = json.loads(Path(path).read_text())
        dim = int(payload["dim"])
        names = tuple(payload["names"])
        matrix = np.array(payload["rows"], dtype=np.float64).reshape(len(names), dim)
        background = np.array(payload["background"], dtype=np.float64)
        return cls(names=names, matrix=matrix, background=background)


def default_vocabulary(num_base: int = 10, num_novel: int = 10) -> Vocabulary:
    """Vocabulary built from the default name pool, base names first."""
    total = num_base + num_novel
    if total < 1:
        raise ValueError("vocabulary needs at least one category")
    names = list(DEFAULT_CATEGORY_NAMES[:total])
    names += [f"thing{i:02d}" for i in range(len(names), total)]
    mask = [True] * num_base + [False] * num_novel
    return Vocabulary(names=tuple(names), seen_mask=tuple(mask))


def _seeded_unit_vector(name: str, seed: int, attempt: int, dim: int) -> np.ndarray:
    digest = hashlib.sha256(f"{seed}:{attempt}:{name}".encode()).digest()
    rng = np.random.default_rng(np.frombuffer(digest, dtype=np.uint64))
    vec = rng.standard_normal(dim)
    return vec / np.linalg.norm(vec)


def encode_text(vocab: Vocabulary, config: EncoderConfig) -> TextEmbeddings:
    """Deterministic per-name unit embeddings with pairwise |cos| <= 0.5.

    Each row is drawn from a hash of (seed, attempt, name) and resampled
    (bumping the attempt counter) until it keeps |cos| <= 0.5 against every
    previously produced row. Raises EmbeddingCollision when the attempt
    budget runs out, which signals the embedding dim is too small for the
    vocabulary.
    """
    rows: list[np.ndarray] = []
    for name in list(vocab.names) + ["<background>"]:
        for attempt in range(config.max_resample_attempts):
            vec = _seeded_unit_vector(name, config.seed, attempt, config.embedding_dim)
            if all(abs(float(vec @ prev)) <= 0.5 for prev in rows):
                rows.append(vec)
                break
        else:
            raise EmbeddingCollision(
                f"could not place embedding for {name!r} after "
                f"{config.max_resample_attempts} attempts (dim={config.embedding_dim})"
            )
    matrix = np.array(rows[:-1])
    matrix.flags.writeable = False
    background = rows[-1]
    background.flags.writeable = False
    return TextEmbeddings(names=vocab.names, matrix=matrix, background=background)


def scene_object_projections(scene: "Scene") -> list[Box2D | None]:
    """Projected 2D boxes of the scene's objects (None when unobservable),
    memoized on the immutable scene."""
    cached = scene.__dict__.get("_object_projections")
    if cached is not None:
        return cached
    projections: list[Box2D | None] = []
    for obj in scene.objects:
        try:
            projections.append(project_box(obj.box, scene.intrinsics))
        except BehindCamera:
            projections.append(None)
    object.__setattr__(scene, "_object_projections", projections)
    return projections


def encode_image_crop(
    scene: "Scene",
    crop: Box2D,
    text: TextEmbeddings,
    config: EncoderConfig,
    rng: np.random.Generator,
) -> np.ndarray:
    """Encode a 2D image region into the shared latent space.

    The crop is attributed to the scene object whose projected box has the
    highest 2D IoU with it. Above the fidelity threshold the result is that
    category's text embedding plus Gaussian noise scaled by the
    misalignment; below it the crop reads as background.
    """
    if crop.area() <= 0.0:
        raise EmptyCrop(f"crop {crop.min_xy.tolist()}-{crop.max_xy.tolist()} has zero area")
    best_iou = 0.0
    best_category = -1
    for obj, projected in zip(scene.objects, scene_object_projections(scene)):
        if projected is None:
            continue
        v = iou2d(crop, projected)
        if v > best_iou:
            best_iou, best_category = v, obj.category_id
    if best_category < 0 or best_iou < config.crop_iou_threshold:
        return text.background.copy()
    noise = config.image_noise_sigma * (1.0 - best_iou) * rng.standard_normal(text.dim)
    vec = text.matrix[best_category] + noise
    return vec / np.linalg.norm(vec)


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max()
    exp = np.exp(shifted)
    return exp / exp.sum()


def semantic_distribution(
    feat: np.ndarray, text: TextEmbeddings, temperature: float = 1.0
) -> tuple[np.ndarray, int, float]:
    """Softmax over dot products between a feature and every text row.

    Returns (distribution over C categories, argmax index, max probability).
    """
    if not np.all(np.isfinite(feat)):
        raise ValueError("feature must be finite")
    dist = softmax(text.matrix @ np.asarray(feat, dtype=np.float64) / temperature)
    c_star = int(np.argmax(dist))
    return dist, c_star, float(dist[c_star])


def semantic_distribution_with_background(
    feat: np.ndarray, text: TextEmbeddings, temperature: float = 1.0
) -> tuple[np.ndarray, int, float]:
    """Same softmax extended with the background row as a (C+1)-th option.

    An argmax equal to ``text.background_index`` means the feature reads as
    background rather than any category.
    """
    if not np.all(np.isfinite(feat)):
        raise ValueError("feature must be finite")
    dist = softmax(text.extended_matrix() @ np.asarray(feat, dtype=np.float64) / temperature)
    c_star = int(np.argmax(dist))
    return dist, c_star, float(dist[c_star])
