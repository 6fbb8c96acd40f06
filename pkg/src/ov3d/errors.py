"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Inconsistent or unparsable configuration."""


class BehindCamera(ValueError):
    """A 3D box has at least one corner at or behind the camera plane."""


class EmptyCrop(ValueError):
    """A 2D crop has zero area and cannot be encoded."""


class EmbeddingCollision(RuntimeError):
    """Rejection resampling could not keep text embeddings separated;
    the embedding dimension is too small for the vocabulary size."""


class TooFewPoints(ValueError):
    """Scene has fewer points than the detector needs for seeding."""


class NonFiniteGradient(FloatingPointError):
    """A gradient array contains NaN or infinite entries."""


class MissingMetrics(FileNotFoundError):
    """Run directory does not contain a usable metrics CSV."""
