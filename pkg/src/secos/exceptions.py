"""Exception types raised across the package."""


class SecosError(Exception):
    """Base class for package errors."""


class ManifestError(SecosError, ValueError):
    """Dataset manifest or split is malformed."""


class DegenerateEmbeddingError(SecosError, ValueError):
    """Averaged prompt embeddings cancel out for a class."""

    def __init__(self, class_name, norm):
        super().__init__(
            f"prompt embeddings for class {class_name!r} average to a near-zero "
            f"vector (norm={norm:.3g})"
        )
        self.class_name = class_name


class DegenerateFeatureError(SecosError, ValueError):
    """A feature row has zero norm and cannot be compared by cosine."""


class PayloadError(SecosError, ValueError):
    """A payload locator cannot be resolved by the encoder."""


class ShapeMismatchError(SecosError, ValueError):
    """Tensors that must align have incompatible shapes."""


class NonFiniteError(SecosError, FloatingPointError):
    """NaN or inf encountered in an input or a loss."""

    def __init__(self, message, sample_id=None):
        super().__init__(message)
        self.sample_id = sample_id


class ConfigError(SecosError, ValueError):
    """Configuration file or override could not be parsed."""


class MissingArtifactError(SecosError, FileNotFoundError):
    """An upstream pipeline artifact is absent."""

    def __init__(self, path, producer):
        super().__init__(
            f"{path} not found; run `secos {producer}` first to produce it"
        )
        self.path = path
        self.producer = producer
