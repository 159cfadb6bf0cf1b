"""Exception types shared across the engine."""


class FairDedupError(Exception):
    """Base class for all engine errors."""


class ValidationError(FairDedupError):
    """Input data violates a structural invariant (non-finite values, zero norms, duplicate ids...)."""


class FormatError(FairDedupError):
    """A file does not conform to the declared layout."""


class ConfigError(FairDedupError):
    """A configuration value is out of range or inconsistent with the inputs."""


class DimensionError(FairDedupError):
    """Operands disagree on embedding dimension."""


class DegenerateConceptError(FairDedupError):
    """A concept's template embeddings average to a numerically zero vector."""


class InsufficientSupportError(FairDedupError):
    """A subgroup has too few records to compute a recall."""


class EmptyReportError(FairDedupError):
    """Every class was excluded from a disparity report."""


class VocabularyError(FairDedupError):
    """An attribute value is not part of the declared vocabulary."""
