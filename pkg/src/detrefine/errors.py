"""Exception hierarchy shared by all detrefine modules."""


class DetRefineError(Exception):
    """Base class for every error raised by this package."""


# --- value / shape validation -------------------------------------------------

class DimensionMismatch(DetRefineError):
    """A tensor or record has the wrong length, count, or shape."""


class ShapeMismatch(DimensionMismatch):
    """Parameter tensors disagree in shape (optimizer / EMA / checkpoint)."""


class BadDimension(DetRefineError):
    """A dimension violates a structural requirement (e.g. not divisible by 4)."""


class NonFiniteFeature(DetRefineError):
    """A feature payload contains NaN or Inf."""


class NonFiniteActivation(DetRefineError):
    """An encoder forward pass produced NaN or Inf."""


class NonFiniteGradient(DetRefineError):
    """A gradient passed to the optimizer contains NaN or Inf."""


class DegenerateBox(DetRefineError):
    """A box has zero width or height after normalization and clamping."""


class ZeroNormVector(DetRefineError):
    """A vector that must be unit-normalized has zero norm."""


class InvariantViolation(DetRefineError):
    """A stored object violates one of its declared invariants."""


# --- file formats -------------------------------------------------------------

class StoreError(DetRefineError):
    """Base class for binary cache / table / checkpoint format errors."""


class BadMagic(StoreError):
    """File does not start with the expected magic bytes."""


class VersionUnsupported(StoreError):
    """File version is not supported by this reader."""


class TruncatedRecord(StoreError):
    """File ends in the middle of a record or payload."""


# --- annotation / detection ingestion -----------------------------------------

class SchemaError(DetRefineError):
    """A JSON annotation or results file violates the expected schema."""


class UnknownCategory(SchemaError):
    """A record references a category id absent from the vocabulary."""


class KeyNotFound(DetRefineError, KeyError):
    """Lookup of an absent key (category id, image id) in a table or cache."""

    def __str__(self) -> str:  # KeyError quotes its repr; keep the message plain
        return Exception.__str__(self)


class MissingCategoryEmbedding(KeyNotFound):
    """A detection references a category with no stored text embedding."""


# --- training / evaluation ----------------------------------------------------

class DataEmpty(DetRefineError):
    """A training or evaluation dataset contains no usable samples."""


class EmptyBatch(DetRefineError):
    """A loss was requested for a batch with no supervised entries."""


class DivergenceDetected(DetRefineError):
    """Training loss became non-finite; aborted at the last good parameters."""


class ConfigMismatch(DetRefineError):
    """Two reports or configs that must agree do not."""


class SpecInvalid(DetRefineError):
    """A synthetic-world spec violates its invariants."""
