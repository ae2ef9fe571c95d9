"""detrefine: post-hoc confidence refinement for open-vocabulary detectors.

Fuses frozen-backbone features through a small Transformer encoder and
recalibrates detector scores without touching boxes or labels.
"""

__version__ = "0.1.0"

from .types import (
    Box,
    CategoryEntry,
    CategoryVocabulary,
    Detection,
    DetectionSet,
    FeatureBundle,
    FusionConfig,
    RefinerOutput,
    TextEmbeddingTable,
    TrainConfig,
    box_iou,
    normalize_box,
    validate_bundle,
)

__all__ = [
    "Box",
    "CategoryEntry",
    "CategoryVocabulary",
    "Detection",
    "DetectionSet",
    "FeatureBundle",
    "FusionConfig",
    "RefinerOutput",
    "TextEmbeddingTable",
    "TrainConfig",
    "box_iou",
    "normalize_box",
    "validate_bundle",
    "__version__",
]
