"""Weakly-supervised object removal: a mask generator and an in-painter trained from image-level labels."""

__version__ = "0.1.0"

from .core import (
    ClassLabel,
    ClassTable,
    EditResult,
    LossWeights,
    ShapeMismatchError,
    binarize_mask,
    compose,
    invert_mask,
    masked_area_fraction,
)

__all__ = [
    "ClassLabel",
    "ClassTable",
    "EditResult",
    "LossWeights",
    "ShapeMismatchError",
    "binarize_mask",
    "compose",
    "invert_mask",
    "masked_area_fraction",
    "__version__",
]
