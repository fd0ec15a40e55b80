"""Retinal vessel segmentation toolkit.

Two-stream residual encoder-decoder for artery/vein segmentation, trained
with a hybrid region/pixel/reconstruction loss, plus temperature-scaled
knowledge distillation, vessel width measurement from skeletons and exact
distance transforms, and the evaluation metrics that go with all of it.
Built on a small float64 reverse-mode autodiff core; numpy and Pillow are
the only runtime dependencies.
"""

from .errors import (
    CheckpointError,
    ConfigError,
    DataError,
    NumericalError,
    ShapeError,
)

__all__ = [
    "CheckpointError",
    "ConfigError",
    "DataError",
    "NumericalError",
    "ShapeError",
]

__version__ = "0.1.0"
