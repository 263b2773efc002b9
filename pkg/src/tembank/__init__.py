"""Template-bank video object segmentation at desk scale.

Pure numpy pipeline: feature grids, fine/coarse template banks with inertia
updates, diversified similarity matching with a learned distance score, a toy
tracker, a minimal reverse-mode tape for fitting the scalar parameters, and
sequence/metrics IO.
"""

__version__ = "0.1.0"

from .grid import (
    FeatureGrid,
    InvalidInputError,
    LabelMask,
    ProbMask,
    SCORE_CHANNELS,
    ScoreStack,
    ShapeMismatchError,
)

__all__ = [
    "FeatureGrid",
    "ProbMask",
    "LabelMask",
    "ScoreStack",
    "SCORE_CHANNELS",
    "InvalidInputError",
    "ShapeMismatchError",
    "__version__",
]
