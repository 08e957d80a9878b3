"""Weakly supervised sound event detection pipeline at desk scale.

Stages: pseudo-labeling of unlabeled clips from tagging scores, 3-channel
log-mel feature extraction, class-balanced mixup training of a gated
attention CRNN, posterior decoding into timed events, per-class threshold
tuning, weighted-average fusion, and collar-based event F1 scoring.
"""

__version__ = "0.1.0"

from sedpipe.corpus import (
    DEFAULT_CLASSES,
    PosteriorGrid,
    StrongEvent,
    TagScores,
    Vocabulary,
    WeakLabel,
)

__all__ = [
    "DEFAULT_CLASSES",
    "PosteriorGrid",
    "StrongEvent",
    "TagScores",
    "Vocabulary",
    "WeakLabel",
    "__version__",
]
