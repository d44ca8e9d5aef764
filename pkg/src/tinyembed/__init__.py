"""tinyembed: a small laboratory for contrastive text-embedding fine-tuning.

The package builds everything from numpy up: a float64 reverse-mode autodiff
tape, a tiny decoder-only transformer that reads sentence embeddings off the
final hidden state of an appended end-of-text token, low-rank adapters for
parameter-efficient fine-tuning, contrastive objectives over triplet data,
a deterministic trainer with checkpointing, and semantic-similarity
evaluation utilities.
"""

from .errors import (
    AdapterError,
    CheckpointError,
    ConfigError,
    DataFormatError,
    DegenerateEvaluationError,
    NonFiniteLossError,
    ShapeError,
    TapeError,
    TinyembedError,
)
from .rng import RngStreams
from .tensor import Tape, Tensor, backward

__version__ = "0.1.0"

__all__ = [
    "Tape",
    "Tensor",
    "backward",
    "RngStreams",
    "TinyembedError",
    "AdapterError",
    "ShapeError",
    "TapeError",
    "ConfigError",
    "DataFormatError",
    "CheckpointError",
    "NonFiniteLossError",
    "DegenerateEvaluationError",
    "__version__",
]
