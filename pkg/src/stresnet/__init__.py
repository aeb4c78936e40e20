"""Spatial-temporal residual in-loop filter for compressed video luma."""

__version__ = "0.1.0"

from .dataset import DegradeSpec, FrameSequence, SampleStore, TrainingSample
from .errors import (
    AlignmentError,
    ConfigurationError,
    FormatError,
    PreconditionError,
    StresnetError,
    TruncationError,
)
from .model import StresNetWeights, forward, init_weights
from .pipeline import CtuGrid, filter_sequence
from .tensor import ConvKernel
from .trainer import HyperParams

__all__ = [
    "AlignmentError",
    "ConfigurationError",
    "ConvKernel",
    "CtuGrid",
    "DegradeSpec",
    "FormatError",
    "FrameSequence",
    "HyperParams",
    "PreconditionError",
    "SampleStore",
    "StresNetWeights",
    "StresnetError",
    "TrainingSample",
    "TruncationError",
    "filter_sequence",
    "forward",
    "init_weights",
]
