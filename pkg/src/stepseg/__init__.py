"""Step segmentation of instructional videos with a hidden semi-Markov model."""
__version__ = "0.1.0"

from .core import BACKGROUND, Dataset, Segmentation, TaskDefinition, ValidationError, VideoInstance  # noqa: E402
from .model import ModelParams, forward_log_marginal, posterior_stats, viterbi_decode  # noqa: E402

__all__ = [
    "BACKGROUND",
    "Dataset",
    "ModelParams",
    "Segmentation",
    "TaskDefinition",
    "ValidationError",
    "VideoInstance",
    "forward_log_marginal",
    "posterior_stats",
    "viterbi_decode",
]
