"""Small-scale video-language pretraining toolkit on a checked reverse-mode substrate."""

from .autodiff import ParamStore, forward_backward, grad_check
from .model import ModelConfig, VideoTextModel, build_model
from .text import TextConfig, Vocabulary
from .vision import VisionConfig

__version__ = "0.1.0"

__all__ = [
    "ParamStore",
    "forward_backward",
    "grad_check",
    "ModelConfig",
    "VideoTextModel",
    "build_model",
    "TextConfig",
    "Vocabulary",
    "VisionConfig",
]
