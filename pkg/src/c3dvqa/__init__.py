"""Full-reference video quality assessment with a 2-D/3-D convolutional network."""

from .model import C3DVQA, ModelConfig, build_model, predict_video
from .tensor import Tape, Tensor, backward

__all__ = ["C3DVQA", "ModelConfig", "Tape", "Tensor", "backward", "build_model", "predict_video"]
__version__ = "0.1.0"
