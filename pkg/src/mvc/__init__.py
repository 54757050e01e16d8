"""Multi-task vision transformer for image classification with patch-level region finding.

Everything runs on numpy with a small reverse-mode autodiff engine in
:mod:`mvc.autodiff`.
"""

from .model import DEFAULT_CLASSES, MODES, ModelConfig, MvcModel, forward, mvc_forward, predict
from .training import TrainConfig, evaluate, train

__all__ = ["DEFAULT_CLASSES", "MODES", "ModelConfig", "MvcModel", "TrainConfig", "evaluate", "forward",
           "mvc_forward", "predict", "train"]
