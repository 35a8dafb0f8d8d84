"""Few-shot prototypical classification engine.

Episodic metric learning on top of a minimal reverse-mode autodiff tensor
core: encoders, class prototypes, distance-softmax classification, Adam
training with plateau scheduling and early stopping, episodic evaluation
reports, and Grad-CAM saliency.
"""

from .encoders import EncoderConfig, ParamSet, init_params
from .errors import ConfigError, DataError, NumericalError, ProtoshotError, ShapeError
from .head import ClassDistribution, PrototypeSet, classify, compute_prototypes, episode_loss
from .model import FewShotModel
from .tensor import Tensor, finite_diff_check
from .train import TrainConfig, fit

__all__ = [
    "ClassDistribution",
    "ConfigError",
    "DataError",
    "EncoderConfig",
    "FewShotModel",
    "NumericalError",
    "ParamSet",
    "ProtoshotError",
    "PrototypeSet",
    "ShapeError",
    "Tensor",
    "TrainConfig",
    "classify",
    "compute_prototypes",
    "episode_loss",
    "finite_diff_check",
    "fit",
    "init_params",
]

__version__ = "0.1.0"
