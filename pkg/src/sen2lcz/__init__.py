"""Sen2LCZ-Net: local climate zone classification of Sentinel-2 patches on a small NumPy autodiff core."""

from .model import ModelConfig, Sen2LCZNet, build, count_parameters
from .tensor import Tensor, no_grad

__all__ = ["ModelConfig", "Sen2LCZNet", "Tensor", "build", "count_parameters", "no_grad"]
__version__ = "0.1.0"
