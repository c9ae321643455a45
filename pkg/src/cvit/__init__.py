"""Cascaded-ViT: cascaded-chunk FFN vision transformers on a small numpy autodiff core."""
from .rng import RngState
from .tensor import Tensor, no_grad, precision

__version__ = "0.1.0"

__all__ = ["RngState", "Tensor", "no_grad", "precision", "__version__"]
