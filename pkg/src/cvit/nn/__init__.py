from .layers import (BatchNorm, Conv2d, ConvBN, InvertedResidual, Linear, PatchEmbed,
                     SqueezeExcite, fold_bn_into_conv, fuse_model, subsample_block)
from .module import Module, ModuleList, Parameter, Residual, Sequential

__all__ = [
    "BatchNorm", "Conv2d", "ConvBN", "InvertedResidual", "Linear", "PatchEmbed", "SqueezeExcite",
    "fold_bn_into_conv", "fuse_model", "subsample_block",
    "Module", "ModuleList", "Parameter", "Residual", "Sequential",
]
