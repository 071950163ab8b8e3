"""Partial-convolution-based padding: convolution, gradients and border-focused evaluation."""

from .padding import ConvGeometry, PadMode, out_dims, pad
from .pconv import (ConvWeights, RatioCache, RatioMap, chain_masks, compute_ratio_map,
                    conv2d_forward, ratio_cache_get, update_mask)
from .tensor import elementwise, load_tensor, save_tensor

__version__ = "0.1.0"

__all__ = [
    "ConvGeometry", "ConvWeights", "PadMode", "RatioCache", "RatioMap", "chain_masks",
    "compute_ratio_map", "conv2d_forward", "elementwise", "load_tensor", "out_dims", "pad",
    "ratio_cache_get", "save_tensor", "update_mask",
]
