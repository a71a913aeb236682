from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .layers import (
    ShapeError,
    batchnorm,
    concat_skip,
    conv2d,
    conv2d_backward,
    maxpool2,
    maxpool2_backward,
    relu,
    relu_backward,
    transposed_conv2,
)
from .unet import UNet, UNetConfig, build_unet, count_parameters

__all__ = [
    "CheckpointError",
    "ShapeError",
    "UNet",
    "UNetConfig",
    "batchnorm",
    "build_unet",
    "concat_skip",
    "conv2d",
    "conv2d_backward",
    "count_parameters",
    "load_checkpoint",
    "maxpool2",
    "maxpool2_backward",
    "relu",
    "relu_backward",
    "save_checkpoint",
    "transposed_conv2",
]
