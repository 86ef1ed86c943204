"""Rotaflip: random D4 transforms of feature maps as a training-time
regularizer, with a small numpy CNN stack to study it."""
from .d4 import D4Code, apply, compose, invert
from .errors import ConfigError, DivergenceError, PNMParseError, RotaflipError, ShapeError
from .layers import Rotaflip, TransformMask, rotaflip_backward, rotaflip_forward
from .models import DenseNetConfig, RegularizerSlot, UnetConfig, build_densenet, build_unet
from .training import Schedule, TrainSettings, gradcheck, lr_at, train

__all__ = [
    "D4Code", "apply", "compose", "invert",
    "ConfigError", "DivergenceError", "PNMParseError", "RotaflipError", "ShapeError",
    "Rotaflip", "TransformMask", "rotaflip_backward", "rotaflip_forward",
    "DenseNetConfig", "RegularizerSlot", "UnetConfig", "build_densenet", "build_unet",
    "Schedule", "TrainSettings", "gradcheck", "lr_at", "train",
]
