"""Gradient-check targets: one small double-precision instance of every
layer kind and of both model builders."""
import numpy as np

from .layers import (
    BatchNorm2d,
    Conv2d,
    Dense,
    DenseConnection,
    Dropout,
    GlobalAvgPool,
    Pool2d,
    ReLU,
    Rotaflip,
    Upsample,
    initialize,
)
from .models import DenseNetConfig, RegularizerSlot, UnetConfig, build_densenet, build_unet
from .tensor import RngStream
from .training import gradcheck

F64 = np.float64


def _init(layer, seed):
    return initialize(layer, RngStream(seed))


def _bn(seed):
    # unit gamma and zero beta would hide scale/shift mistakes
    bn = BatchNorm2d(3, dtype=F64)
    s = RngStream(seed).child("affine")
    bn.params["gamma"][...] = 0.5 + s.uniform(3)
    bn.params["beta"][...] = s.normal(3)
    return bn


def _frozen_bn(seed):
    bn = _bn(seed)
    s = RngStream(seed).child("stats")
    bn.buffers["running_mean"][...] = s.normal(3)
    bn.buffers["running_var"][...] = 0.5 + s.uniform(3)
    bn.frozen_stats = True
    return bn


def _mini_densenet(seed):
    # 16 x 16 keeps the deepest batch norm from seeing only a handful of
    # values per channel, which makes the finite differences ill-conditioned
    slot = RegularizerSlot("both", rotaflip_rate=0.3, dropout_rate=0.2)
    return build_densenet(DenseNetConfig(input_shape=(1, 16, 16), slot=slot), seed, "double")


def _mini_unet(seed):
    slot = RegularizerSlot("both", rotaflip_rate=0.3, dropout_rate=0.2)
    cfg = UnetConfig(input_shape=(1, 16, 16), slot=slot, dropout_between_convs=0.1)
    return build_unet(cfg, seed, "double")


# name -> (seed -> layer factory, input shape)
TARGETS = {
    "conv3x3_same": (lambda s: _init(Conv2d(3, 4, 3, dtype=F64), s), (2, 3, 6, 6)),
    "conv3x3_stride2_valid": (lambda s: _init(Conv2d(2, 3, 3, stride=2, padding="valid", dtype=F64), s), (2, 2, 7, 7)),
    "conv1x1": (lambda s: _init(Conv2d(4, 2, 1, padding="valid", bias=False, dtype=F64), s), (2, 4, 5, 5)),
    "conv7x7_stride2": (lambda s: _init(Conv2d(1, 2, 7, stride=2, padding=3, dtype=F64), s), (2, 1, 8, 8)),
    "batchnorm_train": (_bn, (4, 3, 3, 3)),
    "batchnorm_frozen_stats": (_frozen_bn, (4, 3, 3, 3)),
    "relu": (lambda s: ReLU(), (2, 3, 4, 4)),
    "dense": (lambda s: _init(Dense(6, 3, dtype=F64), s), (4, 6)),
    "global_avg_pool": (lambda s: GlobalAvgPool(), (2, 3, 4, 4)),
    "max_pool": (lambda s: Pool2d("max", 2), (2, 3, 6, 6)),
    "average_pool": (lambda s: Pool2d("average", 2), (2, 3, 6, 6)),
    "upsample": (lambda s: Upsample(2), (2, 3, 3, 3)),
    "concat": (lambda s: _init(DenseConnection(Conv2d(2, 3, 3, dtype=F64)), s), (2, 2, 4, 4)),
    "dropout_frozen_mask": (lambda s: Dropout(0.3), (2, 3, 4, 4)),
    "rotaflip_frozen_mask": (lambda s: Rotaflip(0.6), (3, 4, 5, 5)),
    "rotaflip_shared_mask": (lambda s: Rotaflip(0.6, shared=True), (3, 4, 5, 5)),
    "densenet": (_mini_densenet, (2, 1, 16, 16)),
    "unet": (_mini_unet, (2, 1, 16, 16)),
}


# Whole networks at batch 2 are strongly curved (batch norm divides by small
# batch variances), so the O(h^2) truncation error of a 1e-5 step can reach
# 1e-4 there. A smaller step keeps truncation well below roundoff.
STEPS = {"densenet": 1e-6, "unet": 1e-6}


def run_gradchecks(seeds, names=None):
    """``{name: GradcheckReport}`` for the selected targets (all by default)."""
    seeds = list(seeds)
    out = {}
    for name in names or TARGETS:
        factory, shape = TARGETS[name]
        out[name] = gradcheck(factory, shape, seeds, step=STEPS.get(name, 1e-5))
    return out

