"""Miniature DenseNet classifier and U-net segmenter with a regularizer slot
at the end of every convolutional, transition and resolution block."""
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ShapeError
from .layers import (
    BatchNorm2d,
    Conv2d,
    Dense,
    DenseConnection,
    Dropout,
    GlobalAvgPool,
    Layer,
    Pool2d,
    ReLU,
    Rotaflip,
    Sequential,
    Upsample,
    concat,
    concat_backward,
    initialize,
)
from .tensor import RngStream, dtype_of

SLOT_KINDS = ("none", "rotaflip", "dropout", "both")


@dataclass
class RegularizerSlot:
    """Which regularizer ends each block. ``both`` applies dropout, then
    rotaflip."""

    kind: str = "none"
    rotaflip_rate: float = 0.0
    dropout_rate: float = 0.0
    shared_mask: bool = False
    exclude_identity: bool = False

    def violations(self):
        out = []
        if self.kind not in SLOT_KINDS:
            out.append(f"regularizer.kind must be one of {SLOT_KINDS}, got {self.kind!r}")
        if not 0 <= self.rotaflip_rate <= 1:
            out.append(f"regularizer.rotaflip_rate must be in [0, 1], got {self.rotaflip_rate}")
        if not 0 <= self.dropout_rate < 1:
            out.append(f"regularizer.dropout_rate must be in [0, 1), got {self.dropout_rate}")
        return out

    @property
    def uses_rotaflip(self):
        return self.kind in ("rotaflip", "both")

    def layers(self):
        out = []
        if self.kind in ("dropout", "both"):
            out.append(("dropout", Dropout(self.dropout_rate)))
        if self.uses_rotaflip:
            out.append(("rotaflip", Rotaflip(self.rotaflip_rate, self.shared_mask, self.exclude_identity)))
        return out


@dataclass
class DenseNetConfig:
    growth_rate: int = 8
    block_sizes: tuple = (2, 2, 2)
    stem_channels: int = 16
    stem: str = "small"
    compression: float = 0.5
    input_shape: tuple = (1, 32, 32)
    classes: int = 2
    slot: RegularizerSlot = field(default_factory=RegularizerSlot)
    bn_momentum: float = 0.99
    bn_epsilon: float = 1e-5

    def violations(self):
        out = list(self.slot.violations())
        if self.growth_rate < 1:
            out.append("growth_rate must be positive")
        if not self.block_sizes or any(b < 1 for b in self.block_sizes):
            out.append("block_sizes must be a non-empty list of positive counts")
        if self.stem_channels < 1:
            out.append("stem_channels must be positive")
        if self.stem not in ("small", "large"):
            out.append(f"stem must be 'small' or 'large', got {self.stem!r}")
        if not 0 < self.compression <= 1:
            out.append("compression must be in (0, 1]")
        if self.classes < 2:
            out.append("classes must be at least 2")
        if len(self.input_shape) != 3:
            out.append("input_shape must be (C, H, W)")
            return out
        _, h, w = self.input_shape
        if self.slot.uses_rotaflip and h != w:
            out.append(f"rotaflip needs square inputs, got {h}x{w}")
        factor = 2 ** (len(self.block_sizes) - 1) * (4 if self.stem == "large" else 1)
        if h % factor or w % factor:
            out.append(f"input size {h}x{w} must be divisible by {factor}")
        return out


@dataclass
class UnetConfig:
    filters: tuple = (8, 16, 24, 32)
    input_shape: tuple = (1, 64, 64)
    classes: int = 2
    slot: RegularizerSlot = field(default_factory=RegularizerSlot)
    dropout_between_convs: float = 0.0
    bn_momentum: float = 0.99
    bn_epsilon: float = 1e-5

    def violations(self):
        out = list(self.slot.violations())
        if len(self.filters) < 2 or any(f < 1 for f in self.filters):
            out.append("filters must list at least two positive counts")
        if not 0 <= self.dropout_between_convs < 1:
            out.append("dropout_between_convs must be in [0, 1)")
        if self.classes < 2:
            out.append("classes must be at least 2")
        if len(self.input_shape) != 3:
            out.append("input_shape must be (C, H, W)")
            return out
        _, h, w = self.input_shape
        factor = 2 ** (len(self.filters) - 1)
        if h % factor or w % factor:
            out.append(f"input size {h}x{w} must be divisible by {factor}")
        if self.slot.uses_rotaflip and h != w:
            out.append(f"rotaflip needs square inputs, got {h}x{w}")
        return out


class DenseNet(Sequential):
    kind = "densenet"
    task = "classification"

    def __init__(self, config, layers):
        super().__init__(layers)
        self.config = config
        self.input_shape = tuple(config.input_shape)


class Unet(Layer):
    """Encoder/decoder with skip concatenation; the deepest encoder block is
    the bottleneck."""

    kind = "unet"
    task = "segmentation"

    def __init__(self, config, encoders, pools, ups, decoders, head):
        super().__init__()
        self.config = config
        self.input_shape = tuple(config.input_shape)
        self.encoders, self.pools = encoders, pools
        self.ups, self.decoders = ups, decoders
        self.head = head

    def children(self):
        levels = len(self.encoders)
        out = []
        for i in range(levels):
            out.append((f"enc{i}", self.encoders[i]))
            if i < levels - 1:
                out.append((f"pool{i}", self.pools[i]))
        for i in reversed(range(levels - 1)):
            out.append((f"up{i}", self.ups[i]))
            out.append((f"dec{i}", self.decoders[i]))
        out.append(("head", self.head))
        return out

    def forward(self, x):
        levels = len(self.encoders)
        skips = []
        h = x
        for i in range(levels):
            h = self.encoders[i].forward(h)
            if i < levels - 1:
                skips.append(h)
                h = self.pools[i].forward(h)
        widths = []
        for i in reversed(range(levels - 1)):
            up = self.ups[i].forward(h)
            widths.append(skips[i].shape[1])
            h = self.decoders[i].forward(concat([skips[i], up]))
        self._cache = widths
        return self.head.forward(h)

    def backward(self, grad):
        widths = self._pop_cache()
        levels = len(self.encoders)
        g = self.head.backward(grad)
        skip_grads = {}
        for i, width in zip(range(levels - 1), reversed(widths)):
            g = self.decoders[i].backward(g)
            g_skip, g_up = concat_backward(g, [width, g.shape[1] - width])
            skip_grads[i] = g_skip
            g = self.ups[i].backward(np.ascontiguousarray(g_up))
        for i in reversed(range(levels)):
            if i < levels - 1:
                g = self.pools[i].backward(g) + skip_grads[i]
            g = self.encoders[i].backward(g)
        return g


def _bn(cfg, channels, dtype):
    return BatchNorm2d(channels, cfg.bn_momentum, cfg.bn_epsilon, dtype=dtype)


def build_densenet(cfg, seed=0, precision="single"):
    """Pre-activation DenseNet: stem, dense blocks joined by transition
    blocks, then BN-ReLU, global average pooling and a dense classifier."""
    problems = cfg.violations()
    if problems:
        raise ConfigError(problems)
    dtype = dtype_of(precision)
    k = cfg.growth_rate
    c_in = cfg.input_shape[0]
    if cfg.stem == "large":
        stem = Sequential([
            ("conv", Conv2d(c_in, cfg.stem_channels, 7, stride=2, padding=3, bias=False, dtype=dtype)),
            ("bn", _bn(cfg, cfg.stem_channels, dtype)),
            ("relu", ReLU()),
            ("pool", Pool2d("max", 2)),
        ])
    else:
        stem = Sequential([("conv", Conv2d(c_in, cfg.stem_channels, 3, bias=False, dtype=dtype))])
    layers = [("stem", stem)]
    channels = cfg.stem_channels
    for b, size in enumerate(cfg.block_sizes):
        block = []
        for j in range(size):
            branch = Sequential([
                ("bn1", _bn(cfg, channels, dtype)),
                ("relu1", ReLU()),
                ("conv1", Conv2d(channels, 4 * k, 1, padding="valid", bias=False, dtype=dtype)),
                ("bn2", _bn(cfg, 4 * k, dtype)),
                ("relu2", ReLU()),
                ("conv2", Conv2d(4 * k, k, 3, bias=False, dtype=dtype)),
                *cfg.slot.layers(),
            ])
            block.append((f"conv{j}", DenseConnection(branch)))
            channels += k
        layers.append((f"dense{b}", Sequential(block)))
        if b < len(cfg.block_sizes) - 1:
            reduced = max(1, int(channels * cfg.compression))
            layers.append((f"transition{b}", Sequential([
                ("bn", _bn(cfg, channels, dtype)),
                ("relu", ReLU()),
                ("conv", Conv2d(channels, reduced, 1, padding="valid", bias=False, dtype=dtype)),
                ("pool", Pool2d("average", 2)),
                *cfg.slot.layers(),
            ])))
            channels = reduced
    layers.append(("head", Sequential([
        ("bn", _bn(cfg, channels, dtype)),
        ("relu", ReLU()),
        ("gap", GlobalAvgPool()),
        ("fc", Dense(channels, cfg.classes, dtype=dtype)),
    ])))
    model = DenseNet(cfg, layers)
    return initialize(model, RngStream(seed) if isinstance(seed, (int, np.integer)) else seed)


def _conv_bn_relu(cfg, c_in, c_out, dtype, suffix=""):
    return [
        # the following batch norm makes a conv bias redundant
        (f"conv{suffix}", Conv2d(c_in, c_out, 3, bias=False, dtype=dtype)),
        (f"bn{suffix}", _bn(cfg, c_out, dtype)),
        (f"relu{suffix}", ReLU()),
    ]


def _resolution_block(cfg, c_in, c_out, dtype):
    layers = _conv_bn_relu(cfg, c_in, c_out, dtype, "1")
    if cfg.dropout_between_convs > 0:
        layers.append(("drop_between", Dropout(cfg.dropout_between_convs)))
    layers += _conv_bn_relu(cfg, c_out, c_out, dtype, "2")
    layers += cfg.slot.layers()
    return Sequential(layers)


def build_unet(cfg, seed=0, precision="single"):
    """U-net with one resolution block per level on each path; decoder
    levels upsample (nearest neighbour + 3x3 conv) and concatenate the
    matching encoder output before their block."""
    problems = cfg.violations()
    if problems:
        raise ConfigError(problems)
    dtype = dtype_of(precision)
    f = list(cfg.filters)
    levels = len(f)
    encoders, pools = [], []
    c_in = cfg.input_shape[0]
    for i in range(levels):
        encoders.append(_resolution_block(cfg, c_in, f[i], dtype))
        c_in = f[i]
        if i < levels - 1:
            pools.append(Pool2d("max", 2))
    ups, decoders = [None] * (levels - 1), [None] * (levels - 1)
    for i in reversed(range(levels - 1)):
        ups[i] = Sequential([("upsample", Upsample(2)), *_conv_bn_relu(cfg, f[i + 1], f[i], dtype)])
        decoders[i] = _resolution_block(cfg, 2 * f[i], f[i], dtype)
    head = Conv2d(f[0], cfg.classes, 1, padding="valid", dtype=dtype)
    model = Unet(cfg, encoders, pools, ups, decoders, head)
    return initialize(model, RngStream(seed) if isinstance(seed, (int, np.integer)) else seed)


def build_model(cfg, seed=0, precision="single"):
    if isinstance(cfg, DenseNetConfig):
        return build_densenet(cfg, seed, precision)
    if isinstance(cfg, UnetConfig):
        return build_unet(cfg, seed, precision)
    raise TypeError(f"unknown model config {type(cfg).__name__}")


@contextmanager
def inference(model):
    """Temporarily switch every layer to infer mode."""
    previous = [(layer, layer.training) for _, layer in model.named_layers()]
    model.set_training(False)
    try:
        yield model
    finally:
        for layer, flag in previous:
            layer.training = flag


def _as_batch(model, images):
    x = np.asarray(images)
    single = x.ndim == 3
    if single:
        x = x[None]
    if x.ndim != 4 or tuple(x.shape[1:]) != tuple(model.input_shape):
        raise ShapeError("images do not match the model input", x.shape, model.input_shape)
    return x, single


def model_dtype(model):
    _, layer, name = model.parameter_refs()[0]
    return layer.params[name].dtype


def predict_logits(model, images, batch_size=64):
    x, single = _as_batch(model, images)
    dtype = model_dtype(model)
    out = []
    with inference(model):
        for start in range(0, len(x), batch_size):
            out.append(model.forward(np.asarray(x[start : start + batch_size], dtype=dtype)))
    logits = np.concatenate(out) if out else np.zeros((0,))
    return logits[0] if single else logits


def predict_class(model, images, batch_size=64):
    """Argmax class per image; ties go to the lowest class index."""
    logits = predict_logits(model, images, batch_size)
    return np.argmax(logits, axis=-1)


def predict_pixels(model, images, batch_size=64):
    """Argmax label map per image."""
    logits = predict_logits(model, images, batch_size)
    return np.argmax(logits, axis=-3)
