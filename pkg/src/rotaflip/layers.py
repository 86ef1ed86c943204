"""Differentiable layers with explicit forward/backward passes.

Every layer follows the same small protocol:

* ``forward(x)`` computes the output and caches what ``backward`` needs;
  behaviour depends on ``self.training``.
* ``backward(grad)`` returns the gradient w.r.t. the input and stores
  parameter gradients in ``self.grads`` under the same keys as
  ``self.params``.
* ``buffers`` hold non-trainable state (batch-norm running statistics) that
  is checkpointed together with ``params``.

Composite layers expose their sub-layers through ``children()``; naming is
explicit so that inserting a regularizer never renames an existing layer
(parameter initialisation streams are keyed by layer path).
"""
from dataclasses import dataclass

import numpy as np

from . import d4
from .errors import ShapeError


class Layer:
    kind = "layer"
    stochastic = False

    def __init__(self):
        self.params = {}
        self.grads = {}
        self.buffers = {}
        self.training = True

    def forward(self, x):
        raise NotImplementedError

    def backward(self, grad):
        raise NotImplementedError

    def __call__(self, x):
        return self.forward(x)

    def children(self):
        return []

    def reset_parameters(self, stream):
        """Draw fresh parameters from ``stream``; no-op for stateless layers."""

    def set_training(self, flag=True):
        for _, layer in self.named_layers():
            layer.training = bool(flag)
        return self

    def named_layers(self, prefix=""):
        yield prefix, self
        for name, child in self.children():
            path = f"{prefix}.{name}" if prefix else name
            yield from child.named_layers(path)

    def parameter_refs(self):
        """``(key, layer, name)`` for every trainable tensor, in a fixed order."""
        refs = []
        for path, layer in self.named_layers():
            for name in layer.params:
                refs.append((f"{path}.{name}" if path else name, layer, name))
        return refs

    def describe(self):
        return self.kind

    def kink_pattern(self):
        """Which branch of a piecewise-linear op the last forward took (None
        for smooth layers). Gradient checks use it to avoid probing across a
        kink."""
        return None

    def _pop_cache(self):
        cache = getattr(self, "_cache", None)
        if cache is None:
            raise RuntimeError(f"{self.kind}: backward called without a preceding forward")
        self._cache = None
        return cache


def _check_rank(x, kind):
    if x.ndim != 4:
        raise ShapeError(f"{kind} expects a 4-D (N, C, H, W) input", x.shape)


def he_uniform(stream, shape, fan_in, dtype):
    bound = np.sqrt(6.0 / fan_in)
    return ((stream.uniform(shape) * 2.0 - 1.0) * bound).astype(dtype)


# --------------------------------------------------------------------------
# Convolution
# --------------------------------------------------------------------------


def _flat_padded(x, pad, tail):
    """Zero-pad ``x`` spatially and flatten each (n, c) plane, with ``tail``
    extra zeros so every kernel offset can be read as one contiguous slice."""
    n, c, h, w = x.shape
    hp, wp = h + 2 * pad, w + 2 * pad
    flat = np.zeros((n, c, hp * wp + tail), dtype=x.dtype)
    grid = flat[:, :, : hp * wp]
    grid.shape = (n, c, hp, wp)
    grid[:, :, pad : pad + h, pad : pad + w] = x
    return flat


class Conv2d(Layer):
    """2-D cross-correlation.

    Stride-1 kernels larger than 1x1 are evaluated on the flattened padded
    grid: one matmul against all ``kh * kw`` kernel taps, then a shifted sum.
    Output columns that straddle the right border are computed and dropped.
    Strided convolutions subsample the stride-1 result.
    """

    kind = "conv2d"

    def __init__(self, in_channels, out_channels, kernel_size=3, stride=1,
                 padding="same", bias=True, dtype=np.float32):
        super().__init__()
        if stride < 1:
            raise ValueError(f"stride must be positive, got {stride}")
        kh, kw = (kernel_size, kernel_size) if np.isscalar(kernel_size) else kernel_size
        if padding == "same":
            if kh % 2 == 0 or kw % 2 == 0 or kh != kw:
                raise ValueError("'same' padding needs an odd square kernel")
            pad = kh // 2
        elif padding == "valid":
            pad = 0
        elif isinstance(padding, (int, np.integer)) and padding >= 0:
            pad = int(padding)
        else:
            raise ValueError(f"padding must be 'same', 'valid' or a non-negative int, got {padding!r}")
        self.in_channels, self.out_channels = in_channels, out_channels
        self.kernel = (kh, kw)
        self.stride, self.pad = stride, pad
        self.params["weight"] = np.zeros((out_channels, in_channels, kh, kw), dtype=dtype)
        if bias:
            self.params["bias"] = np.zeros(out_channels, dtype=dtype)

    def reset_parameters(self, stream):
        w = self.params["weight"]
        fan_in = self.in_channels * self.kernel[0] * self.kernel[1]
        w[...] = he_uniform(stream, w.shape, fan_in, w.dtype)
        if "bias" in self.params:
            self.params["bias"][...] = 0

    def describe(self):
        kh, kw = self.kernel
        return f"conv2d {self.in_channels}->{self.out_channels} {kh}x{kw} stride={self.stride} pad={self.pad}"

    def output_size(self, h, w):
        kh, kw = self.kernel
        return ((h + 2 * self.pad - kh) // self.stride + 1,
                (w + 2 * self.pad - kw) // self.stride + 1)

    def forward(self, x):
        _check_rank(x, self.kind)
        n, c, h, w = x.shape
        if c != self.in_channels:
            raise ShapeError(f"conv2d expects {self.in_channels} input channels",
                             x.shape, self.params["weight"].shape)
        kh, kw = self.kernel
        if h + 2 * self.pad < kh or w + 2 * self.pad < kw:
            raise ShapeError("input smaller than kernel", x.shape, self.params["weight"].shape)
        weight = self.params["weight"]
        o = self.out_channels
        if kh == kw == 1 and self.pad == 0:
            y = np.matmul(weight.reshape(o, c), x.reshape(n, c, h * w)).reshape(n, o, h, w)
            self._cache = ("pointwise", x, None)
        else:
            hp, wp = h + 2 * self.pad, w + 2 * self.pad
            ho, wo = hp - kh + 1, wp - kw + 1
            flat = _flat_padded(x, self.pad, kw - 1)
            taps = weight.transpose(2, 3, 0, 1).reshape(kh * kw * o, c)
            z = np.matmul(taps, flat)
            span = ho * wp
            acc = np.zeros((n, o, span), dtype=z.dtype)
            for di in range(kh):
                for dj in range(kw):
                    s, off = di * kw + dj, di * wp + dj
                    acc += z[:, s * o : (s + 1) * o, off : off + span]
            y = acc.reshape(n, o, ho, wp)[:, :, :, :wo]
            self._cache = ("grid", x, flat)
        if self.stride > 1:
            y = y[:, :, :: self.stride, :: self.stride]
        y = np.ascontiguousarray(y)
        if "bias" in self.params:
            y += self.params["bias"].reshape(1, -1, 1, 1)
        return y

    def backward(self, grad):
        mode, x, flat = self._pop_cache()
        n, c, h, w = x.shape
        kh, kw = self.kernel
        o = self.out_channels
        weight = self.params["weight"]
        if "bias" in self.params:
            self.grads["bias"] = grad.sum(axis=(0, 2, 3))
        if self.stride > 1:
            dense = np.zeros((n, o, h + 2 * self.pad - kh + 1, w + 2 * self.pad - kw + 1), dtype=grad.dtype)
            dense[:, :, :: self.stride, :: self.stride] = grad
            grad = dense
        if mode == "pointwise":
            g = grad.reshape(n, o, h * w)
            xs = x.reshape(n, c, h * w)
            self.grads["weight"] = np.matmul(g, xs.transpose(0, 2, 1)).sum(axis=0).reshape(weight.shape)
            return np.matmul(weight.reshape(o, c).T, g).reshape(n, c, h, w)
        hp, wp = h + 2 * self.pad, w + 2 * self.pad
        ho, wo = hp - kh + 1, wp - kw + 1
        span = ho * wp
        gpad = np.zeros((n, o, ho, wp), dtype=grad.dtype)
        gpad[:, :, :, :wo] = grad
        gpad = gpad.reshape(n, o, span)
        dz = np.zeros((n, kh * kw * o, flat.shape[2]), dtype=grad.dtype)
        for di in range(kh):
            for dj in range(kw):
                s, off = di * kw + dj, di * wp + dj
                dz[:, s * o : (s + 1) * o, off : off + span] = gpad
        dtaps = np.matmul(dz, flat.transpose(0, 2, 1)).sum(axis=0)
        self.grads["weight"] = np.ascontiguousarray(dtaps.reshape(kh, kw, o, c).transpose(2, 3, 0, 1))
        taps = weight.transpose(2, 3, 0, 1).reshape(kh * kw * o, c)
        gflat = np.matmul(taps.T, dz)
        ggrid = gflat[:, :, : hp * wp].reshape(n, c, hp, wp)
        return np.ascontiguousarray(ggrid[:, :, self.pad : self.pad + h, self.pad : self.pad + w])


def conv2d(x, weight, bias=None, stride=1, padding="same"):
    """Functional convolution. Returns ``(y, backward)`` where ``backward(g)``
    gives ``(grad_x, grad_weight, grad_bias)``."""
    weight = np.asarray(weight)
    o, c, kh, kw = weight.shape
    layer = Conv2d(c, o, (kh, kw), stride=stride, padding=padding, bias=bias is not None, dtype=weight.dtype)
    layer.params["weight"][...] = weight
    if bias is not None:
        layer.params["bias"][...] = bias
    y = layer.forward(x)

    def backward(g):
        gx = layer.backward(g)
        return gx, layer.grads["weight"], layer.grads.get("bias")

    return y, backward


# --------------------------------------------------------------------------
# Normalisation and activations
# --------------------------------------------------------------------------


class BatchNorm2d(Layer):
    """Per-channel batch normalisation over (N, H, W).

    Running statistics follow ``running = momentum * running + (1 - momentum)
    * batch`` with the biased batch variance. ``frozen_stats`` makes train
    mode normalise with the running statistics and leave them untouched.
    """

    kind = "batchnorm"

    def __init__(self, channels, momentum=0.99, epsilon=1e-5, dtype=np.float32):
        super().__init__()
        self.channels, self.momentum, self.epsilon = channels, momentum, epsilon
        self.frozen_stats = False
        self.params["gamma"] = np.ones(channels, dtype=dtype)
        self.params["beta"] = np.zeros(channels, dtype=dtype)
        self.buffers["running_mean"] = np.zeros(channels, dtype=dtype)
        self.buffers["running_var"] = np.ones(channels, dtype=dtype)

    def reset_parameters(self, stream):
        self.params["gamma"][...] = 1
        self.params["beta"][...] = 0
        self.buffers["running_mean"][...] = 0
        self.buffers["running_var"][...] = 1

    def describe(self):
        return f"batchnorm {self.channels}"

    def forward(self, x):
        _check_rank(x, self.kind)
        if x.shape[0] == 0:
            raise ShapeError("batch norm needs a non-empty batch", x.shape)
        if x.shape[1] != self.channels:
            raise ShapeError(f"batchnorm expects {self.channels} channels", x.shape)
        gamma = self.params["gamma"]
        beta = self.params["beta"]
        batch_stats = self.training and not self.frozen_stats
        if not batch_stats:
            inv_std = 1.0 / np.sqrt(self.buffers["running_var"] + self.epsilon)
            scale = gamma * inv_std
            shift = beta - self.buffers["running_mean"] * scale
            y = x * scale.astype(x.dtype).reshape(1, -1, 1, 1)
            y += shift.astype(x.dtype).reshape(1, -1, 1, 1)
            self._cache = (x, inv_std.astype(x.dtype).reshape(1, -1, 1, 1), False)
            return y
        count = x.shape[0] * x.shape[2] * x.shape[3]
        mean = np.einsum("nchw->c", x) / count
        xhat = x - mean.reshape(1, -1, 1, 1)
        var = np.einsum("nchw,nchw->c", xhat, xhat) / count
        m = self.momentum
        self.buffers["running_mean"][...] = m * self.buffers["running_mean"] + (1 - m) * mean
        self.buffers["running_var"][...] = m * self.buffers["running_var"] + (1 - m) * var
        inv_std = (1.0 / np.sqrt(var + self.epsilon)).astype(x.dtype).reshape(1, -1, 1, 1)
        xhat *= inv_std
        self._cache = (xhat, inv_std, True)
        y = xhat * gamma.reshape(1, -1, 1, 1)
        y += beta.reshape(1, -1, 1, 1)
        return y

    def backward(self, grad):
        saved, inv_std, batch_stats = self._pop_cache()
        gamma = self.params["gamma"]
        scale = (gamma.reshape(1, -1, 1, 1) * inv_std).astype(grad.dtype, copy=False)
        self.grads["beta"] = np.einsum("nchw->c", grad)
        if not batch_stats:
            # saved is x here; sum(g * xhat) = (sum(g * x) - mean * sum(g)) / std
            mean = self.buffers["running_mean"]
            gx = np.einsum("nchw,nchw->c", grad, saved)
            self.grads["gamma"] = (gx - mean * self.grads["beta"]) * inv_std.ravel()
            return grad * scale
        xhat = saved
        self.grads["gamma"] = np.einsum("nchw,nchw->c", grad, xhat)
        count = grad.shape[0] * grad.shape[2] * grad.shape[3]
        # xhat depends on x through the batch mean and variance as well
        mean_g = (self.grads["beta"] / count).astype(grad.dtype).reshape(1, -1, 1, 1)
        mean_gx = (self.grads["gamma"] / count).astype(grad.dtype).reshape(1, -1, 1, 1)
        out = xhat * -mean_gx
        out += grad
        out -= mean_g
        out *= scale
        return out


def batchnorm(x, gamma, beta, training=True, momentum=0.99, epsilon=1e-5,
              running_mean=None, running_var=None):
    """Functional batch norm; returns ``(y, layer)`` so callers can inspect
    updated running statistics or call ``layer.backward``."""
    layer = BatchNorm2d(len(gamma), momentum, epsilon, dtype=np.asarray(x).dtype)
    layer.params["gamma"][...] = gamma
    layer.params["beta"][...] = beta
    if running_mean is not None:
        layer.buffers["running_mean"][...] = running_mean
    if running_var is not None:
        layer.buffers["running_var"][...] = running_var
    layer.training = training
    return layer.forward(x), layer


class ReLU(Layer):
    kind = "relu"

    def forward(self, x):
        self._cache = x > 0
        return np.maximum(x, 0)

    def backward(self, grad):
        return grad * self._pop_cache()

    def kink_pattern(self):
        return getattr(self, "_cache", None)


# --------------------------------------------------------------------------
# Dense head, pooling, resampling, concatenation
# --------------------------------------------------------------------------


class Dense(Layer):
    """Affine map on (N, F) inputs; weight has shape (K, F)."""

    kind = "dense"

    def __init__(self, in_features, out_features, dtype=np.float32):
        super().__init__()
        self.in_features, self.out_features = in_features, out_features
        self.params["weight"] = np.zeros((out_features, in_features), dtype=dtype)
        self.params["bias"] = np.zeros(out_features, dtype=dtype)

    def reset_parameters(self, stream):
        w = self.params["weight"]
        w[...] = he_uniform(stream, w.shape, self.in_features, w.dtype)
        self.params["bias"][...] = 0

    def describe(self):
        return f"dense {self.in_features}->{self.out_features}"

    def forward(self, x):
        if x.ndim != 2 or x.shape[1] != self.in_features:
            raise ShapeError(f"dense expects (N, {self.in_features}) input", x.shape)
        self._cache = x
        return x @ self.params["weight"].T + self.params["bias"]

    def backward(self, grad):
        x = self._pop_cache()
        self.grads["weight"] = grad.T @ x
        self.grads["bias"] = grad.sum(axis=0)
        return grad @ self.params["weight"]


def dense(x, weight, bias):
    x, weight = np.asarray(x), np.asarray(weight)
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeError("dense feature dimensions do not match", x.shape, weight.shape)
    return x @ weight.T + bias


class GlobalAvgPool(Layer):
    """Mean of each feature map: (N, C, H, W) -> (N, C)."""

    kind = "global_avg_pool"

    def forward(self, x):
        _check_rank(x, self.kind)
        self._cache = x.shape
        return x.mean(axis=(2, 3))

    def backward(self, grad):
        n, c, h, w = self._pop_cache()
        scaled = (grad / (h * w)).astype(grad.dtype, copy=False)
        return np.broadcast_to(scaled[:, :, None, None], (n, c, h, w)).copy()


class Pool2d(Layer):
    """Max or average pooling over square windows (no padding).

    Max pooling routes the gradient to the first maximum in row-major window
    order.
    """

    kind = "pool"

    def __init__(self, mode="max", window=2, stride=None):
        super().__init__()
        if mode not in ("max", "average"):
            raise ValueError(f"pool mode must be 'max' or 'average', got {mode!r}")
        self.mode, self.window = mode, window
        self.stride = stride or window

    def describe(self):
        return f"pool {self.mode} {self.window}x{self.window} stride={self.stride}"

    def _windows(self, x):
        k, s = self.window, self.stride
        n, c, h, w = x.shape
        ho, wo = (h - k) // s + 1, (w - k) // s + 1
        if k == s and h % k == 0 and w % k == 0:
            win = x.reshape(n, c, ho, k, wo, k).transpose(0, 1, 2, 4, 3, 5)
        else:
            win = np.lib.stride_tricks.sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::s, ::s]
        return win.reshape(n, c, ho, wo, k * k)

    def forward(self, x):
        _check_rank(x, self.kind)
        if self.window > x.shape[2] or self.window > x.shape[3]:
            raise ShapeError(f"pool window {self.window} larger than input", x.shape)
        win = self._windows(x)
        if self.mode == "max":
            arg = win.argmax(axis=-1)
            self._cache = (x.shape, arg)
            return np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]
        self._cache = (x.shape, None)
        return win.mean(axis=-1)

    def kink_pattern(self):
        cache = getattr(self, "_cache", None)
        return None if cache is None else cache[1]

    def backward(self, grad):
        shape, arg = self._pop_cache()
        k, s = self.window, self.stride
        ho, wo = grad.shape[2], grad.shape[3]
        gx = np.zeros(shape, dtype=grad.dtype)
        avg = (grad / (k * k)).astype(grad.dtype, copy=False)
        for di in range(k):
            for dj in range(k):
                view = gx[:, :, di : di + s * ho : s, dj : dj + s * wo : s]
                if arg is None:
                    view += avg
                else:
                    view += grad * (arg == di * k + dj)
        return gx


class Upsample(Layer):
    """Nearest-neighbour upsampling by an integer factor."""

    kind = "upsample"

    def __init__(self, factor=2):
        super().__init__()
        if int(factor) != factor or factor < 1:
            raise ValueError(f"upsample factor must be a positive integer, got {factor}")
        self.factor = int(factor)

    def describe(self):
        return f"upsample x{self.factor}"

    def forward(self, x):
        _check_rank(x, self.kind)
        self._cache = x.shape
        f = self.factor
        return x.repeat(f, axis=2).repeat(f, axis=3)

    def backward(self, grad):
        n, c, h, w = self._pop_cache()
        f = self.factor
        return grad.reshape(n, c, h, f, w, f).sum(axis=(3, 5))


def concat(xs):
    """Stack tensors along the channel axis."""
    first = xs[0]
    for x in xs[1:]:
        if x.ndim != 4 or x.shape[0] != first.shape[0] or x.shape[2:] != first.shape[2:]:
            raise ShapeError("concat needs equal non-channel dimensions", first.shape, x.shape)
    return np.concatenate(xs, axis=1)


def concat_backward(grad, channels):
    """Split a concat gradient back into per-input pieces."""
    if sum(channels) != grad.shape[1]:
        raise ShapeError("channel counts do not sum to the gradient's channels", grad.shape, channels)
    return np.split(grad, np.cumsum(channels)[:-1], axis=1)


# --------------------------------------------------------------------------
# Stochastic regularizers
# --------------------------------------------------------------------------


def dropout_forward(x, rate, training, stream):
    """Inverted dropout. Returns ``(y, scale)``; ``scale`` is None when the
    call was an identity (infer mode or rate 0)."""
    if not 0 <= rate < 1:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0:
        return x, None
    keep = stream.uniform(x.shape) >= rate
    scale = (keep / (1.0 - rate)).astype(x.dtype)
    return x * scale, scale


def dropout_backward(grad, scale):
    if scale is None:
        return grad
    if scale.shape != grad.shape:
        raise ShapeError("gradient does not match the dropout mask", grad.shape, scale.shape)
    return grad * scale


class Dropout(Layer):
    kind = "dropout"
    stochastic = True

    def __init__(self, rate):
        super().__init__()
        if not 0 <= rate < 1:
            raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
        self.rate = rate
        self.stream = None
        self.frozen = False
        self.mask = None

    def describe(self):
        return f"dropout rate={self.rate}"

    def forward(self, x):
        if self.training and self.frozen and self.mask is not None and self.mask.shape == x.shape:
            scale = self.mask
            y = x * scale
        else:
            if self.training and self.rate > 0 and self.stream is None:
                raise RuntimeError("dropout layer has no random stream attached")
            y, scale = dropout_forward(x, self.rate, self.training, self.stream)
            if self.training:
                self.mask = scale
        self._cache = (scale,)
        return y

    def backward(self, grad):
        (scale,) = self._pop_cache()
        return dropout_backward(grad, scale)


@dataclass
class TransformMask:
    """Which (sample, channel) maps a rotaflip pass transformed, and how.

    ``codes`` holds the D4 code per slot and -1 where the slot was not
    selected.
    """

    codes: np.ndarray

    @property
    def selected(self):
        return self.codes >= 0

    @property
    def shape(self):
        return self.codes.shape

    def is_empty(self):
        return not self.selected.any()

    @classmethod
    def empty(cls, n, c):
        return cls(np.full((n, c), -1, dtype=np.int8))


def _permute_slices(x, codes, inverse=False):
    y = x.copy()
    for code in range(1, 8):
        sel = codes == code
        if sel.any():
            t = d4.invert(code) if inverse else code
            y[sel] = d4.apply(x[sel], t)
    return y


def rotaflip_forward(x, rate, training, stream, shared=False, exclude_identity=False):
    """Randomly transform a fraction ``rate`` of the feature maps of ``x``.

    Each (sample, channel) slot is selected with probability ``rate`` and its
    H x W map replaced by a uniformly drawn D4 transform of itself. With
    ``shared`` the selection and code are drawn per channel and reused for
    every sample in the batch. Returns ``(y, mask)``.
    """
    if not 0 <= rate <= 1:
        raise ValueError(f"rotaflip rate must be in [0, 1], got {rate}")
    _check_rank(x, "rotaflip")
    n, c, h, w = x.shape
    if h != w:
        raise ShapeError("rotaflip needs square feature maps", x.shape)
    if not training:
        return x, TransformMask.empty(n, c)
    draw_shape = (c,) if shared else (n, c)
    selected = stream.uniform(draw_shape) < rate
    low = 1 if exclude_identity else 0
    codes = stream.integers(low, 8, size=draw_shape)
    codes = np.where(selected, codes, -1).astype(np.int8)
    if shared:
        codes = np.broadcast_to(codes, (n, c)).copy()
    mask = TransformMask(codes)
    return _permute_slices(x, codes), mask


def rotaflip_apply(x, mask):
    """Forward pass with a given mask (the map is linear once the mask is
    fixed)."""
    if x.shape[:2] != mask.shape:
        raise ShapeError("input does not match the transform mask", x.shape, mask.shape)
    return _permute_slices(x, mask.codes)


def rotaflip_backward(grad, mask):
    """Adjoint of the forward permutation: inverse transform per slot."""
    if grad.ndim != 4 or grad.shape[:2] != mask.shape:
        raise ShapeError("gradient does not match the transform mask", grad.shape, mask.shape)
    return _permute_slices(grad, mask.codes, inverse=True)


class Rotaflip(Layer):
    """Training-time layer that rotates/reflects a random fraction of the
    feature maps. Exactly the identity in infer mode."""

    kind = "rotaflip"
    stochastic = True

    def __init__(self, rate, shared=False, exclude_identity=False):
        super().__init__()
        if not 0 <= rate <= 1:
            raise ValueError(f"rotaflip rate must be in [0, 1], got {rate}")
        self.rate = rate
        self.shared = shared
        self.exclude_identity = exclude_identity
        self.stream = None
        self.frozen = False
        self.mask = None

    def describe(self):
        return f"rotaflip rate={self.rate}"

    def forward(self, x):
        if self.training and self.frozen and self.mask is not None and self.mask.shape == x.shape[:2]:
            mask = self.mask
            y = rotaflip_apply(x, mask)
        else:
            if self.training and self.stream is None:
                raise RuntimeError("rotaflip layer has no random stream attached")
            y, mask = rotaflip_forward(x, self.rate, self.training, self.stream,
                                       self.shared, self.exclude_identity)
            if self.training:
                self.mask = mask
        self._cache = (mask,)
        return y

    def backward(self, grad):
        (mask,) = self._pop_cache()
        return rotaflip_backward(grad, mask)


# --------------------------------------------------------------------------
# Containers
# --------------------------------------------------------------------------


class Sequential(Layer):
    kind = "sequential"

    def __init__(self, layers):
        super().__init__()
        self.layers = list(layers)
        names = [name for name, _ in self.layers]
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate layer names in {names}")

    def children(self):
        return self.layers

    def forward(self, x):
        for _, layer in self.layers:
            x = layer.forward(x)
        return x

    def backward(self, grad):
        for _, layer in reversed(self.layers):
            grad = layer.backward(grad)
        return grad


class DenseConnection(Layer):
    """Runs ``branch`` and concatenates its output after the input
    channels."""

    kind = "dense_connection"

    def __init__(self, branch):
        super().__init__()
        self.branch = branch

    def children(self):
        return [("branch", self.branch)]

    def forward(self, x):
        y = self.branch.forward(x)
        self._cache = x.shape[1]
        return concat([x, y])

    def backward(self, grad):
        c = self._pop_cache()
        g_in, g_branch = concat_backward(grad, [c, grad.shape[1] - c])
        return g_in + self.branch.backward(np.ascontiguousarray(g_branch))


# --------------------------------------------------------------------------
# Model-wide helpers
# --------------------------------------------------------------------------


def initialize(model, stream):
    """Draw parameters and attach random streams.

    Each layer gets sub-streams keyed by its path, so adding or removing a
    regularizer leaves every other layer's draws unchanged.
    """
    init = stream.child("init")
    for path, layer in model.named_layers():
        layer.reset_parameters(init.child(path))
        if layer.stochastic:
            layer.stream = stream.child(layer.kind).child(path)
    return model


def set_frozen_masks(model, frozen=True):
    """Make stochastic layers replay their last mask (for gradient checks)."""
    for _, layer in model.named_layers():
        if layer.stochastic:
            layer.frozen = frozen
            if not frozen:
                layer.mask = None


def set_frozen_stats(model, frozen=True):
    for _, layer in model.named_layers():
        if isinstance(layer, BatchNorm2d):
            layer.frozen_stats = frozen


def count_parameters(model):
    return sum(layer.params[name].size for _, layer, name in model.parameter_refs())


def layer_listing(model):
    """One line per leaf layer: ``path<TAB>description``."""
    lines = []
    for path, layer in model.named_layers():
        if not layer.children():
            lines.append(f"{path}\t{layer.describe()}")
    return "\n".join(lines)


def state_tensors(model):
    """``(key, layer, name, array)`` for every parameter and buffer."""
    out = []
    for path, layer in model.named_layers():
        for store in (layer.params, layer.buffers):
            for name, arr in store.items():
                out.append((f"{path}.{name}" if path else name, layer, name, arr))
    return out
