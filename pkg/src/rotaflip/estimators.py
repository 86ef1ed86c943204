"""scikit-learn style wrappers around the DenseNet classifier and the U-net
segmenter.

Images are ``(N, C, H, W)`` arrays, or ``(N, H, W)`` for one channel.
"""
import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .data import AugmentPolicy, LabeledImage
from .errors import ShapeError
from .models import DenseNetConfig, RegularizerSlot, UnetConfig, build_densenet, build_unet, predict_logits
from .training import Schedule, TrainSettings, train


def _images(X, dtype=np.float64):
    X = check_array(X, allow_nd=True, dtype=dtype, ensure_2d=False)
    if X.ndim == 3:
        X = X[:, None]
    if X.ndim != 4:
        raise ShapeError("expected images shaped (N, C, H, W) or (N, H, W)", X.shape)
    return X


def _softmax(z):
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


class _NetworkEstimator(BaseEstimator):
    def _slot(self):
        return RegularizerSlot(self.regularizer, self.rotaflip_rate, self.dropout_rate)

    def _settings(self, balanced):
        return TrainSettings(Schedule(self.initial_lr, self.decay, self.epochs), self.batch_size,
                             balanced, AugmentPolicy(use_d4=self.augment))

    def _check_input(self, X):
        check_is_fitted(self, "model_")
        X = _images(X)
        if X.shape[1:] != self.input_shape_:
            raise ShapeError("images do not match the fitted input shape", X.shape[1:], self.input_shape_)
        return X


class DenseNetClassifier(ClassifierMixin, _NetworkEstimator):
    """Image classifier. ``regularizer`` is one of none, rotaflip, dropout or
    both; labels may be any sortable values."""

    def __init__(self, growth_rate=8, block_sizes=(2, 2, 2), stem_channels=16, regularizer="none",
                 rotaflip_rate=0.0, dropout_rate=0.0, epochs=30, batch_size=32, initial_lr=0.001,
                 decay=0.99, augment=False, precision="single", random_state=0):
        self.growth_rate = growth_rate
        self.block_sizes = block_sizes
        self.stem_channels = stem_channels
        self.regularizer = regularizer
        self.rotaflip_rate = rotaflip_rate
        self.dropout_rate = dropout_rate
        self.epochs = epochs
        self.batch_size = batch_size
        self.initial_lr = initial_lr
        self.decay = decay
        self.augment = augment
        self.precision = precision
        self.random_state = random_state

    def fit(self, X, y):
        X = _images(X)
        y = np.asarray(y)
        if y.shape != (len(X),):
            raise ShapeError("y must hold one label per image", y.shape, (len(X),))
        self.classes_, codes = np.unique(y, return_inverse=True)
        if len(self.classes_) < 2:
            raise ValueError("need at least two classes")
        self.input_shape_ = X.shape[1:]
        cfg = DenseNetConfig(self.growth_rate, tuple(self.block_sizes), self.stem_channels,
                             input_shape=self.input_shape_, classes=len(self.classes_), slot=self._slot())
        self.model_ = build_densenet(cfg, self.random_state, self.precision)
        samples = [LabeledImage(x, int(c), f"sample-{i}") for i, (x, c) in enumerate(zip(X, codes))]
        balanced = len(self.classes_) == 2 and self.batch_size % 2 == 0
        result = train(self.model_, samples, self._settings(balanced), seed=self.random_state)
        self.records_ = result.records
        return self

    def predict_proba(self, X):
        X = self._check_input(X)
        return _softmax(predict_logits(self.model_, X).astype(np.float64))

    def predict(self, X):
        proba = self.predict_proba(X)
        return self.classes_[np.argmax(proba, axis=1)]


class UnetSegmenter(_NetworkEstimator):
    """Per-pixel labeller. ``y`` holds integer label maps shaped ``(N, H, W)``;
    ``score`` is pixel accuracy in [0, 1]."""

    def __init__(self, filters=(8, 16, 24, 32), classes=2, regularizer="none", rotaflip_rate=0.0,
                 dropout_rate=0.0, epochs=20, batch_size=8, initial_lr=0.001, decay=0.99,
                 augment=False, precision="single", random_state=0):
        self.filters = filters
        self.classes = classes
        self.regularizer = regularizer
        self.rotaflip_rate = rotaflip_rate
        self.dropout_rate = dropout_rate
        self.epochs = epochs
        self.batch_size = batch_size
        self.initial_lr = initial_lr
        self.decay = decay
        self.augment = augment
        self.precision = precision
        self.random_state = random_state

    def fit(self, X, y):
        X = _images(X)
        y = np.asarray(y, dtype=np.int64)
        if y.shape != (X.shape[0],) + X.shape[2:]:
            raise ShapeError("label maps must match the images", y.shape, X.shape)
        if y.min() < 0 or y.max() >= self.classes:
            raise ValueError(f"labels must lie in 0..{self.classes - 1}")
        self.input_shape_ = X.shape[1:]
        cfg = UnetConfig(tuple(self.filters), self.input_shape_, self.classes, self._slot())
        self.model_ = build_unet(cfg, self.random_state, self.precision)
        samples = [LabeledImage(x, m, f"sample-{i}") for i, (x, m) in enumerate(zip(X, y))]
        result = train(self.model_, samples, self._settings(False), seed=self.random_state)
        self.records_ = result.records
        return self

    def predict_proba(self, X):
        X = self._check_input(X)
        return _softmax(predict_logits(self.model_, X).astype(np.float64))

    def predict(self, X):
        return np.argmax(self.predict_proba(X), axis=1)

    def score(self, X, y):
        return float(np.mean(self.predict(X) == np.asarray(y)))
