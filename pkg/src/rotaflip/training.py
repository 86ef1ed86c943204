"""Losses, the Nadam optimizer, the learning-rate schedule, the training
loop and finite-difference gradient checks."""
import copy
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .data import AugmentPolicy, apply_codes, balanced_batches, draw_codes, shuffled_batches, stack
from .errors import ConfigError, DivergenceError, ShapeError
from .layers import Layer, set_frozen_masks, state_tensors
from .metrics import accuracy, eval_orbit, eval_single
from .models import model_dtype
from .tensor import RngStream

log = logging.getLogger(__name__)


# --------------------------------------------------------------------------
# Losses
# --------------------------------------------------------------------------


def cross_entropy(logits, labels):
    """Mean softmax cross-entropy. Returns ``(loss, dloss/dlogits)``."""
    logits = np.asarray(logits)
    labels = np.asarray(labels)
    if logits.ndim != 2 or logits.shape[1] < 2:
        raise ShapeError("cross_entropy expects (N, K>=2) logits", logits.shape)
    if labels.shape != (logits.shape[0],):
        raise ShapeError("labels must have one entry per sample", labels.shape, logits.shape)
    k = logits.shape[1]
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"labels must lie in [0, {k})")
    n = logits.shape[0]
    shifted = logits - logits.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    total = exp.sum(axis=1, keepdims=True)
    rows = np.arange(n)
    loss = float(np.mean(np.log(total[:, 0]) - shifted[rows, labels]))
    grad = exp / total
    grad[rows, labels] -= 1
    return loss, (grad / n).astype(logits.dtype, copy=False)


def pixel_cross_entropy(logit_maps, label_maps):
    """Cross-entropy averaged over every pixel of every image."""
    logit_maps = np.asarray(logit_maps)
    label_maps = np.asarray(label_maps)
    if logit_maps.ndim != 4 or label_maps.shape != (logit_maps.shape[0],) + logit_maps.shape[2:]:
        raise ShapeError("pixel_cross_entropy expects (N, K, H, W) logits and (N, H, W) labels",
                         logit_maps.shape, label_maps.shape)
    n, k, h, w = logit_maps.shape
    flat = logit_maps.transpose(0, 2, 3, 1).reshape(-1, k)
    loss, grad = cross_entropy(flat, label_maps.reshape(-1))
    return loss, np.ascontiguousarray(grad.reshape(n, h, w, k).transpose(0, 3, 1, 2))


# --------------------------------------------------------------------------
# Optimizer and schedule
# --------------------------------------------------------------------------


@dataclass
class NadamState:
    """Moment accumulators keyed by parameter name.

    ``momentum_decay`` sets the warm-up of the Nesterov momentum
    ``mu_t = beta1 * (1 - 0.5 * 0.96 ** (t * momentum_decay))``.
    """

    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    momentum_decay: float = 0.004
    step: int = 0
    mu_product: float = 1.0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def mu(self, t):
        return self.beta1 * (1.0 - 0.5 * 0.96 ** (t * self.momentum_decay))


def nadam_step(params, grads, state, lr):
    """Update ``params`` (a dict of arrays) in place.

    Adam with Nesterov momentum: the first moment is looked ahead with the
    next step's momentum coefficient, and the current gradient enters with
    weight ``1 - mu_t``.
    """
    for key, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise DivergenceError(f"non-finite gradient for parameter {key!r}")
    t = state.step + 1
    mu_t, mu_next = state.mu(t), state.mu(t + 1)
    prod_t = state.mu_product * mu_t
    prod_next = prod_t * mu_next
    b1, b2 = state.beta1, state.beta2
    for key, p in params.items():
        g = grads[key]
        if g.shape != p.shape:
            raise ShapeError(f"gradient shape for {key!r} does not match its parameter", g.shape, p.shape)
        m = state.m.get(key)
        if m is None:
            m = state.m[key] = np.zeros_like(p)
            state.v[key] = np.zeros_like(p)
        v = state.v[key]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        m_bar = (1 - mu_t) * g / (1 - prod_t) + mu_next * m / (1 - prod_next)
        v_hat = v / (1 - b2 ** t)
        p -= (lr * m_bar / (np.sqrt(v_hat) + state.epsilon)).astype(p.dtype, copy=False)
    state.step = t
    state.mu_product = prod_t
    return params, state


@dataclass
class Schedule:
    initial_lr: float = 0.001
    decay: float = 0.99
    epochs: int = 300


def lr_at(schedule, epoch):
    """``initial_lr * decay ** epoch``."""
    if epoch < 0:
        raise ValueError("epoch must be non-negative")
    return schedule.initial_lr * schedule.decay ** epoch


# --------------------------------------------------------------------------
# Training loop
# --------------------------------------------------------------------------


@dataclass
class TrainRecord:
    epoch: int
    lr: float
    loss: float
    train_accuracy: float
    eval_accuracy: float
    agreement: float

    CSV_HEADER = "epoch,lr,loss,train_acc,eval_acc,agreement"

    def csv_line(self):
        return ",".join([str(self.epoch)] + [repr(float(v)) for v in
                        (self.lr, self.loss, self.train_accuracy, self.eval_accuracy, self.agreement)])


@dataclass
class TrainSettings:
    schedule: Schedule = field(default_factory=Schedule)
    batch_size: int = 32
    balanced: bool = True
    augment: AugmentPolicy = field(default_factory=AugmentPolicy)
    eval_protocol: str = "orbit8"
    # evaluate only during the final ``eval_last`` epochs; None means every epoch
    eval_last: int = None
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8


@dataclass
class TrainResult:
    records: list
    best_epoch: int = None
    best_state: dict = None
    optimizer: NadamState = None


def snapshot(model):
    """Copies of every parameter and buffer, keyed by path."""
    return {key: arr.copy() for key, _, _, arr in state_tensors(model)}


def restore(model, state):
    for key, _, _, arr in state_tensors(model):
        arr[...] = state[key]


def evaluate(model, images, protocol="orbit8"):
    if protocol == "orbit8":
        return eval_orbit(model, images)[0]
    if protocol == "single":
        return eval_single(model, images)
    raise ValueError(f"unknown eval protocol {protocol!r}")


def train(model, train_set, settings, eval_set=None, seed=0, on_epoch=None):
    """Optimise ``model`` on ``train_set`` for ``settings.schedule.epochs``.

    Stochastic layers run in train mode during optimisation and in infer
    mode during evaluation. Batching and augmentation draw from labelled
    sub-streams of ``seed``. ``on_epoch(record)`` is called after every
    epoch; on a non-finite loss a ``DivergenceError`` carrying the records
    so far is raised.
    """
    if not train_set:
        raise ValueError("training set is empty")
    root = seed if isinstance(seed, RngStream) else RngStream(seed)
    dtype = model_dtype(model)
    x, y = stack(train_set, dtype=dtype)
    segmentation = model.task == "segmentation"
    loss_fn = pixel_cross_entropy if segmentation else cross_entropy
    refs = model.parameter_refs()
    params = {key: layer.params[name] for key, layer, name in refs}
    state = NadamState(settings.beta1, settings.beta2, settings.epsilon)
    batch_stream = root.child("batches")
    augment_stream = root.child("augment")
    policy = settings.augment
    records, best, best_state = [], None, None
    n_batches = math.ceil(len(x) / settings.batch_size)
    if settings.balanced and not segmentation and np.any(y > 1):
        raise ConfigError("balanced batches are defined for two classes; set balanced=False")
    for epoch in range(settings.schedule.epochs):
        lr = lr_at(settings.schedule, epoch)
        if settings.balanced and not segmentation:
            batches = balanced_batches(y, settings.batch_size, batch_stream, n_batches)
        else:
            batches = shuffled_batches(len(x), settings.batch_size, batch_stream)
        model.set_training(True)
        losses, correct, seen = [], 0, 0
        for idx in batches:
            xb, yb = x[idx], y[idx]
            if policy.active:
                codes = draw_codes(policy, augment_stream, len(idx))
                xb = apply_codes(xb, codes)
                if segmentation:
                    yb = apply_codes(yb, codes)
            logits = model.forward(xb)
            loss, grad = loss_fn(logits, yb)
            if not math.isfinite(loss):
                raise DivergenceError(f"non-finite loss at epoch {epoch}", records)
            model.backward(grad)
            grads = {key: layer.grads[name] for key, layer, name in refs}
            try:
                nadam_step(params, grads, state, lr)
            except DivergenceError as exc:
                raise DivergenceError(f"{exc} at epoch {epoch}", records) from exc
            losses.append(loss * len(idx))
            seen += len(idx)
            correct += np.count_nonzero(np.argmax(logits, axis=1) == yb) / (yb.size / len(idx))
        train_acc = 100.0 * correct / seen
        scheduled = settings.eval_last is None or epoch >= settings.schedule.epochs - settings.eval_last
        if eval_set and scheduled:
            report = evaluate(model, eval_set, settings.eval_protocol)
            eval_acc = report.accuracy
            agree = math.nan if report.agreement is None else report.agreement
        else:
            eval_acc, agree = math.nan, math.nan
        record = TrainRecord(epoch, lr, float(sum(losses) / seen), train_acc, eval_acc, agree)
        records.append(record)
        if eval_set and scheduled and (best is None or eval_acc > records[best].eval_accuracy):
            best = epoch
            best_state = snapshot(model)
        log.info("epoch %d lr=%.6g loss=%.4f train=%.2f eval=%.2f agreement=%.2f",
                 epoch, lr, record.loss, train_acc, eval_acc, agree)
        if on_epoch is not None:
            on_epoch(record)
    model.set_training(False)
    return TrainResult(records, best, best_state, state)


# --------------------------------------------------------------------------
# Gradient checks
# --------------------------------------------------------------------------


@dataclass
class GradcheckReport:
    """Worst relative error per checked tensor (``input`` or a parameter
    path). ``redrawn`` counts probe directions discarded because they
    crossed a ReLU or max-pool kink; ``skipped`` counts probes given up after
    every redraw crossed one."""

    errors: dict = field(default_factory=dict)
    redrawn: int = 0
    skipped: int = 0

    @property
    def max_error(self):
        return max(self.errors.values()) if self.errors else 0.0

    def per_layer(self):
        out = {}
        for key, err in self.errors.items():
            layer = key.rsplit(".", 1)[0] if "." in key else key
            out[layer] = max(out.get(layer, 0.0), err)
        return out

    def passed(self, tol):
        return self.max_error < tol

    def update(self, key, err):
        self.errors[key] = max(self.errors.get(key, 0.0), err)


def relative_error(a, b, floor=1e-12):
    scale = max(abs(a), abs(b))
    if scale < floor:
        return 0.0
    return abs(a - b) / scale


def _kink_patterns(layer):
    return [p.copy() for _, lyr in layer.named_layers() if (p := lyr.kink_pattern()) is not None]


def _same_patterns(a, b):
    return len(a) == len(b) and all(np.array_equal(p, q) for p, q in zip(a, b))


def gradcheck(target, input_shape, seeds, step=1e-5, directions=2, randomize_params=True, retries=20):
    """Compare analytic backward passes with central finite differences.

    ``target`` is a layer or a ``seed -> layer`` factory in double precision.
    For each seed the loss ``sum(u * f(x))`` with random ``u`` is
    differentiated along random directions of the input and of every
    parameter; stochastic layers replay a mask drawn once per seed. A
    direction whose +/- probes switch a ReLU or max-pool branch is redrawn
    (up to ``retries`` times), since the difference quotient is meaningless
    across a kink; the step shrinks tenfold after ten redraws, and a probe
    with no kink-free direction is skipped and counted.
    """
    report = GradcheckReport()
    for seed in seeds:
        stream = RngStream(seed).child("gradcheck")
        if isinstance(target, Layer):
            layer = target
            if randomize_params:
                for _, lyr, name in layer.parameter_refs():
                    p = lyr.params[name]
                    p[...] = stream.normal(p.shape)
        else:
            layer = target(seed)
        refs = layer.parameter_refs()
        for _, lyr, name in refs:
            if lyr.params[name].dtype != np.float64:
                raise TypeError("gradcheck needs double-precision parameters")
        for path, lyr in layer.named_layers():
            if lyr.stochastic and lyr.stream is None:
                lyr.stream = stream.child("masks").child(path)
        x = stream.normal(input_shape)
        layer.set_training(True)
        set_frozen_masks(layer, False)
        out = layer.forward(x)
        set_frozen_masks(layer, True)
        u = stream.normal(out.shape)
        out = layer.forward(x)
        base = _kink_patterns(layer)
        grad_x = layer.backward(u)
        analytic = {key: lyr.grads[name].copy() for key, lyr, name in refs}

        def probe(z):
            value = float(np.sum(u * layer.forward(z)))
            return value, _same_patterns(base, _kink_patterns(layer))

        def difference(apply):
            # a branch switch inside [-h, h] spoils the quotient: redraw the
            # direction, and shrink h when a kink sits very close to the point
            h = step
            for attempt in range(retries + 1):
                if attempt and attempt % 10 == 0:
                    h /= 10
                v = stream.normal(apply.shape)
                plus, smooth_plus = apply(v, h)
                minus, smooth_minus = apply(v, -h)
                if smooth_plus and smooth_minus:
                    return v, (plus - minus) / (2 * h)
                if attempt < retries:
                    report.redrawn += 1
            report.skipped += 1
            return None, None

        def input_probe(v, h):
            return probe(x + h * v)

        input_probe.shape = x.shape
        for _ in range(directions):
            v, numeric = difference(input_probe)
            if v is not None:
                report.update("input", relative_error(float(np.sum(grad_x * v)), numeric))
            for key, lyr, name in refs:
                p = lyr.params[name]

                def param_probe(v, h, p=p):
                    original = p.copy()
                    p += h * v
                    try:
                        return probe(x)
                    finally:
                        p[...] = original

                param_probe.shape = p.shape
                v, numeric = difference(param_probe)
                if v is not None:
                    report.update(key, relative_error(float(np.sum(analytic[key] * v)), numeric))
        set_frozen_masks(layer, False)
    return report


def clone_model(model):
    return copy.deepcopy(model)
