"""Experiment configuration as flat ``dotted.key=value`` text.

A config file lists one assignment per line; ``#`` starts a comment and
blank lines are ignored. Keys that are absent keep their defaults, so a
file only needs the settings it changes. ``emit`` writes every key, and
``parse(emit(cfg)) == cfg`` for any valid config.
"""
import copy
import dataclasses
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .data import AugmentPolicy
from .errors import ConfigError
from .models import DenseNetConfig, RegularizerSlot, UnetConfig
from .tensor import PRECISIONS
from .training import Schedule, TrainSettings

DATA_SOURCES = ("motif", "voronoi", "manifest")
MODEL_KINDS = ("densenet", "unet")
ON_EXISTS = ("suffix", "refuse")


@dataclass
class DenseNetSection:
    growth_rate: int = 8
    block_sizes: tuple = (2, 2, 2)
    stem_channels: int = 16
    stem: str = "small"
    compression: float = 0.5
    bn_momentum: float = 0.99
    bn_epsilon: float = 1e-5


@dataclass
class UnetSection:
    filters: tuple = (8, 16, 24, 32)
    dropout_between_convs: float = 0.0
    bn_momentum: float = 0.99
    bn_epsilon: float = 1e-5


@dataclass
class ModelSection:
    kind: str = "densenet"
    classes: int = 2
    densenet: DenseNetSection = field(default_factory=DenseNetSection)
    unet: UnetSection = field(default_factory=UnetSection)


@dataclass
class DataSection:
    """Where images come from. Generator parameters that do not apply to the
    chosen source are ignored."""

    source: str = "motif"
    n: int = 400
    size: int = 32
    seed: int = 0
    clutter: int = 4
    noise: float = 0.1
    contrast: float = 0.25
    cells: int = 12
    edge_width: int = 1
    manifest: str = ""


@dataclass
class FoldSection:
    count: int = 5
    test: int = 0
    validation: int = None
    seed: int = 0


@dataclass
class TrainSection:
    batch_size: int = 32
    balanced: bool = True
    eval_protocol: str = "orbit8"
    eval_last: int = None


@dataclass
class OptimizerSection:
    name: str = "nadam"
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8


@dataclass
class OutputSection:
    dir: str = "runs"
    run_name: str = "run"
    on_exists: str = "suffix"


@dataclass
class ExperimentConfig:
    seed: int = 0
    precision: str = "single"
    model: ModelSection = field(default_factory=ModelSection)
    regularizer: RegularizerSlot = field(default_factory=RegularizerSlot)
    schedule: Schedule = field(default_factory=lambda: Schedule(epochs=30))
    train: TrainSection = field(default_factory=TrainSection)
    optimizer: OptimizerSection = field(default_factory=OptimizerSection)
    data: DataSection = field(default_factory=DataSection)
    folds: FoldSection = field(default_factory=FoldSection)
    augment: AugmentPolicy = field(default_factory=AugmentPolicy)
    output: OutputSection = field(default_factory=OutputSection)

    def violations(self):
        out = []
        if self.precision not in PRECISIONS:
            out.append(f"precision must be one of {sorted(PRECISIONS)}, got {self.precision!r}")
        if self.model.kind not in MODEL_KINDS:
            out.append(f"model.kind must be one of {MODEL_KINDS}, got {self.model.kind!r}")
        d = self.data
        if d.source not in DATA_SOURCES:
            out.append(f"data.source must be one of {DATA_SOURCES}, got {d.source!r}")
        elif d.source == "manifest":
            if not d.manifest:
                out.append("data.manifest is required when data.source=manifest")
        else:
            if d.n < 2:
                out.append(f"data.n must be at least 2, got {d.n}")
            if d.source == "motif":
                if d.size < 16:
                    out.append(f"data.size must be at least 16 for the motif generator, got {d.size}")
                if d.n % 2:
                    out.append(f"data.n must be even for the motif generator, got {d.n}")
            elif d.size < 8 or d.size % 8:
                out.append(f"data.size must be a positive multiple of 8 for the voronoi generator, got {d.size}")
            if d.source == "voronoi":
                if d.cells < 4:
                    out.append(f"data.cells must be at least 4, got {d.cells}")
                if d.edge_width <= 0:
                    out.append(f"data.edge_width must be positive, got {d.edge_width}")
        if d.source == "motif" and self.model.kind == "unet":
            out.append("the motif dataset is for classification; use model.kind=densenet")
        if d.source == "voronoi" and self.model.kind == "densenet":
            out.append("the voronoi dataset is for segmentation; use model.kind=unet")
        f = self.folds
        if f.count < 2:
            out.append(f"folds.count must be at least 2, got {f.count}")
        else:
            if not 0 <= f.test < f.count:
                out.append(f"folds.test must be in 0..{f.count - 1}, got {f.test}")
            if f.validation is not None:
                if not 0 <= f.validation < f.count:
                    out.append(f"folds.validation must be in 0..{f.count - 1}, got {f.validation}")
                elif f.validation == f.test:
                    out.append("folds.validation must differ from folds.test")
        t = self.train
        if t.batch_size < 1:
            out.append(f"train.batch_size must be positive, got {t.batch_size}")
        elif t.balanced and self.model.kind == "densenet" and t.batch_size % 2:
            out.append(f"train.batch_size must be even for balanced batches, got {t.batch_size}")
        if t.eval_protocol not in ("single", "orbit8"):
            out.append(f"train.eval_protocol must be single or orbit8, got {t.eval_protocol!r}")
        if t.eval_last is not None and t.eval_last < 1:
            out.append(f"train.eval_last must be positive or none, got {t.eval_last}")
        if self.schedule.epochs < 0:
            out.append(f"schedule.epochs must be non-negative, got {self.schedule.epochs}")
        if self.schedule.initial_lr <= 0:
            out.append(f"schedule.initial_lr must be positive, got {self.schedule.initial_lr}")
        if not 0 < self.schedule.decay <= 1:
            out.append(f"schedule.decay must be in (0, 1], got {self.schedule.decay}")
        if self.optimizer.name != "nadam":
            out.append(f"optimizer.name must be nadam, got {self.optimizer.name!r}")
        if self.augment.subset and any(not 0 <= c < 8 for c in self.augment.subset):
            out.append(f"augment.subset must hold codes 0..7, got {self.augment.subset}")
        if self.output.on_exists not in ON_EXISTS:
            out.append(f"output.on_exists must be one of {ON_EXISTS}, got {self.output.on_exists!r}")
        if not self.output.run_name or "/" in self.output.run_name:
            out.append(f"output.run_name must be a plain name, got {self.output.run_name!r}")
        if self.model.kind in MODEL_KINDS:
            # shape checks need a concrete input; manifests are checked on load
            size = d.size if d.source != "manifest" else 2 ** 10
            for v in self.model_config((1, size, size)).violations():
                out.append(v if v.startswith("regularizer.") else f"model.{self.model.kind}: {v}")
        return out

    def validate(self):
        problems = self.violations()
        if problems:
            raise ConfigError(problems)
        return self

    def model_config(self, input_shape):
        m = self.model
        if m.kind == "densenet":
            s = m.densenet
            return DenseNetConfig(s.growth_rate, tuple(s.block_sizes), s.stem_channels, s.stem,
                                  s.compression, tuple(input_shape), m.classes, self.regularizer,
                                  s.bn_momentum, s.bn_epsilon)
        s = m.unet
        return UnetConfig(tuple(s.filters), tuple(input_shape), m.classes, self.regularizer,
                          s.dropout_between_convs, s.bn_momentum, s.bn_epsilon)

    def train_settings(self):
        t, o = self.train, self.optimizer
        return TrainSettings(self.schedule, t.batch_size, t.balanced, self.augment,
                             t.eval_protocol, t.eval_last, o.beta1, o.beta2, o.epsilon)


# --------------------------------------------------------------------------
# Flat text form
# --------------------------------------------------------------------------


def _leaf_fields(obj, prefix=""):
    hints = typing.get_type_hints(type(obj))
    for f in dataclasses.fields(obj):
        if not f.init:
            continue
        value = getattr(obj, f.name)
        key = f"{prefix}{f.name}"
        if dataclasses.is_dataclass(value):
            yield from _leaf_fields(value, key + ".")
        else:
            yield key, hints[f.name], obj, f.name


def _format(value):
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, (tuple, list)):
        return ",".join(_format(v) for v in value)
    return str(value)


def _coerce(text, kind, key):
    text = text.strip()
    if kind is str:
        return text
    if text.lower() == "none":
        return None
    try:
        if kind is bool:
            low = text.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(text)
            return low in ("true", "1", "yes")
        if kind is int:
            return int(text)
        if kind is float:
            return float(text)
        if kind is tuple:
            return tuple(int(p) for p in text.split(",") if p.strip())
    except ValueError:
        raise ConfigError(f"{key}: cannot read {text!r} as {kind.__name__}") from None


def emit(cfg):
    """Every key of ``cfg`` as ``key=value`` lines, in declaration order."""
    return "".join(f"{key}={_format(getattr(obj, name))}\n" for key, _, obj, name in _leaf_fields(cfg))


def apply_overrides(cfg, assignments):
    """Set ``key=value`` strings on ``cfg`` in place. All unknown keys and
    unreadable values are reported together."""
    leaves = {key: (kind, obj, name) for key, kind, obj, name in _leaf_fields(cfg)}
    problems = []
    for item in assignments:
        if "=" not in item:
            problems.append(f"expected key=value, got {item!r}")
            continue
        key, value = (part.strip() for part in item.split("=", 1))
        if key not in leaves:
            problems.append(f"unknown key {key!r}")
            continue
        kind, obj, name = leaves[key]
        try:
            setattr(obj, name, _coerce(value, kind, key))
        except ConfigError as exc:
            problems += exc.violations
    if problems:
        raise ConfigError(problems)
    return cfg


def parse(text, base=None):
    """Read config text on top of ``base`` (defaults when omitted)."""
    cfg = copy.deepcopy(base) if base is not None else ExperimentConfig()
    lines = []
    for raw in text.splitlines():
        line = raw.split("#", 1)[0].strip()
        if line:
            lines.append(line)
    return apply_overrides(cfg, lines)


def load(path):
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise FileNotFoundError(f"cannot read config {path}: {exc.strerror}") from exc
    return parse(text)


def save(cfg, path):
    Path(path).write_text(emit(cfg))
