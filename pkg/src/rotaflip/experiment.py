"""Running configured experiments: datasets, run directories, checkpoints,
reports and rate sweeps. The command-line interface is a thin layer over
this module."""
import csv
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import config as config_io
from .data import gen_motif_classification, gen_voronoi_segmentation, read_dataset, split_folds
from .errors import ConfigError, DivergenceError, RotaflipError
from .layers import layer_listing, state_tensors
from .metrics import EvalReport, best_epoch, last_n_mean
from .models import build_model
from .tensor import load_tensor, save_tensor
from .training import TrainRecord, evaluate, restore, train

log = logging.getLogger(__name__)

LAST_N = 10
SWEEP_PARAMETERS = ("rotaflip_rate", "dropout_rate", "both")
SWEEP_HEADER = ("setup", "rate", "last10_mean_acc", "best_val_acc", "test_acc_8version", "agreement", "status")


# --------------------------------------------------------------------------
# Data
# --------------------------------------------------------------------------


def load_samples(cfg):
    d = cfg.data
    if d.source == "motif":
        return gen_motif_classification(d.n, d.size, d.seed, d.clutter, d.noise, d.contrast)
    if d.source == "voronoi":
        return gen_voronoi_segmentation(d.n, d.size, d.cells, d.edge_width, d.seed, d.noise)
    try:
        return read_dataset(d.manifest)
    except OSError as exc:
        raise FileNotFoundError(f"cannot read dataset {d.manifest}: {exc}") from exc


@dataclass
class Splits:
    train: list
    validation: list
    test: list

    @property
    def monitor(self):
        """The set scored every epoch: validation when configured, else test."""
        return self.validation or self.test


def make_splits(cfg, samples=None):
    samples = load_samples(cfg) if samples is None else samples
    f = cfg.folds
    split = split_folds(samples, f.count, f.seed, f.test, f.validation)
    return Splits(*(split.select(samples, role) for role in ("train", "validation", "test")))


def input_shape_of(samples):
    return tuple(samples[0].pixels.shape)


# --------------------------------------------------------------------------
# Output directories and checkpoints
# --------------------------------------------------------------------------


def run_directory(cfg):
    """Create the run directory. An existing one is never reused: either a
    numeric suffix is appended or the run is refused."""
    base = Path(cfg.output.dir) / cfg.output.run_name
    path = base
    if path.exists():
        if cfg.output.on_exists == "refuse":
            raise FileExistsError(f"output directory {path} already exists")
        i = 1
        while path.exists():
            path = base.with_name(f"{base.name}-{i}")
            i += 1
    path.mkdir(parents=True)
    return path


def _tensor_file(key):
    return key.replace("/", "_") + ".rtfl"


def save_checkpoint(model, cfg, directory, epoch=None):
    """Write one RTFL file per parameter/buffer plus a manifest that records
    the layer structure and the config needed to rebuild the model."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    rows = []
    for key, layer, name, arr in state_tensors(model):
        save_tensor(directory / _tensor_file(key), arr)
        rows.append((key, layer.kind, "x".join(map(str, arr.shape)), _tensor_file(key)))
    with open(directory / "tensors.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(("key", "layer_kind", "shape", "file"))
        writer.writerows(rows)
    (directory / "layers.txt").write_text(layer_listing(model) + "\n")
    config_io.save(cfg, directory / "config.txt")
    meta = [f"input_shape={','.join(map(str, model.input_shape))}",
            f"epoch={'none' if epoch is None else epoch}"]
    (directory / "checkpoint.txt").write_text("\n".join(meta) + "\n")
    return directory


def load_checkpoint(directory):
    """Rebuild a model from ``save_checkpoint`` output. Returns
    ``(model, cfg)``."""
    directory = Path(directory)
    if not (directory / "checkpoint.txt").exists():
        raise FileNotFoundError(f"{directory} is not a checkpoint directory")
    meta = dict(line.split("=", 1) for line in (directory / "checkpoint.txt").read_text().splitlines() if "=" in line)
    cfg = config_io.load(directory / "config.txt")
    shape = tuple(int(v) for v in meta["input_shape"].split(","))
    model = build_model(cfg.model_config(shape), cfg.seed, cfg.precision)
    listing = (directory / "layers.txt").read_text().rstrip("\n")
    if listing != layer_listing(model):
        raise ValueError(f"{directory}: layer structure does not match the stored config")
    with open(directory / "tensors.csv", newline="") as fh:
        rows = {row["key"]: row for row in csv.DictReader(fh)}
    for key, _, _, arr in state_tensors(model):
        if key not in rows:
            raise ValueError(f"{directory}: missing tensor {key}")
        data = load_tensor(directory / rows[key]["file"])
        if data.size != arr.size:
            raise ValueError(f"{directory}: tensor {key} has {data.size} values, expected {arr.size}")
        arr[...] = data.reshape(arr.shape)
    model.set_training(False)
    return model, cfg


# --------------------------------------------------------------------------
# Training runs
# --------------------------------------------------------------------------


@dataclass
class RunSummary:
    directory: Path
    records: list
    last10_accuracy: float
    last10_agreement: float
    best_epoch: int
    best_accuracy: float
    test_best: EvalReport
    test_final: EvalReport
    test_best_single: EvalReport
    status: str = "ok"


def write_records(records, path):
    with open(path, "w") as fh:
        fh.write(TrainRecord.CSV_HEADER + "\n")
        for r in records:
            fh.write(r.csv_line() + "\n")


def _finite_records(records):
    return [r for r in records if not math.isnan(r.eval_accuracy)]


def _report_text(summary, monitor_name):
    lines = [f"# eval accuracy is measured on the {monitor_name} set each epoch",
             f"epochs={len(summary.records)}"]
    lines.append(f"last10.protocol=mean over the final {LAST_N} evaluated epochs")
    lines.append(f"last10.eval_accuracy={summary.last10_accuracy!r}")
    lines.append(f"last10.agreement={summary.last10_agreement!r}")
    lines.append("best.protocol=checkpoint of the epoch with the highest eval accuracy")
    lines.append(f"best.epoch={'none' if summary.best_epoch is None else summary.best_epoch}")
    lines.append(f"best.eval_accuracy={summary.best_accuracy!r}")
    for label, report in (("best.test.orbit8", summary.test_best),
                          ("best.test.single", summary.test_best_single),
                          ("final.test.orbit8", summary.test_final)):
        if report is None:
            continue
        lines.append(f"{label}.accuracy={report.accuracy!r}")
        lines.append(f"{label}.agreement={'nan' if report.agreement is None else repr(report.agreement)}")
        lines.append(f"{label}.n_samples={report.n_samples}")
    return "\n".join(lines) + "\n"


def read_report(path):
    """Parse ``report.txt`` into a dict of floats (strings where a value is
    not numeric)."""
    out = {}
    for line in Path(path).read_text().splitlines():
        if "=" not in line or line.startswith("#"):
            continue
        key, value = line.split("=", 1)
        try:
            out[key] = float(value)
        except ValueError:
            out[key] = value
    return out


def run_training(cfg, directory=None, samples=None):
    """Train per ``cfg`` and write records, checkpoints and the report.

    ``directory`` defaults to a fresh run directory under ``output.dir``.
    Raises ``ConfigError`` before any work, and ``DivergenceError`` after
    writing the partial record CSV.
    """
    cfg.validate()
    splits = make_splits(cfg, samples)
    if not splits.train:
        raise ConfigError("the training split is empty")
    directory = run_directory(cfg) if directory is None else Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    config_io.save(cfg, directory / "config.txt")
    shape = input_shape_of(splits.train)
    model = build_model(cfg.model_config(shape), cfg.seed, cfg.precision)
    model.set_training(False)
    save_checkpoint(model, cfg, directory / "checkpoints" / "init", epoch=None)
    records_path = directory / "records.csv"
    streamed = []

    def on_epoch(record):
        streamed.append(record)
        write_records(streamed, records_path)

    write_records([], records_path)
    try:
        result = train(model, splits.train, cfg.train_settings(), splits.monitor, cfg.seed, on_epoch)
    except DivergenceError:
        write_records(streamed, records_path)
        raise
    final_epoch = len(result.records) - 1 if result.records else None
    save_checkpoint(model, cfg, directory / "checkpoints" / "final", epoch=final_epoch)
    evaluated = _finite_records(result.records)
    test_final = evaluate(model, splits.test, "orbit8") if splits.test and result.records else None
    test_best = test_best_single = None
    best = best_acc = None
    if evaluated:
        best = best_epoch(evaluated, "eval_accuracy")
        best_acc = result.records[best].eval_accuracy
        restore(model, result.best_state)
        save_checkpoint(model, cfg, directory / "checkpoints" / "best", epoch=best)
        if splits.test:
            test_best = evaluate(model, splits.test, "orbit8")
            test_best_single = evaluate(model, splits.test, "single")
    n = min(LAST_N, len(evaluated))
    summary = RunSummary(
        directory, result.records,
        last_n_mean(evaluated, n, "eval_accuracy") if n else math.nan,
        last_n_mean(evaluated, n, "agreement") if n else math.nan,
        best, math.nan if best_acc is None else best_acc,
        test_best, test_final, test_best_single)
    monitor = "validation" if splits.validation else "test"
    (directory / "report.txt").write_text(_report_text(summary, monitor))
    return summary


# --------------------------------------------------------------------------
# Sweeps
# --------------------------------------------------------------------------


def sweep_config(base, parameter, value, index):
    """Copy of ``base`` for one sweep point, seeded as base seed + index."""
    if parameter not in SWEEP_PARAMETERS:
        raise ConfigError(f"sweep parameter must be one of {SWEEP_PARAMETERS}, got {parameter!r}")
    cfg = config_io.parse(config_io.emit(base))
    cfg.seed = base.seed + index
    slot = cfg.regularizer
    if parameter == "rotaflip_rate":
        slot.kind, slot.rotaflip_rate = "rotaflip", float(value)
    elif parameter == "dropout_rate":
        slot.kind, slot.dropout_rate = "dropout", float(value)
    else:
        slot.kind, slot.rotaflip_rate, slot.dropout_rate = "both", float(value), float(value)
    cfg.output.run_name = f"{parameter}-{index:03d}"
    return cfg


def _setup_name(parameter):
    return {"rotaflip_rate": "rotaflip", "dropout_rate": "dropout", "both": "both"}[parameter]


def _sweep_point(args):
    cfg, directory, parameter, value = args
    row = [_setup_name(parameter), repr(float(value))]
    try:
        s = run_training(cfg, directory)
    except DivergenceError as exc:
        return row + ["nan"] * 4 + [f"diverged: {exc}".replace(",", ";")]
    except (RotaflipError, OSError, ValueError) as exc:
        return row + ["nan"] * 4 + [f"failed: {exc}".replace(",", ";")]
    test = s.test_best or s.test_final
    return row + [repr(s.last10_accuracy), repr(s.best_accuracy),
                  "nan" if test is None else repr(test.accuracy),
                  "nan" if test is None or test.agreement is None else repr(test.agreement), "ok"]


def run_sweep(base, parameter, values, directory=None, jobs=1):
    """One training run per value; failures are recorded and the sweep goes
    on. Returns the summary CSV path."""
    if not values:
        raise ConfigError("sweep values must be non-empty")
    base.validate()
    configs = [sweep_config(base, parameter, v, i) for i, v in enumerate(values)]
    for cfg in configs:
        cfg.validate()
    directory = run_directory(base) if directory is None else Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    config_io.save(base, directory / "base_config.txt")
    points = [(cfg, directory / cfg.output.run_name, parameter, v) for cfg, v in zip(configs, values)]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            rows = list(pool.map(_sweep_point, points))
    else:
        rows = [_sweep_point(p) for p in points]
    path = directory / "summary.csv"
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(SWEEP_HEADER)
        writer.writerows(rows)
    return path


def read_sweep(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def class_counts(samples):
    labels = [int(s.label) for s in samples if not s.is_segmentation]
    return {int(k): int(v) for k, v in zip(*np.unique(labels, return_counts=True))} if labels else {}
