"""Accuracy, orbit agreement and record summaries."""
import csv
import math
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from . import d4
from .data import apply_codes, stack
from .errors import ShapeError
from .models import predict_class, predict_pixels


def accuracy(preds, labels):
    """Percentage of matching entries (pixels, for label maps)."""
    preds, labels = np.asarray(preds), np.asarray(labels)
    if preds.shape != labels.shape:
        raise ShapeError("predictions and labels differ in shape", preds.shape, labels.shape)
    if preds.size == 0:
        raise ValueError("accuracy of an empty set is undefined")
    return 100.0 * np.count_nonzero(preds == labels) / preds.size


@dataclass
class OrbitPrediction:
    """Predictions for the 8 D4 versions of one image, ordered by code."""

    image_id: str
    predictions: list

    def __post_init__(self):
        if len(self.predictions) != 8:
            raise ValueError(f"an orbit has 8 predictions, got {len(self.predictions)}")


def orbit_agreement(predictions):
    """100 * (count of the most common prediction) / 8."""
    if len(predictions) != 8:
        raise ValueError(f"an orbit has 8 predictions, got {len(predictions)}")
    top = Counter(int(p) for p in predictions).most_common(1)[0][1]
    return 100.0 * top / 8


def agreement(orbits):
    """Mean per-image agreement; independent of the true labels."""
    if not orbits:
        raise ValueError("agreement of an empty set is undefined")
    values = [orbit_agreement(getattr(o, "predictions", o)) for o in orbits]
    return float(np.mean(values))


@dataclass
class EvalReport:
    accuracy: float
    agreement: float = None
    per_class_accuracy: dict = field(default_factory=dict)
    n_samples: int = 0
    protocol: str = "orbit8"

    def to_text(self):
        lines = [f"protocol={self.protocol}", f"n_samples={self.n_samples}",
                 f"accuracy={self.accuracy!r}",
                 f"agreement={'nan' if self.agreement is None else repr(self.agreement)}"]
        for k in sorted(self.per_class_accuracy):
            lines.append(f"class_{k}_accuracy={self.per_class_accuracy[k]!r}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text):
        values = dict(line.split("=", 1) for line in text.splitlines() if "=" in line)
        per_class = {int(k[len("class_"):-len("_accuracy")]): float(v)
                     for k, v in values.items() if k.startswith("class_")}
        agree = float(values["agreement"])
        return cls(float(values["accuracy"]), None if math.isnan(agree) else agree,
                   per_class, int(values["n_samples"]), values["protocol"])

    CSV_HEADER = ("protocol", "n_samples", "accuracy", "agreement")

    def csv_row(self):
        return (self.protocol, self.n_samples, repr(self.accuracy),
                "nan" if self.agreement is None else repr(self.agreement))


def _per_class(preds, labels):
    out = {}
    for k in np.unique(labels):
        sel = labels == k
        out[int(k)] = 100.0 * np.count_nonzero(preds[sel] == k) / np.count_nonzero(sel)
    return out


def eval_single(model, images):
    """Score the original orientation only."""
    x, y = stack(images, dtype=np.float64)
    if model.task == "classification":
        preds = predict_class(model, x)
    else:
        preds = predict_pixels(model, x)
    return EvalReport(accuracy(preds, y), None, _per_class(preds, y), len(images), "single")


def eval_orbit(model, images):
    """Score all 8 D4 versions of every image.

    Returns ``(report, orbits)``. Accuracy counts the 8 * n predictions;
    agreement is computed for classification only.
    """
    if not images:
        raise ValueError("nothing to evaluate")
    x, y = stack(images, dtype=np.float64)
    if x.shape[-1] != x.shape[-2]:
        raise ShapeError("orbit evaluation needs square images", x.shape)
    n = len(images)
    codes = np.repeat(np.arange(8), n)
    x8 = apply_codes(np.tile(x, (8, 1, 1, 1)), codes)
    if model.task == "classification":
        preds = predict_class(model, x8).reshape(8, n)
        labels = np.tile(y, 8).reshape(8, n)
        orbits = [OrbitPrediction(img.id, [int(p) for p in preds[:, i]]) for i, img in enumerate(images)]
        report = EvalReport(accuracy(preds, labels), agreement(orbits),
                            _per_class(preds.ravel(), labels.ravel()), n, "orbit8")
    else:
        preds = predict_pixels(model, x8).reshape(8, n, *y.shape[1:])
        labels = apply_codes(np.tile(y, (8, 1, 1)), codes).reshape(preds.shape)
        orbits = [OrbitPrediction(img.id, [preds[t, i] for t in d4.ALL_CODES]) for i, img in enumerate(images)]
        report = EvalReport(accuracy(preds, labels), None,
                            _per_class(preds.ravel(), labels.ravel()), n, "orbit8")
    return report, orbits


def write_orbits_csv(orbits, path):
    """Audit dump with one ``image_id,code,prediction`` row per version."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(("image_id", "code", "prediction"))
        for orbit in orbits:
            for code, pred in enumerate(orbit.predictions):
                writer.writerow((orbit.image_id, code, int(pred)))


def _field_values(records, name):
    return [r[name] if isinstance(r, dict) else getattr(r, name) for r in records]


def last_n_mean(records, n, name):
    """Mean of ``name`` over the final ``n`` records."""
    if n < 1:
        raise ValueError("n must be at least 1")
    if n > len(records):
        raise ValueError(f"need {n} records, have {len(records)}")
    return float(np.mean(_field_values(records[-n:], name)))


def best_epoch(records, name):
    """Epoch with the highest ``name``; the earliest wins ties."""
    if not records:
        raise ValueError("no records")
    values = _field_values(records, name)
    best = int(np.argmax(values))
    r = records[best]
    return r["epoch"] if isinstance(r, dict) else r.epoch

