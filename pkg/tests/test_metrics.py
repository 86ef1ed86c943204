import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from rotaflip.data import LabeledImage, gen_motif_classification
from rotaflip.errors import ShapeError
from rotaflip.layers import Layer
from rotaflip.metrics import (
    EvalReport,
    OrbitPrediction,
    accuracy,
    agreement,
    best_epoch,
    eval_orbit,
    eval_single,
    last_n_mean,
    orbit_agreement,
    write_orbits_csv,
)
from rotaflip.training import TrainRecord


class RuleModel(Layer):
    """Classifier defined by a Python rule on each image."""

    kind = "rule"
    task = "classification"

    def __init__(self, rule, input_shape):
        super().__init__()
        self.rule = rule
        self.input_shape = input_shape
        self.params["unused"] = np.zeros(1)

    def forward(self, x):
        cls = np.array([self.rule(img) for img in x])
        return np.stack([1.0 - cls, cls], axis=1)


def test_accuracy_examples():
    assert accuracy([1, 0, 1], [1, 0, 1]) == 100
    assert accuracy([1, 1], [0, 0]) == 0
    assert accuracy([1, 0, 1, 1], [1, 0, 0, 1]) == 75
    assert accuracy(np.ones((2, 3, 3)), np.ones((2, 3, 3))) == 100
    with pytest.raises(ValueError):
        accuracy([], [])
    with pytest.raises(ShapeError):
        accuracy([1], [1, 0])


def test_agreement_examples():
    assert orbit_agreement([1, 1, 0, 0, 0, 0, 0, 0]) == 75
    assert orbit_agreement([3] * 8) == 100
    assert orbit_agreement([0, 1] * 4) == 50
    assert agreement([OrbitPrediction("a", [1] * 8), OrbitPrediction("b", [0, 1] * 4)]) == 75
    with pytest.raises(ValueError):
        OrbitPrediction("c", [1] * 7)
    with pytest.raises(ValueError):
        agreement([])


def test_agreement_plurality_for_many_classes():
    assert orbit_agreement([0, 0, 0, 1, 1, 2, 2, 2]) == 37.5


@given(st.lists(st.integers(0, 1), min_size=8, max_size=8), st.permutations(range(2)))
def test_agreement_ignores_class_names(preds, mapping):
    renamed = [mapping[p] for p in preds]
    assert orbit_agreement(preds) == orbit_agreement(renamed)
    assert 50 <= orbit_agreement(preds) <= 100


def test_last_n_mean_examples():
    recs = [{"v": v} for v in (1.0, 2.0, 3.0, 4.0)]
    assert last_n_mean(recs, 3, "v") == 3.0
    assert last_n_mean(recs, 1, "v") == 4.0
    assert last_n_mean([{"v": 2.5}] * 5, 5, "v") == 2.5
    with pytest.raises(ValueError):
        last_n_mean(recs, 5, "v")
    with pytest.raises(ValueError):
        last_n_mean(recs, 0, "v")


def test_last_n_mean_reads_train_records():
    recs = [TrainRecord(i, 0.001, 0.1, 50.0, float(i), 100.0) for i in range(12)]
    assert last_n_mean(recs, 10, "eval_accuracy") == sum(range(2, 12)) / 10


def test_best_epoch_examples():
    assert best_epoch([{"epoch": i, "v": v} for i, v in enumerate((1, 2, 3))], "v") == 2
    assert best_epoch([{"epoch": i, "v": v} for i, v in enumerate((5, 9, 9))], "v") == 1
    assert best_epoch([{"epoch": 4, "v": 1}], "v") == 4
    with pytest.raises(ValueError):
        best_epoch([], "v")


def test_eval_report_text_roundtrip():
    report = EvalReport(87.5, 93.75, {0: 80.0, 1: 95.0}, 40, "orbit8")
    assert EvalReport.from_text(report.to_text()) == report
    seg = EvalReport(91.2, None, {0: 99.0, 1: 40.0}, 3, "single")
    assert EvalReport.from_text(seg.to_text()) == seg
    assert seg.csv_row() == ("single", 3, "91.2", "nan")


def _images(n=12, size=8, seed=0):
    rng = np.random.default_rng(seed)
    return [LabeledImage(rng.integers(0, 4, size=(1, size, size)) / 3.0, i % 2, f"i{i}") for i in range(n)]


def test_invariant_rule_gives_full_agreement():
    # the pixel-sum parity of a map is unchanged by any permutation of it
    model = RuleModel(lambda img: int(round(img.sum() * 3)) % 2, (1, 8, 8))
    report, orbits = eval_orbit(model, _images())
    assert report.agreement == 100
    assert len(orbits) == 12 and all(len(o.predictions) == 8 for o in orbits)


def test_constant_model():
    images = _images(10)
    images[0] = LabeledImage(images[0].pixels, 1, images[0].id)
    model = RuleModel(lambda img: 1, (1, 8, 8))
    report, _ = eval_orbit(model, images)
    share = 100 * sum(s.label == 1 for s in images) / len(images)
    assert report.agreement == 100 and report.accuracy == pytest.approx(share)
    assert report.per_class_accuracy == {0: 0.0, 1: 100.0}


def test_orientation_sensitive_rule():
    # "top-left pixel brighter than top-right": mirrored versions disagree
    images = [LabeledImage(np.array([[[1.0, 0.0], [0.0, 0.0]]]), 1, "x")]
    model = RuleModel(lambda img: int(img[0, 0, 0] > img[0, 0, 1]), (1, 2, 2))
    report, orbits = eval_orbit(model, images)
    # identity and the transpose (code 7) keep the bright pixel top-left
    assert orbits[0].predictions == [1, 0, 0, 0, 0, 0, 0, 1]
    assert report.accuracy == 25 and report.agreement == 75
    assert eval_single(model, images).accuracy == 100


def test_duplicates_do_not_change_agreement():
    model = RuleModel(lambda img: int(img[0, 0, 0] > img[0, -1, -1]), (1, 8, 8))
    images = _images(6)
    base = eval_orbit(model, images)[0].agreement
    doubled = images + [LabeledImage(s.pixels, s.label, s.id + "-copy") for s in images]
    assert eval_orbit(model, doubled)[0].agreement == pytest.approx(base)


def test_symmetric_images_make_orbit_equal_single():
    rng = np.random.default_rng(5)
    images = []
    for i in range(6):
        q = rng.random((2, 2))
        # build a map invariant under every D4 transform
        m = np.zeros((4, 4))
        m[:2, :2] = q + q.T
        m[:2, 2:] = np.fliplr(m[:2, :2])
        m[2:] = np.flipud(m[:2])
        images.append(LabeledImage(m[None] / m.max(), i % 2, f"s{i}"))
    model = RuleModel(lambda img: int(img[0, 0, 0] > 0.5), (1, 4, 4))
    assert eval_orbit(model, images)[0].accuracy == eval_single(model, images).accuracy


def test_eval_orbit_rejects_rectangles():
    images = [LabeledImage(np.zeros((1, 4, 6)), 0, "r")]
    with pytest.raises(ShapeError):
        eval_orbit(RuleModel(lambda img: 0, (1, 4, 6)), images)


def test_orbit_csv(tmp_path):
    path = tmp_path / "orbits.csv"
    write_orbits_csv([OrbitPrediction("a", [1, 1, 0, 0, 0, 0, 0, 0])], path)
    lines = path.read_text().splitlines()
    assert lines[0] == "image_id,code,prediction"
    assert lines[1:3] == ["a,0,1", "a,1,1"] and len(lines) == 9


def test_motif_labels_survive_the_orbit():
    # a rule that reads the label off a hidden pixel shows the generator's
    # labels are orientation-free: every transformed version is scored right
    images = gen_motif_classification(6, 16, seed=2)
    for s in images:
        s.pixels[0] = s.label
    report, _ = eval_orbit(RuleModel(lambda img: int(img.mean() > 0.5), (1, 16, 16)), images)
    assert report.accuracy == 100
