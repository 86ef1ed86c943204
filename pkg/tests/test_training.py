import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from rotaflip.data import LabeledImage, gen_motif_classification
from rotaflip.errors import DivergenceError, ShapeError
from rotaflip.models import DenseNetConfig, RegularizerSlot, UnetConfig, build_densenet, build_unet
from rotaflip.training import (
    NadamState,
    Schedule,
    TrainSettings,
    cross_entropy,
    lr_at,
    nadam_step,
    pixel_cross_entropy,
    snapshot,
    train,
)


def _fd_grad(f, x, h=1e-6):
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        e = np.zeros_like(x)
        e[idx] = h
        g[idx] = (f(x + e) - f(x - e)) / (2 * h)
    return g


def test_cross_entropy_examples():
    assert cross_entropy(np.zeros((4, 2)), [0, 1, 1, 0])[0] == pytest.approx(math.log(2), abs=1e-15)
    assert cross_entropy(np.array([[0.0, 100.0]]), [1])[0] < 1e-6
    with pytest.raises(ValueError):
        cross_entropy(np.zeros((2, 2)), [0, 2])
    with pytest.raises(ShapeError):
        cross_entropy(np.zeros((2, 1)), [0, 0])


def test_cross_entropy_is_stable_for_huge_logits():
    loss, grad = cross_entropy(np.array([[1e4, -1e4], [0.0, 1e4]]), [0, 0])
    assert math.isfinite(loss) and np.all(np.isfinite(grad))
    assert loss == pytest.approx(5e3)


def test_cross_entropy_gradient_matches_finite_differences():
    rng = np.random.default_rng(0)
    logits, labels = rng.normal(size=(3, 2)), np.array([0, 1, 1])
    numeric = _fd_grad(lambda z: cross_entropy(z, labels)[0], logits)
    _, analytic = cross_entropy(logits, labels)
    rel = np.max(np.abs(numeric - analytic) / np.maximum(np.abs(analytic), 1e-12))
    assert rel < 1e-8


def test_pixel_cross_entropy_examples():
    assert pixel_cross_entropy(np.zeros((2, 2, 3, 3)), np.zeros((2, 3, 3), dtype=int))[0] == \
        pytest.approx(math.log(2), abs=1e-15)
    labels = np.random.default_rng(1).integers(0, 3, size=(2, 4, 4))
    perfect = 50.0 * np.moveaxis(np.eye(3)[labels], -1, 1)
    assert pixel_cross_entropy(perfect, labels)[0] < 1e-12
    with pytest.raises(ShapeError):
        pixel_cross_entropy(np.zeros((1, 2, 3, 3)), np.zeros((1, 3, 4), dtype=int))


def test_pixel_cross_entropy_reduces_to_cross_entropy():
    rng = np.random.default_rng(2)
    logits, labels = rng.normal(size=(5, 3)), rng.integers(0, 3, size=5)
    loss, grad = cross_entropy(logits, labels)
    ploss, pgrad = pixel_cross_entropy(logits[:, :, None, None], labels[:, None, None])
    assert abs(loss - ploss) < 1e-12
    np.testing.assert_allclose(pgrad[:, :, 0, 0], grad, rtol=0, atol=1e-12)


def test_pixel_cross_entropy_gradient():
    rng = np.random.default_rng(3)
    logits, labels = rng.normal(size=(2, 2, 2, 3)), rng.integers(0, 2, size=(2, 2, 3))
    numeric = _fd_grad(lambda z: pixel_cross_entropy(z, labels)[0], logits)
    np.testing.assert_allclose(pixel_cross_entropy(logits, labels)[1], numeric, rtol=1e-7, atol=1e-10)


# --------------------------------------------------------------------------
# Nadam
# --------------------------------------------------------------------------


def test_nadam_zero_gradient_is_a_no_op():
    p = {"w": np.array([1.0, -2.0])}
    nadam_step(p, {"w": np.zeros(2)}, NadamState(), 0.001)
    assert p["w"].tolist() == [1.0, -2.0]


def test_nadam_single_step_closed_form():
    g = np.array([0.5, -2.0, 1e-3])
    p = {"w": np.array([1.0, 1.0, 1.0])}
    lr, b1, eps = 0.01, 0.9, 1e-8
    state = NadamState()
    nadam_step(p, {"w": g}, state, lr)
    mu1 = b1 * (1 - 0.5 * 0.96 ** 0.004)
    mu2 = b1 * (1 - 0.5 * 0.96 ** 0.008)
    # m_1 = (1 - b1) g and v_1 = (1 - b2) g^2, so v_hat = g^2
    m_bar = g + mu2 * (1 - b1) * g / (1 - mu1 * mu2)
    expected = 1.0 - lr * m_bar / (np.abs(g) + eps)
    np.testing.assert_allclose(p["w"], expected, rtol=1e-12, atol=0)
    assert state.step == 1


def test_nadam_constant_gradient_moves_monotonically():
    p = {"w": np.array([0.0, 0.0])}
    state = NadamState()
    trail = []
    for _ in range(50):
        nadam_step(p, {"w": np.array([0.3, -0.7])}, state, 0.01)
        trail.append(p["w"].copy())
    trail = np.array(trail)
    assert np.all(np.diff(trail[:, 0]) < 0) and np.all(np.diff(trail[:, 1]) > 0)
    assert state.step == 50 and state.m["w"].shape == (2,)


def test_nadam_rejects_bad_gradients():
    p = {"layer.w": np.zeros(2)}
    with pytest.raises(DivergenceError, match="layer.w"):
        nadam_step(p, {"layer.w": np.array([np.nan, 0.0])}, NadamState(), 0.1)
    with pytest.raises(ShapeError):
        nadam_step(p, {"layer.w": np.zeros(3)}, NadamState(), 0.1)


def test_lr_schedule_examples():
    s = Schedule()
    assert lr_at(s, 0) == 0.001
    assert lr_at(s, 1) == pytest.approx(0.00099, rel=1e-15)
    assert all(lr_at(Schedule(0.01, 1.0), e) == 0.01 for e in range(0, 300, 7))
    with pytest.raises(ValueError):
        lr_at(s, -1)


@given(st.floats(1e-6, 1.0), st.floats(0.5, 1.0), st.integers(0, 299))
def test_lr_is_positive_and_non_increasing(lr0, decay, epoch):
    s = Schedule(lr0, decay)
    assert 0 < lr_at(s, epoch + 1) <= lr_at(s, epoch)


# --------------------------------------------------------------------------
# training loop
# --------------------------------------------------------------------------


def _blobs(n, size=12, seed=0):
    """Two Gaussian blobs: bright centre for class 1, dark centre for class 0."""
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[:size, :size] - (size - 1) / 2
    blob = np.exp(-(yy ** 2 + xx ** 2) / 8.0)
    out = []
    for i in range(n):
        label = i % 2
        img = 0.5 + (0.4 if label else -0.4) * blob + 0.05 * rng.normal(size=(size, size))
        out.append(LabeledImage(np.clip(img, 0, 1)[None], label, f"b{i}"))
    return out


def _tiny_net(slot=None, precision="single", seed=0, size=12):
    cfg = DenseNetConfig(growth_rate=4, block_sizes=(1, 1), stem_channels=8, input_shape=(1, size, size),
                         slot=slot or RegularizerSlot())
    return build_densenet(cfg, seed, precision)


def test_training_separates_gaussian_blobs():
    data = _blobs(64)
    result = train(_tiny_net(), data, TrainSettings(Schedule(0.01, 0.99, 20), batch_size=16), seed=0)
    assert len(result.records) == 20
    assert result.records[-1].train_accuracy > 95


def test_zero_epochs_changes_nothing():
    net = _tiny_net()
    before = snapshot(net)
    result = train(net, _blobs(8), TrainSettings(Schedule(epochs=0), batch_size=4), seed=0)
    assert result.records == []
    after = snapshot(net)
    assert all(np.array_equal(before[k], after[k]) for k in before)


def test_training_is_deterministic_in_double_precision():
    data = _blobs(16)
    settings = TrainSettings(Schedule(0.01, 0.99, 3), batch_size=8)
    runs = []
    for _ in range(2):
        net = _tiny_net(RegularizerSlot("both", 0.2, 0.1), "double", seed=7)
        result = train(net, data, settings, eval_set=data[:4], seed=7)
        runs.append(([r.csv_line() for r in result.records], snapshot(net)))
    assert runs[0][0] == runs[1][0]
    assert all(runs[0][1][k].tobytes() == runs[1][1][k].tobytes() for k in runs[0][1])


def test_records_and_evaluation_window():
    data = _blobs(16)
    settings = TrainSettings(Schedule(0.01, 0.9, 4), batch_size=8, eval_last=2)
    result = train(_tiny_net(), data, settings, eval_set=data[:4], seed=0)
    rec = result.records
    assert [r.epoch for r in rec] == [0, 1, 2, 3]
    assert math.isnan(rec[0].eval_accuracy) and math.isnan(rec[1].agreement)
    assert 0 <= rec[3].eval_accuracy <= 100 and 0 <= rec[3].agreement <= 100
    assert rec[1].lr == pytest.approx(0.009)
    assert result.best_epoch in (2, 3)


def test_divergence_carries_partial_records():
    data = _blobs(8)
    data[3] = LabeledImage(np.full((1, 12, 12), np.nan), 1, "bad")
    with pytest.raises(DivergenceError) as info:
        train(_tiny_net(), data, TrainSettings(Schedule(epochs=2), batch_size=8, balanced=False), seed=0)
    assert info.value.records == []


def test_stochastic_layers_follow_the_phase():
    net = _tiny_net(RegularizerSlot("rotaflip", 0.5))
    seen = []
    train(net, _blobs(8), TrainSettings(Schedule(epochs=1), batch_size=4), eval_set=_blobs(2),
          on_epoch=lambda r: seen.append(r.epoch))
    assert seen == [0]
    # after training everything is left in infer mode
    assert not any(layer.training for _, layer in net.named_layers())


def test_segmentation_training_reduces_loss():
    from rotaflip.data import gen_voronoi_segmentation

    data = gen_voronoi_segmentation(8, 16, cells=4, seed=0)
    net = build_unet(UnetConfig(filters=(4, 8), input_shape=(1, 16, 16)), seed=0)
    result = train(net, data, TrainSettings(Schedule(0.01, 0.99, 6), batch_size=4, balanced=False), seed=0)
    assert result.records[-1].loss < result.records[0].loss


def test_multiclass_needs_plain_batches():
    from rotaflip.errors import ConfigError

    data = [LabeledImage(np.zeros((1, 12, 12)), i % 3, f"m{i}") for i in range(6)]
    cfg = DenseNetConfig(growth_rate=4, block_sizes=(1,), stem_channels=4, input_shape=(1, 12, 12), classes=3)
    with pytest.raises(ConfigError):
        train(build_densenet(cfg), data, TrainSettings(Schedule(epochs=1), batch_size=6))
    result = train(build_densenet(cfg), data, TrainSettings(Schedule(epochs=1), batch_size=6, balanced=False))
    assert len(result.records) == 1


def test_motif_images_are_learnable():
    data = gen_motif_classification(64, 16, seed=0, clutter=0, noise=0.02, contrast=0.5)
    net = _tiny_net(size=16)
    result = train(net, data, TrainSettings(Schedule(0.01, 0.99, 12), batch_size=16), seed=0)
    assert result.records[-1].train_accuracy > result.records[0].train_accuracy
