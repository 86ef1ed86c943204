import numpy as np
import pytest

from rotaflip import d4
from rotaflip.errors import ConfigError, ShapeError
from rotaflip.layers import BatchNorm2d, Conv2d, count_parameters, layer_listing, set_frozen_stats
from rotaflip.models import (
    DenseNetConfig,
    RegularizerSlot,
    UnetConfig,
    build_densenet,
    build_model,
    build_unet,
    predict_class,
    predict_logits,
    predict_pixels,
)


def _conv_block(c, k):
    # BN(c), 1x1 conv c -> 4k, BN(4k), 3x3 conv 4k -> k, convs without bias
    return 2 * c + c * 4 * k + 2 * 4 * k + 4 * k * k * 9


def test_parameter_count_matches_hand_derivation():
    k, stem = 8, 16
    total = stem * 1 * 9
    c = stem
    for b in range(3):
        for _ in range(2):
            total += _conv_block(c, k)
            c += k
        if b < 2:
            total += 2 * c + c * (c // 2)
            c //= 2
    total += 2 * c + c * 2 + 2
    assert total == 19714
    net = build_densenet(DenseNetConfig(slot=RegularizerSlot("rotaflip", 0.1)))
    assert count_parameters(net) == total


def test_channels_entering_the_transition():
    net = build_densenet(DenseNetConfig(block_sizes=(1, 1), input_shape=(3, 32, 32)))
    bn = dict(net.named_layers())["transition0.bn"]
    assert bn.channels == 16 + 8


def test_densenet_output_shape_is_size_independent():
    for size in (8, 16, 24):
        net = build_densenet(DenseNetConfig(input_shape=(1, size, size)))
        assert net.forward(np.zeros((3, 1, size, size), dtype=np.float32)).shape == (3, 2)


def test_rate_zero_matches_no_regularizer():
    x = np.random.default_rng(0).random((4, 1, 16, 16)).astype(np.float32)
    plain = build_densenet(DenseNetConfig(input_shape=(1, 16, 16)), seed=3)
    zero = build_densenet(DenseNetConfig(input_shape=(1, 16, 16), slot=RegularizerSlot("rotaflip", 0.0)), seed=3)
    assert np.array_equal(plain.forward(x), zero.forward(x))
    zero_both = build_densenet(DenseNetConfig(input_shape=(1, 16, 16), slot=RegularizerSlot("both")), seed=3)
    assert np.array_equal(plain.forward(x), zero_both.forward(x))


def test_invalid_configs_list_every_violation():
    with pytest.raises(ConfigError) as info:
        build_densenet(DenseNetConfig(growth_rate=0, block_sizes=(), classes=1))
    assert len(info.value.violations) >= 3
    with pytest.raises(ConfigError):
        build_densenet(DenseNetConfig(input_shape=(1, 16, 12), slot=RegularizerSlot("rotaflip", 0.1)))
    with pytest.raises(ConfigError):
        build_unet(UnetConfig(input_shape=(1, 60, 60)))
    with pytest.raises(ConfigError):
        build_unet(UnetConfig(slot=RegularizerSlot("rotaflip", 1.5)))
    with pytest.raises(TypeError):
        build_model(object())


def test_large_stem():
    net = build_densenet(DenseNetConfig(stem="large", input_shape=(1, 32, 32)))
    assert net.forward(np.zeros((2, 1, 32, 32), dtype=np.float32)).shape == (2, 2)
    with pytest.raises(ConfigError):
        build_densenet(DenseNetConfig(stem="large", input_shape=(1, 20, 20)))


def test_unet_deepest_resolution_for_paper_sizes():
    net = build_unet(UnetConfig(filters=(32, 64, 96, 128), input_shape=(1, 240, 240)))
    # walk the encoder by hand: pooling three times
    x = np.zeros((1, 1, 240, 240), dtype=np.float32)
    h = x
    for i, enc in enumerate(net.encoders):
        h = enc.forward(h)
        if i < 3:
            h = net.pools[i].forward(h)
    assert h.shape == (1, 128, 30, 30)


def test_unet_skip_channels():
    f = (8, 16, 24, 32)
    net = build_unet(UnetConfig(filters=f, input_shape=(1, 16, 16)))
    layers = dict(net.named_layers())
    for i in range(3):
        assert layers[f"dec{i}.conv1"].in_channels == 2 * f[i]
        assert layers[f"up{i}.conv"].in_channels == f[i + 1]
    assert net.forward(np.zeros((2, 1, 16, 16), dtype=np.float32)).shape == (2, 2, 16, 16)


def test_unet_train_and_infer_agree_with_frozen_stats():
    net = build_unet(UnetConfig(input_shape=(1, 16, 16)), seed=1, precision="double")
    x = np.random.default_rng(1).random((2, 1, 16, 16))
    net.forward(x)  # move the running statistics away from their initial values
    set_frozen_stats(net)
    train_out = net.forward(x)
    infer_out = predict_logits(net, x)
    np.testing.assert_allclose(train_out, infer_out, rtol=1e-12, atol=1e-12)


def test_prediction_argmax_and_ties():
    net = build_densenet(DenseNetConfig(input_shape=(1, 8, 8)))
    fc = dict(net.named_layers())["head.fc"]
    fc.params["weight"][...] = 0
    fc.params["bias"][...] = [0.2, 0.8]
    x = np.random.default_rng(2).random((3, 1, 8, 8))
    assert predict_class(net, x).tolist() == [1, 1, 1]
    fc.params["bias"][...] = [0.5, 0.5]
    assert predict_class(net, x).tolist() == [0, 0, 0]
    assert predict_class(net, x[0]) == 0
    with pytest.raises(ShapeError):
        predict_class(net, np.zeros((1, 1, 9, 9)))


def test_prediction_leaves_training_mode_alone():
    net = build_densenet(DenseNetConfig(input_shape=(1, 8, 8)))
    predict_logits(net, np.zeros((1, 1, 8, 8)))
    assert all(layer.training for _, layer in net.named_layers())


def _symmetrize(model):
    # spatially constant kernels commute with every D4 transform
    for _, layer in model.named_layers():
        if isinstance(layer, Conv2d):
            w = layer.params["weight"]
            w[...] = w.mean(axis=(2, 3), keepdims=True)


def test_symmetric_weights_give_orbit_invariant_predictions():
    net = build_densenet(DenseNetConfig(input_shape=(1, 16, 16), slot=RegularizerSlot("rotaflip", 0.3)),
                         seed=4, precision="double")
    _symmetrize(net)
    x = np.random.default_rng(4).random((5, 1, 16, 16))
    logits = [predict_logits(net, d4.apply(x, t)) for t in range(8)]
    for z in logits[1:]:
        np.testing.assert_allclose(z, logits[0], rtol=1e-10, atol=1e-12)
    preds = {tuple(predict_class(net, d4.apply(x, t)).tolist()) for t in range(8)}
    assert len(preds) == 1


def test_symmetric_unet_is_equivariant():
    net = build_unet(UnetConfig(input_shape=(1, 16, 16)), seed=5, precision="double")
    _symmetrize(net)
    x = np.random.default_rng(5).random((2, 1, 16, 16))
    base = predict_logits(net, x)
    for t in range(8):
        np.testing.assert_allclose(predict_logits(net, d4.apply(x, t)), d4.apply(base, t), rtol=1e-10, atol=1e-12)
    assert predict_pixels(net, x).shape == (2, 16, 16)


def test_layer_listing_names_every_leaf():
    net = build_densenet(DenseNetConfig(slot=RegularizerSlot("both", 0.1, 0.1)))
    listing = layer_listing(net).splitlines()
    assert "dense0.conv0.branch.rotaflip\trotaflip rate=0.1" in listing
    assert "dense0.conv0.branch.dropout\tdropout rate=0.1" in listing
    assert listing[-1].startswith("head.fc\t")


def test_double_precision_build():
    net = build_densenet(DenseNetConfig(input_shape=(1, 8, 8)), precision="double")
    assert all(layer.params[n].dtype == np.float64 for _, layer, n in net.parameter_refs())
    bns = [layer for _, layer in net.named_layers() if isinstance(layer, BatchNorm2d)]
    assert bns and all(b.buffers["running_var"].dtype == np.float64 for b in bns)
