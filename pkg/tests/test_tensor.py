import struct

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from rotaflip.errors import ShapeError
from rotaflip.tensor import (
    RngStream,
    as_tensor,
    elementwise,
    load_tensor,
    reduce,
    rng_uniform,
    save_tensor,
)


def test_elementwise_examples():
    assert elementwise("add", np.array([1.0, 2.0]), np.array([3.0, 4.0])).tolist() == [4.0, 6.0]
    assert elementwise("relu", np.array([-1.0, 0.0, 2.0])).tolist() == [0.0, 0.0, 2.0]
    assert elementwise("scale", np.array([1.0, 2.0]), 0.5).tolist() == [0.5, 1.0]
    assert elementwise("sub", np.array([1.0, 2.0]), 1.0).tolist() == [0.0, 1.0]


def test_elementwise_relu_grad_gates_by_input_sign():
    a = np.array([-1.0, 0.0, 3.0])
    g = np.array([5.0, 6.0, 7.0])
    assert elementwise("relu_grad", a, g).tolist() == [0.0, 0.0, 7.0]


def test_per_channel_broadcast():
    a = np.zeros((2, 3, 2, 2))
    out = elementwise("add", a, np.array([1.0, 2.0, 3.0]))
    assert out.shape == a.shape
    assert np.all(out[:, 1] == 2.0)


def test_shape_mismatch_names_both_shapes():
    with pytest.raises(ShapeError) as info:
        elementwise("add", np.zeros((2, 3)), np.zeros((3, 2)))
    assert "(2, 3)" in str(info.value) and "(3, 2)" in str(info.value)


def test_unknown_op():
    with pytest.raises(ValueError):
        elementwise("pow", np.zeros(2), np.zeros(2))


@pytest.mark.parametrize("dtype", [np.float32, np.float64])
def test_precision_is_preserved(dtype):
    a = np.ones((1, 2, 2, 2), dtype=dtype)
    for op in ("add", "sub", "mul", "scale", "relu_grad"):
        assert elementwise(op, a, 2.0).dtype == dtype
    assert elementwise("relu", a).dtype == dtype
    assert reduce("mean", a, "HW").dtype == dtype


def test_reduce_examples():
    m = np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 1, 2, 2)
    assert reduce("mean", m, "HW").item() == 2.5
    assert reduce("sum", np.ones((1, 2, 2, 2))).item() == 8
    assert reduce("max", np.array([[1.0, 9.0], [3.0, 4.0]]).reshape(1, 1, 2, 2), (2, 3)).item() == 9


def test_reduce_keeps_dims_and_rejects_empty():
    out = reduce("sum", np.ones((2, 3, 4, 5)), ("H", "W"))
    assert out.shape == (2, 3, 1, 1)
    with pytest.raises(ShapeError):
        reduce("sum", np.ones((0, 3, 4, 5)))
    with pytest.raises(ValueError):
        reduce("sum", np.ones((1, 1, 1, 1)), (4,))


def test_mean_of_constant_map():
    x = np.full((2, 3, 5, 5), 0.75)
    assert np.all(reduce("mean", x, "HW") == 0.75)


finite = st.floats(-1e6, 1e6, allow_nan=False, width=64)


@given(hnp.arrays(np.float64, (2, 3, 2, 2), elements=finite),
       hnp.arrays(np.float64, (2, 3, 2, 2), elements=finite))
def test_add_commutes_exactly(a, b):
    assert np.array_equal(elementwise("add", a, b), elementwise("add", b, a))


@given(hnp.arrays(np.float64, (1, 2, 3, 3), elements=finite))
def test_mean_is_sum_over_count(a):
    mean = reduce("mean", a, "HW")
    ratio = reduce("sum", a, "HW") / 9
    assert np.allclose(mean, ratio, rtol=4 * np.finfo(np.float64).eps, atol=1e-9)


def test_as_tensor_checks_rank():
    assert as_tensor(np.zeros((1, 1, 2, 2), dtype=np.int64)).dtype == np.float32
    assert as_tensor(np.zeros((1, 1, 2, 2)), "double").dtype == np.float64
    with pytest.raises(ShapeError):
        as_tensor(np.zeros((2, 2)))


# --------------------------------------------------------------------------
# random streams
# --------------------------------------------------------------------------


def test_stream_advances_between_calls():
    s = RngStream(3)
    assert not np.array_equal(rng_uniform(s, 5), rng_uniform(s, 5))


def test_same_seed_same_values():
    assert np.array_equal(rng_uniform(RngStream(9), 100), rng_uniform(RngStream(9), 100))


def test_uniform_mean_seed_42():
    u = rng_uniform(RngStream(42), 10**5)
    assert u.min() >= 0 and u.max() < 1
    assert abs(u.mean() - 0.5) < 0.01


def test_substreams_are_reproducible_and_distinct():
    root = RngStream(5)
    a = root.child("init").uniform(50)
    assert np.array_equal(a, RngStream(5).child("init").uniform(50))
    b = root.child("batches").uniform(50)
    assert not np.array_equal(a, b)
    # creating or consuming other children does not shift a labelled stream
    root.child("other").uniform(1000)
    assert np.array_equal(root.child("init").uniform(50), a)


def test_substreams_look_independent():
    a = RngStream(5).child("x").uniform(20000)
    b = RngStream(5).child("y").uniform(20000)
    assert abs(np.corrcoef(a, b)[0, 1]) < 0.03


def test_uniform_golden_values():
    # frozen: changing the generator or seeding scheme breaks reproducibility
    np.testing.assert_array_equal(
        np.round(RngStream(0).child("golden").uniform(3), 8),
        GOLDEN_UNIFORM)


GOLDEN_UNIFORM = [0.23397188, 0.24473105, 0.47758679]


def test_negative_count_rejected():
    with pytest.raises(ValueError):
        rng_uniform(RngStream(0), -1)


# --------------------------------------------------------------------------
# tensor files
# --------------------------------------------------------------------------


@given(hnp.arrays(st.sampled_from([np.float32, np.float64]),
                  hnp.array_shapes(min_dims=1, max_dims=4, max_side=5),
                  elements=st.floats(-1e6, 1e6, allow_nan=False, width=32)))
def test_tensor_file_roundtrip_is_bit_exact(tmp_path_factory, arr):
    path = tmp_path_factory.mktemp("t") / "a.rtfl"
    save_tensor(path, arr)
    back = load_tensor(path)
    assert back.dtype == arr.dtype
    assert back.shape == (1,) * (4 - arr.ndim) + arr.shape
    assert back.tobytes() == np.ascontiguousarray(arr).tobytes()


def test_tensor_file_layout(tmp_path):
    path = tmp_path / "x.rtfl"
    save_tensor(path, np.arange(6, dtype=np.float64).reshape(2, 3))
    raw = path.read_bytes()
    magic, version, tag, *shape = struct.unpack_from("<4sHB4I", raw)
    assert (magic, version, tag, shape) == (b"RTFL", 1, 2, [1, 1, 2, 3])
    assert len(raw) == 4 + 2 + 1 + 16 + 6 * 8
    assert np.frombuffer(raw[23:], "<f8").tolist() == [0, 1, 2, 3, 4, 5]


@pytest.mark.parametrize("corrupt, message", [
    (lambda b: b"XXXX" + b[4:], "magic"),
    (lambda b: b[:4] + struct.pack("<H", 9) + b[6:], "version"),
    (lambda b: b[:6] + bytes([7]) + b[7:], "precision tag"),
    (lambda b: b[:-4], "expected"),
    (lambda b: b[:10], "truncated"),
])
def test_tensor_file_rejects_corruption(tmp_path, corrupt, message):
    path = tmp_path / "x.rtfl"
    save_tensor(path, np.ones((2, 2), dtype=np.float32))
    path.write_bytes(corrupt(path.read_bytes()))
    with pytest.raises(ValueError, match=message):
        load_tensor(path)


def test_tensor_file_rejects_other_dtypes(tmp_path):
    with pytest.raises(TypeError):
        save_tensor(tmp_path / "x", np.ones(3, dtype=np.int32))
