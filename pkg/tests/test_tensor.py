import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from tdcedn.tensor import (
    Precision, Tensor, concat_channels, elementwise, from_values, ones, split_channels, zeros,
)


def test_constructors():
    assert zeros((1, 1, 2, 2)).values() == [0.0] * 4
    assert ones((1, 3, 1, 1)).values() == [1.0] * 3
    t = from_values((1, 1, 1, 2), [0.4, 0.8])
    assert t.values() == pytest.approx([0.4, 0.8])
    assert (t.n, t.c, t.h, t.w) == (1, 1, 1, 2)


def test_from_values_length_mismatch():
    with pytest.raises(ValueError):
        from_values((1, 1, 2, 2), [1.0, 2.0])


def test_zero_dimension_rejected():
    with pytest.raises(ValueError):
        zeros((1, 0, 2, 2))


def test_integer_data_rejected():
    with pytest.raises(TypeError):
        Tensor(np.zeros((1, 1, 1, 1), dtype=np.int32))


def test_elementwise_examples():
    a = from_values((1, 1, 1, 2), [1, 2], Precision.F64)
    b = from_values((1, 1, 1, 2), [3, 4], Precision.F64)
    assert elementwise("add", a, b).values() == [4, 6]
    assert elementwise("sub", b, a).values() == [2, 2]
    assert elementwise("mul", a, b).values() == [3, 8]
    s = from_values((1, 1, 1, 2), [0.4, 0.8], Precision.F64)
    assert elementwise("scale", s, 0.5).values() == pytest.approx([0.2, 0.4])
    c = from_values((1, 1, 1, 2), [-1, 2], Precision.F64)
    assert elementwise("clamp", c, 0, hi=1).values() == [0, 1]


def test_elementwise_errors():
    a = zeros((1, 1, 1, 2))
    with pytest.raises(ValueError):
        elementwise("add", a, zeros((1, 1, 2, 1)))
    with pytest.raises(ValueError):
        elementwise("pow", a, 2)


def test_elementwise_keeps_precision():
    a = ones((1, 1, 2, 2), Precision.F64)
    assert elementwise("scale", a, 3).precision is Precision.F64


def test_concat_shapes_and_recovery(rng):
    a = rng.standard_normal((1, 2, 2, 2))
    b = rng.standard_normal((1, 3, 2, 2))
    out = concat_channels(a, b)
    assert out.shape == (1, 5, 2, 2)
    ga, gb = split_channels(out, 2)
    np.testing.assert_array_equal(ga, a)
    np.testing.assert_array_equal(gb, b)
    z = concat_channels(a, np.zeros_like(b))
    np.testing.assert_array_equal(z[:, :2], a)


def test_concat_tensor_objects():
    out = concat_channels(ones((1, 1, 2, 2)), zeros((1, 2, 2, 2)))
    assert isinstance(out, Tensor) and out.shape == (1, 3, 2, 2)


def test_concat_spatial_mismatch():
    with pytest.raises(ValueError):
        concat_channels(np.zeros((1, 1, 2, 2)), np.zeros((1, 1, 2, 3)))
    with pytest.raises(ValueError):
        concat_channels(np.zeros((2, 1, 2, 2)), np.zeros((1, 1, 2, 2)))


def test_precision_tags():
    for p in Precision:
        assert Precision.from_tag(p.tag) is p
    assert Precision.coerce("f64") is Precision.F64
    assert Precision.coerce(np.float32) is Precision.F32
    with pytest.raises(ValueError):
        Precision.from_tag(9)


finite = st.floats(-1e6, 1e6, allow_nan=False)


@given(st.lists(finite, min_size=1, max_size=24))
def test_from_values_roundtrip(vals):
    t = from_values((1, 1, 1, len(vals)), vals, Precision.F64)
    assert t.values() == vals


@given(st.lists(finite, min_size=1, max_size=12), st.floats(-5, 5), st.floats(-5, 5))
def test_clamp_bounds(vals, lo, hi):
    lo, hi = min(lo, hi), max(lo, hi)
    out = elementwise("clamp", from_values((1, 1, 1, len(vals)), vals, Precision.F64), lo, hi=hi)
    assert all(lo <= v <= hi for v in out.values())
