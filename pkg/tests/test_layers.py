import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tdcedn import layers as L
from tdcedn.gradcheck import LAYER_TOL, check_layers


def naive_conv(x, w, b):
    n, c, h, wd = x.shape
    co, _, k, _ = w.shape
    p = k // 2
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    out = np.zeros((n, co, h, wd))
    for i in range(n):
        for o in range(co):
            for y in range(h):
                for z in range(wd):
                    out[i, o, y, z] = (xp[i, :, y : y + k, z : z + k] * w[o]).sum() + b[o]
    return out


def test_conv_identity_kernel(rng):
    x = rng.standard_normal((1, 2, 5, 6))
    w = np.zeros((2, 2, 3, 3))
    w[0, 0, 1, 1] = w[1, 1, 1, 1] = 1
    np.testing.assert_array_equal(L.conv2d_forward(x, w, np.zeros(2)), x)


def test_conv_counting_overlap():
    out = L.conv2d_forward(np.ones((1, 1, 3, 3)), np.ones((1, 1, 3, 3)), np.zeros(1))
    assert out[0, 0, 1, 1] == 9.0
    assert out[0, 0, 0, 0] == out[0, 0, 2, 2] == 4.0
    assert out[0, 0, 0, 1] == 6.0


@pytest.mark.parametrize("k", [1, 3])
def test_conv_matches_naive_loop(rng, k):
    x = rng.standard_normal((2, 2, 4, 5))
    w = rng.standard_normal((3, 2, k, k))
    b = rng.standard_normal(3)
    np.testing.assert_allclose(L.conv2d_forward(x, w, b), naive_conv(x, w, b), atol=1e-12)


def test_conv_row_banding_is_exact(rng, monkeypatch):
    x = rng.standard_normal((1, 3, 9, 7))
    w = rng.standard_normal((2, 3, 3, 3))
    b = rng.standard_normal(2)
    full = L.conv2d_forward(x, w, b)
    monkeypatch.setattr(L, "_COLS_BUDGET", 27 * 7 * 2)
    np.testing.assert_allclose(L.conv2d_forward(x, w, b), full, atol=1e-12)
    g = rng.standard_normal(full.shape)
    banded = L.conv2d_backward(x, w, g)
    monkeypatch.undo()
    for a, c in zip(banded, L.conv2d_backward(x, w, g)):
        np.testing.assert_allclose(a, c, atol=1e-12)


def test_conv_channel_mismatch():
    with pytest.raises(ValueError):
        L.conv2d_forward(np.zeros((1, 2, 4, 4)), np.zeros((1, 3, 3, 3)), np.zeros(1))
    with pytest.raises(ValueError):
        L.conv2d_backward(np.zeros((1, 2, 4, 4)), np.zeros((1, 2, 3, 3)), np.zeros((1, 1, 3, 3)))


def test_batchnorm_training_normalizes(rng):
    x = rng.standard_normal((2, 3, 4, 4)) * 5 + 2
    out, _ = L.batchnorm_forward(x, np.ones(3), np.zeros(3), np.zeros(3), np.ones(3), True)
    np.testing.assert_allclose(out.mean(axis=(0, 2, 3)), 0, atol=1e-12)
    np.testing.assert_allclose(out.var(axis=(0, 2, 3)), 1, atol=1e-3)


def test_batchnorm_running_stats(rng):
    x = rng.standard_normal((1, 2, 4, 4)) * 3 + 1
    rm, rv = np.zeros(2), np.ones(2)
    L.batchnorm_forward(x, np.ones(2), np.zeros(2), rm, rv, True, momentum=0.1)
    mean = x.mean(axis=(0, 2, 3))
    var = x.var(axis=(0, 2, 3), ddof=1)
    np.testing.assert_allclose(rm, 0.1 * mean)
    np.testing.assert_allclose(rv, 0.9 + 0.1 * var)


def test_batchnorm_eval_uses_running_stats(rng):
    x = rng.standard_normal((1, 2, 3, 3))
    rm, rv = np.array([0.5, -1.0]), np.array([4.0, 0.25])
    out, _ = L.batchnorm_forward(x, np.array([2.0, 1.0]), np.array([0.0, 3.0]), rm, rv, False)
    expect = (x - rm[None, :, None, None]) / np.sqrt(rv[None, :, None, None] + L.BN_EPSILON)
    expect = expect * np.array([2.0, 1.0])[None, :, None, None] + np.array([0.0, 3.0])[None, :, None, None]
    np.testing.assert_allclose(out, expect)
    np.testing.assert_array_equal(rm, [0.5, -1.0])


def test_batchnorm_empty_extent():
    with pytest.raises(ValueError):
        L.batchnorm_forward(np.zeros((0, 2, 3, 3)), np.ones(2), np.zeros(2), np.zeros(2), np.ones(2), True)


def test_relu_examples():
    np.testing.assert_array_equal(L.relu(np.array([-1.0, 0.0, 2.0])), [0, 0, 2])
    np.testing.assert_array_equal(L.relu_backward(np.array([-1.0, 2.0]), np.array([5.0, 7.0])), [0, 7])


def test_sigmoid_examples():
    assert L.sigmoid(np.array(0.0)) == 0.5
    s = L.sigmoid(np.array([-800.0, 800.0]))
    assert np.all(np.isfinite(s)) and s[0] == 0.0 and s[1] == 1.0


def test_maxpool_examples():
    x = np.array([[1.0, 2.0], [3.0, 4.0]])[None, None]
    out, idx = L.maxpool2x2(x)
    assert out.tolist() == [[[[4.0]]]]
    g = L.maxpool2x2_backward(np.array([[[[10.0]]]]), idx, x.shape)
    assert g[0, 0].tolist() == [[0, 0], [0, 10]]
    out, _ = L.maxpool2x2(np.zeros((1, 1, 5, 5)))
    assert out.shape == (1, 1, 2, 2)
    with pytest.raises(ValueError):
        L.maxpool2x2(np.zeros((1, 1, 1, 4)))


def test_maxpool_tie_goes_to_first():
    x = np.ones((1, 1, 2, 2))
    _, idx = L.maxpool2x2(x)
    g = L.maxpool2x2_backward(np.ones((1, 1, 1, 1)), idx, x.shape)
    assert g[0, 0].tolist() == [[1, 0], [0, 0]]


def test_bilinear_examples():
    out = L.bilinear_upsample(np.full((1, 1, 1, 1), 5.0), (2, 2))
    np.testing.assert_array_equal(out, np.full((1, 1, 2, 2), 5.0))
    out = L.bilinear_upsample(np.array([[[[0.0, 1.0]]]]), (1, 4))
    np.testing.assert_allclose(out[0, 0, 0], [0, 1 / 3, 2 / 3, 1], atol=1e-15)
    with pytest.raises(ValueError):
        L.bilinear_upsample(np.zeros((1, 1, 4, 4)), (3, 4))


def test_bilinear_corners_preserved(rng):
    x = rng.standard_normal((1, 2, 3, 5))
    out = L.bilinear_upsample(x, (7, 11))
    for i, j in ((0, 0), (-1, 0), (0, -1), (-1, -1)):
        np.testing.assert_allclose(out[..., i, j], x[..., i, j], atol=1e-14)


def test_interpolation_kernels_are_read_only():
    a = L.interpolation_matrix(3, 7, "float64")
    assert not a.flags.writeable
    np.testing.assert_allclose(a.sum(axis=1), 1.0)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 6), st.integers(1, 6), st.integers(0, 5), st.integers(0, 5), st.integers(0, 2**32 - 1))
def test_bilinear_backward_is_adjoint(h, w, dh, dw, seed):
    r = np.random.default_rng(seed)
    x = r.standard_normal((1, 2, h, w))
    y = r.standard_normal((1, 2, h + dh, w + dw))
    lhs = (L.bilinear_upsample(x, (h + dh, w + dw)) * y).sum()
    rhs = (x * L.bilinear_backward(y, (h, w))).sum()
    assert lhs == pytest.approx(rhs, rel=1e-10, abs=1e-10)


def test_dropout_modes(rng):
    x = rng.standard_normal((1, 4, 8, 8))
    d = L.Dropout(0.5, layer_id=1)
    d.training = False
    assert d.forward(x) is x
    d0 = L.Dropout(0.0, layer_id=1)
    np.testing.assert_array_equal(d0.forward(x), x)
    with pytest.raises(ValueError):
        L.Dropout(1.0, layer_id=1)


def test_dropout_mask_deterministic_and_scaled():
    m1 = L.dropout_mask((1, 8, 32, 32), 0.5, 0, 2, 5, np.float64)
    m2 = L.dropout_mask((1, 8, 32, 32), 0.5, 0, 2, 5, np.float64)
    np.testing.assert_array_equal(m1, m2)
    assert set(np.unique(m1)) == {0.0, 2.0}
    assert abs(m1.mean() - 1.0) < 0.05
    assert not np.array_equal(m1, L.dropout_mask((1, 8, 32, 32), 0.5, 0, 2, 6, np.float64))
    assert not np.array_equal(m1, L.dropout_mask((1, 8, 32, 32), 0.5, 0, 3, 5, np.float64))


def test_layer_objects_cache_only_when_training(rng):
    conv = L.Conv2d(2, 3, 3, dtype=np.float64)
    conv.init_he(rng)
    conv.training = False
    conv.forward(rng.standard_normal((1, 2, 4, 4)))
    assert conv._x is None


def test_he_init_scale():
    conv = L.Conv2d(64, 64, 3, dtype=np.float64)
    conv.init_he(np.random.default_rng(0))
    assert conv.weight.data.std() == pytest.approx(np.sqrt(2 / 576), rel=0.02)
    assert not conv.bias.data.any()


@pytest.mark.parametrize("result", check_layers(seed=0), ids=lambda r: r.name)
def test_layer_gradients_match_finite_differences(result):
    assert result.error < LAYER_TOL
