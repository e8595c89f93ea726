"""Differentiable layers on NCHW ndarrays.

Each layer type comes as a pair of plain functions (``*_forward`` /
``*_backward``) plus a small stateful class that caches what its backward
pass needs. Caches are only written in training mode, so a graph in
inference mode never mutates layer state.
"""
from __future__ import annotations

import functools

import numpy as np
from scipy.special import expit

from .tensor import Tensor

BN_EPSILON = 1e-5
BN_MOMENTUM = 0.1
DROPOUT_RATE = 0.5

# im2col buffers above this many elements are built in row bands
_COLS_BUDGET = 1 << 25

_DROPOUT_STREAM = 2


# ---------------------------------------------------------------- convolution


def _row_bands(n: int, k2c: int, h: int, w: int):
    rows = max(1, min(h, _COLS_BUDGET // max(1, n * k2c * w)))
    for r0 in range(0, h, rows):
        yield r0, min(h, r0 + rows)


def _im2col(xp: np.ndarray, k: int, r0: int, r1: int, w: int) -> np.ndarray:
    n, c = xp.shape[:2]
    cols = np.empty((n, c, k, k, r1 - r0, w), dtype=xp.dtype)
    for dy in range(k):
        for dx in range(k):
            cols[:, :, dy, dx] = xp[:, :, r0 + dy : r1 + dy, dx : dx + w]
    return cols.reshape(n, c * k * k, (r1 - r0) * w)


def conv2d_forward(x: np.ndarray, weight: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """Stride-1, same-padded 2-D convolution (cross-correlation)."""
    n, c_in, h, w = x.shape
    c_out, c_w, k, k2 = weight.shape
    if c_w != c_in:
        raise ValueError(f"conv expects {c_w} input channels, got {c_in}")
    if k != k2 or k % 2 == 0:
        raise ValueError(f"kernel must be square with odd size, got {k}x{k2}")
    w2 = weight.reshape(c_out, -1)
    if k == 1:
        out = np.matmul(w2, x.reshape(n, c_in, h * w))
        out += bias[:, None]
        return out.reshape(n, c_out, h, w)
    p = (k - 1) // 2
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    out = np.empty((n, c_out, h, w), dtype=np.result_type(x, weight))
    for r0, r1 in _row_bands(n, c_in * k * k, h, w):
        cols = _im2col(xp, k, r0, r1, w)
        band = np.matmul(w2, cols)
        band += bias[:, None]
        out[:, :, r0:r1] = band.reshape(n, c_out, r1 - r0, w)
    return out


def conv2d_backward(
    x: np.ndarray, weight: np.ndarray, grad_out: np.ndarray, need_input_grad: bool = True
) -> tuple[np.ndarray | None, np.ndarray, np.ndarray]:
    """Gradients of :func:`conv2d_forward` w.r.t. input, weight and bias."""
    n, c_in, h, w = x.shape
    c_out, _, k, _ = weight.shape
    if grad_out.shape != (n, c_out, h, w):
        raise ValueError(f"grad_out shape {grad_out.shape} does not match conv output")
    w2 = weight.reshape(c_out, -1)
    grad_b = grad_out.sum(axis=(0, 2, 3))
    if k == 1:
        g = grad_out.reshape(n, c_out, h * w)
        xs = x.reshape(n, c_in, h * w)
        grad_w = np.matmul(g, xs.transpose(0, 2, 1)).sum(axis=0).reshape(weight.shape)
        grad_x = np.matmul(w2.T, g).reshape(x.shape) if need_input_grad else None
        return grad_x, grad_w, grad_b
    p = (k - 1) // 2
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    grad_w = np.zeros_like(w2)
    grad_xp = np.zeros_like(xp) if need_input_grad else None
    for r0, r1 in _row_bands(n, c_in * k * k, h, w):
        cols = _im2col(xp, k, r0, r1, w)
        g = np.ascontiguousarray(grad_out[:, :, r0:r1]).reshape(n, c_out, -1)
        grad_w += np.matmul(g, cols.transpose(0, 2, 1)).sum(axis=0)
        if need_input_grad:
            gcols = np.matmul(w2.T, g).reshape(n, c_in, k, k, r1 - r0, w)
            for dy in range(k):
                for dx in range(k):
                    grad_xp[:, :, r0 + dy : r1 + dy, dx : dx + w] += gcols[:, :, dy, dx]
    grad_x = grad_xp[:, :, p : p + h, p : p + w] if need_input_grad else None
    return grad_x, grad_w.reshape(weight.shape), grad_b


# ---------------------------------------------------------- batch normalization


def batchnorm_forward(
    x: np.ndarray,
    gamma: np.ndarray,
    beta: np.ndarray,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = BN_MOMENTUM,
    eps: float = BN_EPSILON,
) -> tuple[np.ndarray, tuple]:
    """Per-channel normalization; updates the running statistics in place when training."""
    if x.shape[1] != gamma.shape[0]:
        raise ValueError(f"batchnorm has {gamma.shape[0]} channels, input has {x.shape[1]}")
    m = x.shape[0] * x.shape[2] * x.shape[3]
    if m == 0:
        raise ValueError("batchnorm over an empty batch/spatial extent")
    if training:
        mean = x.mean(axis=(0, 2, 3))
        centered = x - mean[None, :, None, None]
        var = (centered * centered).mean(axis=(0, 2, 3))
        unbiased = var * (m / (m - 1)) if m > 1 else var
        running_mean *= 1.0 - momentum
        running_mean += momentum * mean
        running_var *= 1.0 - momentum
        running_var += momentum * unbiased
    else:
        centered = x - running_mean[None, :, None, None]
        var = running_var
    inv_std = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    xhat = centered * inv_std[None, :, None, None]
    out = xhat * gamma[None, :, None, None] + beta[None, :, None, None]
    return out, (xhat, inv_std, gamma, training)


def batchnorm_backward(grad_out: np.ndarray, cache: tuple):
    xhat, inv_std, gamma, training = cache
    grad_gamma = (grad_out * xhat).sum(axis=(0, 2, 3))
    grad_beta = grad_out.sum(axis=(0, 2, 3))
    scale = (gamma * inv_std)[None, :, None, None]
    if not training:
        return grad_out * scale, grad_gamma, grad_beta
    m = grad_out.shape[0] * grad_out.shape[2] * grad_out.shape[3]
    grad_x = scale / m * (
        m * grad_out
        - grad_beta[None, :, None, None]
        - xhat * grad_gamma[None, :, None, None]
    )
    return grad_x, grad_gamma, grad_beta


# ------------------------------------------------------------ pointwise layers


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def relu_backward(x: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    return np.where(x > 0, grad_out, 0).astype(grad_out.dtype)


def sigmoid(x: np.ndarray) -> np.ndarray:
    return expit(x)


def sigmoid_backward(s: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    return grad_out * s * (1 - s)


def dropout_mask(
    shape: tuple[int, ...], rate: float, seed: int, layer_id: int, iteration: int, dtype
) -> np.ndarray:
    """Inverted-dropout multiplier, a pure function of (seed, layer, iteration)."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")
    rng = np.random.default_rng([seed, _DROPOUT_STREAM, layer_id, iteration])
    keep = rng.random(shape) >= rate
    return keep.astype(dtype) * np.asarray(1.0 / (1.0 - rate), dtype=dtype)


# ---------------------------------------------------------------- max pooling


def maxpool2x2(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Non-overlapping 2x2 max-pool; trailing odd row/column is dropped.

    Returns the pooled map and, per output cell, the index (0..3, row-major)
    of the winning window element. Ties go to the first element.
    """
    n, c, h, w = x.shape
    if h < 2 or w < 2:
        raise ValueError(f"maxpool2x2 needs h, w >= 2, got {h}x{w}")
    h2, w2 = h // 2, w // 2
    win = (
        x[:, :, : 2 * h2, : 2 * w2]
        .reshape(n, c, h2, 2, w2, 2)
        .transpose(0, 1, 2, 4, 3, 5)
        .reshape(n, c, h2, w2, 4)
    )
    idx = win.argmax(axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
    return out, idx


def maxpool2x2_backward(
    grad_out: np.ndarray, idx: np.ndarray, in_shape: tuple[int, ...]
) -> np.ndarray:
    n, c, h, w = in_shape
    h2, w2 = grad_out.shape[2:]
    win = np.zeros((n, c, h2, w2, 4), dtype=grad_out.dtype)
    np.put_along_axis(win, idx[..., None], grad_out[..., None], axis=-1)
    grad = np.zeros(in_shape, dtype=grad_out.dtype)
    grad[:, :, : 2 * h2, : 2 * w2] = (
        win.reshape(n, c, h2, w2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, 2 * h2, 2 * w2)
    )
    return grad


# -------------------------------------------------------- bilinear upsampling


@functools.lru_cache(maxsize=256)
def interpolation_matrix(n_in: int, n_out: int, dtype_name: str = "float32") -> np.ndarray:
    """Align-corners 1-D linear interpolation weights, shape ``(n_out, n_in)``.

    The returned array is read-only: these are the fixed upsampling kernels.
    Shrinking (``n_out < n_in``) is allowed and samples at the same positions.
    """
    a = np.zeros((n_out, n_in), dtype=np.float64)
    if n_in == 1 or n_out == 1:
        a[:, 0] = 1.0
    else:
        src = np.arange(n_out) * (n_in - 1) / (n_out - 1)
        i0 = np.minimum(np.floor(src).astype(int), n_in - 1)
        i1 = np.minimum(i0 + 1, n_in - 1)
        frac = src - i0
        rows = np.arange(n_out)
        np.add.at(a, (rows, i0), 1.0 - frac)
        np.add.at(a, (rows, i1), frac)
    a = a.astype(dtype_name)
    a.flags.writeable = False
    return a


def bilinear_upsample(x: np.ndarray, target_hw: tuple[int, int]) -> np.ndarray:
    h, w = x.shape[2:]
    th, tw = target_hw
    if th < h or tw < w:
        raise ValueError(f"upsample target {target_hw} smaller than input {(h, w)}")
    if (th, tw) == (h, w):
        return x.copy()
    ah = interpolation_matrix(h, th, x.dtype.name)
    aw = interpolation_matrix(w, tw, x.dtype.name)
    return np.matmul(np.matmul(ah, x), aw.T)


def bilinear_backward(grad_out: np.ndarray, in_hw: tuple[int, int]) -> np.ndarray:
    th, tw = grad_out.shape[2:]
    h, w = in_hw
    if (th, tw) == (h, w):
        return grad_out.copy()
    ah = interpolation_matrix(h, th, grad_out.dtype.name)
    aw = interpolation_matrix(w, tw, grad_out.dtype.name)
    return np.matmul(np.matmul(ah.T, grad_out), aw)


# --------------------------------------------------------------- layer objects


class Layer:
    training = True

    def params(self) -> dict[str, Tensor]:
        return {}

    def buffers(self) -> dict[str, np.ndarray]:
        return {}


class Conv2d(Layer):
    def __init__(self, c_in: int, c_out: int, k: int = 3, dtype=np.float32):
        self.weight = Tensor(np.zeros((c_out, c_in, k, k), dtype=dtype))
        self.bias = Tensor(np.zeros(c_out, dtype=dtype))
        self._x = None

    @property
    def c_in(self) -> int:
        return self.weight.shape[1]

    @property
    def c_out(self) -> int:
        return self.weight.shape[0]

    def init_he(self, rng: np.random.Generator) -> None:
        c_out, c_in, k, _ = self.weight.shape
        std = np.sqrt(2.0 / (c_in * k * k))
        self.weight.data[...] = rng.standard_normal(self.weight.shape) * std
        self.bias.data[...] = 0

    def params(self):
        return {"weight": self.weight, "bias": self.bias}

    def forward(self, x):
        if self.training:
            self._x = x
        return conv2d_forward(x, self.weight.data, self.bias.data)

    def backward(self, grad_out, need_input_grad=True):
        gx, gw, gb = conv2d_backward(self._x, self.weight.data, grad_out, need_input_grad)
        self.weight.grad = gw
        self.bias.grad = gb
        return gx


class BatchNorm2d(Layer):
    def __init__(self, c: int, dtype=np.float32, momentum=BN_MOMENTUM, eps=BN_EPSILON):
        self.gamma = Tensor(np.ones(c, dtype=dtype))
        self.beta = Tensor(np.zeros(c, dtype=dtype))
        self.running_mean = np.zeros(c, dtype=dtype)
        self.running_var = np.ones(c, dtype=dtype)
        self.momentum = momentum
        self.eps = eps
        self._cache = None

    def params(self):
        return {"gamma": self.gamma, "beta": self.beta}

    def buffers(self):
        return {"running_mean": self.running_mean, "running_var": self.running_var}

    def forward(self, x):
        out, cache = batchnorm_forward(
            x, self.gamma.data, self.beta.data, self.running_mean, self.running_var,
            self.training, self.momentum, self.eps,
        )
        if self.training:
            self._cache = cache
        return out

    def backward(self, grad_out):
        gx, gg, gb = batchnorm_backward(grad_out, self._cache)
        self.gamma.grad = gg
        self.beta.grad = gb
        return gx


class ReLU(Layer):
    def forward(self, x):
        if self.training:
            self._x = x
        return relu(x)

    def backward(self, grad_out):
        return relu_backward(self._x, grad_out)


class Sigmoid(Layer):
    def forward(self, x):
        s = sigmoid(x)
        if self.training:
            self._s = s
        return s

    def backward(self, grad_out):
        return sigmoid_backward(self._s, grad_out)


class MaxPool2x2(Layer):
    def forward(self, x):
        out, idx = maxpool2x2(x)
        if self.training:
            self._idx, self._shape = idx, x.shape
        return out

    def backward(self, grad_out):
        return maxpool2x2_backward(grad_out, self._idx, self._shape)


class Upsample(Layer):
    """Fixed (non-trainable) bilinear resize to an explicit target size."""

    def forward(self, x, target_hw):
        if self.training:
            self._in_hw = x.shape[2:]
            self._shapes = (tuple(x.shape[2:]), tuple(target_hw))
        return bilinear_upsample(x, target_hw)

    def backward(self, grad_out):
        return bilinear_backward(grad_out, self._in_hw)


class Dropout(Layer):
    def __init__(self, rate: float, layer_id: int, seed: int = 0):
        if not 0.0 <= rate < 1.0:
            raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")
        self.rate = rate
        self.layer_id = layer_id
        self.seed = seed
        self.iteration = 0
        self._mask = None

    def forward(self, x):
        if not self.training or self.rate == 0.0:
            self._mask = None
            return x
        self._mask = dropout_mask(x.shape, self.rate, self.seed, self.layer_id, self.iteration, x.dtype)
        return x * self._mask

    def backward(self, grad_out):
        if self._mask is None:
            return grad_out
        return grad_out * self._mask
