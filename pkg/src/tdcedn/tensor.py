"""Dense NCHW arrays with an optional gradient buffer.

Layers work directly on ``numpy.ndarray``; :class:`Tensor` is the value type
used wherever data and its gradient travel together (the parameter registry,
the public construction helpers).
"""
from __future__ import annotations

import enum
from typing import Sequence

import numpy as np


class Precision(enum.Enum):
    F32 = "f32"
    F64 = "f64"

    @property
    def dtype(self) -> np.dtype:
        return np.dtype(np.float32) if self is Precision.F32 else np.dtype(np.float64)

    @property
    def tag(self) -> int:
        return 0 if self is Precision.F32 else 1

    @classmethod
    def from_tag(cls, tag: int) -> "Precision":
        if tag == 0:
            return cls.F32
        if tag == 1:
            return cls.F64
        raise ValueError(f"unknown precision tag {tag}")

    @classmethod
    def coerce(cls, value: "Precision | str | np.dtype | type") -> "Precision":
        if isinstance(value, Precision):
            return value
        if isinstance(value, str) and value.lower() in ("f32", "f64"):
            return cls(value.lower())
        dt = np.dtype(value)
        if dt == np.float32:
            return cls.F32
        if dt == np.float64:
            return cls.F64
        raise ValueError(f"unsupported precision {value!r}")


class Tensor:
    """A contiguous floating-point array plus an optional same-shape gradient."""

    __slots__ = ("data", "grad")

    def __init__(self, data: np.ndarray, grad: np.ndarray | None = None):
        data = np.ascontiguousarray(data)
        if data.dtype not in (np.float32, np.float64):
            raise TypeError(f"tensor data must be float32 or float64, got {data.dtype}")
        if data.ndim == 0 or min(data.shape) < 1:
            raise ValueError(f"all tensor dimensions must be >= 1, got {data.shape}")
        if grad is not None and grad.shape != data.shape:
            raise ValueError(f"grad shape {grad.shape} != data shape {data.shape}")
        self.data = data
        self.grad = grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def precision(self) -> Precision:
        return Precision.coerce(self.data.dtype)

    @property
    def n(self) -> int:
        return self.data.shape[0]

    @property
    def c(self) -> int:
        return self.data.shape[1]

    @property
    def h(self) -> int:
        return self.data.shape[2]

    @property
    def w(self) -> int:
        return self.data.shape[3]

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def values(self) -> list[float]:
        return self.data.ravel().tolist()

    def __repr__(self) -> str:
        g = "" if self.grad is None else ", grad"
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{g})"


def _check_shape(shape: Sequence[int]) -> tuple[int, ...]:
    shape = tuple(int(s) for s in shape)
    if not shape or min(shape) < 1:
        raise ValueError(f"shape dims must be >= 1, got {shape}")
    return shape


def zeros(shape: Sequence[int], precision: Precision = Precision.F32) -> Tensor:
    return Tensor(np.zeros(_check_shape(shape), dtype=precision.dtype))


def ones(shape: Sequence[int], precision: Precision = Precision.F32) -> Tensor:
    return Tensor(np.ones(_check_shape(shape), dtype=precision.dtype))


def from_values(
    shape: Sequence[int], values: Sequence[float], precision: Precision = Precision.F32
) -> Tensor:
    shape = _check_shape(shape)
    arr = np.asarray(values, dtype=precision.dtype).ravel()
    if arr.size != int(np.prod(shape)):
        raise ValueError(f"{arr.size} values cannot fill shape {shape}")
    return Tensor(arr.reshape(shape).copy())


def _operand(b, like: Tensor) -> np.ndarray | float:
    if isinstance(b, Tensor):
        if b.shape != like.shape:
            raise ValueError(f"shape mismatch: {like.shape} vs {b.shape}")
        return b.data
    return float(b)


def elementwise(op: str, a: Tensor, b=None, hi: float | None = None) -> Tensor:
    """Entrywise ``add``/``sub``/``mul`` (tensor or scalar), ``scale`` and ``clamp``.

    ``clamp`` takes the lower bound as ``b`` and the upper bound as ``hi``.
    The result is a fresh tensor without gradient; inputs are left untouched.
    """
    if op == "add":
        out = a.data + _operand(b, a)
    elif op == "sub":
        out = a.data - _operand(b, a)
    elif op == "mul":
        out = a.data * _operand(b, a)
    elif op == "scale":
        if isinstance(b, Tensor):
            raise TypeError("scale takes a scalar factor")
        out = a.data * float(b)
    elif op == "clamp":
        if hi is None or b is None:
            raise TypeError("clamp needs lower and upper bounds")
        out = np.clip(a.data, float(b), float(hi))
    else:
        raise ValueError(f"unknown elementwise op {op!r}")
    return Tensor(np.asarray(out, dtype=a.data.dtype))


def concat_channels(a, b):
    """Stack ``a`` then ``b`` along the channel axis of two NCHW arrays.

    Accepts ndarrays or :class:`Tensor` objects and returns the same kind.
    """
    if isinstance(a, Tensor) and isinstance(b, Tensor):
        return Tensor(concat_channels(a.data, b.data))
    if a.ndim != 4 or b.ndim != 4:
        raise ValueError("concat_channels expects NCHW arrays")
    if (a.shape[0], a.shape[2], a.shape[3]) != (b.shape[0], b.shape[2], b.shape[3]):
        raise ValueError(f"cannot concat {a.shape} and {b.shape}: n/h/w differ")
    return np.concatenate([a, b], axis=1)


def split_channels(grad: np.ndarray, c_a: int) -> tuple[np.ndarray, np.ndarray]:
    """Backward of :func:`concat_channels`: split the upstream gradient in two."""
    return grad[:, :c_a], grad[:, c_a:]
