"""Input checks shared by the estimator API and the CLI."""
from __future__ import annotations

from typing import Sequence

import numpy as np


def check_image(image, name: str = "image") -> np.ndarray:
    """Return a ``(3, H, W)`` float32 image in ``[0, 1]``.

    Grayscale ``(H, W)`` or ``(1, H, W)`` inputs are replicated to three channels.
    """
    arr = np.asarray(image)
    if arr.dtype == object or not np.issubdtype(arr.dtype, np.number):
        raise TypeError(f"{name} must be numeric, got dtype {arr.dtype}")
    if arr.ndim == 2:
        arr = arr[None]
    if arr.ndim != 3 or arr.shape[0] not in (1, 3):
        raise ValueError(f"{name} must have shape (3, H, W) or (H, W), got {arr.shape}")
    if arr.shape[0] == 1:
        arr = np.repeat(arr, 3, axis=0)
    if min(arr.shape[1:]) < 1:
        raise ValueError(f"{name} is empty")
    arr = arr.astype(np.float32)
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    if arr.min() < 0 or arr.max() > 1:
        raise ValueError(f"{name} values must lie in [0, 1]")
    return arr


def check_images(X) -> list[np.ndarray]:
    """Accept an ``(n, 3, H, W)`` array or a sequence of images of any size."""
    if isinstance(X, np.ndarray) and X.ndim == 4:
        X = list(X)
    if isinstance(X, np.ndarray) and X.ndim in (2, 3):
        raise ValueError("expected a collection of images; wrap a single image in a list")
    if len(X) == 0:
        raise ValueError("no images given")
    return [check_image(x, f"image {i}") for i, x in enumerate(X)]


def check_binary_map(gt, name: str = "ground truth") -> np.ndarray:
    arr = np.asarray(gt)
    if arr.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got {arr.shape}")
    if not np.all(np.isin(arr, (0, 1))):
        raise ValueError(f"{name} must be binary (0/1)")
    return arr.astype(np.uint8)


def check_annotations(y_i, name: str = "annotations") -> list[np.ndarray]:
    """One 2-D binary map or a sequence of them (one per annotator)."""
    arr = np.asarray(y_i) if not isinstance(y_i, (list, tuple)) else None
    if arr is not None and arr.ndim == 2:
        return [check_binary_map(arr, name)]
    maps = list(y_i)
    if not maps:
        raise ValueError(f"{name}: need at least one map")
    out = [check_binary_map(m, f"{name}[{j}]") for j, m in enumerate(maps)]
    if len({m.shape for m in out}) != 1:
        raise ValueError(f"{name}: annotator maps differ in size")
    return out


def check_prob_map(prob, name: str = "probability map") -> np.ndarray:
    arr = np.asarray(prob, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got {arr.shape}")
    if not np.all(np.isfinite(arr)) or arr.min() < 0 or arr.max() > 1:
        raise ValueError(f"{name} values must be finite and lie in [0, 1]")
    return arr


def check_same_length(a: Sequence, b: Sequence, what: str = "inputs") -> None:
    if len(a) != len(b):
        raise ValueError(f"{what} have inconsistent lengths {len(a)} and {len(b)}")


def check_same_shape(a: np.ndarray, b: np.ndarray, what: str = "maps") -> None:
    if np.shape(a) != np.shape(b):
        raise ValueError(f"{what} differ in shape: {np.shape(a)} vs {np.shape(b)}")
