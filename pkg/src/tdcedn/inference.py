"""Test-time prediction with border extension, two-model fusion and map export."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import load_image, read_pnm, write_pnm
from .network import MIN_INPUT_SIZE, TDCEDN

BORDER_PX = 10
PGM16_MAX = 65535


@dataclass
class FusionConfig:
    gamma: float = 0.5

    def __post_init__(self):
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError(f"gamma must lie in [0, 1], got {self.gamma}")


def predict(graph: TDCEDN, image: np.ndarray, border_px: int = BORDER_PX) -> np.ndarray:
    """Probability-of-contour map ``(H, W)`` for one ``(3, H, W)`` image.

    The image is padded by edge replication, run through the graph in
    inference mode and the padding cropped away again. Images smaller than
    the network minimum are padded further and cropped the same way.
    """
    if border_px < 0:
        raise ValueError("border_px must be non-negative")
    image = np.asarray(image)
    if image.ndim != 3:
        raise ValueError(f"expected a (C, H, W) image, got {image.shape}")
    _, h, w = image.shape
    extra_h = max(0, MIN_INPUT_SIZE - (h + 2 * border_px))
    extra_w = max(0, MIN_INPUT_SIZE - (w + 2 * border_px))
    top, left = border_px + extra_h // 2, border_px + extra_w // 2
    bottom, right = border_px + extra_h - extra_h // 2, border_px + extra_w - extra_w // 2
    padded = np.pad(image, ((0, 0), (top, bottom), (left, right)), mode="edge")
    prob = graph.predict(padded[None])[0, 0]
    return np.ascontiguousarray(prob[top : top + h, left : left + w])


def fuse(a: np.ndarray, b: np.ndarray, cfg: FusionConfig | None = None) -> np.ndarray:
    """``gamma * a + (1 - gamma) * b``; ``a`` is the over3 map, ``b`` the all-labels map.

    The endpoints return the selected map unchanged.
    """
    cfg = cfg or FusionConfig()
    a, b = np.asarray(a), np.asarray(b)
    if a.shape != b.shape:
        raise ValueError(f"cannot fuse maps of shape {a.shape} and {b.shape}")
    if cfg.gamma == 1.0:
        return a.copy()
    if cfg.gamma == 0.0:
        return b.copy()
    return cfg.gamma * a + (1.0 - cfg.gamma) * b


def export_probmap(prob: np.ndarray, path) -> None:
    """Write a ``[0, 1]`` map as a 16-bit PGM with ``round(p * 65535)``."""
    prob = np.asarray(prob, dtype=np.float64)
    if prob.ndim != 2:
        raise ValueError(f"probability map must be 2-D, got {prob.shape}")
    if np.any(~np.isfinite(prob)) or prob.min() < 0 or prob.max() > 1:
        raise ValueError("probability map values must lie in [0, 1]")
    write_pnm(path, np.rint(prob * PGM16_MAX).astype(np.uint16), maxval=PGM16_MAX)


def import_probmap(path) -> np.ndarray:
    arr, maxval = read_pnm(path)
    if arr.ndim != 2:
        raise ValueError(f"{path}: probability maps must be grayscale")
    return arr.astype(np.float64) / maxval


def predict_dir(graph: TDCEDN, entries, out_dir, border_px: int = BORDER_PX) -> list[Path]:
    """Predict every manifest entry and write ``<out_dir>/<id>.pgm``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for e in entries:
        prob = predict(graph, load_image(e.image_path), border_px)
        path = out / f"{e.id}.pgm"
        export_probmap(prob, path)
        written.append(path)
    return written


def fuse_dirs(dir_a, dir_b, out_dir, cfg: FusionConfig | None = None) -> list[Path]:
    """Fuse same-named maps from two prediction directories."""
    dir_a, dir_b, out = Path(dir_a), Path(dir_b), Path(out_dir)
    names_a = sorted(p.name for p in dir_a.glob("*.pgm"))
    names_b = sorted(p.name for p in dir_b.glob("*.pgm"))
    if names_a != names_b:
        raise ValueError(f"prediction sets differ: {sorted(set(names_a) ^ set(names_b))[:5]}")
    if not names_a:
        raise ValueError(f"no .pgm maps in {dir_a}")
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for name in names_a:
        fused = fuse(import_probmap(dir_a / name), import_probmap(dir_b / name), cfg)
        export_probmap(fused, out / name)
        written.append(out / name)
    return written
