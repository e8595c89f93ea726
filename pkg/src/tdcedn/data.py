"""Image/label ingestion, annotator consensus, resizing, augmentation and sample order.

Images and labels are read from portable pixmap files (PGM/PPM, ASCII or
binary, 8 or 16 bit). Ground-truth consensus is applied to the original
annotations first and the result is resized afterwards.
"""
from __future__ import annotations

import enum
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .layers import interpolation_matrix

_AUGMENT_STREAM = 3
_SHUFFLE_STREAM = 4

TRAIN_SIZE = 400


class PNMError(ValueError):
    pass


# ------------------------------------------------------------------ PNM files


def _tokens(blob: bytes, count: int) -> tuple[list[int], int]:
    """Read ``count`` whitespace-separated header integers; returns them and the offset after."""
    out, pos = [], 0
    while len(out) < count:
        while pos < len(blob) and blob[pos : pos + 1].isspace():
            pos += 1
        if pos >= len(blob):
            raise PNMError("truncated header")
        if blob[pos : pos + 1] == b"#":
            while pos < len(blob) and blob[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(blob) and not blob[pos : pos + 1].isspace() and blob[pos : pos + 1] != b"#":
            pos += 1
        try:
            out.append(int(blob[start:pos]))
        except ValueError:
            raise PNMError(f"bad header token {blob[start:pos]!r}") from None
    return out, pos


def read_pnm(path) -> tuple[np.ndarray, int]:
    """Read a PGM/PPM file; returns ``(array, maxval)`` with shape (H, W) or (H, W, 3)."""
    path = Path(path)
    try:
        blob = path.read_bytes()
        magic = blob[:2]
        if magic not in (b"P2", b"P3", b"P5", b"P6"):
            raise PNMError(f"unsupported magic {magic!r}")
        (w, h, maxval), pos = _tokens(blob[2:], 3)
        pos += 2
        if w < 1 or h < 1:
            raise PNMError(f"zero dimension {w}x{h}")
        if not 0 < maxval < 65536:
            raise PNMError(f"bad maxval {maxval}")
        channels = 3 if magic in (b"P3", b"P6") else 1
        count = w * h * channels
        if magic in (b"P2", b"P3"):
            vals, _ = _tokens(blob[pos:], count)
            arr = np.asarray(vals, dtype=np.int64)
        else:
            pos += 1  # single whitespace byte before the raster
            dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
            raster = blob[pos : pos + count * dtype.itemsize]
            if len(raster) < count * dtype.itemsize:
                raise PNMError("truncated raster")
            arr = np.frombuffer(raster, dtype=dtype).astype(np.int64)
        if arr.max(initial=0) > maxval:
            raise PNMError("sample exceeds maxval")
    except (PNMError, OSError) as exc:
        raise PNMError(f"{path}: {exc}") from None
    shape = (h, w, 3) if channels == 3 else (h, w)
    return arr.reshape(shape), maxval


def write_pnm(path, arr: np.ndarray, maxval: int = 255) -> None:
    """Write a binary PGM (2-D) or PPM (H, W, 3) file."""
    arr = np.asarray(arr)
    if arr.ndim == 2:
        magic = b"P5"
    elif arr.ndim == 3 and arr.shape[2] == 3:
        magic = b"P6"
    else:
        raise ValueError(f"cannot write array of shape {arr.shape} as PNM")
    if arr.min(initial=0) < 0 or arr.max(initial=0) > maxval:
        raise ValueError(f"values outside [0, {maxval}]")
    dtype = ">u2" if maxval > 255 else "u1"
    h, w = arr.shape[:2]
    header = magic + f"\n{w} {h}\n{maxval}\n".encode("ascii")
    Path(path).write_bytes(header + arr.astype(dtype).tobytes())


def load_image(path) -> np.ndarray:
    """(3, H, W) float32 in [0, 1]; grayscale files are replicated to three channels."""
    arr, maxval = read_pnm(path)
    img = arr.astype(np.float32) / np.float32(maxval)
    if img.ndim == 2:
        return np.repeat(img[None], 3, axis=0)
    return np.ascontiguousarray(img.transpose(2, 0, 1))


def load_gt(path) -> np.ndarray:
    """(H, W) uint8 binary map: 1 where the sample is at least half of maxval."""
    arr, maxval = read_pnm(path)
    if arr.ndim == 3:
        arr = arr.max(axis=2)
    return (arr * 2 >= maxval).astype(np.uint8)


# -------------------------------------------------------------------- samples


@dataclass
class Sample:
    image: np.ndarray
    gt_annotations: list
    id: str = ""

    def __post_init__(self):
        self.image = np.asarray(self.image, dtype=np.float32)
        if self.image.ndim != 3 or self.image.shape[0] != 3:
            raise ValueError(f"sample image must be (3, H, W), got {self.image.shape}")
        if not self.gt_annotations:
            raise ValueError(f"sample {self.id!r} has no annotations")
        self.gt_annotations = [np.asarray(a, dtype=np.uint8) for a in self.gt_annotations]
        for a in self.gt_annotations:
            if a.shape != self.image.shape[1:]:
                raise ValueError(f"annotation {a.shape} does not match image {self.image.shape[1:]}")

    @property
    def hw(self) -> tuple[int, int]:
        return self.image.shape[1], self.image.shape[2]


class ConsensusMode(enum.Enum):
    OVER3 = "over3"
    ALL = "all"


@dataclass(frozen=True)
class ConsensusPolicy:
    mode: ConsensusMode = ConsensusMode.OVER3
    threshold: int = 3

    def __post_init__(self):
        if self.threshold < 1:
            raise ValueError("consensus threshold must be >= 1")

    @classmethod
    def parse(cls, value) -> "ConsensusPolicy":
        if isinstance(value, ConsensusPolicy):
            return value
        return cls(ConsensusMode(str(value).lower()))


def consensus(annotations: Sequence[np.ndarray], policy=ConsensusPolicy()) -> np.ndarray:
    """Merge annotator maps: ``over3`` needs ``threshold`` votes, ``all`` is the union."""
    policy = ConsensusPolicy.parse(policy)
    if len(annotations) == 0:
        raise ValueError("no annotations to merge")
    maps = [np.asarray(a) for a in annotations]
    if any(m.shape != maps[0].shape for m in maps):
        raise ValueError("annotation maps differ in size")
    votes = np.sum([m > 0 for m in maps], axis=0)
    need = policy.threshold if policy.mode is ConsensusMode.OVER3 else 1
    return (votes >= need).astype(np.uint8)


def resize_image(image: np.ndarray, hw: tuple[int, int]) -> np.ndarray:
    """Align-corners bilinear resize of a (C, H, W) array (grows or shrinks)."""
    h, w = image.shape[-2:]
    if (h, w) == tuple(hw):
        return image.copy()
    ah = interpolation_matrix(h, hw[0], "float64")
    aw = interpolation_matrix(w, hw[1], "float64")
    return (ah @ image.astype(np.float64) @ aw.T).astype(image.dtype)


def resize_labels(gt: np.ndarray, hw: tuple[int, int]) -> np.ndarray:
    """Nearest-neighbour resize of a (H, W) label map; keeps values binary."""
    h, w = gt.shape
    if (h, w) == tuple(hw):
        return gt.copy()

    def src(n_in, n_out):
        if n_out == 1:
            return np.zeros(1, dtype=int)
        return np.rint(np.arange(n_out) * (n_in - 1) / (n_out - 1)).astype(int)

    return gt[np.ix_(src(h, hw[0]), src(w, hw[1]))]


def resize_sample(s: Sample, h: int = TRAIN_SIZE, w: int = TRAIN_SIZE) -> Sample:
    if h < 1 or w < 1:
        raise ValueError("target size must be positive")
    return Sample(
        resize_image(s.image, (h, w)),
        [resize_labels(a, (h, w)) for a in s.gt_annotations],
        s.id,
    )


# --------------------------------------------------------------- augmentation


@dataclass(frozen=True)
class AugmentSpec:
    rotations: tuple[int, ...] = (0, 90, 180, 270)
    horizontal_flip: bool = True
    rng_seed: int = 0

    def __post_init__(self):
        rot = tuple(int(r) for r in self.rotations)
        object.__setattr__(self, "rotations", rot)
        if 0 not in rot:
            raise ValueError("rotations must include 0")
        if not set(rot) <= {0, 90, 180, 270}:
            raise ValueError(f"rotations must be right angles, got {rot}")

    def transforms(self) -> list[tuple[int, bool]]:
        flips = (False, True) if self.horizontal_flip else (False,)
        return [(r, f) for r in self.rotations for f in flips]


def apply_transform(s: Sample, rotation: int, flip: bool) -> Sample:
    """Horizontal flip (optional) followed by a counter-clockwise rotation."""
    k = (rotation // 90) % 4
    img, gts = s.image, s.gt_annotations
    if flip:
        img = img[:, :, ::-1]
        gts = [g[:, ::-1] for g in gts]
    img = np.rot90(img, k, axes=(1, 2))
    gts = [np.rot90(g, k) for g in gts]
    return Sample(np.ascontiguousarray(img), [np.ascontiguousarray(g) for g in gts], s.id)


def augment(s: Sample, spec: AugmentSpec, iteration: int) -> Sample:
    choices = spec.transforms()
    rng = np.random.default_rng([spec.rng_seed, _AUGMENT_STREAM, int(iteration)])
    rotation, flip = choices[int(rng.integers(len(choices)))]
    return apply_transform(s, rotation, flip)


# ------------------------------------------------------------------ iteration


def epoch_order(n: int, seed: int, epoch: int) -> np.ndarray:
    if n < 1:
        raise ValueError("empty dataset")
    return np.random.default_rng([seed, _SHUFFLE_STREAM, int(epoch)]).permutation(n)


def sample_index(n: int, seed: int, iteration: int) -> int:
    """Dataset index visited at a global iteration (epochs are seeded permutations)."""
    epoch, pos = divmod(int(iteration), n)
    return int(epoch_order(n, seed, epoch)[pos])


def epoch_iterator(dataset: Sequence, seed: int, start: int = 0) -> Iterator:
    """Endless stream of samples; each consecutive block of ``len(dataset)`` is one epoch."""
    n = len(dataset)
    if n == 0:
        raise ValueError("empty dataset")
    it = int(start)
    while True:
        epoch, pos = divmod(it, n)
        order = epoch_order(n, seed, epoch)
        for i in order[pos:]:
            yield dataset[int(i)]
        it = (epoch + 1) * n


# ------------------------------------------------------------------- manifests


@dataclass
class ManifestEntry:
    id: str
    image_path: Path
    gt_paths: list = field(default_factory=list)


def read_manifest(path, require_gt: bool = True) -> list[ManifestEntry]:
    """Parse ``<id> <image-path> <gt1>[,<gt2>...]`` lines; paths are relative to the manifest."""
    path = Path(path)
    base = path.parent
    entries = []
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) not in (2, 3) or (require_gt and len(parts) != 3):
            raise ValueError(f"{path}:{lineno}: expected '<id> <image> <gt,...>'")
        gts = [base / p for p in parts[2].split(",") if p] if len(parts) == 3 else []
        entries.append(ManifestEntry(parts[0], base / parts[1], gts))
    if not entries:
        raise ValueError(f"{path}: manifest has no entries")
    return entries


def load_sample(entry: ManifestEntry) -> Sample:
    return Sample(load_image(entry.image_path), [load_gt(p) for p in entry.gt_paths], entry.id)


def load_dataset(manifest) -> list[Sample]:
    return [load_sample(e) for e in read_manifest(manifest)]


# ------------------------------------------------------------ synthetic data


def mask_outline(mask: np.ndarray) -> np.ndarray:
    """Inner boundary of a binary region: mask pixels with a 4-neighbour outside it."""
    m = np.pad(mask.astype(bool), 1, mode="edge")
    inner = m[1:-1, 1:-1]
    interior = inner & m[:-2, 1:-1] & m[2:, 1:-1] & m[1:-1, :-2] & m[1:-1, 2:]
    return (inner & ~interior).astype(np.uint8)


def _shape_mask(kind: str, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    c = (size - 1) / 2.0
    if kind == "disk":
        return (yy - c) ** 2 + (xx - c) ** 2 <= (0.3 * size) ** 2
    if kind == "square":
        half = 0.25 * size
        return (np.abs(yy - c) <= half) & (np.abs(xx - c) <= half)
    if kind == "ridge":
        return np.abs((yy - c) - 0.5 * (xx - c)) <= 0.12 * size
    raise ValueError(f"unknown synthetic shape {kind!r}")


def synthetic_sample(kind: str = "disk", size: int = 64, noise: float = 0.0, seed: int = 0) -> Sample:
    """Dark shape on a light ground with its exact outline as the only annotation."""
    mask = _shape_mask(kind, size)
    img = np.where(mask, 0.2, 0.8)
    if noise > 0:
        img = img + np.random.default_rng(seed).normal(0, noise, img.shape)
    img = np.clip(img, 0, 1).astype(np.float32)
    return Sample(np.repeat(img[None], 3, axis=0), [mask_outline(mask)], kind)


def generate_synthetic(out_dir, size: int = 64, seed: int = 0) -> Path:
    """Write the three-image disk/square/ridge set with four annotators each.

    Three annotators trace the exact outline; the fourth also marks a
    spurious inner contour and misses a stretch of the true one, so the
    ``over3`` and ``all`` consensus maps differ. Returns the manifest path.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    lines = ["# id image annotations"]
    for i, kind in enumerate(("disk", "square", "ridge")):
        s = synthetic_sample(kind, size, noise=0.03, seed=seed + i)
        outline = s.gt_annotations[0]
        mask = _shape_mask(kind, size)
        inner = mask_outline(_erode(mask, max(2, size // 10)))
        odd = outline.copy()
        odd[: size // 4] = 0
        odd |= inner
        img8 = np.rint(s.image.transpose(1, 2, 0) * 255).astype(np.uint8)
        write_pnm(out / f"{kind}.ppm", img8)
        names = []
        for a, ann in enumerate((outline, outline, outline, odd)):
            name = f"{kind}_gt{a}.pgm"
            write_pnm(out / name, ann * 255)
            names.append(name)
        lines.append(f"{kind} {kind}.ppm {','.join(names)}")
    manifest = out / "manifest.txt"
    manifest.write_text(os.linesep.join(lines) + os.linesep)
    return manifest


def _erode(mask: np.ndarray, steps: int) -> np.ndarray:
    m = mask.astype(bool)
    for _ in range(steps):
        p = np.pad(m, 1)
        m = m & p[:-2, 1:-1] & p[2:, 1:-1] & p[1:-1, :-2] & p[1:-1, 2:]
    return m
