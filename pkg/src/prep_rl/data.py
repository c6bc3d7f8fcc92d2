"""Datasets: IDX (MNIST format) files, synthetic orientation-sensitive glyphs,
splits and the random-distortion harness."""
from __future__ import annotations

import struct
from dataclasses import dataclass, replace

import numpy as np

from .transforms import apply_chain, random_chain

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801


@dataclass
class Dataset:
    images: np.ndarray  # (N, H, W, C) in [0, 1]
    labels: np.ndarray  # (N,)
    k: int
    split: str = ""

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise ValueError(f"images must be (N, H, W, C), got {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise ValueError(f"{len(self.images)} images but {len(self.labels)} labels")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.k):
            raise ValueError(f"labels outside [0, {self.k})")

    def __len__(self):
        return len(self.labels)

    @property
    def image_shape(self):
        return self.images.shape[1:]

    def subset(self, idx, split=None):
        return Dataset(self.images[idx], self.labels[idx], self.k, self.split if split is None else split)


# ---------------------------------------------------------------------------
# IDX


def _parse_idx(blob, what, magic):
    if len(blob) < 8:
        raise ValueError(f"{what}: truncated header, {len(blob)} bytes (need at least 8)")
    got = struct.unpack_from(">I", blob, 0)[0]
    if got != magic:
        raise ValueError(f"{what}: bad magic 0x{got:08x} at byte 0, expected 0x{magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(blob) < header:
        raise ValueError(f"{what}: truncated header at byte {len(blob)}, need {header} bytes")
    dims = struct.unpack_from(f">{ndim}I", blob, 4)
    size = int(np.prod(dims, dtype=np.int64))
    if len(blob) - header < size:
        raise ValueError(f"{what}: truncated data at byte {len(blob)}, expected {header + size} bytes")
    if len(blob) - header > size:
        raise ValueError(f"{what}: {len(blob) - header - size} trailing bytes after byte {header + size}")
    return np.frombuffer(blob, dtype=np.uint8, count=size, offset=header).reshape(dims)


def read_idx_images(path):
    with open(path, "rb") as f:
        return _parse_idx(f.read(), str(path), IMAGES_MAGIC)


def read_idx_labels(path):
    with open(path, "rb") as f:
        return _parse_idx(f.read(), str(path), LABELS_MAGIC)


def write_idx(path, array):
    arr = np.asarray(array)
    if arr.dtype != np.uint8 or arr.ndim not in (1, 3):
        raise ValueError("IDX writer takes uint8 arrays of rank 1 (labels) or 3 (images)")
    magic = LABELS_MAGIC if arr.ndim == 1 else IMAGES_MAGIC
    with open(path, "wb") as f:
        f.write(struct.pack(f">I{arr.ndim}I", magic, *arr.shape))
        f.write(np.ascontiguousarray(arr).tobytes())


def load_idx(images_path, labels_path, k=None, split=""):
    images = read_idx_images(images_path)
    labels = read_idx_labels(labels_path)
    if len(images) != len(labels):
        raise ValueError(f"count mismatch: {images_path} holds {len(images)} images, "
                         f"{labels_path} holds {len(labels)} labels (header offset 4)")
    k = int(labels.max()) + 1 if k is None else k
    return Dataset(images[..., None].astype(np.float32) / 255.0, labels.astype(np.int64), k, split)


def save_idx(ds: Dataset, images_path, labels_path):
    if ds.images.shape[-1] != 1:
        raise ValueError("IDX export supports single-channel images only")
    raw = np.rint(ds.images[..., 0] * 255.0).clip(0, 255).astype(np.uint8)
    write_idx(images_path, raw)
    write_idx(labels_path, ds.labels.astype(np.uint8))


# ---------------------------------------------------------------------------
# synthetic glyphs
#
# Strokes live on a unit box [0, 1]^2 (x to the right, y downwards) and are
# scaled into the canvas with a margin. The first shapes have no mirror or
# rotational symmetry, so every flip/rotation of them is a distinct image.

_SEGS = {
    "ell": [((0.3, 0.0), (0.3, 1.0)), ((0.3, 1.0), (0.75, 1.0))],
    "eff": [((0.25, 0.0), (0.25, 1.0)), ((0.25, 0.0), (0.8, 0.0)), ((0.25, 0.45), (0.65, 0.45))],
    "pee": [((0.25, 0.0), (0.25, 1.0)), ((0.25, 0.0), (0.75, 0.0)), ((0.75, 0.0), (0.75, 0.5)),
            ((0.25, 0.5), (0.75, 0.5))],
    "seven": [((0.1, 0.0), (0.9, 0.0)), ((0.9, 0.0), (0.35, 1.0))],
    "hbar": [((0.0, 0.5), (1.0, 0.5))],
    "tee": [((0.0, 0.0), (1.0, 0.0)), ((0.5, 0.0), (0.5, 1.0))],
    "arc": [],  # drawn as a half ring, see _render
    "plus": [((0.5, 0.0), (0.5, 1.0)), ((0.0, 0.5), (1.0, 0.5))],
    "ring": [],
    "diag": [((0.0, 1.0), (1.0, 0.0))],
}
# mirror partners: the D4 orbit of "jay" is the orbit of "ell", so a distorted
# image alone cannot tell the pair apart; the orientation marker can
_SEGS["jay"] = [((1 - ax, ay), (1 - bx, by)) for (ax, ay), (bx, by) in _SEGS["ell"]]
_SEGS["queue"] = [((1 - ax, ay), (1 - bx, by)) for (ax, ay), (bx, by) in _SEGS["pee"]]
GLYPHS = tuple(_SEGS)
MIRROR_PAIRS = ("ell", "jay", "pee", "queue")

# corner bracket with unequal arms in the top-left margin; each of the eight
# flip/quarter-turn images of it is different
_MARKER = [((-0.25, -0.25), (0.3, -0.25)), ((-0.25, -0.25), (-0.25, 0.0))]


def _segment_distance(px, py, a, b):
    (ax, ay), (bx, by) = a, b
    dx, dy = bx - ax, by - ay
    t = np.clip(((px - ax) * dx + (py - ay) * dy) / (dx * dx + dy * dy), 0.0, 1.0)
    return np.hypot(px - (ax + t * dx), py - (ay + t * dy))


def _render(shape, size, thickness, shift, marker=False):
    margin = size * 0.2
    span = size - 1 - 2 * margin
    cols, rows = np.meshgrid(np.arange(size, dtype=np.float64), np.arange(size, dtype=np.float64))
    px = (cols - margin - shift[0]) / span
    py = (rows - margin - shift[1]) / span
    if shape in ("arc", "ring"):
        r = np.hypot(px - 0.5, py - 0.5)
        d = np.abs(r - 0.45)
        if shape == "arc":
            d = np.where(px <= 0.5, d, np.hypot(px - 0.5, np.abs(py - 0.5) - 0.45))
    else:
        d = np.min([_segment_distance(px, py, a, b) for a, b in _SEGS[shape]], axis=0)
    if marker:
        d = np.minimum(d, np.min([_segment_distance(px, py, a, b) for a, b in _MARKER], axis=0))
    # pixel distance -> intensity with a one-pixel soft edge
    return np.clip(thickness / 2.0 + 0.5 - d * span, 0.0, 1.0).astype(np.float32)


def gen_glyphs(n_per_class, k, size=16, seed=0, jitter=0.75, noise=0.0, shapes=None, marker=False):
    """Balanced synthetic dataset with ``n_per_class`` images of each of the
    first ``k`` glyph shapes (or the named ``shapes``).

    Each sample is shifted by a uniform sub-pixel offset in [-jitter, jitter]
    on both axes and drawn with a stroke width uniform in [1.5, 2.5] pixels.
    ``noise`` adds clipped Gaussian pixel noise with that standard deviation.
    ``marker`` draws a shared orientation mark in the top-left corner of
    every image, playing the part of the natural "upright" of handwriting.
    """
    shapes = list(GLYPHS[:k] if shapes is None else shapes)
    if len(shapes) != k or k > len(GLYPHS) or k < 1:
        raise ValueError(f"k={k} needs {k} shapes; {len(GLYPHS)} available")
    unknown = [s for s in shapes if s not in GLYPHS]
    if unknown:
        raise ValueError(f"unknown glyph shapes {unknown}")
    rng = np.random.default_rng(seed)
    images = np.zeros((n_per_class * k, size, size, 1), dtype=np.float32)
    labels = np.repeat(np.arange(k), n_per_class)
    for i, label in enumerate(labels):
        shift = rng.uniform(-jitter, jitter, size=2)
        thickness = rng.uniform(1.5, 2.5)
        images[i, ..., 0] = _render(shapes[label], size, thickness, shift, marker)
    if noise:
        images = np.clip(images + rng.normal(0, noise, images.shape), 0, 1).astype(np.float32)
    order = rng.permutation(len(labels))
    return Dataset(images[order], labels[order], k, "all")


def split_dataset(ds: Dataset, n_val, n_test, seed=0):
    """Deterministic train/val/test split (shuffled by ``seed``)."""
    if n_val + n_test >= len(ds):
        raise ValueError("validation and test splits leave no training data")
    order = np.random.default_rng(seed).permutation(len(ds))
    test, val, train = order[:n_test], order[n_test:n_test + n_val], order[n_test + n_val:]
    return ds.subset(train, "train"), ds.subset(val, "val"), ds.subset(test, "test")


def nearest_centroid_accuracy(train: Dataset, test: Dataset):
    flat = train.images.reshape(len(train), -1)
    centroids = np.stack([flat[train.labels == c].mean(axis=0) for c in range(train.k)])
    t = test.images.reshape(len(test), -1)
    d = ((t[:, None, :] - centroids[None]) ** 2).sum(axis=-1)
    return float(np.mean(d.argmin(axis=1) == test.labels))


# ---------------------------------------------------------------------------
# distortion harness


@dataclass
class DistortionConfig:
    probability: float = 0.5
    mode: str = "standard"
    length_range: tuple = (1, 5)
    seed: int = 0

    def __post_init__(self):
        if not 0 <= self.probability <= 1:
            raise ValueError(f"distortion probability must be in [0, 1], got {self.probability}")
        self.length_range = tuple(self.length_range)


def distort(ds: Dataset, cfg: DistortionConfig):
    """Distort each image independently with ``cfg.probability``.

    Returns the new dataset and the chain applied to each image (empty when
    the image was left alone).
    """
    rng = np.random.default_rng(cfg.seed)
    images = ds.images.copy()
    chains = []
    for i in range(len(ds)):
        if rng.random() < cfg.probability:
            chain = random_chain(rng, cfg.length_range, cfg.mode)
            images[i] = apply_chain(ds.images[i], chain)
        else:
            chain = []
        chains.append(chain)
    return replace(ds, images=images), chains
