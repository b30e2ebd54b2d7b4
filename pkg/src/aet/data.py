"""Datasets, normalization and AET minibatch assembly.

Images are float64 arrays of shape ``(N, C, H, W)`` with raw pixels in
``[0, 1]``. Normalization statistics travel with the dataset and are always
computed on a training split.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import BadLabel, CorruptRecord, EmptyDataset, IndexOutOfRange, MissingFile
from .nn.checkpoint import load_container, save_container
from .warp import warp_image
from .xform import XformConfig, sample

CIFAR_RECORD = 1 + 3 * 32 * 32
CIFAR_TRAIN_FILES = tuple(f"data_batch_{i}.bin" for i in range(1, 6))
CIFAR_TEST_FILES = ("test_batch.bin",)
SHAPE_KINDS = ("square", "disk", "triangle", "cross", "tee", "ell", "halfdisk")
# upright shapes without quarter-turn symmetry; a right-angle rotation is visible
ORIENTED_KINDS = ("triangle", "tee", "ell", "halfdisk")


@dataclass
class Dataset:
    images: np.ndarray
    labels: np.ndarray
    class_count: int
    mean: np.ndarray = None
    std: np.ndarray = None
    name: str = "dataset"

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise ValueError(f"images must be (N, C, H, W), got {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise ValueError(f"{len(self.images)} images but {len(self.labels)} labels")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.class_count):
            raise BadLabel(f"labels must lie in [0, {self.class_count})")
        if self.mean is None:
            self.mean, self.std = channel_stats(self.images)

    def __len__(self):
        return len(self.labels)

    @property
    def image_shape(self):
        return self.images.shape[1:]

    def with_stats(self, mean, std) -> "Dataset":
        """Same data, normalized with another split's statistics."""
        return replace(self, mean=np.asarray(mean, float).copy(), std=np.asarray(std, float).copy())

    def normalized(self, idx=None) -> np.ndarray:
        x = self.images if idx is None else self.images[idx]
        return normalize(x, self.mean, self.std)


def channel_stats(images: np.ndarray):
    if len(images) == 0:
        raise EmptyDataset("cannot compute statistics of an empty image set")
    mean = images.mean(axis=(0, 2, 3))
    std = images.std(axis=(0, 2, 3))
    return mean, np.where(std > 0, std, 1.0)


def normalize(x, mean, std) -> np.ndarray:
    shape = (1, -1, 1, 1) if np.ndim(x) == 4 else (-1, 1, 1)
    return (x - np.reshape(mean, shape)) / np.reshape(std, shape)


def denormalize(x, mean, std) -> np.ndarray:
    shape = (1, -1, 1, 1) if np.ndim(x) == 4 else (-1, 1, 1)
    return x * np.reshape(std, shape) + np.reshape(mean, shape)


def split(ds: Dataset, test_fraction: float, seed: int):
    """Stratification-free random split; both halves use the train half's stats."""
    rng = np.random.default_rng(seed)
    perm = rng.permutation(len(ds))
    n_test = int(round(len(ds) * test_fraction))
    test_idx, train_idx = np.sort(perm[:n_test]), np.sort(perm[n_test:])
    train = Dataset(ds.images[train_idx], ds.labels[train_idx], ds.class_count, name=f"{ds.name}-train")
    test = Dataset(ds.images[test_idx], ds.labels[test_idx], ds.class_count,
                   mean=train.mean, std=train.std, name=f"{ds.name}-test")
    return train, test


# ---------------------------------------------------------------------------
# CIFAR-10 binary version

def read_cifar_batch(path):
    """Parse one binary batch file into ``(images, labels)``."""
    if not os.path.isfile(path):
        raise MissingFile(f"missing CIFAR-10 file: {path}")
    raw = np.fromfile(path, dtype=np.uint8)
    if raw.size % CIFAR_RECORD:
        whole = raw.size // CIFAR_RECORD
        raise CorruptRecord(f"{path}: length {raw.size} is not a multiple of {CIFAR_RECORD}; "
                            f"truncated record starts at byte offset {whole * CIFAR_RECORD}")
    records = raw.reshape(-1, CIFAR_RECORD)
    labels = records[:, 0].astype(np.int64)
    bad = np.flatnonzero(labels > 9)
    if bad.size:
        raise BadLabel(f"{path}: label {labels[bad[0]]} at byte offset {bad[0] * CIFAR_RECORD}")
    images = records[:, 1:].reshape(-1, 3, 32, 32).astype(np.float64) / 255.0
    return images, labels


def load_cifar10(directory):
    """Load the six binary batch files; returns ``(train, test)``."""
    def load(files):
        parts = [read_cifar_batch(os.path.join(directory, f)) for f in files]
        return np.concatenate([p[0] for p in parts]), np.concatenate([p[1] for p in parts])

    for f in CIFAR_TRAIN_FILES + CIFAR_TEST_FILES:
        if not os.path.isfile(os.path.join(directory, f)):
            raise MissingFile(f"missing CIFAR-10 file: {os.path.join(directory, f)}")
    xtr, ytr = load(CIFAR_TRAIN_FILES)
    xte, yte = load(CIFAR_TEST_FILES)
    train = Dataset(xtr, ytr, 10, name="cifar10-train")
    test = Dataset(xte, yte, 10, mean=train.mean, std=train.std, name="cifar10-test")
    return train, test


def write_cifar_batch(path, images, labels):
    """Inverse of :func:`read_cifar_batch` (pixels are rounded to bytes)."""
    px = np.clip(np.rint(np.asarray(images) * 255.0), 0, 255).astype(np.uint8).reshape(len(labels), -1)
    rec = np.concatenate([np.asarray(labels, dtype=np.uint8)[:, None], px], axis=1)
    rec.tofile(path)


# ---------------------------------------------------------------------------
# synthetic shapes

@dataclass
class SyntheticConfig:
    kinds: tuple = ORIENTED_KINDS
    image_size: int = 32
    n_per_class: int = 500
    seed: int = 0
    supersample: int = 4
    noise: float = 0.05
    radius_range: tuple = (0.35, 0.6)
    center_range: tuple = (-0.3, 0.3)
    min_contrast: float = 0.3
    orientation_jitter: float = 15.0  # degrees
    illumination: tuple = (0.0, 0.0)  # top-to-bottom brightness falloff range
    polarity: str = "bright"  # "bright": shape lighter than background; "any": either way
    background: str = "flat"  # "flat", or "horizon": darker ground below a random horizon line
    horizon_range: tuple = (0.6, 0.85)  # horizon row as a fraction of the height, from the top
    ground_shade: tuple = (0.3, 0.6)  # ground colour = sky colour times this factor

    def __post_init__(self):
        self.kinds = tuple(self.kinds)
        unknown = set(self.kinds) - set(SHAPE_KINDS)
        if unknown:
            raise ValueError(f"unknown shape kinds {sorted(unknown)}")
        if self.polarity not in ("bright", "any"):
            raise ValueError(f"polarity must be 'bright' or 'any', got {self.polarity!r}")
        if self.background not in ("flat", "horizon"):
            raise ValueError(f"background must be 'flat' or 'horizon', got {self.background!r}")
        if self.image_size < 16:
            raise ValueError("image_size must be at least 16")


def _inside(kind, a, b, r):
    # local frame: a to the right, b downwards; shapes point "up" (towards -b)
    if kind == "square":
        return np.maximum(np.abs(a), np.abs(b)) <= 0.8 * r
    if kind == "disk":
        return a * a + b * b <= r * r
    if kind == "triangle":
        return (b <= 0.7 * r) & (np.abs(a) <= 0.8 * (b + r) / 1.7)
    if kind == "tee":
        bar = (np.abs(a) <= r) & (b >= -r) & (b <= -0.45 * r)
        stem = (np.abs(a) <= 0.3 * r) & (np.abs(b) <= r)
        return bar | stem
    if kind == "ell":
        upright = (a >= -0.8 * r) & (a <= -0.25 * r) & (np.abs(b) <= r)
        foot = (a >= -0.8 * r) & (a <= 0.8 * r) & (b >= 0.45 * r) & (b <= r)
        return upright | foot
    if kind == "halfdisk":
        return (a * a + b * b <= r * r) & (b <= 0.15 * r)
    if kind == "cross":
        t = r / 3
        return ((np.abs(a) <= r) & (np.abs(b) <= t)) | ((np.abs(b) <= r) & (np.abs(a) <= t))
    raise ValueError(kind)


def _luma(rgb):
    return 0.299 * rgb[0] + 0.587 * rgb[1] + 0.114 * rgb[2]


def render_shape(kind, size, rng, cfg: SyntheticConfig) -> np.ndarray:
    """One anti-aliased shape on a noisy background, ``(3, size, size)``."""
    s = cfg.supersample
    n = size * s
    coords = (np.arange(n) + 0.5) / n * 2.0 - 1.0
    u, v = np.meshgrid(coords, coords)
    cx, cy = rng.uniform(*cfg.center_range, size=2)
    r = rng.uniform(*cfg.radius_range)
    theta = np.radians(rng.uniform(-cfg.orientation_jitter, cfg.orientation_jitter))
    du, dv = u - cx, v - cy
    a = np.cos(theta) * du + np.sin(theta) * dv
    b = -np.sin(theta) * du + np.cos(theta) * dv
    alpha = _inside(kind, a, b, r).astype(np.float64).reshape(size, s, size, s).mean(axis=(1, 3))
    while True:
        fg, bg = rng.uniform(0.0, 1.0, size=(2, 3))
        contrast = _luma(fg) - _luma(bg)
        if cfg.polarity == "any":
            contrast = abs(contrast)
        if contrast >= cfg.min_contrast:
            break
    back = np.broadcast_to(bg[:, None, None], (3, size, size))
    if cfg.background == "horizon":
        row = rng.uniform(*cfg.horizon_range) * size
        below = np.clip(np.arange(size) + 1.0 - row, 0.0, 1.0)  # partial coverage on the horizon row
        shade = rng.uniform(*cfg.ground_shade)
        back = back * (1.0 - (1.0 - shade) * below[None, :, None])
    img = back * (1.0 - alpha) + fg[:, None, None] * alpha
    g = rng.uniform(*cfg.illumination)
    if g:
        ramp = 1.0 + g * (0.5 - (np.arange(size) + 0.5) / size)
        img = img * ramp[None, :, None]
    img = img + rng.normal(0.0, cfg.noise, size=img.shape)
    return np.clip(img, 0.0, 1.0)


def gen_synthetic(cfg: SyntheticConfig) -> Dataset:
    """Labeled shape images; class index = position of the kind in ``cfg.kinds``."""
    rng = np.random.default_rng(cfg.seed)
    k = len(cfg.kinds)
    labels = np.tile(np.arange(k), cfg.n_per_class)
    images = np.stack([render_shape(cfg.kinds[y], cfg.image_size, rng, cfg) for y in labels]) \
        if len(labels) else np.zeros((0, 3, cfg.image_size, cfg.image_size))
    return Dataset(images, labels, k, mean=np.full(3, 0.5) if not len(labels) else None,
                   std=np.ones(3) if not len(labels) else None, name="synthetic")


def save_dataset(path, ds: Dataset):
    manifest = {"kind": "dataset", "name": ds.name, "class_count": ds.class_count, "count": len(ds)}
    arrays = {"images": ds.images, "labels": ds.labels.astype(np.float64), "mean": ds.mean, "std": ds.std}
    return save_container(path, manifest, arrays)


def load_dataset(path) -> Dataset:
    manifest, arrays = load_container(path)
    return Dataset(arrays["images"], arrays["labels"].astype(np.int64), manifest["class_count"],
                   mean=arrays["mean"], std=arrays["std"], name=manifest["name"])


# ---------------------------------------------------------------------------
# AET batches

@dataclass
class AetBatch:
    originals: np.ndarray
    transformed: np.ndarray
    targets: np.ndarray
    samples: list = field(default_factory=list, repr=False)

    def __len__(self):
        return len(self.targets)


def make_aet_batch(ds: Dataset, indices, sampler: XformConfig, rng: np.random.Generator) -> AetBatch:
    """Draw one transformation per image, warp raw pixels, then normalize both views."""
    idx = np.asarray(indices, dtype=np.int64).reshape(-1)
    if idx.size and (idx.min() < 0 or idx.max() >= len(ds)):
        raise IndexOutOfRange(f"indices must lie in [0, {len(ds)})")
    raw = ds.images[idx]
    samples = [sample(rng, sampler) for _ in idx]
    warped = np.stack([warp_image(x, s.homography) for x, s in zip(raw, samples)]) if idx.size \
        else raw.copy()
    targets = np.stack([s.target for s in samples]) if idx.size else np.zeros((0, 8))
    return AetBatch(normalize(raw, ds.mean, ds.std), normalize(warped, ds.mean, ds.std), targets, samples)


def epoch_order(n: int, rng: np.random.Generator) -> np.ndarray:
    return rng.permutation(n)


def iter_batches(order: np.ndarray, batch_size: int, min_size: int = 2):
    """Consecutive slices of ``order``; a trailing slice smaller than ``min_size`` is dropped."""
    for start in range(0, len(order), batch_size):
        chunk = order[start:start + batch_size]
        if len(chunk) >= min_size:
            yield chunk
