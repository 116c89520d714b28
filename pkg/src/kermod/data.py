"""Dataset ingestion and synthetic task generation.

The CIFAR-10 loader reads the standard binary batch format: 3073-byte
records, one label byte followed by 3072 channel-planar pixel bytes
(R plane, G plane, B plane, each 32x32 row-major). Pixels are scaled to
[0,1] and normalized by the fixed constants below, so runs reproduce
without recomputing dataset statistics.

Two deterministic synthetic tasks serve as training oracles:
``separable_blobs`` is linearly separable by construction (sanity check for
classifier-only training); ``striped_textures`` keys class identity to the
orientation of a sinusoidal grating with randomized phase and brightness,
so raw pixel averages carry no signal and spatial filtering must adapt.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

# Widely used CIFAR-10 channel statistics (of the training split, in [0,1] scale).
CIFAR10_MEAN = np.array([0.4914, 0.4822, 0.4465], dtype=np.float32)
CIFAR10_STD = np.array([0.2470, 0.2435, 0.2616], dtype=np.float32)

CIFAR_RECORD_BYTES = 3073  # 1 label byte + 3 * 32 * 32 pixel bytes
CIFAR_TRAIN_FILES = tuple(f"data_batch_{i}.bin" for i in range(1, 6))
CIFAR_TEST_FILES = ("test_batch.bin",)


class DataError(Exception):
    pass


@dataclass
class DatasetSplit:
    images: np.ndarray  # (N, C, H, W) float32
    labels: np.ndarray  # (N,) int64
    class_count: int
    name: str

    def __post_init__(self):
        if self.images.ndim != 4:
            raise DataError(f"images must be (N,C,H,W), got {self.images.shape}")
        if len(self.labels) != len(self.images):
            raise DataError("images and labels disagree on N")
        if len(self.images) < 1:
            raise DataError("empty dataset")
        if self.labels.min() < 0 or self.labels.max() >= self.class_count:
            raise DataError(
                f"labels outside [0, {self.class_count}): "
                f"[{self.labels.min()}, {self.labels.max()}]")

    def __len__(self):
        return len(self.images)


def _read_cifar_file(path: str):
    if not os.path.isfile(path):
        raise DataError(f"missing CIFAR-10 batch file: {path} "
                        f"(expected {CIFAR_RECORD_BYTES}-byte records)")
    raw = np.fromfile(path, dtype=np.uint8)
    if raw.size == 0 or raw.size % CIFAR_RECORD_BYTES != 0:
        raise DataError(
            f"truncated CIFAR-10 batch file: {path} has {raw.size} bytes, "
            f"not a positive multiple of the {CIFAR_RECORD_BYTES}-byte record size")
    records = raw.reshape(-1, CIFAR_RECORD_BYTES)
    labels = records[:, 0].astype(np.int64)
    pixels = records[:, 1:].reshape(-1, 3, 32, 32)
    return pixels, labels


def _balanced_subset(labels: np.ndarray, per_class: int, class_count: int) -> np.ndarray:
    """Indices of the first ``per_class`` occurrences of each class, in file order."""
    picks = []
    for c in range(class_count):
        idx = np.flatnonzero(labels == c)
        if len(idx) < per_class:
            raise DataError(f"class {c} has only {len(idx)} samples, need {per_class}")
        picks.append(idx[:per_class])
    return np.sort(np.concatenate(picks))


def load_cifar10_binary(dir_path: str, split: str = "train",
                        subset: int | None = None) -> DatasetSplit:
    """Load a CIFAR-10 split from binary batch files under ``dir_path``.

    ``subset`` takes a class-balanced, deterministic sample (first
    occurrences in file order) and must be a multiple of 10.
    """
    if split not in ("train", "test"):
        raise DataError(f"split must be 'train' or 'test', got {split!r}")
    files = CIFAR_TRAIN_FILES if split == "train" else CIFAR_TEST_FILES
    pixel_parts, label_parts = [], []
    for fname in files:
        px, lb = _read_cifar_file(os.path.join(dir_path, fname))
        pixel_parts.append(px)
        label_parts.append(lb)
    pixels = np.concatenate(pixel_parts)
    labels = np.concatenate(label_parts)
    if subset is not None:
        if subset < 10 or subset % 10 != 0:
            raise DataError(f"subset must be a positive multiple of 10, got {subset}")
        keep = _balanced_subset(labels, subset // 10, 10)
        pixels, labels = pixels[keep], labels[keep]
    images = pixels.astype(np.float32) / 255.0
    images -= CIFAR10_MEAN.reshape(1, 3, 1, 1)
    images /= CIFAR10_STD.reshape(1, 3, 1, 1)
    return DatasetSplit(images=images, labels=labels, class_count=10,
                        name=f"cifar10-{split}" + (f"-{subset}" if subset else ""))


def write_cifar10_binary(dir_path: str, images_u8: np.ndarray, labels: np.ndarray,
                         split: str = "train"):
    """Write (N,3,32,32) uint8 images in the CIFAR-10 binary batch layout.

    Train data is spread over the five standard batch files. Useful for
    format round-trip tests and for packaging generated stand-in data.
    """
    if images_u8.dtype != np.uint8 or images_u8.shape[1:] != (3, 32, 32):
        raise DataError(f"need (N,3,32,32) uint8 images, got "
                        f"{images_u8.dtype} {images_u8.shape}")
    os.makedirs(dir_path, exist_ok=True)
    records = np.concatenate(
        [labels.astype(np.uint8).reshape(-1, 1),
         images_u8.reshape(len(images_u8), -1)], axis=1)
    files = CIFAR_TRAIN_FILES if split == "train" else CIFAR_TEST_FILES
    chunks = np.array_split(records, len(files))
    for fname, chunk in zip(files, chunks):
        chunk.tofile(os.path.join(dir_path, fname))


# -- synthetic tasks -----------------------------------------------------------


def _blob_images(classes, n, size, rng):
    # one bright patch per class on a grid of disjoint locations
    side = int(np.ceil(np.sqrt(classes)))
    cell = size // side
    if cell < 2:
        raise DataError(f"image_size {size} too small for {classes} blob classes")
    labels = np.repeat(np.arange(classes), n)
    images = rng.normal(0.0, 0.25, (classes * n, 3, size, size)).astype(np.float32)
    for k, c in enumerate(labels):
        r, col = divmod(int(c), side)
        y0, x0 = r * cell, col * cell
        images[k, :, y0:y0 + cell, x0:x0 + cell] += 1.5
    return images, labels


def _stripe_images(classes, n, size, rng):
    # class = grating orientation; phase, brightness, and contrast are nuisance
    yy, xx = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
    labels = np.repeat(np.arange(classes), n)
    images = np.empty((classes * n, 3, size, size), dtype=np.float32)
    freq = 2.0 * np.pi * 4.0 / size
    for k, c in enumerate(labels):
        theta = np.pi * float(c) / classes
        phase = rng.uniform(0, 2 * np.pi)
        amp = rng.uniform(0.7, 1.3)
        grid = freq * (xx * np.cos(theta) + yy * np.sin(theta))
        base = amp * np.sin(grid + phase)
        offset = rng.normal(0.0, 0.4)
        for ch in range(3):
            noise = rng.normal(0.0, 0.35, (size, size))
            images[k, ch] = base * rng.uniform(0.85, 1.15) + offset + noise
    return images, labels


def synth_task(kind: str, classes: int = 4, n_per_class: int = 200,
               image_size: int = 16, seed: int = 0):
    """Generate (train, test) DatasetSplits for a deterministic synthetic task."""
    if classes < 2:
        raise DataError("classes must be >= 2")
    makers = {"separable_blobs": _blob_images, "striped_textures": _stripe_images}
    if kind not in makers:
        raise DataError(f"unknown synthetic task {kind!r}; expected one of {tuple(makers)}")
    make = makers[kind]
    rng = np.random.default_rng((seed, 0))
    tr_img, tr_lab = make(classes, n_per_class, image_size, rng)
    rng = np.random.default_rng((seed, 1))
    te_img, te_lab = make(classes, max(n_per_class // 2, 1), image_size, rng)
    train = DatasetSplit(tr_img, tr_lab, classes, f"{kind}-train")
    test = DatasetSplit(te_img, te_lab, classes, f"{kind}-test")
    return train, test


# -- augmentation --------------------------------------------------------------


def hflip(batch: np.ndarray) -> np.ndarray:
    """Horizontal mirror of a (N,C,H,W) batch; an involution."""
    return batch[:, :, :, ::-1]


def crop_with_padding(batch: np.ndarray, pad: int, offsets: np.ndarray) -> np.ndarray:
    """Zero-pad then crop back to the original size at per-image offsets."""
    n, c, h, w = batch.shape
    padded = np.pad(batch, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    out = np.empty_like(batch)
    for i, (dy, dx) in enumerate(offsets):
        out[i] = padded[i, :, dy:dy + h, dx:dx + w]
    return out


def augment(batch: np.ndarray, spec: str = "none", pad: int = 4,
            rng: np.random.Generator | None = None) -> np.ndarray:
    """Train-time augmentation: 'none' or 'crop_flip' (pad-crop + random mirror)."""
    if spec == "none":
        return batch
    if spec != "crop_flip":
        raise DataError(f"unknown augmentation {spec!r}; expected 'none' or 'crop_flip'")
    if rng is None:
        raise DataError("crop_flip augmentation needs a seeded Generator")
    n = len(batch)
    offsets = rng.integers(0, 2 * pad + 1, size=(n, 2))
    out = crop_with_padding(batch, pad, offsets)
    flip = rng.random(n) < 0.5
    out[flip] = out[flip, :, :, ::-1]
    return out
