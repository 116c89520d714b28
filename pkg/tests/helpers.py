"""Desk-task construction shared by the acceptance suite.

The directional training criteria want a 10-class, 32x32 RGB dataset in the
CIFAR-10 binary layout. When a real CIFAR-10 directory is available (point
KM_CIFAR10_DIR at it, or drop it in data/cifar-10-batches-bin), it is used
directly. Otherwise the suite generates a procedural stand-in with the
properties the criteria exercise: class identity lives in oriented texture
(spatial filtering matters), while brightness, phase, contrast, and color
are randomized per image so pixel averages carry no class signal. The
stand-in is written through the real binary writer and read back through
the real loader, so the CIFAR code path is exercised bit-for-bit either way.
"""

import os

import numpy as np

from kermod.data import load_cifar10_binary, write_cifar10_binary

CIFAR_ENV = "KM_CIFAR10_DIR"
CIFAR_DEFAULT = os.path.join("data", "cifar-10-batches-bin")


def real_cifar_dir():
    for candidate in (os.environ.get(CIFAR_ENV, ""), CIFAR_DEFAULT):
        if candidate and os.path.isfile(os.path.join(candidate, "data_batch_1.bin")):
            return candidate
    return None


def _texture_images(n_per_class, rng, noise=0.45, freq=6.0,
                    distract_amp=(0.75, 0.95)):
    """(N,3,32,32) uint8 images; class = orientation of the dominant grating.

    Each image superimposes the class grating (amplitude 1) with two
    almost-as-strong gratings at other class orientations, then randomizes
    phase, brightness, per-channel contrast, and pixel noise. Orientations
    sit 18 degrees apart, so separating the dominant grating needs finely
    tuned spatial filters; random frozen filters with per-channel rescaling
    saturate well below adapted ones, which is the gap the mask-ordering
    criterion measures.
    """
    size = 32
    yy, xx = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
    angles = np.pi * np.arange(10) / 10

    def grating(theta, phase, amp):
        wave = 2 * np.pi * freq * (xx * np.cos(theta) + yy * np.sin(theta)) / size
        return amp * np.sin(wave + phase)

    images = []
    labels = []
    for cls in range(10):
        others = [a for a in range(10) if a != cls]
        for _ in range(n_per_class):
            base = grating(angles[cls], rng.uniform(0, 2 * np.pi), 1.0)
            for d in rng.choice(others, 2, replace=False):
                base = base + grating(angles[d], rng.uniform(0, 2 * np.pi),
                                      rng.uniform(*distract_amp))
            offset = rng.normal(0, 0.25)
            img = np.empty((3, size, size), dtype=np.float32)
            for ch in range(3):
                img[ch] = base * rng.uniform(0.85, 1.15) + offset \
                    + rng.normal(0, noise, (size, size))
            images.append(img)
            labels.append(cls)
    images = np.stack(images)
    labels = np.array(labels, dtype=np.int64)
    u8 = np.clip(128.0 + 50.0 * images, 0, 255).astype(np.uint8)
    order = rng.permutation(len(u8))
    return u8[order], labels[order]


def make_stand_in_dir(dir_path, n_train_per_class=500, n_test_per_class=250,
                      seed=20240901):
    """Write the procedural 10-class dataset in CIFAR-10 binary layout."""
    rng = np.random.default_rng((seed, 0))
    tr_img, tr_lab = _texture_images(n_train_per_class, rng)
    rng = np.random.default_rng((seed, 1))
    te_img, te_lab = _texture_images(n_test_per_class, rng)
    write_cifar10_binary(dir_path, tr_img, tr_lab, "train")
    write_cifar10_binary(dir_path, te_img, te_lab, "test")
    return dir_path


def desk_task(tmp_dir, train_subset=4000, test_subset=2000):
    """(train, test) splits for the desk-scale criteria, via the CIFAR loader."""
    cifar = real_cifar_dir()
    if cifar is None:
        cifar = os.path.join(tmp_dir, "stand-in")
        if not os.path.isfile(os.path.join(cifar, "data_batch_1.bin")):
            make_stand_in_dir(cifar)
    train = load_cifar10_binary(cifar, "train", subset=train_subset)
    test = load_cifar10_binary(cifar, "test", subset=test_subset)
    return train, test, cifar
