"""Datasets, splits, batching and augmentation.

Images are stored as float arrays of shape (N, C, H, W); labels as int64.

On-disk binary layout (one file per split)::

    record = label (1 byte, uint8) + H*W*3 pixel bytes (uint8)
    pixels are row-major with interleaved channels: (row, col, channel)

A file is a plain concatenation of records with no header.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np


class DatasetError(ValueError):
    pass


@dataclass
class Dataset:
    images: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.images) != len(self.labels):
            raise DatasetError(f"{len(self.images)} images but {len(self.labels)} labels")

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, index) -> "Dataset":
        return Dataset(self.images[index], self.labels[index])

    @property
    def num_classes(self) -> int:
        return int(self.labels.max()) + 1 if len(self) else 0


def concat(a: Dataset, b: Dataset) -> Dataset:
    return Dataset(np.concatenate([a.images, b.images]), np.concatenate([a.labels, b.labels]))


def split_dataset(ds: Dataset, ratio: float, seed: int) -> tuple[Dataset, Dataset]:
    """Seeded shuffle, then the first ``ratio`` fraction is the training split."""
    if not 0 < ratio < 1:
        raise DatasetError(f"split ratio must lie in (0, 1), got {ratio}")
    perm = np.random.default_rng(seed).permutation(len(ds))
    cut = int(round(ratio * len(ds)))
    return ds.subset(np.sort(perm[:cut])), ds.subset(np.sort(perm[cut:]))


# ---------------------------------------------------------------- augmentation


def hflip(x: np.ndarray) -> np.ndarray:
    return x[..., ::-1]


def random_crop(x: np.ndarray, rng: np.random.Generator, pad: int) -> np.ndarray:
    """Zero-pad by ``pad`` pixels and crop back to the original size at a random offset per image."""
    if pad <= 0:
        return x
    n, _, h, w = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    dy = rng.integers(0, 2 * pad + 1, size=n)
    dx = rng.integers(0, 2 * pad + 1, size=n)
    out = np.empty_like(x)
    for k in range(n):
        out[k] = xp[k, :, dy[k] : dy[k] + h, dx[k] : dx[k] + w]
    return out


def augment_batch(x: np.ndarray, rng: np.random.Generator, pad: int = 4, flip: bool = True) -> np.ndarray:
    x = random_crop(x, rng, pad)
    if flip:
        mask = rng.random(len(x)) < 0.5
        x = x.copy()
        x[mask] = hflip(x[mask])
    return x


def batches(
    ds: Dataset,
    batch_size: int,
    rng: np.random.Generator | None = None,
    augment: bool = False,
    crop_pad: int = 4,
    drop_last: bool = False,
) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """Yield ``(images, labels)`` minibatches; shuffled when ``rng`` is given."""
    if len(ds) == 0:
        raise DatasetError("cannot iterate an empty split")
    order = rng.permutation(len(ds)) if rng is not None else np.arange(len(ds))
    stop = len(ds) - (len(ds) % batch_size if drop_last and len(ds) >= batch_size else 0)
    for start in range(0, stop, batch_size):
        idx = order[start : start + batch_size]
        x = ds.images[idx]
        if augment:
            x = augment_batch(x, rng if rng is not None else np.random.default_rng(0), crop_pad)
        yield x, ds.labels[idx]


def cycle_batches(ds: Dataset, batch_size: int, rng: np.random.Generator, **kwargs):
    """Endless reshuffled minibatches."""
    while True:
        yield from batches(ds, batch_size, rng, drop_last=True, **kwargs)


# ---------------------------------------------------------------- synthetic task


def _blob(size: int, cy: float, cx: float, sigma: float) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size]
    return np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sigma**2))


def class_prototypes(classes: int, image_size: int, rng: np.random.Generator, blobs: int = 3) -> np.ndarray:
    """One (3, S, S) pattern per class: a few colored Gaussian blobs, mirrored left-right.

    The mirror symmetry makes horizontal flips label-preserving, so flip
    augmentation is a true invariance of the task.
    """
    protos = np.zeros((classes, 3, image_size, image_size))
    for c in range(classes):
        for _ in range(blobs):
            cy, cx = rng.uniform(2, image_size - 3, size=2)
            sigma = rng.uniform(1.0, 2.0)
            color = rng.standard_normal(3)
            protos[c] += color[:, None, None] * _blob(image_size, cy, cx, sigma)
        protos[c] += protos[c][:, :, ::-1].copy()
        protos[c] /= np.abs(protos[c]).max()
    return protos


def make_synthetic(
    classes: int = 10,
    image_size: int = 16,
    samples_per_class: int = 100,
    test_per_class: int = 50,
    noise: float = 0.4,
    max_shift: int = 4,
    clutter: float = 0.5,
    seed: int = 0,
) -> tuple[Dataset, Dataset]:
    """Class-dependent spatial patterns with random shifts, clutter and Gaussian noise.

    Clutter is the prototype of a different, random class pasted at low
    amplitude and a random shift, so pixel-linear models are distracted.
    Returns ``(train_pool, test)``.
    """
    rng = np.random.default_rng(seed)
    protos = class_prototypes(classes, image_size, rng)

    def draw(per_class: int) -> Dataset:
        n = classes * per_class
        labels = np.repeat(np.arange(classes), per_class)
        images = np.empty((n, 3, image_size, image_size))
        for k, c in enumerate(labels):
            sy, sx = rng.integers(-max_shift, max_shift + 1, size=2)
            img = rng.uniform(0.7, 1.3) * np.roll(protos[c], (sy, sx), axis=(1, 2))
            other = (c + rng.integers(1, classes)) % classes
            oy, ox = rng.integers(-image_size // 2, image_size // 2 + 1, size=2)
            img = img + clutter * np.roll(protos[other], (oy, ox), axis=(1, 2))
            images[k] = img + noise * rng.standard_normal(img.shape)
        perm = rng.permutation(n)
        return Dataset(images[perm], labels[perm])

    return draw(samples_per_class), draw(test_per_class)


# ---------------------------------------------------------------- binary archives


def write_binary(path, images_u8: np.ndarray, labels) -> Path:
    """Write uint8 images of shape (N, H, W, 3) with labels in the documented record layout."""
    path = Path(path)
    images_u8 = np.asarray(images_u8, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    n = len(labels)
    rec = np.empty((n, 1 + images_u8[0].size), dtype=np.uint8)
    rec[:, 0] = labels
    rec[:, 1:] = images_u8.reshape(n, -1)
    path.write_bytes(rec.tobytes())
    return path


def read_binary(path, image_size: int, classes: int | None = None) -> Dataset:
    """Read a record file; pixels are scaled to [0, 1] and returned as NCHW."""
    raw = np.fromfile(path, dtype=np.uint8)
    rec_len = 1 + image_size * image_size * 3
    if raw.size % rec_len:
        offset = (raw.size // rec_len) * rec_len
        raise DatasetError(f"{path}: truncated record at byte offset {offset} (record length {rec_len})")
    rec = raw.reshape(-1, rec_len)
    labels = rec[:, 0].astype(np.int64)
    if classes is not None and labels.size and labels.max() >= classes:
        bad = int(np.argmax(labels >= classes))
        raise DatasetError(f"{path}: label {labels[bad]} >= {classes} at byte offset {bad * rec_len}")
    images = rec[:, 1:].reshape(-1, image_size, image_size, 3).transpose(0, 3, 1, 2) / 255.0
    return Dataset(images, labels)


def standardize(train: Dataset, *others: Dataset) -> list[Dataset]:
    """Per-channel standardization with statistics of ``train``."""
    mu = train.images.mean(axis=(0, 2, 3), keepdims=True)
    sd = train.images.std(axis=(0, 2, 3), keepdims=True) + 1e-8
    return [Dataset((d.images - mu) / sd, d.labels) for d in (train, *others)]


def load_dataset(descriptor: dict, split_ratio: float = 0.7, seed: int = 0) -> tuple[Dataset, Dataset, Dataset]:
    """Build ``(train, val, test)`` from a descriptor.

    ``{"kind": "synthetic", ...make_synthetic kwargs...}`` or
    ``{"kind": "binary", "train_path": ..., "test_path": ..., "image_size": 32, "classes": 10}``.
    The train/val split is a seeded shuffle of the training pool with
    ``split_ratio`` going to train.
    """
    desc = dict(descriptor)
    kind = desc.pop("kind", "synthetic")
    if kind == "synthetic":
        pool, test = make_synthetic(**desc)
    elif kind == "binary":
        size, classes = int(desc["image_size"]), desc.get("classes")
        pool = read_binary(desc["train_path"], size, classes)
        test = read_binary(desc["test_path"], size, classes)
    else:
        raise DatasetError(f"unknown dataset kind {kind!r}")
    train, val = split_dataset(pool, split_ratio, seed)
    train, val, test = standardize(train, val, test)
    return train, val, test
