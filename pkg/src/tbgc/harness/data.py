"""Synthetic three-task benchmark.

* ``cls``: each class is a fixed pair of Gaussian blobs; samples jitter the
  blob positions and add pixel noise.
* ``seg``: one axis-aligned rectangle per image; mask classes are
  background (0), rectangle interior (1) and its one-pixel border (2).
* ``det``: one rectangle per image; the label is its exact normalised box.

Rectangles are rasterised on integer pixel extents first and the normalised
box is derived from them, so box coordinates are exact multiples of
``1 / (2 * size)``.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from ..mtmodel import CLS, DET, SEG


@dataclass
class Dataset:
    task: str
    images: np.ndarray  # n x H x W x 1
    labels: np.ndarray

    def __len__(self) -> int:
        return len(self.images)

    def digest(self) -> str:
        h = hashlib.sha256(self.task.encode())
        for arr in (self.images, self.labels):
            h.update(str(arr.dtype).encode())
            h.update(str(arr.shape).encode())
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()

    def subset(self, idx) -> "Dataset":
        return Dataset(self.task, self.images[idx], self.labels[idx])

    def split(self, seed: int, holdout: float = 0.2) -> tuple["Dataset", "Dataset"]:
        """Deterministic train / held-out split."""
        perm = np.random.default_rng([seed, 0x5EED]).permutation(len(self))
        n_test = max(1, int(round(holdout * len(self))))
        return self.subset(np.sort(perm[n_test:])), self.subset(np.sort(perm[:n_test]))


def _blob(size: int, cy: float, cx: float, sigma: float) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size]
    return np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2.0 * sigma * sigma))


def make_cls(n: int, size: int, rng: np.random.Generator, num_classes: int = 8,
             noise: float = 0.5, jitter: float = 1.5) -> Dataset:
    centres = rng.uniform(0.2 * size, 0.8 * size, (num_classes, 2, 2))
    sigma = size / 12.0
    labels = rng.integers(0, num_classes, n)
    images = np.empty((n, size, size, 1))
    for i, c in enumerate(labels):
        img = np.zeros((size, size))
        for cy, cx in centres[c]:
            dy, dx = rng.normal(0.0, jitter, 2)
            img += _blob(size, cy + dy, cx + dx, sigma)
        images[i, :, :, 0] = img + rng.normal(0.0, noise, (size, size))
    return Dataset(CLS, images, labels.astype(np.int64))


def _random_rect(size: int, rng: np.random.Generator) -> tuple[int, int, int, int]:
    lo, hi = max(2, size // 6), max(3, (2 * size) // 3)
    pw, ph = int(rng.integers(lo, hi + 1)), int(rng.integers(lo, hi + 1))
    x0, y0 = int(rng.integers(0, size - pw + 1)), int(rng.integers(0, size - ph + 1))
    return x0, y0, pw, ph


def rect_mask(size: int, x0: int, y0: int, pw: int, ph: int) -> np.ndarray:
    mask = np.zeros((size, size), dtype=np.int64)
    mask[y0:y0 + ph, x0:x0 + pw] = 2
    if pw > 2 and ph > 2:
        mask[y0 + 1:y0 + ph - 1, x0 + 1:x0 + pw - 1] = 1
    return mask


def rect_box(size: int, x0: int, y0: int, pw: int, ph: int) -> np.ndarray:
    return np.array([(x0 + pw / 2) / size, (y0 + ph / 2) / size, pw / size, ph / size])


def _rect_image(size: int, rect, rng: np.random.Generator, noise: float) -> np.ndarray:
    x0, y0, pw, ph = rect
    img = rng.normal(0.0, noise, (size, size))
    img[y0:y0 + ph, x0:x0 + pw] += rng.uniform(0.7, 1.3)
    return img[:, :, None]


def make_seg(n: int, size: int, rng: np.random.Generator, noise: float = 0.3) -> Dataset:
    images = np.empty((n, size, size, 1))
    masks = np.empty((n, size, size), dtype=np.int64)
    for i in range(n):
        rect = _random_rect(size, rng)
        images[i] = _rect_image(size, rect, rng, noise)
        masks[i] = rect_mask(size, *rect)
    return Dataset(SEG, images, masks)


def make_det(n: int, size: int, rng: np.random.Generator, noise: float = 0.3) -> Dataset:
    images = np.empty((n, size, size, 1))
    boxes = np.empty((n, 4))
    for i in range(n):
        rect = _random_rect(size, rng)
        images[i] = _rect_image(size, rect, rng, noise)
        boxes[i] = rect_box(size, *rect)
    return Dataset(DET, images, boxes)


def generate_dataset(spec, seed: int, image_size: int = 32, num_classes: int = 8) -> Dataset:
    """Dataset for ``spec.task`` with ``spec.size`` samples; deterministic per seed."""
    rng = np.random.default_rng([seed, {CLS: 1, SEG: 2, DET: 3}[spec.task]])
    if spec.task == CLS:
        return make_cls(spec.size, image_size, rng, num_classes, noise=spec.noise)
    if spec.task == SEG:
        return make_seg(spec.size, image_size, rng, noise=spec.noise)
    return make_det(spec.size, image_size, rng, noise=spec.noise)
