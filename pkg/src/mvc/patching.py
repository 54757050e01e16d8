"""Square patch grids over square images, and patch labels from boxes.

Boxes are integer ``(x, y, w, h)`` tuples in pixel units; a box covers
columns ``x .. x+w-1`` and rows ``y .. y+h-1``. Patches are numbered
row-major from the top-left corner.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ShapeError

Box = tuple[int, int, int, int]


@dataclass
class AnnotatedImage:
    pixels: np.ndarray  # (n, n) intensities in [0, 1]
    label: int
    boxes: tuple[Box, ...] = ()
    name: str = ""

    def __post_init__(self):
        if self.pixels.ndim != 2 or self.pixels.shape[0] != self.pixels.shape[1] or self.pixels.shape[0] == 0:
            raise ShapeError(f"image must be a non-empty square grid, got {self.pixels.shape}")
        self.boxes = tuple(clamp_box(b, self.size) for b in self.boxes)

    @property
    def size(self) -> int:
        return self.pixels.shape[0]


@dataclass
class PatchGrid:
    image_size: int
    patch_size: int
    patches: np.ndarray  # (N, m, m)
    labels: np.ndarray | None = field(default=None)

    @property
    def count(self) -> int:
        return self.patches.shape[0]

    @property
    def side(self) -> int:
        return self.image_size // self.patch_size

    @property
    def target_probs(self) -> np.ndarray:
        if self.labels is None:
            raise ValueError("patch labels have not been derived")
        return self.labels.astype(np.float64)


def clamp_box(box: Sequence[int], n: int) -> Box:
    x, y, w, h = (int(v) for v in box)
    if w < 0 or h < 0:
        raise ValueError(f"box {tuple(box)} has negative extent")
    x0, y0 = min(max(x, 0), n), min(max(y, 0), n)
    x1, y1 = min(max(x + w, 0), n), min(max(y + h, 0), n)
    return (x0, y0, x1 - x0, y1 - y0)


def num_patches(n: int, m: int) -> int:
    check_divisible(n, m)
    return (n // m) ** 2


def check_divisible(n: int, m: int) -> None:
    if m <= 0 or n <= 0 or n % m:
        raise ShapeError(f"image size {n} is not divisible by patch size {m}")


def patchify(pixels: np.ndarray, m: int) -> np.ndarray:
    """Split ``(..., n, n)`` images into ``(..., N, m*m)`` row-major patch vectors."""
    n = pixels.shape[-1]
    check_divisible(n, m)
    k = n // m
    lead = pixels.shape[:-2]
    x = pixels.reshape(*lead, k, m, k, m)
    x = np.moveaxis(x, -3, -2)  # (..., k, k, m, m)
    return x.reshape(*lead, k * k, m * m)


def unpatchify(patches: np.ndarray, m: int) -> np.ndarray:
    lead = patches.shape[:-2]
    k = int(round(np.sqrt(patches.shape[-2])))
    x = patches.reshape(*lead, k, k, m, m)
    x = np.moveaxis(x, -2, -3)
    return x.reshape(*lead, k * m, k * m)


def decompose_image(image: AnnotatedImage, m: int) -> PatchGrid:
    n = image.size
    patches = patchify(image.pixels, m).reshape(-1, m, m)
    return PatchGrid(image_size=n, patch_size=m, patches=patches)


def patch_labels(boxes: Sequence[Box], n: int, m: int) -> np.ndarray:
    """Label a patch 1 iff some single box covers strictly more than half its pixels."""
    check_divisible(n, m)
    k = n // m
    labels = np.zeros(k * k, dtype=np.int8)
    if not boxes:
        return labels
    starts = np.arange(k) * m
    ends = starts + m
    for box in boxes:
        x, y, w, h = clamp_box(box, n)
        ox = np.clip(np.minimum(ends, x + w) - np.maximum(starts, x), 0, None)
        oy = np.clip(np.minimum(ends, y + h) - np.maximum(starts, y), 0, None)
        overlap = np.outer(oy, ox).reshape(-1)  # row-major: rows index y
        labels |= (2 * overlap > m * m).astype(np.int8)
    return labels


def derive_patch_labels(grid: PatchGrid, boxes: Sequence[Box]) -> PatchGrid:
    labels = patch_labels(boxes, grid.image_size, grid.patch_size)
    return PatchGrid(grid.image_size, grid.patch_size, grid.patches, labels)


def rasterize_patch_mask(grid_or_size, flags: Sequence[int], m: int | None = None) -> np.ndarray:
    """Pixel mask whose pixels are 1 iff their patch is flagged.

    Accepts either a ``PatchGrid`` or an image size ``n`` together with ``m``.
    """
    if isinstance(grid_or_size, PatchGrid):
        n, m = grid_or_size.image_size, grid_or_size.patch_size
    else:
        n = int(grid_or_size)
    k = n // m
    flags = np.asarray(flags, dtype=np.uint8).reshape(-1)
    if flags.size != k * k:
        raise ShapeError(f"expected {k * k} patch flags, got {flags.size}")
    return np.kron(flags.reshape(k, k), np.ones((m, m), dtype=np.uint8))


def rasterize_boxes(boxes: Sequence[Box], n: int) -> np.ndarray:
    mask = np.zeros((n, n), dtype=np.uint8)
    for box in boxes:
        x, y, w, h = clamp_box(box, n)
        mask[y : y + h, x : x + w] = 1
    return mask
