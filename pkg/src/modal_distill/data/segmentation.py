"""Tissue segmentation and grid patch extraction."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy import ndimage
from skimage.filters import threshold_otsu

DEFAULT_BLUR_RADIUS = 2.0
DEFAULT_MIN_COVERAGE = 0.5


def to_gray(image: np.ndarray) -> np.ndarray:
    """ITU-R 601 luma of an RGB image, as float64 in [0, 255]."""
    image = np.asarray(image, dtype=np.float64)
    return image[..., 0] * 0.299 + image[..., 1] * 0.587 + image[..., 2] * 0.114


def segment_tissue(image: np.ndarray, blur_radius: float = DEFAULT_BLUR_RADIUS) -> np.ndarray:
    """Separate tissue from background with a gaussian blur followed by Otsu.

    The grayscale image is blurred with ``sigma=blur_radius`` (0 disables the
    blur), quantised to 8 bits and thresholded; tissue is the darker class.
    A single-level image has no separable foreground and yields an empty mask
    together with a ``RuntimeWarning``.
    """
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[-1] != 3 or image.size == 0:
        raise ValueError(f"expected a non-empty HxWx3 image, got shape {image.shape}")

    gray = to_gray(image)
    if blur_radius > 0:
        gray = ndimage.gaussian_filter(gray, sigma=blur_radius, mode="nearest")
    gray = np.clip(np.rint(gray), 0, 255).astype(np.uint8)

    if gray.min() == gray.max():
        warnings.warn("single gray level, no tissue separable", RuntimeWarning, stacklevel=2)
        return np.zeros(gray.shape, dtype=bool)

    threshold = threshold_otsu(gray)
    return gray <= threshold


@dataclass(frozen=True)
class Patches:
    """Patches cut from one region.

    ``pixels`` is ``(N, p, p, 3)`` uint8 and ``grid`` holds the ``(row, col)``
    grid position of each patch, both in row-major order.
    """

    pixels: np.ndarray
    grid: np.ndarray
    region_id: str = ""

    def __len__(self) -> int:
        return len(self.pixels)

    @property
    def patch_size(self) -> int:
        return self.pixels.shape[1]


def tile_coverage(mask: np.ndarray, p: int) -> np.ndarray:
    """Fraction of tissue pixels inside each full ``p x p`` grid tile."""
    rows, cols = mask.shape[0] // p, mask.shape[1] // p
    tiles = np.asarray(mask[: rows * p, : cols * p], dtype=np.float64)
    return tiles.reshape(rows, p, cols, p).mean(axis=(1, 3))


def extract_patches(
    image: np.ndarray,
    mask: np.ndarray,
    p: int,
    min_coverage: float = DEFAULT_MIN_COVERAGE,
    region_id: str = "",
) -> Patches:
    """Cut non-overlapping ``p x p`` tiles whose tissue coverage is at least
    ``min_coverage``. Border remainders narrower than ``p`` are dropped.
    """
    image = np.asarray(image)
    mask = np.asarray(mask, dtype=bool)
    if image.shape[:2] != mask.shape:
        raise ValueError(f"mask shape {mask.shape} does not match image {image.shape[:2]}")
    if p < 1:
        raise ValueError("patch size must be positive")

    rows, cols = image.shape[0] // p, image.shape[1] // p
    if rows == 0 or cols == 0:
        return Patches(
            np.zeros((0, p, p, 3), dtype=np.uint8), np.zeros((0, 2), dtype=np.int64), region_id
        )

    keep = tile_coverage(mask, p) >= min_coverage
    grid = np.argwhere(keep).astype(np.int64)
    tiles = image[: rows * p, : cols * p].reshape(rows, p, cols, p, 3).swapaxes(1, 2)
    pixels = np.ascontiguousarray(tiles[keep], dtype=np.uint8)
    return Patches(pixels, grid, region_id)
