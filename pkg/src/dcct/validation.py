"""Input checks shared by the estimators and the CLI."""
from __future__ import annotations

import numpy as np


def check_image(image, name: str = "image", min_size: int | None = None) -> np.ndarray:
    """Return ``image`` as a float64 H x W x 3 array in [0, 1] or raise ValueError."""
    arr = np.asarray(image)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ValueError(f"{name}: expected an H x W x 3 array, got shape {arr.shape}")
    if arr.dtype == np.uint8:
        arr = arr.astype(np.float64) / 255.0
    else:
        arr = arr.astype(np.float64)
    if not np.isfinite(arr).all():
        raise ValueError(f"{name}: contains NaN or Inf")
    if arr.size and (arr.min() < 0.0 or arr.max() > 1.0):
        raise ValueError(f"{name}: intensities must lie in [0, 1] (got {arr.min():.3g}..{arr.max():.3g})")
    if min_size is not None and min(arr.shape[:2]) < min_size:
        raise ValueError(f"{name}: {arr.shape[0]}x{arr.shape[1]} is smaller than {min_size}x{min_size}")
    return arr


def check_images(images, min_size: int | None = None) -> list:
    if isinstance(images, np.ndarray) and images.ndim == 3:
        images = [images]
    out = [check_image(im, f"image {i}", min_size) for i, im in enumerate(images)]
    if not out:
        raise ValueError("no images given")
    return out


def check_labels(labels, n: int, require_both: bool = True) -> np.ndarray:
    y = np.asarray(labels).reshape(-1)
    if y.size != n:
        raise ValueError(f"got {y.size} labels for {n} images")
    if not np.isin(y, (0, 1)).all():
        raise ValueError("labels must be 0 (photographic) or 1 (generated)")
    if require_both and np.unique(y).size < 2:
        raise ValueError("both classes must be present")
    return y.astype(int)
