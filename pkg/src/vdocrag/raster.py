"""Raster loading and color handling.

Rasters are numpy uint8 arrays, (H, W) for grayscale or (H, W, 3) for RGB.
Supported file formats: PNG and binary PPM (P6), both 8-bit.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

from .errors import DataError

# Rec. 601 luma weights, fixed for bit-reproducible grayscale conversion.
_LUMA = np.array([0.299, 0.587, 0.114])

_SUPPORTED_SUFFIXES = {".png", ".ppm"}


def load_raster(path: str | Path) -> np.ndarray:
    path = Path(path)
    if path.suffix.lower() not in _SUPPORTED_SUFFIXES:
        raise DataError(f"unsupported image format {path.suffix!r} for {path}")
    try:
        with Image.open(path) as img:
            if img.mode == "L":
                arr = np.asarray(img, dtype=np.uint8)
            else:
                arr = np.asarray(img.convert("RGB"), dtype=np.uint8)
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read image {path}: {exc}") from exc
    if arr.ndim not in (2, 3) or arr.shape[0] < 1 or arr.shape[1] < 1:
        raise DataError(f"degenerate image {path}: shape {arr.shape}")
    return arr


def save_raster(arr: np.ndarray, path: str | Path) -> None:
    path = Path(path)
    if path.suffix.lower() not in _SUPPORTED_SUFFIXES:
        raise DataError(f"unsupported image format {path.suffix!r} for {path}")
    path.parent.mkdir(parents=True, exist_ok=True)
    mode = "L" if arr.ndim == 2 else "RGB"
    Image.fromarray(np.asarray(arr, dtype=np.uint8), mode=mode).save(path)


def to_gray01(arr: np.ndarray) -> np.ndarray:
    """Convert a uint8 raster to float64 grayscale intensities in [0, 1]."""
    if arr.ndim == 2:
        return arr.astype(np.float64) / 255.0
    return (arr.astype(np.float64) @ _LUMA) / 255.0
