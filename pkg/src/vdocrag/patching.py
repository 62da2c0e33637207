"""Dynamic high-resolution cropping and the deterministic patch featurizer.

An image is scaled by a single uniform factor (aspect ratio preserved),
padded with zeros up to a whole number of square tiles, and sliced
row-major into fixed-size patches. Each patch is then reduced to a G x G
grid of mean grayscale intensities; the flattened grid is the patch's
feature vector. This featurizer is the fixed, training-free stand-in for
a learned vision tower.

Scaling rule (documented, since several aspect-preserving rules exist):
  1. downscale so the long side fits max_px (never upscale past 1.0 for
     this constraint alone);
  2. if the short side is still below patch_px, upscale so it reaches
     patch_px, capped so the long side stays within max_px.
Resampling is nearest-neighbor with half-pixel centers, rounding
half-up on the target size -- fully reproducible in integer arithmetic.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass

import numpy as np

from .corpus import DocumentRecord
from .errors import DataError
from .raster import to_gray01

DEFAULT_PATCH_PX = 336
DEFAULT_MAX_PX = 1344
DEFAULT_GRID_G = 8


@dataclass(frozen=True)
class PatchGrid:
    patch_px: int
    rows: int
    cols: int
    patches: tuple[np.ndarray, ...]  # row-major, each patch_px x patch_px (x C)
    scale: tuple[float, float]       # actual (sy, sx) = (H'/H, W'/W)
    padded: np.ndarray               # the scaled-and-padded canvas

    def __post_init__(self):
        if self.rows * self.cols != len(self.patches):
            raise DataError("patch count does not match grid shape")


def _target_size(h: int, w: int, patch_px: int, max_px: int) -> tuple[int, int]:
    s = min(1.0, max_px / max(h, w))
    if min(h, w) * s < patch_px:
        s = min(patch_px / min(h, w), max_px / max(h, w))
    th = max(1, int(math.floor(h * s + 0.5)))
    tw = max(1, int(math.floor(w * s + 0.5)))
    return th, tw


def _resize_nearest(image: np.ndarray, th: int, tw: int) -> np.ndarray:
    h, w = image.shape[:2]
    if (th, tw) == (h, w):
        return image
    # floor((i + 0.5) * src/dst) in exact integer arithmetic
    ys = np.minimum(((2 * np.arange(th) + 1) * h) // (2 * th), h - 1)
    xs = np.minimum(((2 * np.arange(tw) + 1) * w) // (2 * tw), w - 1)
    return image[np.ix_(ys, xs)]


def crop_dynamic(image: np.ndarray, patch_px: int = DEFAULT_PATCH_PX,
                 max_px: int = DEFAULT_MAX_PX) -> PatchGrid:
    """Tile `image` into patch_px-square patches after uniform scaling.

    rows = ceil(H'/patch_px), cols = ceil(W'/patch_px); the canvas is
    zero-padded to exactly (rows*patch_px, cols*patch_px).
    """
    if patch_px < 1:
        raise DataError(f"patch_px must be >= 1, got {patch_px}")
    if max_px < patch_px:
        raise DataError(f"max_px ({max_px}) must be >= patch_px ({patch_px})")
    arr = np.asarray(image)
    if arr.ndim not in (2, 3) or arr.shape[0] < 1 or arr.shape[1] < 1:
        raise DataError(f"degenerate image of shape {arr.shape}")

    h, w = arr.shape[:2]
    th, tw = _target_size(h, w, patch_px, max_px)
    scaled = _resize_nearest(arr, th, tw)

    rows = -(-th // patch_px)
    cols = -(-tw // patch_px)
    pad_shape = (rows * patch_px, cols * patch_px) + arr.shape[2:]
    padded = np.zeros(pad_shape, dtype=arr.dtype)
    padded[:th, :tw] = scaled

    patches = tuple(
        padded[r * patch_px:(r + 1) * patch_px, c * patch_px:(c + 1) * patch_px]
        for r in range(rows) for c in range(cols)
    )
    return PatchGrid(patch_px=patch_px, rows=rows, cols=cols, patches=patches,
                     scale=(th / h, tw / w), padded=padded)


def _block_cuts(length: int, g: int) -> np.ndarray:
    # blocks of size length//g; the remainder is folded into the last block
    return np.arange(g) * (length // g)


def featurize(grid: PatchGrid, g: int = DEFAULT_GRID_G) -> np.ndarray:
    """Per-patch G x G block-mean grayscale features, shape (n_patches, G*G).

    Values are in [0, 1]; block boundaries at multiples of patch_px//G with
    the division remainder folded into the last row/column of blocks.
    """
    p = grid.patch_px
    if g < 1 or g > p:
        raise DataError(f"feature grid G={g} must satisfy 1 <= G <= patch_px={p}")
    cuts = _block_cuts(p, g)
    edges = np.append(cuts, p)
    sizes = np.diff(edges).astype(np.float64)
    area = np.outer(sizes, sizes)

    out = np.empty((len(grid.patches), g * g), dtype=np.float64)
    for i, patch in enumerate(grid.patches):
        gray = to_gray01(patch)
        sums = np.add.reduceat(np.add.reduceat(gray, cuts, axis=0), cuts, axis=1)
        out[i] = (sums / area).reshape(-1)
    if not np.all(np.isfinite(out)):
        raise DataError("non-finite patch features")
    return out


def stub_features(doc_id: str, g: int = DEFAULT_GRID_G, n_patches: int = 1) -> np.ndarray:
    """Deterministic pseudo-features for documents without a raster.

    Seeded from a stable hash of doc_id so rebuilds are byte-identical.
    """
    seed = int.from_bytes(hashlib.sha256(doc_id.encode("utf-8")).digest()[:8], "little")
    rng = np.random.default_rng(seed)
    return rng.uniform(0.0, 1.0, size=(n_patches, g * g))


def document_features(record: DocumentRecord, patch_px: int = DEFAULT_PATCH_PX,
                      max_px: int = DEFAULT_MAX_PX, g: int = DEFAULT_GRID_G) -> np.ndarray:
    """Patch features for a document record, (n_patches, G*G) in [0, 1]."""
    if record.feature_stub:
        return stub_features(record.doc_id, g=g)
    grid = crop_dynamic(record.load_raster(), patch_px=patch_px, max_px=max_px)
    return featurize(grid, g=g)
