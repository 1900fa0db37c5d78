"""Physical-scale patch geometry: scale to pixels, grid tiling, cropping, resampling.

Images are ``uint8`` arrays of shape ``(H, W, 3)`` in RGB order.  A pixel
coordinate ``(x, y)`` addresses column ``x`` and row ``y``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import sparse

# Hamamatsu Nanozoomer S210 at 20x
SCANNER_MPP = 0.4415


@dataclass(frozen=True)
class ScaleSpec:
    """A square physical field of side ``sigma_um`` sampled at ``mpp`` microns/px."""

    sigma_um: float
    mpp: float = SCANNER_MPP

    def __post_init__(self):
        if not (self.sigma_um > 0 and math.isfinite(self.sigma_um)):
            raise ValueError(f"sigma_um must be positive, got {self.sigma_um!r}")
        if not (self.mpp > 0 and math.isfinite(self.mpp)):
            raise ValueError(f"mpp must be positive, got {self.mpp!r}")

    @property
    def side_px(self) -> int:
        return scale_to_pixels(self)


def round_half_up(value: float) -> int:
    return int(math.floor(value + 0.5))


def scale_to_pixels(spec: ScaleSpec) -> int:
    """Pixel side of the square field described by ``spec``.

    Rounds to the nearest integer with exact halves going up, and never
    returns less than one pixel.
    """
    if not isinstance(spec, ScaleSpec):
        raise TypeError("scale_to_pixels expects a ScaleSpec")
    return max(1, round_half_up(spec.sigma_um / spec.mpp))


@dataclass(frozen=True)
class TileGrid:
    parent_width_px: int
    parent_height_px: int
    tile_side_px: int
    origins: tuple[tuple[int, int], ...] = field(default=())

    def __len__(self) -> int:
        return len(self.origins)

    def __iter__(self):
        return iter(self.origins)

    @property
    def shape(self) -> tuple[int, int]:
        """(rows, cols) of the grid."""
        return (self.parent_height_px // self.tile_side_px,
                self.parent_width_px // self.tile_side_px)


def tile_grid(width_px: int, height_px: int, tile_side_px: int) -> TileGrid:
    """Non-overlapping square tiles anchored at (0, 0), row-major.

    Right and bottom remainders narrower than one tile are discarded; a tile
    larger than the parent yields an empty grid.
    """
    for name, v in (("width_px", width_px), ("height_px", height_px),
                    ("tile_side_px", tile_side_px)):
        if int(v) != v or v <= 0:
            raise ValueError(f"{name} must be a positive integer, got {v!r}")
    width_px, height_px, s = int(width_px), int(height_px), int(tile_side_px)
    nx, ny = width_px // s, height_px // s
    origins = tuple((ix * s, iy * s) for iy in range(ny) for ix in range(nx))
    return TileGrid(width_px, height_px, s, origins)


def grid_for_image(img: np.ndarray, tile_side_px: int) -> TileGrid:
    h, w = img.shape[:2]
    return tile_grid(w, h, tile_side_px)


def crop(parent: np.ndarray, origin: tuple[int, int], side_px: int) -> np.ndarray:
    """Return the ``side_px`` square whose top-left pixel is ``origin``.

    The result is a view into ``parent``; copy it before mutating.
    """
    x, y = (int(v) for v in origin)
    side_px = int(side_px)
    h, w = parent.shape[:2]
    if side_px < 1 or x < 0 or y < 0 or x + side_px > w or y + side_px > h:
        raise ValueError(
            f"crop window x={x}, y={y}, side={side_px} outside {w}x{h} parent")
    return parent[y:y + side_px, x:x + side_px]


def iter_tiles(parent: np.ndarray, tile_side_px: int):
    """Yield ``(origin, tile)`` for every tile of the (0,0)-anchored grid."""
    grid = grid_for_image(parent, tile_side_px)
    for origin in grid:
        yield origin, crop(parent, origin, tile_side_px)


@lru_cache(maxsize=64)
def area_weights(n_in: int, n_out: int) -> sparse.csr_matrix:
    """``(n_out, n_in)`` matrix of box-filter overlap weights; rows sum to 1.

    Output cell ``i`` covers input span ``[i*n_in/n_out, (i+1)*n_in/n_out)``
    and each input pixel contributes in proportion to its overlap.
    """
    rows, cols, vals = [], [], []
    # exact rational boundaries: cell i spans [i*n_in, (i+1)*n_in) / n_out
    for i in range(n_out):
        lo, hi = i * n_in, (i + 1) * n_in
        k0, k1 = lo // n_out, -(-hi // n_out)
        for k in range(k0, k1):
            overlap = min(hi, (k + 1) * n_out) - max(lo, k * n_out)
            if overlap > 0:
                rows.append(i)
                cols.append(k)
                vals.append(overlap / n_in)
    return sparse.csr_matrix((vals, (rows, cols)), shape=(n_out, n_in))


def interior_spans(n_in: int, n_out: int) -> list[tuple[int, int]]:
    """Input index ranges ``[a, b)`` that lie wholly inside one output cell.

    Any zero-sum pattern confined to such a range (along that axis) is
    removed exactly by :func:`downsample`.
    """
    spans = []
    for i in range(n_out):
        lo, hi = i * n_in, (i + 1) * n_in
        a = -(-lo // n_out)
        b = hi // n_out
        if b > a:
            spans.append((a, b))
    return spans


def resample_area(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Area-average ``img`` to ``(out_h, out_w)``; float64 output, no rounding."""
    h, w = img.shape[:2]
    wy = area_weights(h, out_h)
    wx = area_weights(w, out_w)
    src = np.asarray(img, dtype=np.float64)
    if src.ndim == 2:
        return np.asarray((wy @ (wx @ src.T).T))
    c = src.shape[2]
    # rows first: (out_h, w*c), then columns per channel
    tmp = wy @ src.reshape(h, w * c)
    tmp = tmp.reshape(out_h, w, c).transpose(1, 0, 2).reshape(w, out_h * c)
    out = (wx @ tmp).reshape(out_w, out_h, c).transpose(1, 0, 2)
    return np.ascontiguousarray(out)


def to_uint8(values: np.ndarray) -> np.ndarray:
    return np.clip(np.floor(values + 0.5), 0, 255).astype(np.uint8)


def downsample(img: np.ndarray, target_side_px: int = 224) -> np.ndarray:
    """Area-average a square image to ``target_side_px`` squared.

    The same box filter also serves when the target is larger than the
    input.  Equal sizes return an unchanged copy.
    """
    if img.ndim < 2 or img.shape[0] != img.shape[1]:
        raise ValueError(f"downsample needs a square image, got shape {img.shape}")
    target_side_px = int(target_side_px)
    if target_side_px < 1:
        raise ValueError("target_side_px must be >= 1")
    if img.shape[0] == target_side_px:
        return np.array(img, copy=True)
    out = resample_area(img, target_side_px, target_side_px)
    if img.dtype == np.uint8:
        return to_uint8(out)
    return out.astype(img.dtype, copy=False)


def read_png(path: str | Path) -> np.ndarray:
    # whole slides exceed PIL's decompression-bomb guard by design
    Image.MAX_IMAGE_PIXELS = None
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.uint8).copy()


def write_png(path: str | Path, img: np.ndarray) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.ascontiguousarray(img, dtype=np.uint8)).save(
        path, format="PNG", compress_level=6)
