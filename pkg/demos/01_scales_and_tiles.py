"""
Physical scales, pixel grids and the coarse view
================================================

A patch scale is a side length in microns.  The scanner resolution turns it
into pixels, a non-overlapping grid cuts a coarse field into fine tiles, and
area averaging produces the 224 px view a classifier sees.
"""

import numpy as np

from polypcascade.scalespace import (ScaleSpec, crop, downsample, interior_spans,
                                     scale_to_pixels, tile_grid)

# At 0.4415 um/px the two working scales are 1812 and 15855 px wide
fine = scale_to_pixels(ScaleSpec(800, 0.4415))
coarse = scale_to_pixels(ScaleSpec(7000, 0.4415))
print(f"800 um -> {fine} px, 7000 um -> {coarse} px")

# The coarse field holds an 8 x 8 grid of fine tiles; 1019 px of remainder are dropped
grid = tile_grid(coarse, coarse, fine)
print(f"{len(grid)} tiles, grid shape {grid.shape}, last origin {grid.origins[-1]}")

# Crops are views into the parent, addressed (x, y) = (column, row)
field = np.random.default_rng(0).integers(0, 256, (1586, 1586, 3), dtype=np.uint8)
tile = crop(field, (181, 0), 181)
print("tile shape", tile.shape, "shares memory:", np.shares_memory(tile, field))

# Area averaging is exact box filtering; a +a/-a pattern confined to the
# input spans that fall wholly inside one output pixel disappears entirely
stripes = np.zeros(1586)
for a, b in interior_spans(1586, 224):
    stripes[a:b - (b - a) % 2:2], stripes[a + 1:b - (b - a) % 2:2] = 1, -1
img = np.broadcast_to((128 + 40 * stripes)[None, :, None], (1586, 1586, 3)).astype(np.uint8)
view = downsample(np.ascontiguousarray(img), 224)
print("stripe contrast before:", int(img.max()) - int(img.min()),
      "after:", int(view.max()) - int(view.min()))
