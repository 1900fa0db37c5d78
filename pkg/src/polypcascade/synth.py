"""Deterministic scale-aware synthetic corpus.

Each generated parent is a ``canvas_um`` square field carrying three cues,
one per colour channel, each legible only at its own scale:

* green - fine stripes with a period of two pixels.  HP parents have
  vertical stripes (columns alternate), every other class horizontal ones.
  The stripes are laid out in zero-sum pairs inside the input spans that
  map wholly onto one pixel of the ``view_side_px`` coarse view, so
  area-averaging the whole field to that size removes them exactly.
* blue - large dark shapes describing the tissue architecture.  NORM and HP
  show one large disc, TA four small discs, TVA three long parallel
  fingers, all randomly placed and rotated.  A fine crop only ever sees a
  fragment.
* red - 2x2 "nuclei" with a bright balancing ring (zero-sum 4x4 blocks, also
  confined to interior spans, so they too vanish in the coarse view).  Each
  fine tile of an adenoma receives a dot count drawn from its grade band;
  NORM and HP have none.

The closed-form statistics used to read each cue back are defined here as
well; the mock oracle backbones are thin wrappers around them.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .config import apply_kv, dump_kv, format_value, load_kv
from .dataset import (LABELS, Manifest, PatchRecord, PolypLabel, patch_id_for,
                      split_slides, write_manifest)
from .scalespace import (ScaleSpec, interior_spans, scale_to_pixels, tile_grid,
                         write_png)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class SynthConfig:
    n_slides_per_class: int = 2
    seed: int = 0
    canvas_um: float = 7000.0
    mpp: float = 4.415
    parents_per_slide: int = 1
    fine_um: float = 800.0
    view_side_px: int = 224
    train_fraction: float = 0.7
    base_rgb: tuple[int, ...] = (176, 150, 200)
    stripe_amplitude: int = 40
    shape_depth: int = 90
    dot_ring: int = 25
    lg_band: tuple[int, ...] = (25, 45)
    hg_band: tuple[int, ...] = (90, 120)
    write_subpatches: bool = False
    workers: int = 1

    def __post_init__(self):
        if self.n_slides_per_class < 1 or self.parents_per_slide < 1:
            raise ValueError("n_slides_per_class and parents_per_slide must be >= 1")
        lo_l, hi_l = self.lg_band
        lo_h, hi_h = self.hg_band
        if not (0 < lo_l <= hi_l < lo_h <= hi_h):
            raise ValueError("grade bands must be ordered and disjoint")
        r, g, b = self.base_rgb
        if r + self.dot_ring > 255 or r - 3 * self.dot_ring < 0:
            raise ValueError("dot ring does not fit in the red channel")
        if g + self.stripe_amplitude > 255 or g - self.stripe_amplitude < 0:
            raise ValueError("stripe amplitude does not fit in the green channel")
        if b - self.shape_depth < 0:
            raise ValueError("shape depth does not fit in the blue channel")

    @property
    def canvas_px(self) -> int:
        return scale_to_pixels(ScaleSpec(self.canvas_um, self.mpp))

    @property
    def fine_px(self) -> int:
        return scale_to_pixels(ScaleSpec(self.fine_um, self.mpp))

    @property
    def dot_threshold(self) -> float:
        # halfway down to the dot core
        return self.base_rgb[0] - 1.5 * self.dot_ring

    @property
    def shape_threshold(self) -> float:
        return self.base_rgb[2] - self.shape_depth / 2

    @property
    def grade_boundary(self) -> float:
        """Dots per fine tile separating the LG band from the HG band."""
        return (self.lg_band[1] + self.hg_band[0]) / 2


def load_synth_config(path: str | Path) -> SynthConfig:
    return apply_kv(SynthConfig(), load_kv(path))


def slide_id_for(label: PolypLabel, index: int) -> str:
    return f"{label.slug}-{index:03d}"


# -- rendering -------------------------------------------------------------

def _pair_pattern(n: int, spans, amplitude: int) -> np.ndarray:
    """+a/-a pairs filling each interior span; everything else zero."""
    t = np.zeros(n, dtype=np.int16)
    for a, b in spans:
        for k in range(a, b - 1, 2):
            t[k] = amplitude
            t[k + 1] = -amplitude
    return t


def _shape_mask(label: PolypLabel, n: int, rng: np.random.Generator) -> np.ndarray:
    c = (np.arange(n) + 0.5) / n
    u, v = np.meshgrid(c, c)  # u along x, v along y
    theta = rng.uniform(0, math.pi)
    cos, sin = math.cos(theta), math.sin(theta)
    cx, cy = 0.5 + rng.uniform(-0.04, 0.04, size=2)
    du, dv = u - cx, v - cy
    # coordinates in the rotated frame
    p = du * cos + dv * sin
    q = -du * sin + dv * cos
    kind = label.type
    if kind in ("NORM", "HP"):
        r = rng.uniform(0.27, 0.31)
        return p * p + q * q <= r * r
    if kind == "TA":
        r = rng.uniform(0.105, 0.125)
        off = rng.uniform(0.19, 0.21)
        mask = np.zeros((n, n), dtype=bool)
        for sp in (-off, off):
            for sq in (-off, off):
                mask |= (p - sp) ** 2 + (q - sq) ** 2 <= r * r
        return mask
    # TVA: three parallel rounded fingers
    half_len = rng.uniform(0.30, 0.34)
    half_w = rng.uniform(0.045, 0.055)
    gap = rng.uniform(0.2, 0.22)
    mask = np.zeros((n, n), dtype=bool)
    for sq in (-gap, 0.0, gap):
        qq = np.abs(q - sq)
        pp = np.maximum(np.abs(p) - half_len, 0.0)
        mask |= pp * pp + qq * qq <= half_w * half_w
    return mask


def _dot_cells(n: int, cfg: SynthConfig):
    """Interior spans long enough to host a 4x4 dot block."""
    return [(a, b) for a, b in interior_spans(n, cfg.view_side_px) if b - a >= 4]


def _place_dots(red: np.ndarray, label: PolypLabel, cfg: SynthConfig,
                rng: np.random.Generator) -> list[int]:
    """Stamp zero-sum dot blocks; return the count placed in each fine tile."""
    n = red.shape[0]
    band = cfg.hg_band if label.grade == "HG" else cfg.lg_band
    spans = _dot_cells(n, cfg)
    starts = np.array([a for a, _ in spans])
    ring, core = cfg.dot_ring, -3 * cfg.dot_ring
    block = np.full((4, 4), ring, dtype=np.int16)
    block[1:3, 1:3] = core

    def stamp(cells_y, cells_x):
        for sy, sx in zip(cells_y, cells_x):
            (ay, by), (ax, bx) = spans[sy], spans[sx]
            y0 = ay + int(rng.integers(0, by - ay - 3))
            x0 = ax + int(rng.integers(0, bx - ax - 3))
            red[y0:y0 + 4, x0:x0 + 4] += block

    fine = cfg.fine_px
    grid = tile_grid(n, n, fine)
    lens = np.array([b - a for a, b in spans])
    counts = []
    for ox, oy in grid:
        # spans fully inside this tile along each axis
        iy = np.nonzero((starts >= oy) & (starts + lens <= oy + fine))[0]
        ix = np.nonzero((starts >= ox) & (starts + lens <= ox + fine))[0]
        k = int(rng.integers(band[0], band[1] + 1))
        flat = rng.choice(len(iy) * len(ix), size=k, replace=False)
        stamp(iy[flat // len(ix)], ix[flat % len(ix)])
        counts.append(k)
    # strip beyond the grid gets the mean tile density
    rows, cols = grid.shape
    out_y = starts >= rows * fine
    out_x = starts >= cols * fine
    per_cell = (sum(band) / 2) / (fine * cfg.view_side_px / n) ** 2
    ys, xs = np.nonzero(out_y[:, None] | out_x[None, :])
    keep = rng.random(len(ys)) < per_cell
    stamp(ys[keep], xs[keep])
    return counts


def render_parent(cfg: SynthConfig, label: PolypLabel, slide_index: int,
                  parent_index: int = 0) -> np.ndarray:
    """Render one parent field; a pure function of its arguments."""
    label = PolypLabel.parse(str(label))
    ss = np.random.SeedSequence([cfg.seed, LABELS.index(label), slide_index, parent_index])
    rng = np.random.default_rng(ss)
    n = cfg.canvas_px
    r0, g0, b0 = cfg.base_rgb

    img = np.empty((n, n, 3), dtype=np.int16)
    spans = interior_spans(n, cfg.view_side_px)
    stripes = _pair_pattern(n, spans, cfg.stripe_amplitude)
    if label is PolypLabel.HP:
        img[..., 1] = g0 + stripes[None, :]
    else:
        img[..., 1] = g0 + stripes[:, None]

    img[..., 2] = b0
    img[..., 2][_shape_mask(label, n, rng)] -= cfg.shape_depth

    img[..., 0] = r0
    if label.is_adenoma:
        _place_dots(img[..., 0], label, cfg, rng)
    return img.astype(np.uint8)


# -- cue statistics --------------------------------------------------------

def stripe_energy(img: np.ndarray) -> tuple[float, float]:
    """Mean absolute green-channel step along x and along y.

    Vertical stripes (the HP motif) raise the first value, horizontal
    stripes the second; a field without fine texture gives (0, 0).
    """
    g = np.asarray(img[..., 1], dtype=np.float64)
    sx = float(np.abs(np.diff(g, axis=1)).mean()) if g.shape[1] > 1 else 0.0
    sy = float(np.abs(np.diff(g, axis=0)).mean()) if g.shape[0] > 1 else 0.0
    return sx, sy


def hp_texture_statistic(img: np.ndarray) -> float:
    """Strength of the HP motif: the x-direction stripe energy."""
    return stripe_energy(img)[0]


def hp_decision_constant(cfg: SynthConfig) -> float:
    return cfg.stripe_amplitude / 4


def count_dots(img: np.ndarray, cfg: SynthConfig) -> int:
    """Number of connected dark blobs in the red channel."""
    dark = np.asarray(img[..., 0]) < cfg.dot_threshold
    _, n = ndimage.label(dark)
    return int(n)


def dot_density(img: np.ndarray, cfg: SynthConfig) -> float:
    """Dots per fine-tile area (``fine_px`` squared), valid for any crop size."""
    h, w = img.shape[:2]
    return count_dots(img, cfg) * cfg.fine_px ** 2 / (h * w)


def shape_components(img: np.ndarray, cfg: SynthConfig, min_area_frac: float = 0.003
                     ) -> list[int]:
    """Areas of dark blue blobs wholly inside the frame."""
    mask = np.asarray(img[..., 2]) < cfg.shape_threshold
    lab, n = ndimage.label(mask)
    if n == 0:
        return []
    border = set(np.unique(np.concatenate([lab[0], lab[-1], lab[:, 0], lab[:, -1]])))
    areas = ndimage.sum_labels(mask, lab, index=np.arange(1, n + 1))
    min_area = min_area_frac * mask.size
    return [int(a) for i, a in enumerate(areas, 1) if i not in border and a >= min_area]


# component count -> tissue type
SHAPE_COUNTS = {1: "NORM", 4: "TA", 3: "TVA"}


def shape_type(img: np.ndarray, cfg: SynthConfig) -> str | None:
    """NORM / TA / TVA from the blob count, or None when the frame shows none."""
    return SHAPE_COUNTS.get(len(shape_components(img, cfg)))


# -- corpus ----------------------------------------------------------------

def _render_slide(args):
    cfg, label, slide_index = args
    return [render_parent(cfg, label, slide_index, p) for p in range(cfg.parents_per_slide)]


def synth_generate(config: SynthConfig, out_dir: str | Path) -> Manifest:
    """Render the corpus under ``out_dir`` and write ``manifest.csv`` there.

    Layout follows ``<label>/<slide_id>/<scale_um>/<patch_id>.png``; parents
    of one slide sit side by side along x.  ``synth.cfg`` echoes the config.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg = config
    n = cfg.canvas_px
    jobs = [(cfg, lab, k) for lab in LABELS for k in range(cfg.n_slides_per_class)]
    slide_labels = {slide_id_for(lab, k): lab for _, lab, k in jobs}
    train, _ = split_slides(set(slide_labels), cfg.train_fraction, cfg.seed,
                            labels=slide_labels)

    if cfg.workers > 1:
        with ProcessPoolExecutor(cfg.workers) as pool:
            rendered = pool.map(_render_slide, jobs)
    else:
        rendered = map(_render_slide, jobs)

    records: list[PatchRecord] = []
    fine = cfg.fine_px
    for (_, lab, k), parents in zip(jobs, rendered):
        sid = slide_id_for(lab, k)
        split = "train" if sid in train else "test"
        for p, img in enumerate(parents):
            x0 = p * n
            pid = patch_id_for(sid, cfg.canvas_um, x0, 0)
            rel = f"{lab.value}/{sid}/{format_value(cfg.canvas_um)}/{pid}.png"
            write_png(out / rel, img)
            records.append(PatchRecord(pid, sid, split, lab, cfg.canvas_um, x0, 0, n, rel))
            if cfg.write_subpatches:
                for ox, oy in tile_grid(n, n, fine):
                    spid = patch_id_for(sid, cfg.fine_um, x0 + ox, oy)
                    srel = f"{lab.value}/{sid}/{format_value(cfg.fine_um)}/{spid}.png"
                    write_png(out / srel, img[oy:oy + fine, ox:ox + fine])
                    records.append(PatchRecord(spid, sid, split, lab, cfg.fine_um,
                                               x0 + ox, oy, fine, srel))
    manifest = Manifest(cfg.mpp, records)
    write_manifest(manifest, out / "manifest.csv")
    (out / "synth.cfg").write_text(dump_kv(cfg), encoding="utf-8")
    log.info("synthesized %d patches from %d slides in %s", len(records), len(jobs), out)
    return manifest
