"""
A synthetic corpus with scale-specific cues
===========================================

Each generated field carries three cues, one per colour channel.  Fine
stripes mark HP, dot density marks the dysplasia grade, and large shapes
mark the tissue architecture (NORM, TA, TVA).  The first two survive only at
full resolution; the shapes are only whole in the coarse view.
"""

import sys
import tempfile
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

from polypcascade.dataset import LABELS, class_distribution
from polypcascade.scalespace import crop, downsample
from polypcascade.synth import (SynthConfig, count_dots, render_parent, shape_type,
                                stripe_energy, synth_generate)

cfg = SynthConfig()
print(f"field {cfg.canvas_px} px, fine tile {cfg.fine_px} px at {cfg.mpp} um/px")

fig, axes = plt.subplots(2, 6, figsize=(15, 5.5))
for col, label in enumerate(LABELS):
    field = render_parent(cfg, label, 0)
    view = downsample(field, 224)
    tile = crop(field, (4 * cfg.fine_px, 4 * cfg.fine_px), cfg.fine_px)
    sx, sy = stripe_energy(tile)
    print(f"{label.value:7s} coarse shape: {shape_type(view, cfg)!s:5s} "
          f"tile stripes x/y: {sx:4.1f}/{sy:4.1f}  tile dots: {count_dots(tile, cfg)}")
    axes[0, col].imshow(view)
    axes[0, col].set_title(f"{label.value} (224 px view)", fontsize=9)
    axes[1, col].imshow(tile[:60, :60], interpolation="nearest")
    axes[1, col].set_title("fine tile, 60 px corner", fontsize=9)
for ax in axes.flat:
    ax.axis("off")
fig.tight_layout()

out = Path(sys.argv[1]) if len(sys.argv) > 1 else Path(tempfile.mkdtemp())
fig.savefig(out / "synthetic_cues.png", dpi=80)
print("figure:", out / "synthetic_cues.png")

# A small corpus on disk: PNGs, a manifest and a slide-level split
manifest = synth_generate(SynthConfig(n_slides_per_class=3, seed=1), out / "corpus")
print(class_distribution(manifest, "slide").format("slides"))
print("train slides:", sorted(manifest.slides("train")))
