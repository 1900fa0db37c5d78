"""
Multi-resolution cascade against single-scale baselines
=======================================================

Trains the three cascade classifiers (HP on fine tiles, adenoma type on the
coarse view, grade on full-resolution tiles) and two six-class baselines
that see one scale each.  Takes several minutes on one CPU core.

Usage: python demos/04_desk_experiment.py [output_dir]
"""

import logging
import sys
import tempfile
from pathlib import Path

from polypcascade.cli import plot_sweep
from polypcascade.experiment import DeskProtocol, run_desk
from polypcascade.metrics import plot_confusion

logging.basicConfig(level=logging.INFO, format="%(message)s")
out = Path(sys.argv[1]) if len(sys.argv) > 1 else Path(tempfile.mkdtemp())

protocol = DeskProtocol()
print("corpus:", protocol.synth)
print("training:", protocol.train)
summary = run_desk(out, protocol)

print((out / "sweep.txt").read_text())
print("baseline confusion matrices are in", out / "sweep.json")
print("cascade six-class BA: %.3f" % summary["cascade_ba"])
print(summary["cascade_confusion"].format())

plot_confusion(summary["cascade_confusion"], out / "cascade_confusion.png", "cascade")
plot_sweep(summary["sweep"], out / "sweep.png")
print("outputs in", out)
