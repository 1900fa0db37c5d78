"""Confusion matrices, balanced accuracy and one-vs-rest reports."""

from __future__ import annotations

import json
from dataclasses import dataclass
from decimal import ROUND_HALF_UP, Decimal
from pathlib import Path
from typing import Sequence

import numpy as np

from .dataset import LABELS, TYPES, PolypLabel

SIX_CLASSES: tuple[str, ...] = tuple(lab.value for lab in LABELS)


class MetricsError(ValueError):
    pass


@dataclass(frozen=True)
class ConfusionMatrix:
    """Rows are true classes, columns predicted classes."""

    classes: tuple[str, ...]
    counts: np.ndarray

    def __post_init__(self):
        counts = np.asarray(self.counts, dtype=np.int64)
        k = len(self.classes)
        if counts.shape != (k, k):
            raise MetricsError(f"counts must be {k}x{k}, got {counts.shape}")
        if (counts < 0).any():
            raise MetricsError("counts must be non-negative")
        object.__setattr__(self, "classes", tuple(str(c) for c in self.classes))
        object.__setattr__(self, "counts", counts)

    @property
    def support(self) -> np.ndarray:
        return self.counts.sum(axis=1)

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if self.classes != other.classes:
            raise MetricsError("cannot merge matrices over different classes")
        return ConfusionMatrix(self.classes, self.counts + other.counts)

    def to_dict(self) -> dict:
        return {"classes": list(self.classes), "counts": self.counts.tolist()}

    def format(self) -> str:
        width = max(max(len(c) for c in self.classes), len(str(self.counts.max(initial=0))), 4)
        head = "true\\pred".ljust(width + 2) + " ".join(c.rjust(width) for c in self.classes)
        rows = [c.ljust(width + 2) + " ".join(str(v).rjust(width) for v in row)
                for c, row in zip(self.classes, self.counts)]
        return "\n".join([head, *rows])


def confusion_matrix(true_labels: Sequence, predicted_labels: Sequence,
                     classes: Sequence = SIX_CLASSES) -> ConfusionMatrix:
    if len(true_labels) != len(predicted_labels):
        raise MetricsError("true and predicted label lists differ in length")
    names = tuple(str(c) for c in classes)
    index = {c: i for i, c in enumerate(names)}
    counts = np.zeros((len(names), len(names)), dtype=np.int64)
    for t, p in zip(true_labels, predicted_labels):
        for lab in (t, p):
            if str(lab) not in index:
                raise MetricsError(f"unknown label {str(lab)!r}")
        counts[index[str(t)], index[str(p)]] += 1
    return ConfusionMatrix(names, counts)


def _require_support(cm: ConfusionMatrix) -> None:
    empty = [c for c, s in zip(cm.classes, cm.support) if s == 0]
    if empty:
        raise MetricsError(f"class(es) with zero support: {', '.join(empty)}")


def recalls(cm: ConfusionMatrix) -> np.ndarray:
    _require_support(cm)
    return np.diag(cm.counts) / cm.support


def balanced_accuracy(cm: ConfusionMatrix) -> float:
    """Mean per-class recall."""
    return float(recalls(cm).mean())


@dataclass(frozen=True)
class ClassReport:
    classes: tuple[str, ...]
    sensitivity: tuple[float, ...]
    specificity: tuple[float, ...]
    balanced_accuracy: tuple[float, ...]
    overall_ba: float

    def per_class(self, name: str) -> dict[str, float]:
        i = self.classes.index(name)
        return {"sensitivity": self.sensitivity[i], "specificity": self.specificity[i],
                "balanced_accuracy": self.balanced_accuracy[i]}

    def to_dict(self) -> dict:
        return {
            "classes": list(self.classes),
            "per_class": {c: self.per_class(c) for c in self.classes},
            "overall_ba": self.overall_ba,
        }

    def format(self) -> str:
        """Table with rows Sensitivity / Specificity / BA, two decimals."""
        width = max(6, *(len(c) for c in self.classes))
        lines = [" " * 12 + " ".join(c.rjust(width) for c in self.classes)]
        for title, vals in (("Sensitivity", self.sensitivity),
                            ("Specificity", self.specificity),
                            ("BA", self.balanced_accuracy)):
            lines.append(title.ljust(12) + " ".join(present(v).rjust(width) for v in vals))
        lines.append(f"overall BA  {present(self.overall_ba)}")
        return "\n".join(lines)


def one_vs_rest_report(cm: ConfusionMatrix) -> ClassReport:
    _require_support(cm)
    c = cm.counts
    total = c.sum()
    tp = np.diag(c)
    fn = c.sum(axis=1) - tp
    fp = c.sum(axis=0) - tp
    tn = total - tp - fn - fp
    sens = tp / (tp + fn)
    neg = tn + fp
    # a lone class has no negatives; its specificity is vacuously perfect
    spec = np.where(neg > 0, tn / np.where(neg > 0, neg, 1), 1.0)
    ba = (sens + spec) / 2
    return ClassReport(cm.classes, tuple(map(float, sens)), tuple(map(float, spec)),
                       tuple(map(float, ba)), balanced_accuracy(cm))


def type_of(name: str) -> str:
    return PolypLabel.parse(name).type


def collapse_to_type(cm_6: ConfusionMatrix) -> ConfusionMatrix:
    """Merge the HG/LG subclasses of TA and TVA into their type."""
    if set(cm_6.classes) != set(SIX_CLASSES):
        raise MetricsError("collapse_to_type needs the six polyp classes")
    idx = [TYPES.index(type_of(c)) for c in cm_6.classes]
    proj = np.zeros((len(cm_6.classes), len(TYPES)), dtype=np.int64)
    proj[np.arange(len(idx)), idx] = 1
    return ConfusionMatrix(TYPES, proj.T @ cm_6.counts @ proj)


def present(x: float, places: int = 2) -> str:
    """Round half-up for display only."""
    q = Decimal(1).scaleb(-places)
    return str(Decimal(repr(float(x))).quantize(q, rounding=ROUND_HALF_UP))


def evaluation_report(cm_6: ConfusionMatrix) -> dict:
    """Six-class report plus the per-type view."""
    rep6 = one_vs_rest_report(cm_6)
    cm4 = collapse_to_type(cm_6)
    rep4 = one_vs_rest_report(cm4)
    return {
        "six_class": {"confusion": cm_6.to_dict(), **rep6.to_dict()},
        "per_type": {"confusion": cm4.to_dict(), **rep4.to_dict()},
    }


def report_text(cm_6: ConfusionMatrix) -> str:
    rep6 = one_vs_rest_report(cm_6)
    cm4 = collapse_to_type(cm_6)
    rep4 = one_vs_rest_report(cm4)
    return "\n\n".join([
        "Confusion matrix (6 classes)", cm_6.format(),
        "Per-class metrics", rep6.format(),
        "Per-type metrics", rep4.format(),
    ]) + "\n"


def write_report(cm_6: ConfusionMatrix, json_path: str | Path,
                 text_path: str | Path | None = None) -> None:
    json_path = Path(json_path)
    json_path.parent.mkdir(parents=True, exist_ok=True)
    json_path.write_text(json.dumps(evaluation_report(cm_6), indent=2, sort_keys=True) + "\n",
                         encoding="utf-8")
    if text_path is not None:
        Path(text_path).write_text(report_text(cm_6), encoding="utf-8")


def plot_confusion(cm: ConfusionMatrix, path: str | Path, title: str = "") -> Path:
    """Row-normalised heat map with raw counts annotated."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    counts = cm.counts
    rows = counts.sum(axis=1, keepdims=True)
    norm = np.divide(counts, rows, out=np.zeros(counts.shape), where=rows > 0)
    fig, ax = plt.subplots(figsize=(1.0 + 0.9 * len(cm.classes), 0.8 + 0.9 * len(cm.classes)))
    ax.imshow(norm, cmap="Blues", vmin=0, vmax=1)
    ax.set_xticks(range(len(cm.classes)), cm.classes, rotation=45, ha="right")
    ax.set_yticks(range(len(cm.classes)), cm.classes)
    ax.set_xlabel("predicted")
    ax.set_ylabel("true")
    for i in range(len(cm.classes)):
        for j in range(len(cm.classes)):
            ax.text(j, i, str(counts[i, j]), ha="center", va="center",
                    color="white" if norm[i, j] > 0.5 else "black", fontsize=8)
    if title:
        ax.set_title(title)
    fig.tight_layout()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, format="png", dpi=100, metadata={"Software": None})
    plt.close(fig)
    return path
