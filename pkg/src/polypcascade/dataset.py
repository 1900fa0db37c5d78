"""Corpus index (manifest), slide-level splitting and class statistics."""

from __future__ import annotations

import csv
import io
import logging
import math
import re
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np
from PIL import Image

from .config import format_value, load_kv
from .scalespace import SCANNER_MPP, ScaleSpec, round_half_up, scale_to_pixels

log = logging.getLogger(__name__)

MANIFEST_HEADER = ("patch_id", "slide_id", "split", "label", "type", "grade",
                   "scale_um", "x_px", "y_px", "side_px", "path")
SPLITS = ("train", "test")


class PolypLabel(str, Enum):
    HP = "HP"
    NORM = "NORM"
    TA_HG = "TA.HG"
    TA_LG = "TA.LG"
    TVA_HG = "TVA.HG"
    TVA_LG = "TVA.LG"

    def __str__(self):
        return self.value

    @property
    def type(self) -> str:
        return self.value.split(".")[0]

    @property
    def grade(self) -> str | None:
        parts = self.value.split(".")
        return parts[1] if len(parts) == 2 else None

    @property
    def is_adenoma(self) -> bool:
        return self.grade is not None

    @property
    def slug(self) -> str:
        return self.value.replace(".", "")

    @classmethod
    def parse(cls, text: str) -> "PolypLabel":
        try:
            return cls(text.strip())
        except ValueError:
            raise ValueError(f"unknown polyp label {text!r}") from None

    @classmethod
    def compose(cls, type_: str, grade: str | None) -> "PolypLabel":
        return cls.parse(type_ if grade is None else f"{type_}.{grade}")


# column order used by the paper's tables
LABELS: tuple[PolypLabel, ...] = tuple(PolypLabel)
TYPES: tuple[str, ...] = ("HP", "NORM", "TA", "TVA")
ADENOMA_TYPES: tuple[str, ...] = ("NORM", "TA", "TVA")
GRADES: tuple[str, ...] = ("HG", "LG")


class ManifestError(Exception):
    pass


class DuplicatePatchError(ManifestError):
    pass


@dataclass(frozen=True)
class PatchRecord:
    patch_id: str
    slide_id: str
    split: str
    label: PolypLabel
    scale_um: float
    x_px: int
    y_px: int
    side_px: int
    path: str

    def __post_init__(self):
        if self.split not in SPLITS:
            raise ValueError(f"split must be one of {SPLITS}, got {self.split!r}")
        if not isinstance(self.label, PolypLabel):
            object.__setattr__(self, "label", PolypLabel.parse(str(self.label)))
        if self.scale_um <= 0 or self.side_px <= 0 or self.x_px < 0 or self.y_px < 0:
            raise ValueError(f"invalid geometry in record {self.patch_id!r}")

    def to_row(self) -> dict[str, str]:
        return {
            "patch_id": self.patch_id,
            "slide_id": self.slide_id,
            "split": self.split,
            "label": self.label.value,
            "type": self.label.type,
            "grade": self.label.grade or "",
            "scale_um": format_value(float(self.scale_um)),
            "x_px": str(self.x_px),
            "y_px": str(self.y_px),
            "side_px": str(self.side_px),
            "path": self.path,
        }

    @classmethod
    def from_row(cls, row: Mapping[str, str]) -> "PatchRecord":
        label = PolypLabel.parse(row["label"])
        if row.get("type", label.type) != label.type or (row.get("grade") or None) != label.grade:
            raise ManifestError(f"type/grade columns disagree with label in {row['patch_id']!r}")
        return cls(row["patch_id"], row["slide_id"], row["split"], label,
                   float(row["scale_um"]), int(row["x_px"]), int(row["y_px"]),
                   int(row["side_px"]), row["path"])


@dataclass
class Manifest:
    mpp: float
    records: list[PatchRecord] = field(default_factory=list)
    skipped: list[tuple[str, str]] = field(default_factory=list)

    def __post_init__(self):
        self.validate()

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def validate(self) -> None:
        seen: set[str] = set()
        slide_split: dict[str, str] = {}
        slide_label: dict[str, PolypLabel] = {}
        for r in self.records:
            if r.patch_id in seen:
                raise DuplicatePatchError(f"duplicate patch_id {r.patch_id!r}")
            seen.add(r.patch_id)
            if slide_split.setdefault(r.slide_id, r.split) != r.split:
                raise ManifestError(f"slide {r.slide_id!r} appears in both splits")
            if slide_label.setdefault(r.slide_id, r.label) != r.label:
                raise ManifestError(f"slide {r.slide_id!r} carries more than one label")
            expected = scale_to_pixels(ScaleSpec(r.scale_um, self.mpp))
            if r.side_px != expected:
                raise ManifestError(
                    f"{r.patch_id!r}: side_px {r.side_px} != {expected} for "
                    f"{format_value(r.scale_um)} um at {self.mpp} um/px")

    def select(self, split: str | None = None, scale_um: float | None = None,
               labels: Iterable[PolypLabel] | None = None) -> list[PatchRecord]:
        wanted = set(labels) if labels is not None else None
        return [r for r in self.records
                if (split is None or r.split == split)
                and (scale_um is None or math.isclose(r.scale_um, scale_um))
                and (wanted is None or r.label in wanted)]

    def scales(self) -> list[float]:
        return sorted({r.scale_um for r in self.records})

    def slides(self, split: str | None = None) -> dict[str, PolypLabel]:
        return {r.slide_id: r.label for r in self.records
                if split is None or r.split == split}

    def by_id(self) -> dict[str, PatchRecord]:
        return {r.patch_id: r for r in self.records}


def manifest_to_csv(manifest: Manifest) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=MANIFEST_HEADER, lineterminator="\n")
    writer.writeheader()
    for r in manifest.records:
        writer.writerow(r.to_row())
    return buf.getvalue()


def write_manifest(manifest: Manifest, path: str | Path) -> Path:
    """Write the CSV plus a ``<name>.meta`` sidecar recording the scanner mpp."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(manifest_to_csv(manifest))
    with open(meta_path(path), "w", encoding="utf-8", newline="") as fh:
        fh.write(f"mpp={format_value(manifest.mpp)}\n")
    return path


def meta_path(path: str | Path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".meta")


def read_manifest(path: str | Path, mpp: float | None = None) -> Manifest:
    path = Path(path)
    if mpp is None:
        meta = meta_path(path)
        mpp = float(load_kv(meta)["mpp"]) if meta.exists() else SCANNER_MPP
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != MANIFEST_HEADER:
            raise ManifestError(f"{path}: unexpected header {reader.fieldnames}")
        records = [PatchRecord.from_row(row) for row in reader]
    return Manifest(mpp, records)


def patch_id_for(slide_id: str, scale_um: float, x_px: int, y_px: int) -> str:
    return f"{slide_id}_s{format_value(float(scale_um))}_x{x_px}_y{y_px}"


_ID_PATTERN = re.compile(r"^(?P<slide>.+)_s(?P<scale>[0-9.]+)_x(?P<x>\d+)_y(?P<y>\d+)$")
# alternative suffix carrying the crop box, e.g. "..._(12824,33871,1812,1812)"
_BOX_PATTERN = re.compile(r"_\((?P<x>\d+),(?P<y>\d+),(?P<w>\d+),(?P<h>\d+)\)$")


def parse_patch_name(stem: str, slide_id: str, scale_um: float) -> tuple[int, int]:
    """Pixel origin encoded in a patch file stem; ``ValueError`` if unparseable."""
    m = _ID_PATTERN.match(stem)
    if m:
        if m["slide"] != slide_id:
            raise ValueError(f"slide {m['slide']!r} in name disagrees with directory {slide_id!r}")
        if not math.isclose(float(m["scale"]), scale_um):
            raise ValueError(f"scale {m['scale']} in name disagrees with directory {scale_um}")
        return int(m["x"]), int(m["y"])
    m = _BOX_PATTERN.search(stem)
    if m:
        return int(m["x"]), int(m["y"])
    raise ValueError(f"unparseable patch name {stem!r}")


def build_manifest(root_dir: str | Path, mpp: float = SCANNER_MPP,
                   splits: Mapping[str, str] | None = None,
                   train_fraction: float = 0.7, seed: int = 0) -> Manifest:
    """Index ``<root>/<label>/<slide_id>/<scale_um>/<patch_id>.png``.

    Files that do not fit the layout are skipped and listed in
    ``Manifest.skipped``; duplicate patch ids are fatal.  Slides missing from
    ``splits`` are assigned by a stratified :func:`split_slides`.
    """
    root = Path(root_dir)
    found = []
    skipped: list[tuple[str, str]] = []
    for png in sorted(root.rglob("*.png")):
        rel = png.relative_to(root)
        try:
            if len(rel.parts) != 4:
                raise ValueError("expected <label>/<slide_id>/<scale_um>/<patch>.png")
            label = PolypLabel.parse(rel.parts[0])
            slide_id = rel.parts[1]
            scale_um = float(rel.parts[2])
            side = scale_to_pixels(ScaleSpec(scale_um, mpp))
            x, y = parse_patch_name(png.stem, slide_id, scale_um)
            with Image.open(png) as im:
                w, h = im.size
            if (w, h) != (side, side):
                raise ValueError(f"image is {w}x{h}, expected {side}x{side}")
        except ValueError as exc:
            skipped.append((rel.as_posix(), str(exc)))
            log.warning("skipping %s: %s", rel.as_posix(), exc)
            continue
        found.append((png.stem, slide_id, label, scale_um, x, y, side, rel.as_posix()))

    slide_labels = {f[1]: f[2] for f in found}
    assign = dict(splits or {})
    missing = sorted(set(slide_labels) - set(assign))
    if missing:
        sub = {s: slide_labels[s] for s in missing}
        train, test = split_slides(set(missing), train_fraction, seed, labels=sub)
        assign.update({s: "train" for s in train})
        assign.update({s: "test" for s in test})

    ids = Counter(f[0] for f in found)
    dups = sorted(k for k, v in ids.items() if v > 1)
    if dups:
        raise DuplicatePatchError(f"duplicate patch_id(s): {', '.join(dups[:5])}")
    records = [PatchRecord(pid, sid, assign[sid], lab, sc, x, y, side, rel)
               for pid, sid, lab, sc, x, y, side, rel in found]
    return Manifest(mpp, records, skipped)


def _largest_remainder(quotas: dict, total: int) -> dict:
    base = {k: math.floor(q) for k, q in quotas.items()}
    left = total - sum(base.values())
    # ties broken by insertion order
    order = sorted(quotas, key=lambda k: -(quotas[k] - base[k]))
    for k in order[:max(left, 0)]:
        base[k] += 1
    return base


def split_slides(slide_ids: Iterable[str], train_fraction: float, seed: int,
                 labels: Mapping[str, PolypLabel] | None = None
                 ) -> tuple[set[str], set[str]]:
    """Partition slides into (train, test) with ``round(f * N)`` train slides.

    With ``labels`` the split is stratified: each class gets its
    largest-remainder share of the train quota.
    """
    ids = sorted(set(slide_ids))
    if not ids:
        raise ValueError("slide_ids must be non-empty")
    if not 0 < train_fraction < 1:
        raise ValueError(f"train_fraction must be in (0, 1), got {train_fraction}")
    n_train = round_half_up(train_fraction * len(ids))
    rng = np.random.default_rng(seed)

    if labels is None:
        groups = {None: ids}
    else:
        groups = defaultdict(list)
        for s in ids:
            groups[PolypLabel.parse(str(labels[s]))].append(s)
        groups = {k: groups[k] for k in LABELS if k in groups}
    quotas = _largest_remainder(
        {k: train_fraction * len(v) for k, v in groups.items()}, n_train)

    train: set[str] = set()
    for key, members in groups.items():
        perm = rng.permutation(len(members))
        train.update(members[i] for i in perm[:quotas[key]])
    return train, set(ids) - train


@dataclass(frozen=True)
class ClassCounts:
    counts: dict[PolypLabel, int]

    @property
    def total(self) -> int:
        return sum(self.counts.values())

    def __getitem__(self, label) -> int:
        return self.counts[PolypLabel.parse(str(label))]

    def as_dict(self) -> dict[str, int]:
        out = {lab.value: self.counts[lab] for lab in LABELS}
        out["Total"] = self.total
        return out

    def format(self, title: str = "") -> str:
        heads = [lab.value for lab in LABELS] + ["Total"]
        vals = [str(v) for v in self.as_dict().values()]
        widths = [max(len(h), len(v)) for h, v in zip(heads, vals)]
        pad = max(len(title), 1)
        lines = [" " * pad + "  " + "  ".join(h.rjust(w) for h, w in zip(heads, widths)),
                 title.ljust(pad) + "  " + "  ".join(v.rjust(w) for v, w in zip(vals, widths))]
        return "\n".join(lines)


def class_distribution(manifest: Manifest, group_by: str = "patch",
                       scale_filter: float | None = None) -> ClassCounts:
    """Counts per label, either of patches or of distinct slides."""
    if group_by not in ("slide", "patch"):
        raise ValueError("group_by must be 'slide' or 'patch'")
    recs = manifest.select(scale_um=scale_filter)
    if group_by == "slide":
        per = Counter(lab for lab in {r.slide_id: r.label for r in recs}.values())
    else:
        per = Counter(r.label for r in recs)
    return ClassCounts({lab: per.get(lab, 0) for lab in LABELS})
