"""Glue between the manifest, the backbones and the cascade.

Provides scale-specific views of a corpus, the task label mappings used to
train the three cascade classifiers and the single-scale baselines, the
scale sweep, batch inference and evaluation.
"""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from . import cascade as cc
from .backbone import ClassifierSpec, TrainConfig, TrainedModel, train
from .backbone.model import TASK_CLASSES
from .backbone.types import FIXED_SIDE
from .dataset import LABELS, Manifest, PatchRecord, PolypLabel
from .metrics import (SIX_CLASSES, ConfusionMatrix, collapse_to_type, confusion_matrix,
                      one_vs_rest_report, present)
from .scalespace import ScaleSpec, crop, downsample, read_png, scale_to_pixels, tile_grid
from .synth import SynthConfig

log = logging.getLogger(__name__)

TASKS = ("hp", "adenoma", "grade", "six")


class MissingScaleError(LookupError):
    pass


def label_mapping(task: str) -> dict[PolypLabel, int | None]:
    """Label -> class index for ``task``; ``None`` drops the record.

    hp: HP against everything else.  adenoma: NORM / TA / TVA with HP left
    out, since stage 2 only sees fields stage 1 rejected.  grade: HG against
    LG over adenomas only.  six: the six polyp classes.
    """
    if task == "hp":
        return {lab: 0 if lab is PolypLabel.HP else 1 for lab in LABELS}
    if task == "adenoma":
        names = TASK_CLASSES["adenoma"]
        return {lab: None if lab is PolypLabel.HP else names.index(lab.type) for lab in LABELS}
    if task == "grade":
        return {lab: (0 if lab.grade == "HG" else 1) if lab.is_adenoma else None
                for lab in LABELS}
    if task == "six":
        return {lab: i for i, lab in enumerate(LABELS)}
    raise ValueError(f"unknown task {task!r}; expected one of {TASKS}")


def task_spec(task: str, full_res: bool = False, arch: str = "small_resnet",
              pretrained: bool = False) -> ClassifierSpec:
    names = SIX_CLASSES if task == "six" else TASK_CLASSES[task]
    policy = "variable_full_res" if full_res else "fixed_224"
    return ClassifierSpec(len(names), policy, pretrained, task, tuple(names), arch)


@dataclass(frozen=True)
class View:
    patch_id: str
    slide_id: str
    split: str
    label: PolypLabel
    image: np.ndarray


class Corpus:
    """A manifest plus the directory its ``path`` column is relative to."""

    def __init__(self, manifest: Manifest, root: str | Path):
        self.manifest = manifest
        self.root = Path(root)
        self._load = lru_cache(maxsize=4)(self._read)

    def _read(self, rel: str) -> np.ndarray:
        return read_png(self.root / rel)

    def image(self, record: PatchRecord) -> np.ndarray:
        return self._load(record.path)

    def side_px(self, scale_um: float) -> int:
        return scale_to_pixels(ScaleSpec(scale_um, self.manifest.mpp))

    def _sources(self, scale_um: float, split: str | None) -> tuple[list[PatchRecord], bool]:
        direct = self.manifest.select(split=split, scale_um=scale_um)
        if direct:
            return direct, False
        larger = [s for s in self.manifest.scales() if s > scale_um]
        if not larger:
            raise MissingScaleError(f"no patches at or above {scale_um} um in the manifest")
        parents = self.manifest.select(split=split, scale_um=max(larger))
        if not parents:
            raise MissingScaleError(f"no {split or ''} patches available for {scale_um} um")
        return parents, True

    def has_scale(self, scale_um: float) -> bool:
        try:
            self._sources(scale_um, None)
        except MissingScaleError:
            return False
        return True

    def views(self, scale_um: float, split: str | None = None, full_res: bool = False,
              max_per_parent: int | None = None, seed: int = 0,
              labels: Sequence[PolypLabel] | None = None) -> Iterator[View]:
        """Patches at ``scale_um``: stored ones, else grid crops of the coarsest parents.

        ``full_res`` keeps native pixels; otherwise each view is resampled to
        224 px.  ``max_per_parent`` draws a seeded subset of each parent's grid.
        """
        records, cropping = self._sources(scale_um, split)
        side = self.side_px(scale_um)
        wanted = set(labels) if labels is not None else None
        for k, rec in enumerate(records):
            if wanted is not None and rec.label not in wanted:
                continue
            img = self.image(rec)
            if cropping:
                grid = tile_grid(img.shape[1], img.shape[0], side)
                origins = list(grid)
                if max_per_parent is not None and len(origins) > max_per_parent:
                    rng = np.random.default_rng([seed, k])
                    pick = sorted(rng.choice(len(origins), max_per_parent, replace=False))
                    origins = [origins[i] for i in pick]
                items = [(f"{rec.patch_id}/x{ox}_y{oy}", crop(img, (ox, oy), side))
                         for ox, oy in origins]
            else:
                items = [(rec.patch_id, img)]
            for pid, sub in items:
                out = np.array(sub) if full_res else downsample(sub, FIXED_SIDE)
                yield View(pid, rec.slide_id, rec.split, rec.label, out)


def train_task(corpus: Corpus, task: str, scale_um: float, cfg: TrainConfig,
               full_res: bool = False, arch: str = "small_resnet",
               max_per_parent: int | None = None) -> TrainedModel:
    mapping = label_mapping(task)
    keep = [lab for lab, idx in mapping.items() if idx is not None]
    examples = [(v.image, v.label) for v in corpus.views(
        scale_um, "train", full_res, max_per_parent, cfg.seed, labels=keep)]
    spec = task_spec(task, full_res, arch)
    model = train(examples, mapping, spec, cfg)
    model.training_fingerprint.update({"scale_um": scale_um, "task": task})
    return model


def evaluate_six(corpus: Corpus, model: TrainedModel, scale_um: float,
                 split: str = "test", batch: int = 64) -> ConfusionMatrix:
    """Six-class confusion matrix of a baseline on ``split`` patches at ``scale_um``."""
    full_res = model.spec.input_policy == "variable_full_res"
    truth, preds, pending = [], [], []

    def flush():
        if pending:
            p = model.predict_proba_batch([v.image for v in pending])
            preds.extend(model.spec.class_names[i] for i in p.argmax(axis=1))
            truth.extend(v.label.value for v in pending)
            pending.clear()

    for v in corpus.views(scale_um, split, full_res):
        pending.append(v)
        if len(pending) >= batch:
            flush()
    flush()
    return confusion_matrix(truth, preds, SIX_CLASSES)


def type_row(cm6: ConfusionMatrix) -> dict[str, float]:
    """Six-class BA plus one-vs-rest BA per type, as in the scale sweep table."""
    rep4 = one_vs_rest_report(collapse_to_type(cm6))
    row = {"BA (6-class)": one_vs_rest_report(cm6).overall_ba}
    for t in ("NORM", "HP", "TA", "TVA"):
        row[t] = rep4.per_class(t)["balanced_accuracy"]
    return row


def sweep(corpus: Corpus, scales: Sequence[float], cfg: TrainConfig,
          arch: str = "small_resnet", max_per_parent: int | None = None,
          models_out: str | Path | None = None) -> dict:
    """Train and test a six-class baseline per scale."""
    from .backbone import save_model

    missing = [s for s in scales if not corpus.has_scale(s)]
    if missing:
        raise MissingScaleError(f"scale(s) not available: {', '.join(map(str, missing))}")
    table = {}
    matrices = {}
    for s in scales:
        model = train_task(corpus, "six", s, cfg, False, arch, max_per_parent)
        if models_out is not None:
            save_model(model, Path(models_out) / f"six_{_scale_tag(s)}")
        cm = evaluate_six(corpus, model, s)
        table[_scale_tag(s)] = type_row(cm)
        matrices[_scale_tag(s)] = cm.to_dict()
        log.info("scale %s: %s", s, table[_scale_tag(s)])
    return {"scales": [_scale_tag(s) for s in scales], "rows": table, "confusion": matrices}


def _scale_tag(s: float) -> str:
    return str(int(s)) if float(s).is_integer() else repr(float(s))


def sweep_text(result: dict) -> str:
    scales = result["scales"]
    rows = ["BA (6-class)", "NORM", "HP", "TA", "TVA"]
    head = "Type".rjust(14) + " | " + " ".join(s.rjust(6) for s in scales)
    lines = [head, "-" * len(head)]
    for r in rows:
        lines.append(r.rjust(14) + " | " + " ".join(
            present(result["rows"][s][r]).rjust(6) for s in scales))
    return "\n".join(lines) + "\n"


def coarse_inputs(corpus: Corpus, cfg: cc.CascadeConfig, split: str | None = "test"
                  ) -> Iterator[tuple[str, np.ndarray]]:
    for rec in corpus.manifest.select(split=split, scale_um=cfg.sigma_coarse):
        yield rec.patch_id, corpus.image(rec)


def run_cascade(inputs, models, cfg: cc.CascadeConfig) -> list[cc.CascadeResult]:
    return [cc.classify_patch(img, models, cfg, pid) for pid, img in inputs]


def evaluate_predictions(results: Sequence[cc.CascadeResult], manifest: Manifest
                         ) -> ConfusionMatrix:
    """Six-class matrix of cascade results against manifest labels."""
    by_id = manifest.by_id()
    unknown = [r.patch_id for r in results if r.patch_id not in by_id]
    if unknown:
        raise KeyError(f"prediction(s) for unknown patch_id: {', '.join(map(str, unknown[:5]))}")
    truth = [by_id[r.patch_id].label.value for r in results]
    return confusion_matrix(truth, [r.final.value for r in results], SIX_CLASSES)


def dump_json(obj, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, default=_jsonable) + "\n",
                    encoding="utf-8")
    return path


def _jsonable(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, float) and not math.isfinite(o):
        return None
    raise TypeError(f"not JSON serializable: {type(o)}")


# -- desk-scale protocol ---------------------------------------------------

def _desk_train() -> TrainConfig:
    from .backbone import NO_JITTER

    return TrainConfig(epochs=20, lr0=0.001, lr_decay_every=15, momentum=0.9, batch_size=16,
                       jitter=NO_JITTER, flips=True, seed=0)


@dataclass(frozen=True)
class DeskProtocol:
    """Corpus and training settings small enough for one CPU core.

    Training departs from the published protocol (50 epochs at 0.01, colour
    jitter) because the small network and corpus converge in 20 epochs at a
    lower rate, and the synthetic cues are colour-coded.
    """

    synth: SynthConfig = field(default_factory=lambda: SynthConfig(
        n_slides_per_class=8, parents_per_slide=3, seed=7))
    train: TrainConfig = field(default_factory=_desk_train)
    max_per_parent: int = 4
    arch: str = "small_resnet"

    @property
    def cascade(self) -> cc.CascadeConfig:
        s = self.synth
        return cc.CascadeConfig(sigma_fine=s.fine_um, sigma_coarse=s.canvas_um, mpp=s.mpp)


CASCADE_TASKS = (("hp", False), ("adenoma", False), ("grade", True))


def run_desk(out_dir: str | Path, protocol: DeskProtocol | None = None) -> dict:
    """Generate a corpus, then run the oracle cascade, the trained cascade and the sweep.

    Writes under ``out_dir``: ``corpus/``, ``models/``, ``oracle_predictions.jsonl``,
    ``oracle_report.json``, ``predictions.jsonl``, ``report.json``, ``sweep.json``
    and ``sweep.txt``.  Returns the headline numbers.
    """
    from .backbone import mock_oracle_backbone, save_model
    from .metrics import balanced_accuracy, write_report
    from .synth import synth_generate

    p = protocol or DeskProtocol()
    out = Path(out_dir)
    clock = time.perf_counter
    t0 = clock()
    timings = {}
    manifest = synth_generate(p.synth, out / "corpus")
    timings["corpus"] = clock() - t0
    corpus = Corpus(manifest, out / "corpus")
    ccfg = p.cascade

    oracles = {t: mock_oracle_backbone(t, p.synth) for t in cc.MODEL_NAMES}
    res = run_cascade(coarse_inputs(corpus, ccfg, split=None), oracles, ccfg)
    cc.write_jsonl(res, out / "oracle_predictions.jsonl")
    cm_oracle = evaluate_predictions(res, manifest)
    write_report(cm_oracle, out / "oracle_report.json", out / "oracle_report.txt")
    timings["oracle"] = clock() - t0 - timings["corpus"]

    models = {}
    for task, full_res in CASCADE_TASKS:
        scale = p.synth.fine_um if task != "adenoma" else p.synth.canvas_um
        models[task] = train_task(corpus, task, scale, p.train, full_res, p.arch,
                                  p.max_per_parent)
        save_model(models[task], out / "models" / task)
    res = run_cascade(coarse_inputs(corpus, ccfg), models, ccfg)
    cc.write_jsonl(res, out / "predictions.jsonl")
    cm = evaluate_predictions(res, manifest)
    write_report(cm, out / "report.json", out / "report.txt")
    timings["cascade"] = clock() - t0 - timings["corpus"] - timings["oracle"]

    sw = sweep(corpus, (p.synth.fine_um, p.synth.canvas_um), p.train, p.arch,
               p.max_per_parent, out / "models")
    dump_json(sw, out / "sweep.json")
    (out / "sweep.txt").write_text(sweep_text(sw), encoding="utf-8")
    timings["sweep"] = clock() - t0 - sum(timings.values())
    log.info("desk run timings (s): %s", {k: round(v, 1) for k, v in timings.items()})
    return {
        "timings": timings,
        "oracle_ba": balanced_accuracy(cm_oracle),
        "oracle_confusion": cm_oracle,
        "cascade_ba": balanced_accuracy(cm),
        "cascade_confusion": cm,
        "sweep": sw,
    }
