"""Three-stage multi-resolution cascade over one coarse field.

Stage 1 averages the HP probability of the fine sub-patches (downsampled to
224 px).  Stage 2 types the whole coarse field, downsampled, as NORM, TA or
TVA.  Stage 3 grades adenomas by the fraction of full-resolution sub-patches
voted high grade.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .backbone.model import TrainedModel, load_model
from .backbone.types import FIXED_SIDE
from .config import apply_kv, load_kv
from .dataset import ADENOMA_TYPES, PolypLabel
from .scalespace import SCANNER_MPP, ScaleSpec, crop, downsample, scale_to_pixels, tile_grid

MODEL_NAMES = ("hp", "adenoma", "grade")


class CascadeError(RuntimeError):
    pass


@dataclass(frozen=True)
class CascadeConfig:
    sigma_fine: float = 800.0
    sigma_coarse: float = 7000.0
    t_hp: float = 0.5
    t_d: float = 0.2
    mpp: float = SCANNER_MPP
    hg_vote: float = 0.5

    def __post_init__(self):
        if not 0 < self.t_hp < 1:
            raise ValueError("t_hp must lie strictly between 0 and 1")
        if not 0 <= self.t_d <= 1:
            raise ValueError("t_d must lie in [0, 1]")
        if not 0 < self.sigma_fine < self.sigma_coarse:
            raise ValueError("need 0 < sigma_fine < sigma_coarse")
        if self.mpp <= 0:
            raise ValueError("mpp must be positive")

    @property
    def fine_px(self) -> int:
        return scale_to_pixels(ScaleSpec(self.sigma_fine, self.mpp))

    @property
    def coarse_px(self) -> int:
        return scale_to_pixels(ScaleSpec(self.sigma_coarse, self.mpp))


def load_cascade_config(path: str | Path, base: CascadeConfig | None = None) -> CascadeConfig:
    return apply_kv(base or CascadeConfig(), load_kv(path))


@dataclass
class CascadeResult:
    hp_mean_prob: float
    n_subpatches: int
    final: PolypLabel
    stage_fired: int
    adenoma_probs: dict[str, float] | None = None
    hg_ratio: float | None = None
    hp_subpatch_probs: list[float] = field(default_factory=list)
    hg_subpatch_probs: list[float] | None = None
    patch_id: str | None = None

    def __post_init__(self):
        final = self.final
        ok = ((final is PolypLabel.HP) == (self.stage_fired == 1)
              and (final is not PolypLabel.NORM or self.stage_fired == 2)
              and (not final.is_adenoma or self.stage_fired == 3))
        if not ok:
            raise CascadeError(f"final {final} inconsistent with stage {self.stage_fired}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["final"] = self.final.value
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d: Mapping) -> "CascadeResult":
        d = dict(d)
        d["final"] = PolypLabel.parse(d["final"])
        return cls(**d)


# -- pure decision rules ---------------------------------------------------

def _exact(x: float) -> Fraction:
    # thresholds are read as the decimals they were written as
    return Fraction(repr(float(x)))


def mean_probability(probs: Iterable[float]) -> float:
    """Order-independent mean (exactly rounded sum)."""
    vals = [float(p) for p in probs]
    if not vals:
        raise CascadeError("no sub-patch probabilities to average")
    return math.fsum(vals) / len(vals)


def hg_votes(p_hg: Sequence[float], vote_threshold: float = 0.5) -> int:
    return sum(1 for p in p_hg if p > vote_threshold)


def grade_from_ratio(n_hg: int, n_total: int, t_d: float) -> tuple[Fraction, str]:
    """High grade iff the HG fraction is strictly above ``t_d``."""
    if n_total <= 0:
        raise CascadeError("cannot grade an empty sub-patch grid")
    ratio = Fraction(n_hg, n_total)
    return ratio, ("HG" if ratio > _exact(t_d) else "LG")


def adenoma_decision(probs: Mapping[str, float]) -> str:
    """Argmax over NORM, TA, TVA; exact ties go to the earlier of the three."""
    best = ADENOMA_TYPES[0]
    for name in ADENOMA_TYPES[1:]:
        if probs[name] > probs[best]:
            best = name
    return best


def decide(hp_sub_probs: Sequence[float], adenoma_probs: Mapping[str, float] | None,
           hg_sub_probs: Sequence[float] | None, cfg: CascadeConfig) -> CascadeResult:
    """Compose the three stage outputs into a :class:`CascadeResult`.

    Later-stage inputs may be ``None`` when an earlier stage decides; a
    missing input that is actually needed raises :class:`CascadeError`.
    """
    hp_mean = mean_probability(hp_sub_probs)
    n = len(hp_sub_probs)
    hp_list = [float(p) for p in hp_sub_probs]
    if hp_mean > cfg.t_hp:
        return CascadeResult(hp_mean, n, PolypLabel.HP, 1, hp_subpatch_probs=hp_list)
    if adenoma_probs is None:
        raise CascadeError("stage 2 output missing")
    ad = {k: float(adenoma_probs[k]) for k in ADENOMA_TYPES}
    kind = adenoma_decision(ad)
    if kind == "NORM":
        return CascadeResult(hp_mean, n, PolypLabel.NORM, 2, ad, hp_subpatch_probs=hp_list)
    if hg_sub_probs is None:
        raise CascadeError("stage 3 output missing")
    if len(hg_sub_probs) != n:
        raise CascadeError("stages 1 and 3 must see the same sub-patch grid")
    ratio, grade = grade_from_ratio(hg_votes(hg_sub_probs, cfg.hg_vote), n, cfg.t_d)
    return CascadeResult(hp_mean, n, PolypLabel.compose(kind, grade), 3, ad, float(ratio),
                         hp_list, [float(p) for p in hg_sub_probs])


# -- image stages ----------------------------------------------------------

def _check_coarse(img: np.ndarray, cfg: CascadeConfig) -> None:
    side = cfg.coarse_px
    if img.shape[:2] != (side, side):
        raise ValueError(f"coarse patch must be {side}x{side} px at {cfg.mpp} um/px, "
                         f"got {img.shape[1]}x{img.shape[0]}")


def subpatches(patch_coarse: np.ndarray, cfg: CascadeConfig) -> list[np.ndarray]:
    """Full-resolution fine-scale crops of the (0,0)-anchored grid, row-major."""
    h, w = patch_coarse.shape[:2]
    s = cfg.fine_px
    grid = tile_grid(w, h, s)
    if not len(grid):
        raise CascadeError(f"patch {w}x{h} px is smaller than one {s} px sub-patch")
    return [crop(patch_coarse, o, s) for o in grid]


def _positive(model: TrainedModel, name: str) -> int:
    try:
        return model.class_index(name)
    except ValueError:
        raise ValueError(f"model classes {model.spec.class_names} lack {name!r}") from None


def hp_subpatch_probs(patch_coarse, model_hp: TrainedModel, cfg: CascadeConfig,
                      tiles: list[np.ndarray] | None = None) -> list[float]:
    if model_hp.spec.n_classes != 2 or model_hp.spec.input_policy != "fixed_224":
        raise ValueError("HP stage needs a binary fixed_224 classifier")
    tiles = tiles if tiles is not None else subpatches(patch_coarse, cfg)
    probs = model_hp.predict_proba_batch([downsample(t, FIXED_SIDE) for t in tiles])
    return probs[:, _positive(model_hp, "HP")].tolist()


def hp_stage(patch_coarse: np.ndarray, model_hp: TrainedModel, cfg: CascadeConfig) -> float:
    """Mean HP probability over the fine sub-patches of ``patch_coarse``."""
    _check_coarse(patch_coarse, cfg)
    return mean_probability(hp_subpatch_probs(patch_coarse, model_hp, cfg))


def adenoma_probs(patch_coarse: np.ndarray, model_adenoma: TrainedModel) -> dict[str, float]:
    if model_adenoma.spec.n_classes != 3:
        raise ValueError(f"adenoma stage needs a 3-class model, "
                         f"got {model_adenoma.spec.n_classes} classes")
    p = model_adenoma.predict_proba_batch([downsample(patch_coarse, FIXED_SIDE)])[0]
    return {name: float(p[_positive(model_adenoma, name)]) for name in ADENOMA_TYPES}


def adenoma_stage(patch_coarse: np.ndarray, model_adenoma: TrainedModel) -> np.ndarray:
    """(NORM, TA, TVA) probabilities for the whole field."""
    probs = adenoma_probs(patch_coarse, model_adenoma)
    return np.array([probs[k] for k in ADENOMA_TYPES])


def hg_subpatch_probs(patch_coarse, model_grade: TrainedModel, cfg: CascadeConfig,
                      tiles: list[np.ndarray] | None = None) -> list[float]:
    if model_grade.spec.n_classes != 2 or model_grade.spec.input_policy != "variable_full_res":
        raise ValueError("grade stage needs a binary variable_full_res classifier")
    tiles = tiles if tiles is not None else subpatches(patch_coarse, cfg)
    probs = model_grade.predict_proba_batch(tiles)
    return probs[:, _positive(model_grade, "HG")].tolist()


def grade_stage(patch_coarse: np.ndarray, model_grade: TrainedModel,
                cfg: CascadeConfig) -> tuple[float, str]:
    """(fraction of HG-voted sub-patches, "HG" or "LG")."""
    _check_coarse(patch_coarse, cfg)
    p = hg_subpatch_probs(patch_coarse, model_grade, cfg)
    ratio, grade = grade_from_ratio(hg_votes(p, cfg.hg_vote), len(p), cfg.t_d)
    return float(ratio), grade


def classify_patch(patch_coarse: np.ndarray, models: Mapping[str, TrainedModel],
                   cfg: CascadeConfig, patch_id: str | None = None) -> CascadeResult:
    """Run the cascade on one coarse field, stopping at the first deciding stage."""
    missing = [k for k in MODEL_NAMES if k not in models]
    if missing:
        raise CascadeError(f"missing model(s): {', '.join(missing)}")
    _check_coarse(patch_coarse, cfg)
    tiles = subpatches(patch_coarse, cfg)
    hp = hp_subpatch_probs(patch_coarse, models["hp"], cfg, tiles)
    ad = hg = None
    if mean_probability(hp) <= cfg.t_hp:
        ad = adenoma_probs(patch_coarse, models["adenoma"])
        if adenoma_decision(ad) != "NORM":
            hg = hg_subpatch_probs(patch_coarse, models["grade"], cfg, tiles)
    result = decide(hp, ad, hg, cfg)
    result.patch_id = patch_id
    return result


def load_models(models_dir: str | Path) -> dict[str, TrainedModel]:
    """Load ``hp``, ``adenoma`` and ``grade`` model directories."""
    root = Path(models_dir)
    return {name: load_model(root / name) for name in MODEL_NAMES}


def write_jsonl(results: Iterable[CascadeResult], path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for r in results:
            fh.write(r.to_json() + "\n")
    return path


def read_jsonl(path: str | Path) -> list[CascadeResult]:
    with open(path, encoding="utf-8") as fh:
        return [CascadeResult.from_dict(json.loads(line)) for line in fh if line.strip()]
