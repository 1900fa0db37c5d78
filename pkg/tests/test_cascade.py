import json
import random
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from polypcascade import cascade as cc
from polypcascade.backbone import ClassifierSpec, TrainedModel
from polypcascade.dataset import PolypLabel

CFG = cc.CascadeConfig()
probs = st.floats(0.0, 1.0, allow_nan=False)


def adenoma(norm, ta, tva):
    return {"NORM": norm, "TA": ta, "TVA": tva}


class TestGradeRule:
    def test_thirteen_of_sixty_four_is_high_grade(self):
        ratio, grade = cc.grade_from_ratio(13, 64, 0.2)
        assert ratio == Fraction(13, 64) and grade == "HG"

    def test_boundary_is_low_grade(self):
        # 5/25 equals the threshold exactly; strict comparison keeps it LG
        assert cc.grade_from_ratio(5, 25, 0.2)[1] == "LG"

    def test_zero_threshold(self):
        assert cc.grade_from_ratio(1, 64, 0.0)[1] == "HG"
        assert cc.grade_from_ratio(0, 64, 0.0)[1] == "LG"

    def test_empty_grid(self):
        with pytest.raises(cc.CascadeError):
            cc.grade_from_ratio(0, 0, 0.2)

    @settings(max_examples=100, deadline=None)
    @given(st.lists(probs, min_size=1, max_size=64), st.floats(0, 1), st.floats(0, 1))
    def test_monotone_in_threshold(self, p, a, b):
        lo, hi = sorted((a, b))
        votes = cc.hg_votes(p)
        g_lo = cc.grade_from_ratio(votes, len(p), lo)[1]
        g_hi = cc.grade_from_ratio(votes, len(p), hi)[1]
        assert not (g_hi == "HG" and g_lo == "LG")


class TestDecide:
    def test_hp_stops_at_stage_one(self):
        r = cc.decide([0.9] * 64, None, None, CFG)
        assert r.final is PolypLabel.HP and r.stage_fired == 1
        assert r.adenoma_probs is None and r.hg_ratio is None

    def test_hp_threshold_is_strict(self):
        r = cc.decide([0.5] * 4, adenoma(0.8, 0.1, 0.1), None, CFG)
        assert r.final is PolypLabel.NORM and r.stage_fired == 2

    def test_scripted_high_grade(self):
        hg = [0.9] * 13 + [0.1] * 51
        r = cc.decide([0.1] * 64, adenoma(0.1, 0.7, 0.2), hg, CFG)
        assert r.final is PolypLabel.TA_HG and r.hg_ratio == pytest.approx(13 / 64)

    def test_scripted_low_grade(self):
        hg = [0.9] * 5 + [0.1] * 20
        r = cc.decide([0.1] * 25, adenoma(0.1, 0.2, 0.7), hg, CFG)
        assert r.final is PolypLabel.TVA_LG and r.stage_fired == 3

    def test_argmax_tie_prefers_earlier(self):
        assert cc.adenoma_decision(adenoma(0.4, 0.4, 0.2)) == "NORM"
        assert cc.adenoma_decision(adenoma(0.2, 0.4, 0.4)) == "TA"

    def test_missing_stage_outputs(self):
        with pytest.raises(cc.CascadeError):
            cc.decide([0.1], None, None, CFG)
        with pytest.raises(cc.CascadeError):
            cc.decide([0.1], adenoma(0, 1, 0), None, CFG)

    def test_grid_mismatch(self):
        with pytest.raises(cc.CascadeError):
            cc.decide([0.1] * 4, adenoma(0, 1, 0), [0.9] * 3, CFG)

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.tuples(probs, probs), min_size=1, max_size=64),
           st.tuples(probs, probs, probs), st.randoms(use_true_random=False))
    def test_subpatch_order_never_matters(self, pairs, ad, rnd):
        hp = [a for a, _ in pairs]
        hg = [b for _, b in pairs]
        ref = cc.decide(hp, adenoma(*ad), hg, CFG)
        idx = list(range(len(pairs)))
        rnd.shuffle(idx)
        other = cc.decide([hp[i] for i in idx], adenoma(*ad), [hg[i] for i in idx], CFG)
        assert other.final is ref.final
        assert other.hp_mean_prob == ref.hp_mean_prob

    @settings(max_examples=100, deadline=None)
    @given(st.lists(probs, min_size=1, max_size=64), st.tuples(probs, probs, probs))
    def test_stage_label_invariant(self, p, ad):
        r = cc.decide(p, adenoma(*ad), p, CFG)
        assert (r.final is PolypLabel.HP) == (r.stage_fired == 1)
        if r.final is PolypLabel.NORM:
            assert r.stage_fired == 2
        if r.final.is_adenoma:
            assert r.stage_fired == 3 and 0 <= r.hg_ratio <= 1


def test_mean_is_order_independent_exactly():
    vals = [0.1, 1e16, -1e16, 0.3] * 4
    shuffled = vals[:]
    random.Random(0).shuffle(shuffled)
    assert cc.mean_probability(vals) == cc.mean_probability(shuffled)


def test_result_rejects_inconsistent_stage():
    with pytest.raises(cc.CascadeError):
        cc.CascadeResult(0.9, 1, PolypLabel.HP, 3)


def test_result_round_trip(tmp_path):
    r = cc.decide([0.1] * 4, adenoma(0.1, 0.2, 0.7), [0.9, 0.1, 0.1, 0.1], CFG)
    r.patch_id = "p1"
    cc.write_jsonl([r, r], tmp_path / "p.jsonl")
    back = cc.read_jsonl(tmp_path / "p.jsonl")
    assert back[0] == r
    assert json.loads((tmp_path / "p.jsonl").read_text().splitlines()[0])["final"] == "TVA.HG"


class TestConfig:
    def test_pixel_sides(self):
        assert (CFG.fine_px, CFG.coarse_px) == (1812, 15855)

    def test_grid_is_sixty_four(self):
        cfg = cc.CascadeConfig(mpp=4.415)
        img = np.zeros((cfg.coarse_px, cfg.coarse_px, 3), np.uint8)
        assert len(cc.subpatches(img, cfg)) == 64

    @pytest.mark.parametrize("kw", [{"t_hp": 1.0}, {"t_d": -0.1}, {"sigma_fine": 8000},
                                    {"mpp": 0}])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            cc.CascadeConfig(**kw)

    def test_file_overrides(self, tmp_path):
        (tmp_path / "c.cfg").write_text("t_d = 0.0  # every vote counts\nmpp=4.415\n")
        cfg = cc.load_cascade_config(tmp_path / "c.cfg")
        assert cfg.t_d == 0.0 and cfg.mpp == 4.415 and cfg.t_hp == 0.5


class Scripted(TrainedModel):
    """Returns fixed rows regardless of the image; records what it was shown."""

    kind = "scripted"

    def __init__(self, spec, rows):
        super().__init__(spec)
        self.rows = list(rows)
        self.seen = []

    def _forward(self, images):
        self.seen.extend(im.shape for im in images)
        out, self.rows = self.rows[:len(images)], self.rows[len(images):]
        return np.array(out, dtype=float)


def scripted_models(hp_pos, ad_row, hg_pos):
    return {
        "hp": Scripted(ClassifierSpec(2, "fixed_224", False, "hp", ("HP", "other")),
                       [[p, 1 - p] for p in hp_pos]),
        "adenoma": Scripted(ClassifierSpec(3, "fixed_224", False, "adenoma",
                                           ("NORM", "TA", "TVA")), [ad_row]),
        "grade": Scripted(ClassifierSpec(2, "variable_full_res", False, "grade", ("HG", "LG")),
                          [[p, 1 - p] for p in hg_pos]),
    }


class TestClassifyPatch:
    cfg = cc.CascadeConfig(mpp=4.415)

    def field(self):
        side = self.cfg.coarse_px
        return np.full((side, side, 3), 128, np.uint8)

    def test_stage_inputs(self):
        models = scripted_models([0.1] * 64, [0.1, 0.8, 0.1], [0.9] * 13 + [0.1] * 51)
        r = cc.classify_patch(self.field(), models, self.cfg, "x")
        assert r.final is PolypLabel.TA_HG and r.patch_id == "x"
        assert set(models["hp"].seen) == {(224, 224, 3)}
        assert models["adenoma"].seen == [(224, 224, 3)]
        fine = self.cfg.fine_px
        assert set(models["grade"].seen) == {(fine, fine, 3)} and len(models["grade"].seen) == 64

    def test_later_stages_skipped_for_hp(self):
        models = scripted_models([0.9] * 64, [0.1, 0.8, 0.1], [0.9] * 64)
        r = cc.classify_patch(self.field(), models, self.cfg)
        assert r.final is PolypLabel.HP
        assert models["adenoma"].seen == [] and models["grade"].seen == []

    def test_wrong_size(self):
        models = scripted_models([0.1] * 64, [1, 0, 0], [])
        with pytest.raises(ValueError):
            cc.classify_patch(np.zeros((100, 100, 3), np.uint8), models, self.cfg)

    def test_missing_model(self):
        with pytest.raises(cc.CascadeError):
            cc.classify_patch(self.field(), {"hp": None}, self.cfg)

    def test_adenoma_stage_arity(self):
        bad = Scripted(ClassifierSpec(2, "fixed_224", False, "hp", ("HP", "other")), [[1, 0]])
        with pytest.raises(ValueError):
            cc.adenoma_stage(self.field(), bad)
