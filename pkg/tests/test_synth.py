import hashlib

import numpy as np
import pytest

from polypcascade.dataset import LABELS, PolypLabel, class_distribution, read_manifest
from polypcascade.scalespace import crop, downsample, read_png, tile_grid
from polypcascade.synth import (SynthConfig, count_dots, load_synth_config, render_parent,
                                shape_type, stripe_energy, synth_generate)

CFG = SynthConfig()


@pytest.fixture(scope="module")
def parents():
    return {lab: render_parent(CFG, lab, 0) for lab in LABELS}


def test_geometry():
    # 7000 / 4.415 = 1585.5 rounds up; 800 / 4.415 = 181.2
    assert (CFG.canvas_px, CFG.fine_px) == (1586, 181)
    assert len(tile_grid(CFG.canvas_px, CFG.canvas_px, CFG.fine_px)) == 64


def test_render_is_pure(parents):
    again = render_parent(CFG, PolypLabel.TA_HG, 0)
    np.testing.assert_array_equal(again, parents[PolypLabel.TA_HG])
    assert not np.array_equal(render_parent(CFG, PolypLabel.TA_HG, 1), again)


class TestCoarseView:
    @pytest.mark.parametrize("lab", LABELS)
    def test_fine_cues_vanish(self, parents, lab):
        view = downsample(parents[lab], CFG.view_side_px)
        assert (view[..., 0] == CFG.base_rgb[0]).all()
        assert (view[..., 1] == CFG.base_rgb[1]).all()

    def test_hp_and_norm_share_architecture(self, parents):
        assert shape_type(downsample(parents[PolypLabel.HP], 224), CFG) == "NORM"

    @pytest.mark.parametrize("lab", LABELS)
    def test_shape_readable(self, parents, lab):
        expected = "NORM" if lab is PolypLabel.HP else lab.type
        assert shape_type(parents[lab], CFG) == expected
        assert shape_type(downsample(parents[lab], 224), CFG) == expected


class TestFineTiles:
    def tiles(self, img):
        return [crop(img, o, CFG.fine_px) for o in tile_grid(*img.shape[1::-1], CFG.fine_px)]

    @pytest.mark.parametrize("lab", LABELS)
    def test_dot_bands(self, parents, lab):
        counts = [count_dots(t, CFG) for t in self.tiles(parents[lab])]
        if not lab.is_adenoma:
            assert set(counts) == {0}
        else:
            lo, hi = CFG.hg_band if lab.grade == "HG" else CFG.lg_band
            assert lo <= min(counts) and max(counts) <= hi

    def test_stripe_direction(self, parents):
        for lab, img in parents.items():
            sx, sy = stripe_energy(self.tiles(img)[9])
            assert (sx > sy) == (lab is PolypLabel.HP)

    @pytest.mark.parametrize("lab", [PolypLabel.TA_LG, PolypLabel.TVA_HG, PolypLabel.NORM])
    def test_tiles_hide_architecture(self, parents, lab):
        assert all(shape_type(t, CFG) is None for t in self.tiles(parents[lab]))


def test_invalid_bands():
    with pytest.raises(ValueError):
        SynthConfig(lg_band=(25, 95))


class TestCorpus:
    def test_layout(self, small_corpus):
        cfg, out, manifest = small_corpus
        assert len(manifest.slides()) == 12
        assert class_distribution(manifest, "slide").as_dict()["Total"] == 12
        assert {r.side_px for r in manifest} == {cfg.canvas_px}
        for split in ("train", "test"):
            assert {r.label for r in manifest.select(split=split)} == set(LABELS)
        back = read_manifest(out / "manifest.csv")
        assert back.records == manifest.records and back.mpp == cfg.mpp
        rec = manifest.records[0]
        np.testing.assert_array_equal(read_png(out / rec.path),
                                      render_parent(cfg, rec.label, int(rec.slide_id[-3:])))
        assert load_synth_config(out / "synth.cfg") == cfg

    def test_rerun_is_byte_identical(self, small_corpus, tmp_path):
        cfg, out, _ = small_corpus
        synth_generate(cfg, tmp_path)

        def digest(root):
            return {p.relative_to(root).as_posix(): hashlib.sha256(p.read_bytes()).hexdigest()
                    for p in sorted(root.rglob("*")) if p.is_file()}

        assert digest(tmp_path) == digest(out)

    def test_subpatches_and_workers(self, tmp_path):
        cfg = SynthConfig(n_slides_per_class=1, write_subpatches=True, workers=2, seed=3)
        m = synth_generate(cfg, tmp_path)
        assert len(m.select(scale_um=800)) == 6 * 64
        rec = m.select(scale_um=800)[9]
        parent = m.select(scale_um=7000, labels=[rec.label])[0]
        np.testing.assert_array_equal(
            read_png(tmp_path / rec.path),
            crop(read_png(tmp_path / parent.path), (rec.x_px, rec.y_px), cfg.fine_px))
