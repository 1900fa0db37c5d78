"""Acceptance gate: one check per criterion, each reported as PASS or FAIL.

Criteria 4 to 7 and 9 share one desk-scale run (synthetic corpus, oracle
cascade, trained cascade, two-scale sweep); 9 repeats it from scratch.
Run directly with ``python tests/test_acceptance.py`` or through pytest.
"""

import itertools
import math
import random
import time
from collections import Counter

import numpy as np
import pytest

from polypcascade import cascade as cc
from polypcascade.dataset import PolypLabel, split_slides
from polypcascade.experiment import DeskProtocol, run_desk
from polypcascade.metrics import (SIX_CLASSES, ConfusionMatrix, balanced_accuracy,
                                  collapse_to_type, one_vs_rest_report)
from polypcascade.scalespace import ScaleSpec, scale_to_pixels, tile_grid

DESK_FILES = ("oracle_predictions.jsonl", "oracle_report.json", "oracle_report.txt",
              "predictions.jsonl", "report.json", "report.txt", "sweep.json", "sweep.txt")


@pytest.fixture(scope="module")
def desk(tmp_path_factory):
    out = tmp_path_factory.mktemp("desk_a")
    t0 = time.process_time()
    summary = run_desk(out, DeskProtocol())
    summary["cpu_seconds"] = time.process_time() - t0
    summary["dir"] = out
    return summary


# -- 1 ---------------------------------------------------------------------

def test_criterion_1_geometry(criterion):
    with criterion(1, "geometry exactness") as c:
        t0 = time.perf_counter()
        fine = scale_to_pixels(ScaleSpec(800, 0.4415))
        coarse = scale_to_pixels(ScaleSpec(7000, 0.4415))
        elapsed = time.perf_counter() - t0
        c.detail = f"800->{fine}, 7000->{coarse}, {elapsed * 1e3:.2f} ms"
        assert (fine, coarse) == (1812, 15855)
        assert type(fine) is int and type(coarse) is int
        assert elapsed < 1.0


# -- 2 ---------------------------------------------------------------------

def brute_axis(n, s):
    return [x for x in range(n) if x % s == 0 and x + s <= n]


def overlaps(a, b, s):
    return abs(a[0] - b[0]) < s and abs(a[1] - b[1]) < s


def test_criterion_2_tiling(criterion):
    with criterion(2, "tiling oracle equivalence") as c:
        t0 = time.perf_counter()
        rng = random.Random(2)
        mismatches = 0
        for _ in range(500):
            w, h = rng.randint(1, 16000), rng.randint(1, 16000)
            # at most ~100 tiles per axis keeps the enumeration tractable
            s = rng.randint(max(1, max(w, h) // 100), max(w, h) + 10)
            expected = [(x, y) for y in brute_axis(h, s) for x in brute_axis(w, s)]
            mismatches += list(tile_grid(w, h, s).origins) != expected
        grid = tile_grid(15855, 15855, 1812)
        disjoint = not any(overlaps(a, b, 1812)
                           for a, b in itertools.combinations(grid.origins, 2))
        elapsed = time.perf_counter() - t0
        c.detail = f"500 triples, {mismatches} mismatches; {len(grid)} tiles; {elapsed:.1f} s"
        assert mismatches == 0
        assert len(grid) == 64 and disjoint
        assert elapsed < 10


# -- 3 ---------------------------------------------------------------------

def brute_report(counts):
    """Per-class (sens, spec) and BA by expanding the matrix into samples."""
    samples = [(t, p) for t in range(6) for p in range(6) for _ in range(counts[t][p])]
    sens, spec = [], []
    for k in range(6):
        tp = sum(t == k and p == k for t, p in samples)
        fn = sum(t == k and p != k for t, p in samples)
        tn = sum(t != k and p != k for t, p in samples)
        fp = sum(t != k and p == k for t, p in samples)
        sens.append(tp / (tp + fn))
        spec.append(tn / (tn + fp) if tn + fp else 1.0)
    return sens, spec, sum(sens) / 6


def brute_collapse(counts):
    types = ("HP", "NORM", "TA", "TVA")
    out = [[0] * 4 for _ in range(4)]
    for i, a in enumerate(SIX_CLASSES):
        for j, b in enumerate(SIX_CLASSES):
            out[types.index(a.split(".")[0])][types.index(b.split(".")[0])] += counts[i][j]
    return out


def test_criterion_3_metrics(criterion):
    with criterion(3, "metrics oracle equivalence") as c:
        rng = np.random.default_rng(3)
        worst = 0.0
        collapse_bad = 0
        for _ in range(1000):
            counts = rng.integers(0, 12, (6, 6))
            counts[np.arange(6), rng.integers(0, 6, 6)] += 1  # every class has support
            cm = ConfusionMatrix(SIX_CLASSES, counts)
            rep = one_vs_rest_report(cm)
            sens, spec, ba = brute_report(counts.tolist())
            worst = max(worst, abs(balanced_accuracy(cm) - ba),
                        *(abs(a - b) for a, b in zip(rep.sensitivity, sens)),
                        *(abs(a - b) for a, b in zip(rep.specificity, spec)))
            collapse_bad += collapse_to_type(cm).counts.tolist() != brute_collapse(counts.tolist())
        hp_gap = round(abs(0.89 - (0.86 + 0.93) / 2), 12)
        c.detail = (f"max deviation {worst:.1e}, {collapse_bad} collapse mismatches, "
                    f"HP gap {hp_gap:.3f}")
        assert worst <= 1e-12 and collapse_bad == 0
        assert hp_gap <= 0.005


# -- 4 ---------------------------------------------------------------------

def test_criterion_4_cascade_rules(criterion, desk):
    with criterion(4, "cascade rule fidelity") as c:
        cfg = DeskProtocol().cascade
        ad = {"NORM": 0.1, "TA": 0.8, "TVA": 0.1}
        a = cc.decide([0.1] * 64, ad, [0.9] * 13 + [0.1] * 51, cfg)
        b = cc.decide([0.1] * 25, ad, [0.9] * 5 + [0.1] * 20, cfg)
        assert (a.final, b.final) == (PolypLabel.TA_HG, PolypLabel.TA_LG)

        recorded = cc.read_jsonl(desk["dir"] / "predictions.jsonl")
        graded = [r for r in recorded if r.stage_fired == 3]
        hg_counts = []
        for t_d in np.linspace(0, 1, 101):
            swept = cc.CascadeConfig(**{**vars(cfg), "t_d": float(t_d)})
            hg_counts.append(sum(
                cc.decide(r.hp_subpatch_probs, r.adenoma_probs, r.hg_subpatch_probs,
                          swept).final.grade == "HG" for r in graded))
        monotone = all(x >= y for x, y in zip(hg_counts, hg_counts[1:]))

        rnd = random.Random(4)
        changed = 0
        for _ in range(100):
            for r in recorded:
                idx = list(range(r.n_subpatches))
                rnd.shuffle(idx)
                hp = [r.hp_subpatch_probs[i] for i in idx]
                hg = None if r.hg_subpatch_probs is None else [r.hg_subpatch_probs[i] for i in idx]
                changed += cc.decide(hp, r.adenoma_probs, hg, cfg).final is not r.final
        c.detail = (f"13/64->{a.final}, 5/25->{b.final}; HG count over t_d "
                    f"{hg_counts[0]}..{hg_counts[-1]} monotone={monotone}; "
                    f"{changed} label changes over 100 shuffles of {len(recorded)} fields")
        assert graded and monotone and changed == 0


# -- 5 ---------------------------------------------------------------------

def test_criterion_5_oracle_end_to_end(criterion, desk):
    with criterion(5, "end-to-end oracle run") as c:
        cm = desk["oracle_confusion"]
        per_class = dict(zip(cm.classes, cm.support.tolist()))
        seconds = desk["timings"]["corpus"] + desk["timings"]["oracle"]
        c.detail = f"BA {desk['oracle_ba']:.3f}, fields per class {per_class}, {seconds:.0f} s"
        assert min(per_class.values()) >= 20
        assert desk["oracle_ba"] == 1.0
        assert (cm.counts == np.diag(np.diag(cm.counts))).all()
        assert seconds < 120


# -- 6 ---------------------------------------------------------------------

def test_criterion_6_multiresolution(criterion, desk):
    with criterion(6, "multi-resolution beats single-scale baselines") as c:
        rows = desk["sweep"]["rows"]
        best = max(r["BA (6-class)"] for r in rows.values())
        ba = desk["cascade_ba"]
        c.detail = (f"cascade {ba:.3f} vs best baseline {best:.3f} "
                    f"(" + ", ".join(f"{s}: {r['BA (6-class)']:.3f}" for s, r in rows.items())
                    + f"); {desk['cpu_seconds'] / 60:.1f} CPU min")
        assert ba >= best + 0.10
        assert desk["cpu_seconds"] < 30 * 60


# -- 7 ---------------------------------------------------------------------

def test_criterion_7_scale_preference(criterion, desk):
    with criterion(7, "scale-preference ordering") as c:
        rows = desk["sweep"]["rows"]
        fine, coarse = rows["800"], rows["7000"]
        c.detail = (f"HP {fine['HP']:.3f}@800 vs {coarse['HP']:.3f}@7000; "
                    f"TVA {fine['TVA']:.3f}@800 vs {coarse['TVA']:.3f}@7000")
        assert fine["HP"] > coarse["HP"]
        assert coarse["TVA"] > fine["TVA"]


# -- 8 ---------------------------------------------------------------------

def test_criterion_8_split_integrity(criterion):
    with criterion(8, "split integrity") as c:
        rng = random.Random(8)
        overlaps_found = 0
        published = Counter()
        for k in range(10_000):
            if k % 10 == 0:
                n, f = 292, 0.7
            else:
                n, f = rng.randint(2, 400), rng.uniform(0.05, 0.95)
            ids = [f"slide-{i}" for i in range(n)]
            train, test = split_slides(ids, f, seed=rng.getrandbits(32))
            overlaps_found += len(train & test) + (len(train | test) != n)
            if n == 292 and f == 0.7:
                published[(len(train), len(test))] += 1
        c.detail = f"{overlaps_found} overlaps; N=292 at 0.7 gave {dict(published)}"
        assert overlaps_found == 0
        assert set(published) == {(204, 88)}


# -- 9 ---------------------------------------------------------------------

def test_criterion_9_determinism(criterion, desk, tmp_path_factory):
    with criterion(9, "determinism of criteria 5 to 7") as c:
        out = tmp_path_factory.mktemp("desk_b")
        again = run_desk(out, DeskProtocol())
        differing = [f for f in DESK_FILES
                     if (desk["dir"] / f).read_bytes() != (out / f).read_bytes()]
        c.detail = (f"{len(DESK_FILES) - len(differing)}/{len(DESK_FILES)} files identical"
                    + (f"; differ: {', '.join(differing)}" if differing else ""))
        assert not differing
        assert math.isclose(again["cascade_ba"], desk["cascade_ba"], rel_tol=0, abs_tol=0)


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-q"]))
