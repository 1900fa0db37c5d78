"""
The cascade with oracle backbones
=================================

Oracle backbones read the generator's cues directly: confident on their own
scale, uniform elsewhere.  Plugged into the cascade they isolate the
decision logic from any learning, so the six-class result must be perfect.
"""

import tempfile

from polypcascade import cascade as cc
from polypcascade.backbone import mock_oracle_backbone
from polypcascade.experiment import Corpus, coarse_inputs, evaluate_predictions
from polypcascade.metrics import balanced_accuracy
from polypcascade.synth import SynthConfig, synth_generate

cfg = SynthConfig(n_slides_per_class=2, seed=0)
out = tempfile.mkdtemp()
manifest = synth_generate(cfg, out)
corpus = Corpus(manifest, out)

models = {task: mock_oracle_backbone(task, cfg) for task in cc.MODEL_NAMES}
ccfg = cc.CascadeConfig(mpp=cfg.mpp)

results = [cc.classify_patch(img, models, ccfg, pid)
           for pid, img in coarse_inputs(corpus, ccfg, split=None)]
for r in results[:: len(results) // 6]:
    print(f"{r.patch_id:32s} stage {r.stage_fired} -> {r.final.value:6s} "
          f"mean p(HP) {r.hp_mean_prob:.2f}  HG ratio {r.hg_ratio}")

cm = evaluate_predictions(results, manifest)
print(cm.format())
print("six-class BA:", balanced_accuracy(cm))

# The grading threshold acts on the exact HG fraction: 13/64 is HG, 5/25 is not
print(cc.grade_from_ratio(13, 64, 0.2), cc.grade_from_ratio(5, 25, 0.2))
