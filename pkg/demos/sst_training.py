"""
Training a single-stream proposal network
=========================================

A stacked GRU reads one feature vector per block and scores K anchors that
end at that block. Here it learns to find the planted segments of one
stream.
"""
from dataclasses import replace

import numpy as np

from tapg import features as ft
from tapg import proposals as pr
from tapg import sst

cfg = ft.SynthConfig(num_videos=12, min_blocks=60, max_blocks=90, num_train=8, split=0.0)
pairs, anns = ft.synth_dataset(cfg, seed=1)
videos = [ft.l2_normalize(v) for v, _ in pairs]

# anchor (i, j) covers blocks [i - j + 1, i]; labels mark tIoU >= 0.5
labels = sst.make_anchor_labels(anns[0], K=32)
print("positive anchors in video 0:", int(labels.sum()), "of", labels.size)

# small model so the demo runs in seconds
scfg = sst.SstConfig(input_dim=0, num_gru_layers=1, hidden_dim=16, num_anchors=32, epochs=15,
                     learning_rate=1e-2, seed=0)
result = sst.sst_train(scfg, videos[:8], anns[:8], return_losses=True)
print("loss per epoch:", np.round(result.losses, 3))

# score held-out videos; an untrained copy is the reference
untrained = sst.sst_train(replace(scfg, epochs=0), videos[:8], anns[:8])
gts = {a.video_id: a for a in anns[8:]}
for name, model in (("untrained", untrained), ("trained", result.model)):
    confs = {v.video_id: sst.sst_forward(model, v) for v in videos[8:]}
    report = pr.evaluate_confidences(confs, gts, pr.EvalConfig(an_grid=[10, 50], summary_an=50))
    print(f"{name:9s} AR@50 = {report.ar_at_an:.3f}")
