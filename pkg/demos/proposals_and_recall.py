"""
From confidences to average recall
==================================

Decode a confidence matrix into proposals, suppress overlaps, and score
them against ground truth with recall curves.
"""
import tempfile
from pathlib import Path

import numpy as np

from tapg import proposals as pr
from tapg.features import Annotation
from tapg.sst import ConfidenceMatrix

rng = np.random.default_rng(0)
T, K = 50, 12
gt = Annotation("demo", T, [(5, 12), (30, 39)])

# fake confidences: high where an anchor overlaps a true segment, noise elsewhere
values = rng.uniform(0, 0.4, (T, K))
for i in range(T):
    for j in range(1, K + 1):
        seg = (max(0, i - j + 1), i)
        values[i, j - 1] += 0.6 * max(pr.tiou(seg, g) for g in gt.segments)
conf = ConfidenceMatrix("demo", np.clip(values, 0, 0.999))

raw = pr.decode(conf, threshold=0.0)
kept = pr.nms(raw, tiou_thresh=0.8)
print(len(raw), "anchors ->", len(kept), "after NMS; top 3:", [p.segment for p in kept[:3]])

for an in (1, 2, 5, 10):
    print(f"recall@tIoU0.5 with {an:2d} proposals:", pr.recall_at({"demo": kept}, {"demo": gt}, 0.5, an))

report = pr.average_recall_curve({"demo": kept}, {"demo": gt}, an_grid=[1, 2, 5, 10, 20], summary_an=10)
print("AR vs AN:", [(an, round(ar, 3)) for an, ar in report.curve])

# plot-ready CSVs for external tools
out = Path(tempfile.mkdtemp())
pr.write_proposals_csv({"demo": kept}, out / "proposals.csv")
pr.write_curve_csvs(report, out / "recall_vs_tiou.csv", out / "ar_vs_an.csv")
print((out / "ar_vs_an.csv").read_text())
