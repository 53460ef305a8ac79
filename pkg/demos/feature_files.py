"""
Block features on disk
======================

Synthesise a small two-stream dataset, write it as ``.fseq`` files, read it
back and reduce the flow stream with L2 + PCA.
"""
import tempfile
from pathlib import Path

import numpy as np

from tapg import features as ft

# a handful of short videos; segments are planted in both streams
cfg = ft.SynthConfig(num_videos=4, min_blocks=40, max_blocks=60, num_train=3)
pairs, annotations = ft.synth_dataset(cfg, seed=0)
video, flow = pairs[0]
print(video.video_id, video.data.shape, "segments:", annotations[0].segments)

# one file per video and stream, header + float32 rows
out = Path(tempfile.mkdtemp())
path = ft.save_features(flow, ft.feature_path(out, flow.video_id, flow.stream))
back = ft.load_features(path)
print(path.name, path.stat().st_size, "bytes, identical:", np.array_equal(back.data, flow.data))

# unit-norm rows, then PCA fitted on the training videos only
train_rows = np.concatenate([ft.l2_normalize(f).data for _, f in pairs[: cfg.num_train]])
pca = ft.pca_fit(train_rows, k=8)
print("explained variance:", np.round(pca.explained_variance, 4))
reduced = ft.pca_transform(pca, ft.l2_normalize(flow))
print("reduced flow:", reduced.data.shape)

# annotation times in seconds map to inclusive block spans
print("2.0 s to 5.3 s at 30 fps ->", ft.seconds_to_blocks(2.0, 5.3, fps=30))
