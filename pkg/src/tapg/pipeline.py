"""End-to-end helpers shared by the CLI and the acceptance suite."""
from __future__ import annotations

import hashlib
import json
import os
import shutil
import tempfile
from dataclasses import replace
from pathlib import Path

from . import fusion, sst
from .config import RunConfig
from .errors import ConfigError, DataError
from .features import (
    Annotation,
    feature_path,
    l2_normalize,
    load_annotations,
    load_features,
    save_annotations,
    save_features,
)
from .fusion import SingleStreamModel
from .proposals import EvalReport, evaluate_confidences, generate_proposals

ANNOTATIONS_FILE = "annotations.json"
SPLIT_FILE = "split.json"


def sha256_file(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# -- dataset directories -----------------------------------------------------------

def write_dataset(out_dir, pairs, annotations, split: dict | None = None) -> list[Path]:
    """Write ``.fseq`` pairs, annotations and split into ``out_dir``.

    Files are staged in a sibling temp directory and moved in only once all
    of them were written, so a failure leaves no partial output behind.
    """
    out_dir = Path(out_dir)
    out_dir.parent.mkdir(parents=True, exist_ok=True)
    stage = Path(tempfile.mkdtemp(prefix=".tapg-", dir=out_dir.parent))
    try:
        for v, f in pairs:
            save_features(v, feature_path(stage, v.video_id, "video"))
            save_features(f, feature_path(stage, f.video_id, "flow"))
        save_annotations(annotations, stage / ANNOTATIONS_FILE)
        if split is not None:
            (stage / SPLIT_FILE).write_text(json.dumps(split, indent=1))
        out_dir.mkdir(exist_ok=True)
        written = []
        for p in sorted(stage.iterdir()):
            dest = out_dir / p.name
            os.replace(p, dest)
            written.append(dest)
        return written
    finally:
        shutil.rmtree(stage, ignore_errors=True)


def read_dataset(data_dir, subset: str = "all"):
    """Returns ``(pairs, annotations)`` for ``subset`` in ``{'all', 'train', 'eval'}``."""
    data_dir = Path(data_dir)
    ann_path = data_dir / ANNOTATIONS_FILE
    if not ann_path.exists():
        raise DataError(f"{ann_path}: annotations file missing")
    annotations = load_annotations(ann_path)
    if subset != "all":
        split_path = data_dir / SPLIT_FILE
        if not split_path.exists():
            raise DataError(f"{split_path}: split file missing (needed for subset {subset!r})")
        keep = set(json.loads(split_path.read_text())[subset])
        annotations = [a for a in annotations if a.video_id in keep]
    pairs = []
    for a in annotations:
        pair = []
        for stream in ("video", "flow"):
            path = feature_path(data_dir, a.video_id, stream)
            if not path.exists():
                raise DataError(f"video {a.video_id}: missing {stream} stream file {path.name}")
            f = load_features(path)
            if f.num_blocks != a.num_blocks:
                raise DataError(f"video {a.video_id}: {stream} has {f.num_blocks} blocks, "
                                f"annotation says {a.num_blocks}")
            pair.append(f)
        pairs.append(tuple(pair))
    return pairs, annotations


# -- training / inference ----------------------------------------------------------

def preprocess_pair(pair, video_l2: bool, flow_l2: bool):
    v, f = pair
    return (l2_normalize(v) if video_l2 else v, l2_normalize(f) if flow_l2 else f)


def _prep_flags(cfg_or_meta) -> tuple[bool, bool]:
    if isinstance(cfg_or_meta, RunConfig):
        p = cfg_or_meta.preprocessing
        return p.video_l2, p.flow_l2
    p = cfg_or_meta.get("preprocessing", {})
    return bool(p.get("video_l2", False)), bool(p.get("flow_l2", False))


def train_run(cfg: RunConfig, pairs, annotations, pretrained=None):
    """Train the model described by ``cfg``. Returns ``(model, stage_losses)``.

    Single-stream runs use the same seeds as stage-1 pretraining, so a
    baseline and the stream of a late-fusion model trained from the same
    config are identical.
    """
    vl2, fl2 = _prep_flags(cfg)
    pairs = [preprocess_pair(p, vl2, fl2) for p in pairs]
    if cfg.variant in fusion.SINGLE_VARIANTS:
        stream = cfg.variant.split("-", 1)[1]
        idx, base, offset = (0, cfg.video, 1) if stream == "video" else (1, cfg.flow, 2)
        feats = [p[idx] for p in pairs]
        scfg = replace(base, input_dim=feats[0].dim, epochs=cfg.schedule.pretrain_epochs, seed=cfg.seed + offset)
        r = sst.sst_train(scfg, feats, annotations, return_losses=True)
        return SingleStreamModel(stream, r.model), {"stage1": {stream: r.losses}}
    model, info = fusion.train_two_stream(
        cfg.fusion_variant, (pairs, annotations), cfg.schedule, cfg.seed, cfg.stream_configs,
        pretrained=pretrained, post_fusion_l2=cfg.preprocessing.post_fusion_l2, return_info=True,
    )
    return model, info.losses


def checkpoint_meta(cfg: RunConfig) -> dict:
    return {"preprocessing": {"video_l2": cfg.preprocessing.video_l2, "flow_l2": cfg.preprocessing.flow_l2},
            "config": cfg.to_dict()}


def predict(model, pairs, prep) -> dict:
    """Confidence matrices keyed by video id. ``prep`` is a RunConfig or checkpoint meta."""
    vl2, fl2 = _prep_flags(prep)
    out = {}
    for pair in pairs:
        v, f = preprocess_pair(pair, vl2, fl2)
        out[v.video_id] = fusion.two_stream_forward(model, v, f)
    return out


def infer(model, pairs, prep, score_thresh: float = 0.0, nms_thresh: float | None = 0.8,
          max_keep: int | None = None) -> dict:
    confs = predict(model, pairs, prep)
    return {vid: generate_proposals(c, score_thresh, nms_thresh, max_keep) for vid, c in confs.items()}


def evaluate_model(model, pairs, annotations, cfg: RunConfig, prep=None) -> EvalReport:
    confs = predict(model, pairs, prep if prep is not None else cfg)
    return evaluate_confidences(confs, {a.video_id: a for a in annotations}, cfg.eval)


def split_dataset(pairs, annotations, num_train: int):
    return (pairs[:num_train], annotations[:num_train]), (pairs[num_train:], annotations[num_train:])


def gt_dict(annotations: list[Annotation]) -> dict:
    return {a.video_id: a for a in annotations}


REPEAT_SEED_STRIDE = 1000


def train_repeated(cfg: RunConfig, pairs, annotations, repeats: int, select_pairs=None, select_annotations=None):
    """Train ``repeats`` copies with different seeds and keep the best one.

    Copy ``r`` uses seed ``cfg.seed + 1000 r`` (copy 0 is the plain run).
    Copies are ranked by AR at the summary AN on the selection set, the
    training videos unless another set is given; ties keep the earlier copy.
    Returns ``(model, stage_losses, scores, best_index)``.
    """
    if repeats < 1:
        raise ConfigError("repeats must be >= 1")
    if select_pairs is None:
        select_pairs, select_annotations = pairs, annotations
    best, scores = None, []
    for r in range(repeats):
        run_cfg = replace(cfg, seed=cfg.seed + REPEAT_SEED_STRIDE * r)
        model, losses = train_run(run_cfg, pairs, annotations)
        score = evaluate_model(model, select_pairs, select_annotations, run_cfg).ar_at_an if repeats > 1 else None
        scores.append(score)
        if best is None or score > scores[best[2]]:
            best = (model, losses, r)
    return best[0], best[1], scores, best[2]
