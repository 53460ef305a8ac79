"""Two-stream fusion variants and their staged training.

Four ways of combining the video and flow streams:

* ``mid-concat``  concatenate per-block features, one SST on top
* ``mid-fc``      shared ReLU fc layer over the concatenated features, then one SST
* ``late-avg``    two full SSTs, confidences mixed as ``(1 - alpha) c_v + alpha c_f``
* ``late-fc``     two GRU encoders, shared sigmoid fc over the concatenated states
"""
from __future__ import annotations

import io
import json
import math
import struct
from dataclasses import dataclass, field, replace

import numpy as np

from . import numeric as nc
from . import sst
from .errors import BadMagic, ConfigError, DataError, ShapeError, Truncated, VersionMismatch
from .features import FeatureSequence
from .sst import ConfidenceMatrix, SstConfig, SstModel

VARIANTS = ("mid-concat", "mid-fc", "late-avg", "late-fc")
SINGLE_VARIANTS = ("single-video", "single-flow")

TSM_MAGIC = b"TSM1"
TSM_VERSION = 1
_TAGS = {"mid-concat": 0, "mid-fc": 1, "late-avg": 2, "late-fc": 3, "single-video": 16, "single-flow": 17}
_ROLE_VIDEO, _ROLE_FLOW, _ROLE_FUSED, _ROLE_FC, _ROLE_META = range(5)


@dataclass
class FusionVariant:
    tag: str
    alpha: float = 0.5
    fused_dim: int | None = None

    def __post_init__(self):
        if self.tag not in VARIANTS:
            raise ConfigError(f"unknown fusion variant {self.tag!r}; choose from {VARIANTS}")
        if not 0 <= self.alpha <= 1:
            raise ConfigError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.fused_dim is not None and self.fused_dim < 1:
            raise ConfigError("fused_dim must be positive")


@dataclass
class TwoStreamModel:
    variant: FusionVariant
    video: SstModel | None = None
    flow: SstModel | None = None
    fused: SstModel | None = None
    fusion_W: np.ndarray | None = None
    fusion_b: np.ndarray | None = None
    post_fusion_l2: bool = False

    def __post_init__(self):
        tag = self.variant.tag
        if tag in ("mid-concat", "mid-fc") and self.fused is None:
            raise ShapeError(f"{tag} needs a fused SST")
        if tag in ("late-avg", "late-fc") and (self.video is None or self.flow is None):
            raise ShapeError(f"{tag} needs both stream SSTs")
        if tag in ("mid-fc", "late-fc"):
            if self.fusion_W is None or self.fusion_b is None:
                raise ShapeError(f"{tag} needs fusion fc parameters")
            if self.fusion_b.shape != (self.fusion_W.shape[0],):
                raise ShapeError("fusion bias does not match fusion weights")
        if tag == "mid-fc" and self.fused.config.input_dim != self.fusion_W.shape[0]:
            raise ShapeError("fused SST input does not match fc7 output")
        if tag == "late-fc":
            K = self.video.config.num_anchors
            if self.fusion_W.shape != (K, self.video.hidden_dim + self.flow.hidden_dim):
                raise ShapeError(f"late fc weights {self.fusion_W.shape} do not fit the encoders")

    @property
    def tag(self) -> str:
        return self.variant.tag

    def params(self) -> dict:
        out = {}
        for name in ("video", "flow", "fused"):
            m = getattr(self, name)
            if m is not None:
                out.update({f"{name}.{k}": v for k, v in m.params().items()})
        if self.fusion_W is not None:
            out["fusion.W"] = self.fusion_W
            out["fusion.b"] = self.fusion_b
        return out

    def astype(self, dtype) -> "TwoStreamModel":
        conv = lambda m: None if m is None else m.astype(dtype)  # noqa: E731
        arr = lambda a: None if a is None else a.astype(dtype)  # noqa: E731
        return TwoStreamModel(self.variant, conv(self.video), conv(self.flow), conv(self.fused),
                              arr(self.fusion_W), arr(self.fusion_b), self.post_fusion_l2)


@dataclass
class SingleStreamModel:
    """A plain SST on one stream; the baseline the fusion variants are compared to."""

    stream: str
    model: SstModel

    @property
    def tag(self) -> str:
        return f"single-{self.stream}"

    def params(self) -> dict:
        return {f"{self.stream}.{k}": v for k, v in self.model.params().items()}


# -- fusion math -----------------------------------------------------------------

def _arr(x):
    return x.data if isinstance(x, FeatureSequence) else np.asarray(x)


def fuse_concat(f_v, f_f):
    """``[f_v; f_f]`` along the feature axis (vectors or per-block sequences)."""
    if isinstance(f_v, FeatureSequence):
        if f_v.num_blocks != _arr(f_f).shape[0]:
            raise ShapeError(f"block counts differ: {f_v.num_blocks} vs {_arr(f_f).shape[0]}")
        return f_v.with_data(np.concatenate([f_v.data, _arr(f_f)], axis=-1))
    return np.concatenate([np.asarray(f_v), np.asarray(f_f)], axis=-1)


def midfc_fuse(W_fc7, b_fc7, a_v, a_f):
    """``relu(W_fc7 [a_v; a_f] + b_fc7)``."""
    return nc.fc_forward(W_fc7, b_fc7, fuse_concat(_arr(a_v), _arr(a_f)), "relu")


def late_avg(c_v, c_f, alpha: float):
    if not 0 <= alpha <= 1:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    v = c_v.values if isinstance(c_v, ConfidenceMatrix) else np.asarray(c_v)
    f = c_f.values if isinstance(c_f, ConfidenceMatrix) else np.asarray(c_f)
    if v.shape != f.shape:
        raise ShapeError(f"confidence shapes differ: {v.shape} vs {f.shape}")
    out = (1 - alpha) * v + alpha * f
    if isinstance(c_v, ConfidenceMatrix):
        return ConfidenceMatrix(c_v.video_id, out)
    return out


def latefc_fuse(W_fc, b_fc, s_v, s_f):
    """``sigmoid(W_fc [s_v; s_f] + b_fc)``."""
    return nc.fc_forward(W_fc, b_fc, fuse_concat(s_v, s_f), "sigmoid")


def _midfc_features(m: TwoStreamModel, Xv, Xf):
    G = midfc_fuse(m.fusion_W, m.fusion_b, Xv, Xf)
    if m.post_fusion_l2:
        G, _ = nc.l2_rows(G)
    return G


def two_stream_forward(m, f_v, f_f, training: bool = False, rng=None) -> ConfidenceMatrix:
    """Confidence matrix of a fused (or single-stream) model for one video."""
    Xv, Xf = _arr(f_v), _arr(f_f)
    vid = next((f.video_id for f in (f_v, f_f) if isinstance(f, FeatureSequence)), "")
    if Xv.shape[0] != Xf.shape[0]:
        raise DataError(f"{vid}: video stream has {Xv.shape[0]} blocks, flow has {Xf.shape[0]}")
    if isinstance(m, SingleStreamModel):
        X = Xv if m.stream == "video" else Xf
        return ConfidenceMatrix(vid, sst.sst_forward(m.model, X, training, rng).values)
    tag = m.tag
    if tag == "mid-concat":
        values = sst.sst_forward(m.fused, fuse_concat(Xv, Xf), training, rng).values
    elif tag == "mid-fc":
        G = _midfc_features(m, Xv.astype(m.fusion_W.dtype, copy=False), Xf.astype(m.fusion_W.dtype, copy=False))
        values = sst.sst_forward(m.fused, G, training, rng).values
    elif tag == "late-avg":
        cv = sst.sst_forward(m.video, Xv, training, rng).values
        cf = sst.sst_forward(m.flow, Xf, training, rng).values
        values = late_avg(cv, cf, m.variant.alpha)
    else:
        sv = sst.encoder_forward(m.video, Xv, training, rng)
        sf = sst.encoder_forward(m.flow, Xf, training, rng)
        values = latefc_fuse(m.fusion_W, m.fusion_b, sv, sf)
    return ConfidenceMatrix(vid, values)


# -- loss and gradients ----------------------------------------------------------

def _prefixed(prefix, grads):
    return {f"{prefix}.{k}": v for k, v in grads.items()}


def two_stream_loss_and_grads(m: TwoStreamModel, Xv, Xf, labels, pos_weight: float, rng=None,
                              training: bool = True, trainable=None):
    """Weighted BCE of one video and gradients for the parameters in ``trainable``.

    ``trainable`` is a collection of parameter-name prefixes (``"video"``,
    ``"flow"``, ``"fused"``, ``"fusion"``); ``None`` means all of them.
    """
    want = lambda p: trainable is None or p in trainable  # noqa: E731
    tag = m.tag
    grads = {}
    if tag == "mid-concat":
        loss, g = sst.sst_loss_and_grads(m.fused, fuse_concat(Xv, Xf), labels, pos_weight, rng, training)
        grads.update(_prefixed("fused", g))
    elif tag == "mid-fc":
        A = fuse_concat(Xv, Xf)
        G = nc.fc_forward(m.fusion_W, m.fusion_b, A, "relu")
        if m.post_fusion_l2:
            Gn, norms = nc.l2_rows(G)
        else:
            Gn = G
        loss, g, dGn = sst.sst_loss_and_grads(m.fused, Gn, labels, pos_weight, rng, training,
                                              need_input_grad=True)
        grads.update(_prefixed("fused", g))
        if want("fusion"):
            dG = nc.l2_rows_backward(Gn, norms, dGn) if m.post_fusion_l2 else dGn
            _, dW, db = nc.fc_backward(m.fusion_W, A, G, dG, "relu")
            grads["fusion.W"], grads["fusion.b"] = dW, db
    elif tag == "late-avg":
        a = m.variant.alpha
        Sv, cv = sst.encode(m.video.gru_layers, Xv, m.video.config.dropout_rate, training, rng)
        Sf, cf = sst.encode(m.flow.gru_layers, Xf, m.flow.config.dropout_rate, training, rng)
        Pv = nc.fc_forward(m.video.head_W, m.video.head_b, Sv, "sigmoid")
        Pf = nc.fc_forward(m.flow.head_W, m.flow.head_b, Sf, "sigmoid")
        loss, dP = nc.weighted_bce_loss((1 - a) * Pv + a * Pf, labels, pos_weight)
        for name, model, S, cache, P, w in (("video", m.video, Sv, cv, Pv, 1 - a),
                                            ("flow", m.flow, Sf, cf, Pf, a)):
            if not want(name):
                continue
            dA = w * dP * P * (1 - P)
            grads[f"{name}.head.W"] = dA.T @ S
            grads[f"{name}.head.b"] = dA.sum(axis=0)
            _, lg = sst.encode_backward(model.gru_layers, cache, dA @ model.head_W)
            grads.update(_prefixed(name, sst.gru_grads_to_dict("", lg)))
    elif tag == "late-fc":
        Sv, cv = sst.encode(m.video.gru_layers, Xv, m.video.config.dropout_rate, training, rng)
        Sf, cf = sst.encode(m.flow.gru_layers, Xf, m.flow.config.dropout_rate, training, rng)
        Z = fuse_concat(Sv, Sf)
        P = nc.fc_forward(m.fusion_W, m.fusion_b, Z, "sigmoid")
        loss, dA = nc.bce_grad_wrt_logits(P, labels, pos_weight)
        grads["fusion.W"], grads["fusion.b"] = dA.T @ Z, dA.sum(axis=0)
        if want("video") or want("flow"):
            dZ = dA @ m.fusion_W
            Hv = Sv.shape[1]
            for name, model, cache, dS in (("video", m.video, cv, dZ[:, :Hv]),
                                           ("flow", m.flow, cf, dZ[:, Hv:])):
                if want(name):
                    _, lg = sst.encode_backward(model.gru_layers, cache, dS)
                    grads.update(_prefixed(name, sst.gru_grads_to_dict("", lg)))
    else:
        raise ConfigError(f"unknown variant {tag!r}")
    if trainable is not None:
        grads = {k: v for k, v in grads.items() if k.split(".", 1)[0] in trainable}
    return loss, grads


# -- staged training -------------------------------------------------------------

@dataclass
class TrainingSchedule:
    """Epoch budgets and learning rates of the three training stages.

    Stage 1 pretrains each stream with its own config's learning rate (the
    "separate" rate); stage 2 trains the not-preinitialised parts at
    ``fusion_lr`` (the "common" rate); stage 3 optionally fine-tunes
    everything at ``finetune_lr``.
    """

    pretrain_epochs: int = 50
    fusion_epochs: int = 50
    finetune_epochs: int = 0
    fusion_lr: float = 1e-3
    finetune_lr: float = 1e-3
    freeze_pretrained: bool = True

    def __post_init__(self):
        if min(self.pretrain_epochs, self.fusion_epochs, self.finetune_epochs) < 0:
            raise ConfigError("epoch counts must be non-negative")
        if not (self.fusion_lr > 0 and self.finetune_lr > 0):
            raise ConfigError("learning rates must be positive")


@dataclass
class StreamConfigs:
    """Per-stream SST hyper-parameters plus the shared SST of the mid variants.

    ``input_dim`` may be left at 0; it is filled in from the data.
    """

    video: SstConfig = field(default_factory=lambda: SstConfig(0, 2, 128, learning_rate=1e-3))
    flow: SstConfig = field(default_factory=lambda: SstConfig(0, 1, 256, learning_rate=1e-2))
    fused: SstConfig = field(default_factory=lambda: SstConfig(0, 2, 256, learning_rate=1e-2))


@dataclass
class TrainInfo:
    losses: dict = field(default_factory=dict)


def _split_dataset(dataset):
    pairs, annotations = dataset
    if not pairs:
        raise DataError("empty training set")
    if len(pairs) != len(annotations):
        raise DataError("stream pairs and annotations differ in length")
    Xv, Xf = [], []
    for (v, f), a in zip(pairs, annotations):
        xv, xf = _arr(v), _arr(f)
        if xv.shape[0] != xf.shape[0]:
            raise DataError(f"{a.video_id}: streams have {xv.shape[0]} vs {xf.shape[0]} blocks")
        Xv.append(xv)
        Xf.append(xf)
    return Xv, Xf, annotations


def pretrain_streams(dataset, configs: StreamConfigs, schedule: TrainingSchedule, seed: int = 0):
    """Stage 1: independent SSTs on each stream. Returns ``({stream: model}, {stream: losses})``."""
    Xv, Xf, anns = _split_dataset(dataset)
    models, losses = {}, {}
    for offset, (name, X, cfg) in enumerate((("video", Xv, configs.video), ("flow", Xf, configs.flow)), 1):
        cfg = replace(cfg, input_dim=X[0].shape[1], epochs=schedule.pretrain_epochs, seed=seed + offset)
        r = sst.sst_train(cfg, X, anns, return_losses=True)
        models[name], losses[name] = r.model, r.losses
    return models, losses


def init_two_stream(variant: FusionVariant, dims, configs: StreamConfigs, seed: int = 0,
                    pretrained=None, post_fusion_l2: bool = False) -> TwoStreamModel:
    """Fresh model for ``variant``; ``dims = (video_dim, flow_dim)``."""
    rng = np.random.default_rng(seed + 3)
    dv, df = dims
    tag = variant.tag
    if tag == "mid-concat":
        fused = SstModel.init(replace(configs.fused, input_dim=dv + df), rng)
        return TwoStreamModel(variant, fused=fused)
    if tag == "mid-fc":
        F = variant.fused_dim or max(dv, df)
        W = nc.glorot_uniform(rng, F, dv + df)
        fused = SstModel.init(replace(configs.fused, input_dim=F), rng)
        return TwoStreamModel(variant, fused=fused, fusion_W=W, fusion_b=np.zeros(F, np.float32),
                              post_fusion_l2=post_fusion_l2)
    if pretrained is None:
        pretrained = {
            "video": SstModel.init(replace(configs.video, input_dim=dv), rng),
            "flow": SstModel.init(replace(configs.flow, input_dim=df), rng),
        }
    video, flow = pretrained["video"].copy(), pretrained["flow"].copy()
    if tag == "late-avg":
        return TwoStreamModel(variant, video=video, flow=flow)
    K = video.config.num_anchors
    W = nc.glorot_uniform(rng, K, video.hidden_dim + flow.hidden_dim)
    return TwoStreamModel(variant, video=video, flow=flow, fusion_W=W, fusion_b=np.zeros(K, np.float32))


def _fit(model: TwoStreamModel, Xv, Xf, Ys, pw, trainable, epochs, lr, seed, optimizer="adam"):
    work = model.astype(np.float64)
    params = work.params()
    Xv = [x.astype(np.float64) for x in Xv]
    Xf = [x.astype(np.float64) for x in Xf]

    def step(i, r):
        return two_stream_loss_and_grads(work, Xv[i], Xf[i], Ys[i], pw, r, True, trainable)

    def initial():
        return np.mean([two_stream_loss_and_grads(work, a, b, y, pw, None, False, ())[0]
                        for a, b, y in zip(Xv, Xf, Ys)])

    trace = sst.run_epochs(params, step, len(Ys), epochs, lr, optimizer, np.random.default_rng(seed), initial)
    return work.astype(np.float32), trace


def train_two_stream(variant: FusionVariant, dataset, schedule: TrainingSchedule | None = None,
                     seed: int = 0, configs: StreamConfigs | None = None, pretrained=None,
                     post_fusion_l2: bool = False, return_info: bool = False):
    """Staged training of a two-stream model.

    ``dataset`` is ``(pairs, annotations)`` with ``pairs[i] = (video, flow)``.
    ``pretrained`` may carry stage-1 stream models (``{"video": m, "flow": m}``)
    to skip pretraining; they must come from :func:`pretrain_streams` with the
    same data, configs and seed for the result to be reproducible.
    """
    schedule = schedule or TrainingSchedule()
    configs = configs or StreamConfigs()
    Xv, Xf, anns = _split_dataset(dataset)
    info = TrainInfo()
    tag = variant.tag
    if tag in ("late-avg", "late-fc") and pretrained is None:
        pretrained, info.losses["stage1"] = pretrain_streams(dataset, configs, schedule, seed)
    model = init_two_stream(variant, (Xv[0].shape[1], Xf[0].shape[1]), configs, seed, pretrained,
                            post_fusion_l2)
    K = (model.fused or model.video).config.num_anchors
    pos_tiou = (model.fused or model.video).config.pos_tiou
    Ys = [sst.make_anchor_labels(a, x.shape[0], K, pos_tiou) for a, x in zip(anns, Xv)]
    pw = sst.positive_weight(Ys)

    # stage 2: parts that could not be preinitialised
    if tag in ("mid-concat", "mid-fc"):
        stage2 = {"fused", "fusion"}
    elif tag == "late-fc":
        stage2 = {"fusion"} if schedule.freeze_pretrained else {"video", "flow", "fusion"}
    else:
        stage2 = set()
    if stage2 and schedule.fusion_epochs > 0:
        model, info.losses["stage2"] = _fit(model, Xv, Xf, Ys, pw, stage2, schedule.fusion_epochs,
                                            schedule.fusion_lr, seed + 4)
    # stage 3: optional joint fine-tuning of every weight
    if schedule.finetune_epochs > 0:
        model, info.losses["stage3"] = _fit(model, Xv, Xf, Ys, pw, None, schedule.finetune_epochs,
                                            schedule.finetune_lr, seed + 5)
    return (model, info) if return_info else model


# -- checkpoint container --------------------------------------------------------

def _encode_fc(W, b) -> bytes:
    buf = io.BytesIO()
    sst.write_tensor(buf, W)
    sst.write_tensor(buf, b)
    return buf.getvalue()


def encode_checkpoint(m, meta: dict | None = None) -> bytes:
    """Serialise a :class:`TwoStreamModel` or :class:`SingleStreamModel`.

    Layout: ``b"TSM1"``, u32 version, u8 variant tag, f64 alpha (NaN when
    unused), u8 post-fusion-L2 flag, u32 block count, then blocks of
    ``(u8 role, u64 length, payload)``. SST blocks use the SSTM layout.
    """
    blocks = []
    if isinstance(m, SingleStreamModel):
        alpha, l2 = math.nan, 0
        blocks.append((_ROLE_VIDEO if m.stream == "video" else _ROLE_FLOW, sst.encode_sst(m.model)))
    else:
        alpha = m.variant.alpha if m.tag == "late-avg" else math.nan
        l2 = int(m.post_fusion_l2)
        for role, sub in ((_ROLE_VIDEO, m.video), (_ROLE_FLOW, m.flow), (_ROLE_FUSED, m.fused)):
            if sub is not None:
                blocks.append((role, sst.encode_sst(sub)))
        if m.fusion_W is not None:
            blocks.append((_ROLE_FC, _encode_fc(m.fusion_W, m.fusion_b)))
    if meta:
        blocks.append((_ROLE_META, json.dumps(meta, sort_keys=True).encode("utf-8")))
    buf = io.BytesIO()
    buf.write(TSM_MAGIC)
    buf.write(struct.pack("<IBdBI", TSM_VERSION, _TAGS[m.tag], alpha, l2, len(blocks)))
    for role, payload in blocks:
        buf.write(struct.pack("<BQ", role, len(payload)))
        buf.write(payload)
    return buf.getvalue()


def decode_checkpoint(data: bytes):
    """Inverse of :func:`encode_checkpoint`; returns ``(model, meta)``."""
    if data[:4] != TSM_MAGIC:
        raise BadMagic("not a TSM1 checkpoint")
    head = struct.Struct("<IBdBI")
    if len(data) < 4 + head.size:
        raise Truncated("checkpoint header truncated")
    version, tag_code, alpha, l2, nblocks = head.unpack_from(data, 4)
    if version != TSM_VERSION:
        raise VersionMismatch(f"unsupported TSM1 version {version}")
    tags = {v: k for k, v in _TAGS.items()}
    if tag_code not in tags:
        raise DataError(f"unknown variant tag {tag_code}")
    tag = tags[tag_code]
    off = 4 + head.size
    parts, meta = {}, {}
    for _ in range(nblocks):
        if len(data) < off + 9:
            raise Truncated("block header truncated")
        role, n = struct.unpack_from("<BQ", data, off)
        off += 9
        payload = data[off: off + n]
        if len(payload) < n:
            raise Truncated("block payload truncated")
        off += n
        if role in (_ROLE_VIDEO, _ROLE_FLOW, _ROLE_FUSED):
            parts[role] = sst.decode_sst(payload)
        elif role == _ROLE_FC:
            b = io.BytesIO(payload)
            parts[role] = (sst.read_tensor(b), sst.read_tensor(b))
        elif role == _ROLE_META:
            meta = json.loads(payload.decode("utf-8"))
    if off != len(data):
        raise DataError("trailing bytes after checkpoint")
    if tag in SINGLE_VARIANTS:
        stream = tag.split("-", 1)[1]
        return SingleStreamModel(stream, parts[_ROLE_VIDEO if stream == "video" else _ROLE_FLOW]), meta
    fc = parts.get(_ROLE_FC, (None, None))
    fused_dim = fc[0].shape[0] if tag == "mid-fc" else None
    variant = FusionVariant(tag, alpha if tag == "late-avg" else 0.5, fused_dim)
    model = TwoStreamModel(variant, parts.get(_ROLE_VIDEO), parts.get(_ROLE_FLOW), parts.get(_ROLE_FUSED),
                           fc[0], fc[1], bool(l2))
    return model, meta


def save_checkpoint(m, path, meta: dict | None = None):
    with open(path, "wb") as fh:
        fh.write(encode_checkpoint(m, meta))


def load_checkpoint(path):
    with open(path, "rb") as fh:
        return decode_checkpoint(fh.read())
