"""Single-stream SST: stacked GRU encoder and a sigmoid head with K anchors per block.

Anchor ``(i, j)`` (``j = 1..K``) is the block interval ``[i - j + 1, i]``
clipped at block 0, so every proposal ends at the block it is emitted for.
Column ``j - 1`` of a confidence matrix holds anchor length ``j``.
"""
from __future__ import annotations

import io
import json
import struct
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import numeric as nc
from .errors import BadMagic, ConfigError, DataError, ShapeError, Truncated, VersionMismatch
from .features import Annotation, FeatureSequence

SSTM_MAGIC = b"SSTM"
SSTM_VERSION = 1


@dataclass
class SstConfig:
    input_dim: int
    num_gru_layers: int = 2
    hidden_dim: int = 128
    num_anchors: int = 32
    dropout_rate: float = 0.3
    learning_rate: float = 1e-3
    epochs: int = 50
    seed: int = 0
    pos_tiou: float = 0.5
    optimizer: str = "adam"

    def __post_init__(self):
        # input_dim 0 means "take it from the data" (resolved before model init)
        if self.input_dim < 0 or self.hidden_dim < 1:
            raise ConfigError("input_dim must be >= 0 and hidden_dim positive")
        if self.num_gru_layers < 1:
            raise ConfigError("need at least one GRU layer")
        if self.num_anchors < 1:
            raise ConfigError("num_anchors must be >= 1")
        if not 0 <= self.dropout_rate < 1:
            raise ConfigError("dropout_rate must lie in [0, 1)")
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be positive")
        if self.epochs < 0:
            raise ConfigError("epochs must be non-negative")
        if not 0 < self.pos_tiou <= 1:
            raise ConfigError("pos_tiou must lie in (0, 1]")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")


@dataclass
class ConfidenceMatrix:
    video_id: str
    values: np.ndarray  # (T, K)

    @property
    def num_blocks(self) -> int:
        return self.values.shape[0]

    @property
    def num_anchors(self) -> int:
        return self.values.shape[1]


@dataclass
class SstModel:
    config: SstConfig
    gru_layers: list
    head_W: np.ndarray
    head_b: np.ndarray

    def __post_init__(self):
        dim = self.config.input_dim
        for i, layer in enumerate(self.gru_layers):
            if layer.input_dim != dim:
                raise ShapeError(f"GRU layer {i} expects {layer.input_dim} inputs, chain gives {dim}")
            dim = layer.hidden_dim
        if self.head_W.shape != (self.config.num_anchors, dim) or self.head_b.shape != (
            self.config.num_anchors,
        ):
            raise ShapeError(f"head {self.head_W.shape}/{self.head_b.shape} does not fit hidden {dim}")

    @classmethod
    def init(cls, cfg: SstConfig, rng: np.random.Generator | None = None) -> "SstModel":
        if cfg.input_dim < 1:
            raise ConfigError("input_dim must be resolved before initialising a model")
        rng = rng if rng is not None else np.random.default_rng(cfg.seed)
        layers, dim = [], cfg.input_dim
        for _ in range(cfg.num_gru_layers):
            layers.append(nc.GruLayerParams.init(dim, cfg.hidden_dim, rng))
            dim = cfg.hidden_dim
        head_W = nc.glorot_uniform(rng, cfg.num_anchors, dim)
        return cls(cfg, layers, head_W, np.zeros(cfg.num_anchors, dtype=np.float32))

    @property
    def hidden_dim(self) -> int:
        return self.gru_layers[-1].hidden_dim

    def params(self) -> dict:
        """Live references to every parameter array, in declaration order."""
        out = {}
        for i, layer in enumerate(self.gru_layers):
            out[f"gru{i}.W"] = layer.W
            out[f"gru{i}.U"] = layer.U
            out[f"gru{i}.b"] = layer.b
        out["head.W"] = self.head_W
        out["head.b"] = self.head_b
        return out

    def astype(self, dtype) -> "SstModel":
        return SstModel(
            self.config,
            [layer.astype(dtype) for layer in self.gru_layers],
            self.head_W.astype(dtype),
            self.head_b.astype(dtype),
        )

    def copy(self) -> "SstModel":
        return self.astype(self.head_W.dtype)


def _features(f):
    return f.data if isinstance(f, FeatureSequence) else np.asarray(f)


# -- forward / backward ----------------------------------------------------------

@dataclass
class EncoderCache:
    gru: list = field(default_factory=list)
    masks: list = field(default_factory=list)


def encode(layers, X, dropout_rate: float, training: bool, rng=None):
    """Stacked GRU with dropout on every layer's output. Returns ``(states, cache)``."""
    cache = EncoderCache()
    H = X
    for layer in layers:
        S, gc = nc.gru_forward(layer, H)
        cache.gru.append(gc)
        if training and dropout_rate > 0:
            if rng is None:
                raise ValueError("training-mode encoding needs an rng")
            mask = nc.dropout_mask(S.shape, dropout_rate, rng, S.dtype.type)
            S = S * mask
        else:
            mask = None
        cache.masks.append(mask)
        H = S
    return H, cache


def encode_backward(layers, cache: EncoderCache, dS, need_input_grad: bool = False):
    """Returns ``(dX or None, per-layer GruLayerParams gradients)``."""
    grads = [None] * len(layers)
    d = dS
    for i in range(len(layers) - 1, -1, -1):
        if cache.masks[i] is not None:
            d = d * cache.masks[i]
        dX, _, g = nc.gru_backward(layers[i], cache.gru[i], d)
        grads[i] = g
        d = dX
    return (d if need_input_grad else None), grads


def encoder_forward(m: SstModel, f, training: bool = False, rng=None):
    """Final-layer hidden state at every block, ``(T, hidden_dim)``."""
    X = _features(f)
    if X.ndim != 2 or X.shape[1] != m.config.input_dim:
        raise ShapeError(f"model expects {m.config.input_dim}-dim features, got {X.shape}")
    states, _ = encode(m.gru_layers, X.astype(m.head_W.dtype, copy=False),
                       m.config.dropout_rate, training, rng)
    return states


def head_forward(m: SstModel, states, video_id: str = "") -> ConfidenceMatrix:
    return ConfidenceMatrix(video_id, nc.fc_forward(m.head_W, m.head_b, states, "sigmoid"))


def sst_forward(m: SstModel, f, training: bool = False, rng=None) -> ConfidenceMatrix:
    vid = f.video_id if isinstance(f, FeatureSequence) else ""
    return head_forward(m, encoder_forward(m, f, training, rng), vid)


def gru_grads_to_dict(prefix: str, grads) -> dict:
    out = {}
    for i, g in enumerate(grads):
        out[f"{prefix}gru{i}.W"] = g.W
        out[f"{prefix}gru{i}.U"] = g.U
        out[f"{prefix}gru{i}.b"] = g.b
    return out


def sst_loss_and_grads(m: SstModel, X, labels, pos_weight: float, rng=None, training: bool = True,
                       need_input_grad: bool = False):
    """Weighted BCE of one video and gradients of every parameter of ``m``.

    Returns ``(loss, grads)``; with ``need_input_grad`` also the gradient
    w.r.t. the input features as a third element.
    """
    S, cache = encode(m.gru_layers, X, m.config.dropout_rate, training, rng)
    P = nc.fc_forward(m.head_W, m.head_b, S, "sigmoid")
    loss, dA = nc.bce_grad_wrt_logits(P, labels, pos_weight)
    grads = {"head.W": dA.T @ S, "head.b": dA.sum(axis=0)}
    dS = dA @ m.head_W
    dX, layer_grads = encode_backward(m.gru_layers, cache, dS, need_input_grad)
    grads.update(gru_grads_to_dict("", layer_grads))
    if need_input_grad:
        return loss, grads, dX
    return loss, grads


# -- anchors ---------------------------------------------------------------------

def anchor_bounds(T: int, K: int):
    """``(starts, ends)`` arrays of shape (T, K) for every anchor."""
    i = np.arange(T)[:, None]
    j = np.arange(1, K + 1)[None, :]
    starts = np.maximum(i - j + 1, 0)
    ends = np.broadcast_to(i, (T, K))
    return starts, ends.copy()


def make_anchor_labels(a: Annotation, T: int | None = None, K: int = 32, pos_tiou: float = 0.5):
    """1 where the anchor's block-tIoU with some ground-truth segment is >= ``pos_tiou``."""
    T = a.num_blocks if T is None else T
    if T != a.num_blocks:
        raise DataError(f"{a.video_id}: annotation has {a.num_blocks} blocks, got T={T}")
    labels = np.zeros((T, K), dtype=np.float64)
    if not a.segments:
        return labels
    starts, ends = anchor_bounds(T, K)
    for gs, ge in a.segments:
        inter = np.minimum(ends, ge) - np.maximum(starts, gs) + 1
        inter = np.maximum(inter, 0)
        union = (ends - starts + 1) + (ge - gs + 1) - inter
        labels[inter / union >= pos_tiou] = 1
    return labels


def positive_weight(label_list) -> float:
    """#negative / #positive anchors over a training set (1.0 if either is absent)."""
    pos = sum(float(l.sum()) for l in label_list)
    total = sum(l.size for l in label_list)
    neg = total - pos
    if pos == 0 or neg == 0:
        return 1.0
    return neg / pos


# -- training --------------------------------------------------------------------

def run_epochs(params: dict, step_fn, num_items: int, epochs: int, lr: float,
               optimizer: str, rng: np.random.Generator, initial_loss=None):
    """Generic per-item optimisation loop.

    ``step_fn(index, rng) -> (loss, grads)``; grads may cover a subset of
    ``params`` and only those entries are updated. Items are visited in a
    fresh seeded permutation each epoch. Returns the loss trace: the initial
    loss (if ``initial_loss`` is given) followed by one mean training loss
    per epoch.
    """
    trace = [] if initial_loss is None else [float(initial_loss())]
    if epochs == 0 or num_items == 0:
        return trace
    state = nc.OptimizerState(lr, optimizer)
    for _ in range(epochs):
        total = 0.0
        for idx in rng.permutation(num_items):
            loss, grads = step_fn(int(idx), rng)
            nc.optimizer_step(state, params, grads)
            total += loss
        trace.append(total / num_items)
    return trace


@dataclass
class TrainResult:
    model: SstModel
    losses: list


def sst_train(cfg: SstConfig, features, annotations, return_losses: bool = False):
    """Train a single-stream SST on parallel lists of feature sequences and annotations."""
    if len(features) == 0:
        raise DataError("empty training set")
    if len(features) != len(annotations):
        raise DataError("features and annotations differ in length")
    if cfg.input_dim == 0:
        cfg = replace(cfg, input_dim=_features(features[0]).shape[1])
    rng = np.random.default_rng(cfg.seed)
    model = SstModel.init(cfg, rng)
    Xs, Ys = [], []
    for f, a in zip(features, annotations):
        X = _features(f)
        if X.shape[1] != cfg.input_dim:
            raise ShapeError(f"{a.video_id}: feature dim {X.shape[1]} != {cfg.input_dim}")
        Xs.append(X.astype(np.float64))
        Ys.append(make_anchor_labels(a, X.shape[0], cfg.num_anchors, cfg.pos_tiou))
    pw = positive_weight(Ys)
    if cfg.epochs == 0:
        return TrainResult(model, []) if return_losses else model
    work = model.astype(np.float64)
    params = work.params()

    def step(i, r):
        return sst_loss_and_grads(work, Xs[i], Ys[i], pw, r)

    def initial():
        return np.mean([sst_loss_and_grads(work, X, Y, pw, training=False)[0] for X, Y in zip(Xs, Ys)])

    trace = run_epochs(params, step, len(Xs), cfg.epochs, cfg.learning_rate, cfg.optimizer, rng, initial)
    trained = work.astype(np.float32)
    return TrainResult(trained, trace) if return_losses else trained


# -- checkpoint ------------------------------------------------------------------

def write_tensor(buf, a):
    a = np.ascontiguousarray(a, dtype="<f4")
    buf.write(struct.pack("<B", a.ndim))
    buf.write(struct.pack(f"<{a.ndim}I", *a.shape))
    buf.write(a.tobytes())


def read_u32(buf) -> int:
    raw = buf.read(4)
    if len(raw) < 4:
        raise Truncated("checkpoint truncated")
    return struct.unpack("<I", raw)[0]


def read_tensor(buf):
    raw = buf.read(1)
    if len(raw) < 1:
        raise Truncated("tensor header missing")
    (ndim,) = struct.unpack("<B", raw)
    raw = buf.read(4 * ndim)
    if len(raw) < 4 * ndim:
        raise Truncated("tensor shape truncated")
    shape = struct.unpack(f"<{ndim}I", raw)
    count = int(np.prod(shape)) if ndim else 1
    raw = buf.read(4 * count)
    if len(raw) < 4 * count:
        raise Truncated("tensor payload truncated")
    return np.frombuffer(raw, dtype="<f4").reshape(shape).astype(np.float32)


def encode_sst(m: SstModel) -> bytes:
    buf = io.BytesIO()
    buf.write(SSTM_MAGIC)
    buf.write(struct.pack("<I", SSTM_VERSION))
    cfg = json.dumps(asdict(m.config), sort_keys=True).encode("utf-8")
    buf.write(struct.pack("<I", len(cfg)))
    buf.write(cfg)
    params = m.params()
    buf.write(struct.pack("<I", len(params)))
    for a in params.values():
        write_tensor(buf, a)
    return buf.getvalue()


def read_sst(buf) -> SstModel:
    if buf.read(4) != SSTM_MAGIC:
        raise BadMagic("not an SSTM checkpoint")
    version = read_u32(buf)
    if version != SSTM_VERSION:
        raise VersionMismatch(f"unsupported SSTM version {version}")
    n = read_u32(buf)
    raw = buf.read(n)
    if len(raw) < n:
        raise Truncated("config truncated")
    cfg = SstConfig(**json.loads(raw.decode("utf-8")))
    count = read_u32(buf)
    tensors = [read_tensor(buf) for _ in range(count)]
    if count != 3 * cfg.num_gru_layers + 2:
        raise ShapeError(f"checkpoint holds {count} tensors for {cfg.num_gru_layers} layers")
    layers = [nc.GruLayerParams(*tensors[3 * i: 3 * i + 3]) for i in range(cfg.num_gru_layers)]
    return SstModel(cfg, layers, tensors[-2], tensors[-1])


def decode_sst(data: bytes) -> SstModel:
    buf = io.BytesIO(data)
    m = read_sst(buf)
    if buf.read(1):
        raise DataError("trailing bytes after SSTM checkpoint")
    return m


def save_sst(m: SstModel, path):
    with open(path, "wb") as fh:
        fh.write(encode_sst(m))


def load_sst(path) -> SstModel:
    with open(path, "rb") as fh:
        return decode_sst(fh.read())


def models_equal(a: SstModel, b: SstModel) -> bool:
    """Bit-exact comparison of config and every parameter."""
    if a.config != b.config:
        return False
    pa, pb = a.params(), b.params()
    return pa.keys() == pb.keys() and all(
        pa[k].dtype == pb[k].dtype and np.array_equal(pa[k], pb[k]) for k in pa
    )


def with_config(m: SstModel, **changes) -> SstModel:
    return SstModel(replace(m.config, **changes), m.gru_layers, m.head_W, m.head_b)
