"""Per-block feature sequences: file IO, L2/PCA preprocessing and a synthetic generator.

The feature vectors stand in for C3D fc6/fc7 activations, one row per
non-overlapping block of 16 frames.
"""
from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import (
    BadMagic,
    ConfigError,
    DataError,
    FeatureFileError,
    NonFiniteValues,
    ShapeError,
    Truncated,
    VersionMismatch,
)

BLOCK_SIZE_FRAMES = 16
STREAMS = ("video", "flow")

FSEQ_MAGIC = b"FSEQ"
FSEQ_VERSION = 1
_HEADER = struct.Struct("<4sIBIII")


@dataclass
class FeatureSequence:
    video_id: str
    stream: str
    data: np.ndarray
    block_size_frames: int = BLOCK_SIZE_FRAMES
    provenance: str = ""

    def __post_init__(self):
        if self.stream not in STREAMS:
            raise ValueError(f"stream must be one of {STREAMS}, got {self.stream!r}")
        data = np.asarray(self.data)
        if data.ndim != 2 or data.shape[0] < 1:
            raise ShapeError(f"feature data must be (T >= 1, dim), got {data.shape}")
        if not np.all(np.isfinite(data)):
            raise NonFiniteValues(f"{self.video_id}/{self.stream}: non-finite feature values")
        self.data = data

    @property
    def num_blocks(self) -> int:
        return self.data.shape[0]

    @property
    def dim(self) -> int:
        return self.data.shape[1]

    def with_data(self, data) -> "FeatureSequence":
        return replace(self, data=data)


@dataclass
class Annotation:
    video_id: str
    num_blocks: int
    segments: list = field(default_factory=list)

    def __post_init__(self):
        self.segments = [(int(s), int(e)) for s, e in self.segments]
        for s, e in self.segments:
            if not 0 <= s <= e < self.num_blocks:
                raise DataError(
                    f"{self.video_id}: segment ({s}, {e}) outside [0, {self.num_blocks})"
                )


# -- file formats --------------------------------------------------------------

def feature_path(directory, video_id: str, stream: str) -> Path:
    return Path(directory) / f"{video_id}.{stream}.fseq"


def encode_features(f: FeatureSequence) -> bytes:
    tag = f.provenance.encode("utf-8")
    header = _HEADER.pack(
        FSEQ_MAGIC, FSEQ_VERSION, STREAMS.index(f.stream), f.dim, f.num_blocks, f.block_size_frames
    )
    payload = np.ascontiguousarray(f.data, dtype="<f4").tobytes()
    return header + struct.pack("<H", len(tag)) + tag + payload


def decode_features(buf: bytes, video_id: str = "") -> FeatureSequence:
    if len(buf) < 4 or buf[:4] != FSEQ_MAGIC:
        raise BadMagic(f"bad magic {bytes(buf[:4])!r}, expected {FSEQ_MAGIC!r}")
    if len(buf) < _HEADER.size + 2:
        raise Truncated("header is truncated")
    _, version, stream, dim, num_blocks, block_size = _HEADER.unpack_from(buf)
    if version != FSEQ_VERSION:
        raise VersionMismatch(f"unsupported .fseq version {version}")
    if stream >= len(STREAMS):
        raise FeatureFileError(f"unknown stream code {stream}")
    (tag_len,) = struct.unpack_from("<H", buf, _HEADER.size)
    off = _HEADER.size + 2
    if len(buf) < off + tag_len:
        raise Truncated("provenance tag is truncated")
    tag = bytes(buf[off: off + tag_len]).decode("utf-8")
    off += tag_len
    expected = dim * num_blocks * 4
    if len(buf) - off < expected:
        raise Truncated(
            f"payload has {len(buf) - off} bytes, header promises {num_blocks}x{dim} floats"
        )
    if len(buf) - off > expected:
        raise FeatureFileError("trailing bytes after payload")
    data = np.frombuffer(buf, dtype="<f4", count=dim * num_blocks, offset=off)
    data = data.reshape(num_blocks, dim).astype(np.float32)
    if not np.all(np.isfinite(data)):
        raise NonFiniteValues("non-finite values in feature payload")
    return FeatureSequence(video_id, STREAMS[stream], data, block_size, tag)


def save_features(f: FeatureSequence, path) -> Path:
    path = Path(path)
    path.write_bytes(encode_features(f))
    return path


def load_features(path) -> FeatureSequence:
    """Load a ``.fseq`` file; the video id is the file name up to the stream suffix."""
    path = Path(path)
    name = path.name
    if name.endswith(".fseq"):
        name = name[: -len(".fseq")]
    for s in STREAMS:
        if name.endswith("." + s):
            name = name[: -len(s) - 1]
            break
    return decode_features(path.read_bytes(), video_id=name)


def annotations_to_json(annotations) -> str:
    items = [
        {
            "video_id": a.video_id,
            "num_blocks": a.num_blocks,
            "segments": [{"start_block": s, "end_block": e} for s, e in a.segments],
        }
        for a in annotations
    ]
    return json.dumps(items, indent=1)


def annotations_from_json(text: str) -> list[Annotation]:
    try:
        items = json.loads(text)
        return [
            Annotation(
                it["video_id"],
                int(it["num_blocks"]),
                [(seg["start_block"], seg["end_block"]) for seg in it["segments"]],
            )
            for it in items
        ]
    except (KeyError, TypeError, json.JSONDecodeError) as e:
        raise DataError(f"malformed annotations: {e}") from e


def save_annotations(annotations, path) -> Path:
    path = Path(path)
    path.write_text(annotations_to_json(annotations))
    return path


def load_annotations(path) -> list[Annotation]:
    return annotations_from_json(Path(path).read_text())


# -- preprocessing -------------------------------------------------------------

def _rows(f):
    return f.data if isinstance(f, FeatureSequence) else np.asarray(f)


def l2_normalize(f):
    """Scale every block row to unit norm. All-zero rows stay zero."""
    X = _rows(f)
    norms = np.linalg.norm(X.astype(np.float64), axis=1, keepdims=True)
    out = np.where(norms > 0, X / np.where(norms > 0, norms, 1), 0).astype(X.dtype)
    return f.with_data(out) if isinstance(f, FeatureSequence) else out


def jacobi_eigh(S, tol: float = 1e-12, max_sweeps: int = 100):
    """Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.

    Returns ``(eigenvalues, eigenvectors)`` with eigenvectors as columns,
    sorted by descending eigenvalue.
    """
    A = np.array(S, dtype=np.float64)
    n = A.shape[0]
    if A.shape != (n, n):
        raise ShapeError(f"jacobi_eigh needs a square matrix, got {A.shape}")
    V = np.eye(n)
    scale = max(np.abs(A).max(), 1e-300)
    for _ in range(max_sweeps):
        off = np.sqrt(np.sum(np.tril(A, -1) ** 2))
        if off <= tol * scale:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = A[p, q]
                if abs(apq) <= 1e-300:
                    continue
                theta = (A[q, q] - A[p, p]) / (2 * apq)
                t = math.copysign(1.0, theta) / (abs(theta) + math.sqrt(theta * theta + 1))
                c = 1 / math.sqrt(t * t + 1)
                s = t * c
                ap, aq = A[:, p].copy(), A[:, q].copy()
                A[:, p] = c * ap - s * aq
                A[:, q] = s * ap + c * aq
                ap, aq = A[p, :].copy(), A[q, :].copy()
                A[p, :] = c * ap - s * aq
                A[q, :] = s * ap + c * aq
                vp, vq = V[:, p].copy(), V[:, q].copy()
                V[:, p] = c * vp - s * vq
                V[:, q] = s * vp + c * vq
    w = np.diag(A).copy()
    order = np.argsort(-w, kind="stable")
    return w[order], V[:, order]


@dataclass
class PcaModel:
    mean: np.ndarray
    components: np.ndarray  # (k, dim), orthonormal rows
    explained_variance: np.ndarray

    @property
    def dim(self) -> int:
        return self.components.shape[1]

    @property
    def k(self) -> int:
        return self.components.shape[0]


def pca_fit(rows, k: int) -> PcaModel:
    X = np.asarray(rows, dtype=np.float64)
    N, dim = X.shape
    if N < 2:
        raise ValueError("pca_fit needs at least two rows")
    if not 1 <= k <= min(N - 1, dim):
        raise ValueError(f"k={k} must lie in [1, min(N-1, dim)] = [1, {min(N - 1, dim)}]")
    mean = X.mean(axis=0)
    Xc = X - mean
    cov = Xc.T @ Xc / (N - 1)
    w, V = jacobi_eigh(cov)
    comps = V[:, :k].T.copy()
    # deterministic sign: largest-magnitude entry of each component is positive
    idx = np.argmax(np.abs(comps), axis=1)
    comps *= np.sign(comps[np.arange(k), idx])[:, None]
    return PcaModel(mean, comps, np.maximum(w[:k], 0))


def pca_transform(m: PcaModel, f):
    X = _rows(f)
    if X.shape[1] != m.dim:
        raise ShapeError(f"PCA model expects dim {m.dim}, got {X.shape[1]}")
    out = ((X.astype(np.float64) - m.mean) @ m.components.T).astype(X.dtype)
    return f.with_data(out) if isinstance(f, FeatureSequence) else out


def pca_inverse(m: PcaModel, Y):
    return np.asarray(Y, dtype=np.float64) @ m.components + m.mean


def save_pca(m: PcaModel, path):
    np.savez(path, mean=m.mean, components=m.components, explained_variance=m.explained_variance)


def load_pca(path) -> PcaModel:
    with np.load(path) as z:
        return PcaModel(z["mean"], z["components"], z["explained_variance"])


# -- seconds <-> blocks ----------------------------------------------------------

def seconds_to_blocks(start_s: float, end_s: float, fps: float,
                      block_size_frames: int = BLOCK_SIZE_FRAMES, num_blocks: int | None = None):
    """Inclusive block span covering a segment given in seconds.

    ``start = floor(start_s * fps / block)``, ``end = floor(end_s * fps / block)``;
    both are clamped to ``[0, num_blocks - 1]`` when ``num_blocks`` is given.
    """
    if fps <= 0:
        raise ValueError("fps must be positive")
    if not 0 <= start_s <= end_s:
        raise ValueError("need 0 <= start <= end")
    # round before flooring so 1.6 s * 30 fps / 16 lands on 3, not 2.9999...
    start = math.floor(round(start_s * fps / block_size_frames, 9))
    end = math.floor(round(end_s * fps / block_size_frames, 9))
    if num_blocks is not None:
        start = min(max(start, 0), num_blocks - 1)
        end = min(max(end, 0), num_blocks - 1)
    return start, end


# -- synthetic data ------------------------------------------------------------

@dataclass
class SynthConfig:
    """Knobs of the synthetic two-stream dataset.

    Inside planted action segments a mean shift is added to ``signal_dims``
    coordinates. A fraction ``split`` of those coordinates is shifted only in
    the flow stream and the rest only in the video stream. Each planted
    instance scales the shift by an amplitude drawn independently per stream
    from ``1 +- amplitude_spread``.
    """

    num_videos: int = 60
    min_blocks: int = 150
    max_blocks: int = 250
    dim: int = 32
    min_len: int = 3
    max_len: int = 24
    action_density: float = 0.35
    signal_dims: int = 16
    shift: float = 0.5
    split: float = 0.5
    noise: float = 1.0
    amplitude_spread: float = 0.75
    num_train: int = 40

    def validate(self):
        if self.num_videos < 1:
            raise ConfigError("num_videos must be >= 1")
        if not 1 <= self.min_blocks <= self.max_blocks:
            raise ConfigError("need 1 <= min_blocks <= max_blocks")
        if self.dim < 1 or not 0 <= self.signal_dims <= self.dim:
            raise ConfigError("need dim >= 1 and 0 <= signal_dims <= dim")
        if not 1 <= self.min_len <= self.max_len:
            raise ConfigError("need 1 <= min_len <= max_len")
        if not 0 < self.action_density < 1:
            raise ConfigError("action_density must lie in (0, 1)")
        if not 0 <= self.split <= 1:
            raise ConfigError("split must lie in [0, 1]")
        if self.noise <= 0:
            raise ConfigError("noise must be positive")
        if not 0 <= self.amplitude_spread <= 1:
            raise ConfigError("amplitude_spread must lie in [0, 1]")
        if not 0 <= self.num_train <= self.num_videos:
            raise ConfigError("num_train must lie in [0, num_videos]")


def _plant_segments(rng, T, cfg: SynthConfig):
    mean_len = (cfg.min_len + cfg.max_len) / 2
    mean_gap = mean_len * (1 - cfg.action_density) / cfg.action_density
    segments = []
    t = int(rng.integers(0, int(mean_gap) + 1))
    while True:
        length = int(rng.integers(cfg.min_len, cfg.max_len + 1))
        if t + length > T:
            break
        segments.append((t, t + length - 1))
        t += length + 1 + int(rng.exponential(mean_gap))
    return segments


def synth_dataset(cfg: SynthConfig | None = None, seed: int = 0):
    """Returns ``(pairs, annotations)`` where ``pairs[i] = (video_seq, flow_seq)``."""
    cfg = cfg or SynthConfig()
    cfg.validate()
    rng = np.random.default_rng(seed)
    n_flow = int(round(cfg.split * cfg.signal_dims))
    n_video = cfg.signal_dims - n_flow
    shift_video = np.zeros(cfg.dim)
    shift_video[:n_video] = cfg.shift
    shift_flow = np.zeros(cfg.dim)
    shift_flow[:n_flow] = cfg.shift
    width = len(str(cfg.num_videos - 1))
    pairs, annotations = [], []
    for v in range(cfg.num_videos):
        vid = f"vid{v:0{width}d}"
        T = int(rng.integers(cfg.min_blocks, cfg.max_blocks + 1))
        segments = _plant_segments(rng, T, cfg)
        # per-instance salience, drawn independently for each stream
        amp = np.zeros((T, 2))
        lo, hi = 1 - cfg.amplitude_spread, 1 + cfg.amplitude_spread
        for s, e in segments:
            amp[s: e + 1] = rng.uniform(lo, hi, size=2)
        xv = rng.normal(0, cfg.noise, (T, cfg.dim)) + amp[:, :1] * shift_video
        xf = rng.normal(0, cfg.noise, (T, cfg.dim)) + amp[:, 1:] * shift_flow
        pairs.append((
            FeatureSequence(vid, "video", xv.astype(np.float32), provenance="synthetic fc6"),
            FeatureSequence(vid, "flow", xf.astype(np.float32), provenance="synthetic early fc7"),
        ))
        annotations.append(Annotation(vid, T, segments))
    return pairs, annotations
