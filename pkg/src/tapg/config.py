"""Run configuration and the named hyper-parameter presets.

Presets hold the tuned settings of each stream and fusion variant at
``scale="paper"``. ``scale="desk"`` divides the GRU widths by 8 so a run
fits on a laptop CPU (256 -> 32, 128 -> 16).
"""
from __future__ import annotations

import copy
from dataclasses import asdict, dataclass, field, fields

from .errors import ConfigError
from .features import SynthConfig
from .fusion import SINGLE_VARIANTS, VARIANTS, FusionVariant, StreamConfigs, TrainingSchedule
from .proposals import EvalConfig
from .sst import SstConfig

ALL_VARIANTS = SINGLE_VARIANTS + VARIANTS
DESK_WIDTH_DIVISOR = 8


def _sst(layers, hidden, lr, dropout=0.3):
    return {"num_gru_layers": layers, "hidden_dim": hidden, "learning_rate": lr, "dropout_rate": dropout}


# Video-stream values shipped with the reference SST implementation double as
# the flow stream's initial configuration.
_VIDEO_STREAM = _sst(2, 128, 1e-3)
_FLOW_BEST = _sst(1, 256, 1e-2)

PRESETS = {
    "video-stream": {
        "variant": "single-video",
        "video": _VIDEO_STREAM,
        "preprocessing": {"video_l2": False},
        "features": {"video": "fc6"},
    },
    "table1-flow-initial": {
        "variant": "single-flow",
        "flow": _sst(2, 128, 1e-3),
        "preprocessing": {"flow_l2": False},
        "features": {"flow": "late, fc7"},
    },
    "table1-flow-best": {
        "variant": "single-flow",
        "flow": _FLOW_BEST,
        "preprocessing": {"flow_l2": True},
        "features": {"flow": "early, L2, fc7"},
    },
    "table2-mid-concat": {
        "variant": "mid-concat",
        "fused": _sst(2, 256, 1e-2),
        "schedule": {"fusion_lr": 1e-2, "finetune_epochs": 0},
        "preprocessing": {"video_l2": True, "flow_l2": True},
        "features": {"video": "L2, fc6", "flow": "L2, early, fc7"},
    },
    "table3-mid-fc": {
        "variant": "mid-fc",
        "fused": _sst(2, 256, 1e-2),
        "fused_dim": 4096,
        "schedule": {"fusion_lr": 1e-2, "finetune_epochs": 0},
        "preprocessing": {"video_l2": False, "flow_l2": False, "post_fusion_l2": True},
        "features": {"fused": "L2, no finetuning, fc7"},
    },
    "table4-late-avg": {
        "variant": "late-avg",
        "video": _VIDEO_STREAM,
        "flow": _FLOW_BEST,
        "alpha": 0.5,
        "schedule": {"finetune_epochs": 0},
        "preprocessing": {"video_l2": False, "flow_l2": True},
        "features": {"video": "fc6", "flow": "early, L2, fc7"},
    },
    "table5-late-fc": {
        "variant": "late-fc",
        "video": _VIDEO_STREAM,
        "flow": _FLOW_BEST,
        "schedule": {"fusion_lr": 1e-3, "finetune_epochs": 0, "freeze_pretrained": True},
        "preprocessing": {"video_l2": False, "flow_l2": True},
        "features": {"video": "fc6", "flow": "early, L2, fc7"},
    },
}


@dataclass
class Preprocessing:
    video_l2: bool = False
    flow_l2: bool = False
    post_fusion_l2: bool = False
    pca_k: int | None = None


@dataclass
class RunConfig:
    variant: str = "late-avg"
    video: SstConfig = field(default_factory=lambda: SstConfig(0, **_VIDEO_STREAM))
    flow: SstConfig = field(default_factory=lambda: SstConfig(0, **_FLOW_BEST))
    fused: SstConfig = field(default_factory=lambda: SstConfig(0, **_sst(2, 256, 1e-2)))
    schedule: TrainingSchedule = field(default_factory=TrainingSchedule)
    preprocessing: Preprocessing = field(default_factory=Preprocessing)
    alpha: float = 0.5
    fused_dim: int | None = None
    eval: EvalConfig = field(default_factory=EvalConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)
    seed: int = 0
    features: dict = field(default_factory=dict)
    preset: str | None = None
    scale: str = "desk"

    def validate(self) -> "RunConfig":
        if self.variant not in ALL_VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; choose from {ALL_VARIANTS}")
        if self.variant in VARIANTS:
            FusionVariant(self.variant, self.alpha, self.fused_dim)
        self.synth.validate()
        if self.preprocessing.pca_k is not None and self.preprocessing.pca_k < 1:
            raise ConfigError("pca_k must be positive")
        if self.eval.budget not in ("per-video", "global"):
            raise ConfigError(f"unknown budget mode {self.eval.budget!r}")
        if not self.eval.an_grid or min(self.eval.an_grid) <= 0 or self.eval.summary_an <= 0:
            raise ConfigError("AN values must be positive")
        return self

    @property
    def fusion_variant(self) -> FusionVariant:
        return FusionVariant(self.variant, self.alpha, self.fused_dim)

    @property
    def stream_configs(self) -> StreamConfigs:
        return StreamConfigs(self.video, self.flow, self.fused)

    def to_dict(self) -> dict:
        return asdict(self)


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def preset_dict(name: str, scale: str = "desk") -> dict:
    if name.startswith("preset:"):
        name = name[len("preset:"):]
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; known: {sorted(PRESETS)}")
    if scale not in ("paper", "desk"):
        raise ConfigError("scale must be 'paper' or 'desk'")
    d = copy.deepcopy(PRESETS[name])
    # streams left unspecified by a table keep the reference defaults
    d.setdefault("video", dict(_VIDEO_STREAM))
    d.setdefault("flow", dict(_FLOW_BEST))
    d.setdefault("fused", _sst(2, 256, 1e-2))
    if scale == "desk":
        for s in ("video", "flow", "fused"):
            d[s]["hidden_dim"] = max(1, d[s]["hidden_dim"] // DESK_WIDTH_DIVISOR)
        d["fused_dim"] = None  # follow the data's per-stream dim
    d["preset"] = name
    d["scale"] = scale
    return d


def _build(cls, d: dict, what: str):
    names = {f.name for f in fields(cls)}
    unknown = set(d) - names
    if unknown:
        raise ConfigError(f"unknown {what} keys: {sorted(unknown)}")
    try:
        return cls(**d)
    except TypeError as e:
        raise ConfigError(f"bad {what}: {e}") from e


def expand_config(d: dict | None = None) -> RunConfig:
    """Build a :class:`RunConfig` from a JSON-style dict.

    A ``preset`` key expands to the preset's values first; every other key
    then overrides them.
    """
    d = dict(d or {})
    if d.get("preset"):
        d = _merge(preset_dict(d["preset"], d.get("scale", "desk")), {k: v for k, v in d.items() if k != "preset"})
    kw = {}
    for key in ("video", "flow", "fused"):
        if key in d:
            kw[key] = _build(SstConfig, {"input_dim": 0, **d.pop(key)}, f"{key} SST config")
    nested = {"schedule": TrainingSchedule, "preprocessing": Preprocessing, "eval": EvalConfig, "synth": SynthConfig}
    for key, cls in nested.items():
        if key in d:
            kw[key] = _build(cls, d.pop(key), key)
    kw.update(d)
    cfg = _build(RunConfig, kw, "run config")
    return cfg.validate()
