"""Proposal decoding, temporal NMS and recall-based evaluation.

Segments are inclusive block spans ``(start, end)``; their length is
``end - start + 1``.
"""
from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import DataError
from .features import BLOCK_SIZE_FRAMES
from .sst import ConfidenceMatrix, anchor_bounds

CSV_HEADER = ["video_id", "start_block", "end_block", "start_frame", "end_frame", "score"]


@dataclass(frozen=True)
class Proposal:
    video_id: str
    start_block: int
    end_block: int
    score: float

    @property
    def start_frame(self) -> int:
        return self.start_block * BLOCK_SIZE_FRAMES

    @property
    def end_frame(self) -> int:
        """Exclusive end frame."""
        return (self.end_block + 1) * BLOCK_SIZE_FRAMES

    @property
    def segment(self):
        return self.start_block, self.end_block


def tiou(a, b) -> float:
    inter = min(a[1], b[1]) - max(a[0], b[0]) + 1
    if inter <= 0:
        return 0.0
    union = (a[1] - a[0] + 1) + (b[1] - b[0] + 1) - inter
    return inter / union


def tiou_matrix(starts_a, ends_a, starts_b, ends_b):
    """Pairwise tIoU, shape ``(len(a), len(b))``."""
    sa, ea = np.asarray(starts_a)[:, None], np.asarray(ends_a)[:, None]
    sb, eb = np.asarray(starts_b)[None, :], np.asarray(ends_b)[None, :]
    inter = np.maximum(np.minimum(ea, eb) - np.maximum(sa, sb) + 1, 0)
    union = (ea - sa + 1) + (eb - sb + 1) - inter
    return inter / union


# -- decoding --------------------------------------------------------------------

def _decode_arrays(values, threshold: float):
    T, K = values.shape
    starts, ends = anchor_bounds(T, K)
    keep = values >= threshold
    s, e, sc = starts[keep], ends[keep], values[keep]
    order = np.lexsort((e - s, s, -sc.astype(np.float64)))
    return s[order], e[order], sc[order]


def decode(c: ConfidenceMatrix, threshold: float = 0.0) -> list[Proposal]:
    """One proposal per anchor scoring at least ``threshold``.

    Sorted by descending score; ties go to the earlier start, then the
    shorter segment.
    """
    if not 0 <= threshold < 1:
        raise ValueError("threshold must lie in [0, 1)")
    s, e, sc = _decode_arrays(c.values, threshold)
    return [Proposal(c.video_id, int(a), int(b), float(x)) for a, b, x in zip(s, e, sc)]


def _nms_indices(starts, ends, tiou_thresh: float, max_keep: int | None = None):
    n = len(starts)
    suppressed = np.zeros(n, dtype=bool)
    keep = []
    for i in range(n):
        if suppressed[i]:
            continue
        keep.append(i)
        if max_keep is not None and len(keep) >= max_keep:
            break
        rest = slice(i + 1, n)
        inter = np.minimum(ends[rest], ends[i]) - np.maximum(starts[rest], starts[i]) + 1
        inter = np.maximum(inter, 0)
        union = (ends[rest] - starts[rest] + 1) + (ends[i] - starts[i] + 1) - inter
        suppressed[rest] |= inter / union >= tiou_thresh
    return np.asarray(keep, dtype=np.int64)


def nms(props: list[Proposal], tiou_thresh: float, max_keep: int | None = None) -> list[Proposal]:
    """Greedy temporal NMS over proposals already sorted by descending score."""
    if not props:
        return []
    s = np.array([p.start_block for p in props])
    e = np.array([p.end_block for p in props])
    return [props[i] for i in _nms_indices(s, e, tiou_thresh, max_keep)]


def generate_proposals(c: ConfidenceMatrix, score_thresh: float = 0.0, nms_thresh: float | None = 0.8,
                       max_keep: int | None = None) -> list[Proposal]:
    """decode followed by NMS (``nms_thresh=None`` disables suppression)."""
    s, e, sc = _decode_arrays(c.values, score_thresh)
    if nms_thresh is not None:
        idx = _nms_indices(s, e, nms_thresh, max_keep)
        s, e, sc = s[idx], e[idx], sc[idx]
    elif max_keep is not None:
        s, e, sc = s[:max_keep], e[:max_keep], sc[:max_keep]
    return [Proposal(c.video_id, int(a), int(b), float(x)) for a, b, x in zip(s, e, sc)]


# -- recall ----------------------------------------------------------------------

def budget_count(avg_num: float) -> int:
    """Round half up: the per-video proposal budget for an average of ``avg_num``."""
    return int(math.floor(avg_num + 0.5))


def _gt_segments(gts) -> dict:
    out = {}
    for vid, g in gts.items():
        segs = g.segments if hasattr(g, "segments") else g
        out[vid] = [tuple(s) for s in segs]
    return out


def _check_videos(props, gts):
    unknown = sorted(set(props) - set(gts))
    if unknown:
        raise DataError(f"proposals reference unknown video ids: {unknown[:5]}")


def _kept_per_video(props, gts, avg_num: float, budget: str):
    """Kept proposals for each video under an average budget of ``avg_num``."""
    if budget == "per-video":
        n = budget_count(avg_num)
        return {vid: list(props.get(vid, []))[:n] for vid in gts}
    if budget == "global":
        total = budget_count(avg_num * len(gts))
        pool = []
        for vid in sorted(props):
            for rank, p in enumerate(props[vid]):
                pool.append((-p.score, vid, rank, p))
        pool.sort(key=lambda t: t[:3])
        kept = {vid: [] for vid in gts}
        for _, vid, _, p in pool[:total]:
            kept[vid].append(p)
        return kept
    raise ValueError(f"unknown budget mode {budget!r}")


def _best_tiou_per_gt(kept, gts):
    """Best tIoU achieved by the kept proposals for every ground-truth segment."""
    best = []
    for vid in sorted(gts):
        segs = gts[vid]
        if not segs:
            continue
        gs = np.array([s for s, _ in segs])
        ge = np.array([e for _, e in segs])
        ps = kept.get(vid, [])
        if not ps:
            best.append(np.zeros(len(segs)))
            continue
        m = tiou_matrix(gs, ge, [p.start_block for p in ps], [p.end_block for p in ps])
        best.append(m.max(axis=1))
    return np.concatenate(best) if best else np.zeros(0)


def recall_at(props: dict, gts: dict, tiou_thresh: float, avg_num: float, budget: str = "per-video") -> float:
    """Fraction of ground-truth segments matched at ``tiou_thresh`` by the kept proposals."""
    if avg_num <= 0:
        raise ValueError("avg_num must be positive")
    gts = _gt_segments(gts)
    _check_videos(props, gts)
    best = _best_tiou_per_gt(_kept_per_video(props, gts, avg_num, budget), gts)
    if best.size == 0:
        raise DataError("no ground-truth segments")
    return float(np.mean(best >= tiou_thresh))


def tiou_grid(lo: float = 0.5, hi: float = 1.0, step: float = 0.05):
    n = int(round((hi - lo) / step))
    return [round(lo + i * step, 10) for i in range(n + 1)]


DEFAULT_AN_GRID = [1, 2, 5, 10, 20, 50, 100, 200, 500, 1000]


@dataclass
class EvalConfig:
    tiou_grid: list = field(default_factory=tiou_grid)
    an_grid: list = field(default_factory=lambda: list(DEFAULT_AN_GRID))
    summary_an: float = 100
    nms_thresh: float | None = 0.8
    score_thresh: float = 0.0
    budget: str = "per-video"
    nms_first: bool = True


@dataclass
class EvalReport:
    config: dict
    recall_table: list  # recall_table[a][t]: AN an_grid[a], tIoU tiou_grid[t]
    curve: list  # [(AN, AR)]
    ar_at_an: float

    def to_dict(self) -> dict:
        return {
            "config": self.config,
            "recall_table": self.recall_table,
            "curve": [list(p) for p in self.curve],
            "ar_at_an": self.ar_at_an,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        d = json.loads(text)
        return cls(d["config"], d["recall_table"], [tuple(p) for p in d["curve"]], d["ar_at_an"])

    def digest(self) -> str:
        return hashlib.sha256(self.to_json().encode("utf-8")).hexdigest()

    def recall_vs_tiou(self, an: float | None = None):
        """``[(tIoU, recall)]`` at the given AN (default: the summary AN if it is on the grid)."""
        an = self.config["summary_an"] if an is None else an
        a = [float(x) for x in self.config["an_grid"]].index(float(an))
        return list(zip(self.config["tiou_grid"], self.recall_table[a]))


def average_recall_curve(props: dict, gts: dict, an_grid=None, tiou_range=None,
                         summary_an: float = 100, budget: str = "per-video",
                         config_echo: dict | None = None) -> EvalReport:
    """AR over ``tiou_range`` (default 0.5:0.05:1.0) for every AN in ``an_grid``."""
    gts = _gt_segments(gts)
    if not any(gts.values()):
        raise DataError("no ground-truth segments")
    _check_videos(props, gts)
    an_grid = list(DEFAULT_AN_GRID if an_grid is None else an_grid)
    tgrid = np.asarray(tiou_grid() if tiou_range is None else tiou_range, dtype=np.float64)

    def recalls(an):
        best = _best_tiou_per_gt(_kept_per_video(props, gts, an, budget), gts)
        return [float(np.mean(best >= t)) for t in tgrid]

    table = [recalls(an) for an in an_grid]
    curve = [(an, float(np.mean(row))) for an, row in zip(an_grid, table)]
    ar = float(np.mean(recalls(summary_an)))
    cfg = dict(config_echo or {})
    cfg.update(tiou_grid=[float(t) for t in tgrid], an_grid=an_grid, summary_an=summary_an, budget=budget)
    return EvalReport(cfg, table, curve, ar)


def evaluate_confidences(confs: dict, gts: dict, cfg: EvalConfig | None = None) -> EvalReport:
    """Decode, suppress and score a dict of confidence matrices in one go."""
    cfg = cfg or EvalConfig()
    echo = {"nms_thresh": cfg.nms_thresh, "score_thresh": cfg.score_thresh, "nms_first": cfg.nms_first}
    if cfg.nms_first or cfg.nms_thresh is None:
        props = {vid: generate_proposals(c, cfg.score_thresh, cfg.nms_thresh) for vid, c in confs.items()}
        return average_recall_curve(props, gts, cfg.an_grid, cfg.tiou_grid, cfg.summary_an, cfg.budget, echo)
    if cfg.budget != "per-video":
        raise ValueError("budget-before-NMS is only defined for the per-video budget")
    # budget cut first, NMS second: every AN needs its own suppression pass
    gts_ = _gt_segments(gts)
    _check_videos(confs, gts_)
    raw = {vid: decode(c, cfg.score_thresh) for vid, c in confs.items()}

    def report_for(an):
        n = budget_count(an)
        props = {vid: nms(p[:n], cfg.nms_thresh) for vid, p in raw.items()}
        return average_recall_curve(props, gts, [an], cfg.tiou_grid, an, "per-video", echo)

    rows = [report_for(an) for an in cfg.an_grid]
    summary = report_for(cfg.summary_an)
    out = summary.config.copy()
    out.update(an_grid=list(cfg.an_grid), summary_an=cfg.summary_an)
    return EvalReport(out, [r.recall_table[0] for r in rows],
                      [(an, r.curve[0][1]) for an, r in zip(cfg.an_grid, rows)], summary.ar_at_an)


# -- files -----------------------------------------------------------------------

def write_proposals_csv(props: dict, path):
    """Videos in lexicographic order, proposals in rank order."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for vid in sorted(props):
            for p in props[vid]:
                w.writerow([p.video_id, p.start_block, p.end_block, p.start_frame, p.end_frame,
                            f"{p.score:.8f}"])


def read_proposals_csv(path) -> dict:
    out: dict = {}
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        header = next(r, None)
        if header != CSV_HEADER:
            raise DataError(f"{path}: unexpected CSV header {header}")
        for row in r:
            try:
                p = Proposal(row[0], int(row[1]), int(row[2]), float(row[5]))
            except (IndexError, ValueError) as e:
                raise DataError(f"{path}: bad row {row}") from e
            out.setdefault(p.video_id, []).append(p)
    return out


def write_curve_csvs(report: EvalReport, tiou_path, an_path, an: float | None = None):
    """Plot-ready data: recall vs tIoU at one AN, and AR vs AN."""
    an = report.config["summary_an"] if an is None else an
    with open(tiou_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["tiou", "recall"])
        for t, rec in report.recall_vs_tiou(an):
            w.writerow([f"{t:.4f}", f"{rec:.10f}"])
    with open(an_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["avg_num_proposals", "average_recall"])
        for a, ar in report.curve:
            w.writerow([a, f"{ar:.10f}"])


def compare_reports(named_reports: dict) -> list:
    """``[(name, ar_at_an)]`` sorted by descending score.

    Refuses reports whose evaluation settings differ.
    """
    if len(named_reports) < 2:
        raise ValueError("need at least two reports to compare")
    keys = ("tiou_grid", "an_grid", "summary_an", "budget", "nms_thresh", "score_thresh", "nms_first")
    ref = None
    for name, rep in named_reports.items():
        sig = {k: rep.config.get(k) for k in keys}
        if ref is None:
            ref = sig
        elif sig != ref:
            raise DataError(f"report {name!r} was produced with different evaluation settings")
    rows = [(name, rep.ar_at_an) for name, rep in named_reports.items()]
    return sorted(rows, key=lambda r: (-r[1], r[0]))


def eval_config_dict(cfg: EvalConfig) -> dict:
    return asdict(cfg)
