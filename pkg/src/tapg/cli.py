"""``tapg`` command-line entry point.

Exit codes: 0 on success, 2 on configuration errors, 3 on data errors
(missing or malformed inputs, dimension mismatches, IO failures).
"""
from __future__ import annotations

import argparse
import csv
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import pipeline
from .config import RunConfig, expand_config
from .errors import ConfigError, DataError, ShapeError
from .features import (
    FeatureSequence,
    l2_normalize,
    load_annotations,
    pca_fit,
    pca_transform,
    save_pca,
    synth_dataset,
)
from .fusion import load_checkpoint, save_checkpoint
from .proposals import (
    EvalReport,
    average_recall_curve,
    compare_reports,
    read_proposals_csv,
    write_curve_csvs,
    write_proposals_csv,
)

EXIT_OK, EXIT_CONFIG, EXIT_DATA = 0, 2, 3


# -- config and manifest ---------------------------------------------------------

def load_config(path=None, preset=None, seed=None) -> RunConfig:
    d = {}
    if path is not None:
        try:
            d = json.loads(Path(path).read_text())
        except FileNotFoundError as e:
            raise ConfigError(f"{path}: config file not found") from e
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: invalid JSON ({e})") from e
        if not isinstance(d, dict):
            raise ConfigError(f"{path}: config must be a JSON object")
    if preset is not None:
        d["preset"] = preset
    if seed is not None:
        d["seed"] = seed
    return expand_config(d)


class Manifest:
    """Collects what a command did; written as JSON next to its outputs."""

    def __init__(self, command: str, argv, cfg: RunConfig | None = None):
        self.t0 = time.perf_counter()
        self.data = {"command": command, "argv": list(argv),
                     "config": cfg.to_dict() if cfg is not None else None,
                     "seed": cfg.seed if cfg is not None else None,
                     "inputs": {}, "artifacts": {}, "metrics": {}}

    def input(self, path):
        path = Path(path)
        if path.is_file():
            self.data["inputs"][str(path)] = pipeline.sha256_file(path)

    def artifact(self, path):
        self.data["artifacts"][str(path)] = pipeline.sha256_file(path)

    def write(self, path) -> Path:
        self.data["wall_clock_s"] = round(time.perf_counter() - self.t0, 3)
        path = Path(path)
        path.write_text(json.dumps(self.data, indent=1, sort_keys=True))
        return path


def _manifest_path(args, default: Path) -> Path:
    return Path(args.manifest) if getattr(args, "manifest", None) else default


def _beside(path: Path, suffix: str) -> Path:
    return path.with_name(path.name + suffix)


# -- commands --------------------------------------------------------------------

def cmd_synth(args) -> int:
    cfg = load_config(args.config, args.preset, args.seed)
    out = Path(args.out)
    pairs, annotations = synth_dataset(cfg.synth, cfg.seed)
    ids = [a.video_id for a in annotations]
    split = {"train": ids[: cfg.synth.num_train], "eval": ids[cfg.synth.num_train:]}
    man = Manifest("synth", sys.argv[1:], cfg)
    for p in pipeline.write_dataset(out, pairs, annotations, split):
        man.artifact(p)
    man.data["metrics"] = {"num_videos": len(pairs), "num_segments": sum(len(a.segments) for a in annotations)}
    man.write(_manifest_path(args, out / "manifest.json"))
    print(f"wrote {2 * len(pairs)} feature files to {out}")
    return EXIT_OK


def cmd_preprocess(args) -> int:
    cfg = load_config(args.config, args.preset, args.seed)
    k = args.pca_k if args.pca_k is not None else cfg.preprocessing.pca_k
    l2 = {"video": args.l2 in ("video", "both"), "flow": args.l2 in ("flow", "both")}
    if k is None and not any(l2.values()):
        raise ConfigError("nothing to do: pass --pca-k and/or --l2")
    src, out = Path(args.data), Path(args.out)
    pairs, annotations = pipeline.read_dataset(src)
    split_path = src / pipeline.SPLIT_FILE
    split = json.loads(split_path.read_text()) if split_path.exists() else None
    train_ids = set(split["train"]) if split else {a.video_id for a in annotations}
    streams = [[p[0] for p in pairs], [p[1] for p in pairs]]
    for i, name in enumerate(("video", "flow")):
        if l2[name]:
            streams[i] = [l2_normalize(f) for f in streams[i]]
    models = {}
    if k is not None:
        for i, name in enumerate(("video", "flow")):
            rows = np.concatenate([f.data for f in streams[i] if f.video_id in train_ids])
            try:
                models[name] = pca_fit(rows, k)
            except ValueError as e:
                raise ConfigError(f"pca-k {k}: {e}") from e
            streams[i] = [FeatureSequence(f.video_id, f.stream, pca_transform(models[name], f.data),
                                          f.block_size_frames, f"{f.provenance}, PCA-{k}".lstrip(", "))
                          for f in streams[i]]
    man = Manifest("preprocess", sys.argv[1:], cfg)
    man.input(src / pipeline.ANNOTATIONS_FILE)
    for p in pipeline.write_dataset(out, list(zip(*streams)), annotations, split):
        man.artifact(p)
    for name, m in models.items():
        path = out / f"pca_{name}.npz"
        save_pca(m, path)
        man.artifact(path)
        man.data["metrics"][f"{name}_explained_variance"] = [float(x) for x in m.explained_variance]
    man.data["metrics"].update(pca_k=k, l2=args.l2)
    man.write(_manifest_path(args, out / "manifest.json"))
    print(f"wrote preprocessed dataset to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = load_config(args.config, args.preset, args.seed)
    if args.epochs is not None:
        s = cfg.schedule
        s.pretrain_epochs = s.fusion_epochs = args.epochs
        s.finetune_epochs = min(s.finetune_epochs, args.epochs)
    pairs, annotations = pipeline.read_dataset(args.data, args.subset)
    if not pairs:
        raise DataError(f"{args.data}: subset {args.subset!r} is empty")
    man = Manifest("train", sys.argv[1:], cfg)
    man.input(Path(args.data) / pipeline.ANNOTATIONS_FILE)
    select = (None, None)
    if args.repeats > 1 and args.select_subset != args.subset:
        select = pipeline.read_dataset(args.data, args.select_subset)
    model, losses, scores, best = pipeline.train_repeated(cfg, pairs, annotations, args.repeats, *select)
    if args.repeats > 1:
        cfg.seed += pipeline.REPEAT_SEED_STRIDE * best
        man.data["selection"] = {"repeats": args.repeats, "subset": args.select_subset, "scores": scores,
                                 "best": best, "seed": cfg.seed}
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(model, out, meta=pipeline.checkpoint_meta(cfg))
    man.artifact(out)
    man.data["metrics"] = {
        "losses": losses,
        "final_losses": {stage: ({k: v[-1] for k, v in trace.items() if v} if isinstance(trace, dict)
                                 else (trace[-1] if trace else None))
                         for stage, trace in losses.items()},
    }
    man.write(_manifest_path(args, _beside(out, ".manifest.json")))
    print(f"saved {model.tag} checkpoint to {out}")
    return EXIT_OK


def _checkpoint_config(meta: dict, override: RunConfig | None) -> RunConfig:
    if override is not None:
        return override
    if "config" in meta:
        return expand_config(meta["config"])
    return RunConfig()


def cmd_infer(args) -> int:
    model, meta = load_checkpoint(args.model)
    cfg = _checkpoint_config(meta, load_config(args.config) if args.config else None)
    nms = None if args.no_nms else (args.nms_thresh if args.nms_thresh is not None else cfg.eval.nms_thresh)
    thr = args.threshold if args.threshold is not None else cfg.eval.score_thresh
    if not 0 <= thr < 1:
        raise ConfigError("threshold must lie in [0, 1)")
    pairs, _ = pipeline.read_dataset(args.data, args.subset)
    props = pipeline.infer(model, pairs, meta, thr, nms)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_proposals_csv(props, out)
    man = Manifest("infer", sys.argv[1:], cfg)
    man.input(args.model)
    man.artifact(out)
    man.data["metrics"] = {"num_proposals": sum(len(p) for p in props.values()), "threshold": thr,
                           "nms_thresh": nms}
    man.write(_manifest_path(args, _beside(out, ".manifest.json")))
    print(f"wrote {man.data['metrics']['num_proposals']} proposals to {out}")
    return EXIT_OK


def _eval_annotations(args) -> dict:
    if args.annotations:
        anns = load_annotations(args.annotations)
    else:
        _, anns = pipeline.read_dataset(args.data, args.subset)
    return pipeline.gt_dict(anns)


def cmd_eval(args) -> int:
    if (args.proposals is None) == (args.model is None):
        raise ConfigError("pass exactly one of --proposals or --model")
    if args.annotations is None and args.data is None:
        raise ConfigError("pass --data or --annotations")
    man = Manifest("eval", sys.argv[1:])
    if args.model is not None:
        model, meta = load_checkpoint(args.model)
        cfg = _checkpoint_config(meta, load_config(args.config) if args.config else None)
        if args.data is None:
            raise ConfigError("--model evaluation needs --data")
        pairs, anns = pipeline.read_dataset(args.data, args.subset)
        report = pipeline.evaluate_model(model, pairs, anns, cfg, prep=meta)
        man.input(args.model)
    else:
        cfg = load_config(args.config)
        gts = _eval_annotations(args)
        props = read_proposals_csv(args.proposals)
        e = cfg.eval
        echo = {"nms_thresh": e.nms_thresh, "score_thresh": e.score_thresh, "nms_first": e.nms_first}
        report = average_recall_curve(props, gts, e.an_grid, e.tiou_grid, e.summary_an, e.budget, echo)
        man.input(args.proposals)
    man.data["config"], man.data["seed"] = cfg.to_dict(), cfg.seed
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(report.to_json())
    tiou_csv, an_csv = out.with_suffix(".recall_vs_tiou.csv"), out.with_suffix(".ar_vs_an.csv")
    write_curve_csvs(report, tiou_csv, an_csv)
    for p in (out, tiou_csv, an_csv):
        man.artifact(p)
    man.data["metrics"] = {"ar_at_an": report.ar_at_an, "summary_an": report.config["summary_an"],
                           "report_sha256": report.digest()}
    man.write(_manifest_path(args, _beside(out, ".manifest.json")))
    print(f"AR@{report.config['summary_an']} = {report.ar_at_an:.4f}")
    return EXIT_OK


def cmd_compare(args) -> int:
    named = {}
    for spec in args.reports:
        name, _, path = spec.rpartition("=")
        path = Path(path)
        try:
            report = EvalReport.from_json(path.read_text())
        except FileNotFoundError as e:
            raise DataError(f"{path}: report not found") from e
        except (json.JSONDecodeError, KeyError) as e:
            raise DataError(f"{path}: not an evaluation report") from e
        named[name or path.stem] = report
    if len(named) < 2:
        raise ConfigError("compare needs at least two reports")
    rows = compare_reports(named)
    width = max(len(n) for n, _ in rows)
    an = next(iter(named.values())).config["summary_an"]
    print(f"{'model':<{width}}  AR@{an}")
    for name, ar in rows:
        print(f"{name:<{width}}  {ar:.4f}")
    if args.out:
        out = Path(args.out)
        with open(out, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["model", "ar_at_an"])
            for name, ar in rows:
                w.writerow([name, f"{ar:.10f}"])
        man = Manifest("compare", sys.argv[1:])
        for spec in args.reports:
            man.input(spec.rpartition("=")[2])
        man.artifact(out)
        man.data["metrics"] = {"table": rows}
        man.write(_manifest_path(args, _beside(out, ".manifest.json")))
    return EXIT_OK


# -- argument parsing ------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="tapg", description="Temporal action proposals with two-stream fusion.")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, out_help):
        p.add_argument("--config", help="JSON run config (may carry a 'preset' key)")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", required=True, help=out_help)
        p.add_argument("--manifest", help="where to write the run manifest")

    p = sub.add_parser("synth", help="write a synthetic two-stream dataset")
    common(p, "output directory")
    p.add_argument("--preset")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("preprocess", help="L2 and/or PCA-reduce a dataset (PCA fit on the train split)")
    common(p, "output directory")
    p.add_argument("--preset")
    p.add_argument("--data", required=True)
    p.add_argument("--pca-k", type=int)
    p.add_argument("--l2", choices=("none", "video", "flow", "both"), default="none",
                   help="L2-normalise these streams (before PCA)")
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("train", help="train a single-stream or two-stream model")
    common(p, "checkpoint path")
    p.add_argument("--preset", help="named preset, e.g. table4-late-avg")
    p.add_argument("--data", required=True)
    p.add_argument("--subset", default="train", choices=("train", "eval", "all"))
    p.add_argument("--epochs", type=int, help="override the stage-1 and stage-2 epoch budgets")
    p.add_argument("--repeats", type=int, default=1, help="train N seeds and keep the best")
    p.add_argument("--select-subset", default="train", choices=("train", "eval", "all"),
                   help="videos used to rank the repeats")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="write a proposals CSV")
    common(p, "proposals CSV path")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--subset", default="eval", choices=("train", "eval", "all"))
    p.add_argument("--threshold", type=float)
    p.add_argument("--nms-thresh", type=float)
    p.add_argument("--no-nms", action="store_true")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="evaluation report JSON plus two curve CSVs")
    common(p, "report JSON path")
    p.add_argument("--proposals", help="proposals CSV from 'tapg infer'")
    p.add_argument("--model", help="evaluate a checkpoint directly")
    p.add_argument("--data")
    p.add_argument("--annotations")
    p.add_argument("--subset", default="eval", choices=("train", "eval", "all"))
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("compare", help="rank several evaluation reports")
    p.add_argument("reports", nargs="+", help="report JSON paths, optionally as name=path")
    p.add_argument("--out", help="optional CSV of the table")
    p.add_argument("--manifest")
    p.set_defaults(func=cmd_compare)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"tapg: config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, ShapeError, OSError) as e:
        print(f"tapg: data error: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
