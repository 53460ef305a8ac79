import json

import numpy as np
import pytest

from tapg import cli, pipeline
from tapg.config import expand_config
from tapg.features import Annotation, save_annotations
from tapg.fusion import SingleStreamModel, load_checkpoint, save_checkpoint
from tapg.proposals import EvalReport, Proposal, write_proposals_csv
from tapg.sst import SstConfig, SstModel

SMALL = {"synth": {"num_videos": 5, "min_blocks": 20, "max_blocks": 30, "num_train": 3, "dim": 8,
                   "signal_dims": 4},
         "video": {"hidden_dim": 4}, "flow": {"hidden_dim": 4}, "fused": {"hidden_dim": 4},
         "schedule": {"pretrain_epochs": 1, "fusion_epochs": 1}, "seed": 11}


def write_cfg(tmp_path, **extra):
    d = {**SMALL, **extra}
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(d))
    return str(path)


@pytest.fixture
def dataset(tmp_path):
    cfg = write_cfg(tmp_path)
    assert cli.main(["synth", "--config", cfg, "--out", str(tmp_path / "data")]) == 0
    return tmp_path / "data", cfg


def manifest(path):
    return json.loads(path.read_text())


def test_synth_default_writes_sixty_pairs(tmp_path):
    out = tmp_path / "d"
    assert cli.main(["synth", "--out", str(out), "--seed", "42"]) == 0
    assert len(list(out.glob("*.fseq"))) == 120
    assert (out / "annotations.json").exists()
    split = json.loads((out / "split.json").read_text())
    assert len(split["train"]) == 40 and len(split["eval"]) == 20
    assert manifest(out / "manifest.json")["seed"] == 42


def test_synth_is_byte_identical(tmp_path):
    cfg = write_cfg(tmp_path)
    for name in ("a", "b"):
        assert cli.main(["synth", "--config", cfg, "--out", str(tmp_path / name)]) == 0
    for f in sorted((tmp_path / "a").iterdir()):
        if f.name != "manifest.json":
            assert f.read_bytes() == (tmp_path / "b" / f.name).read_bytes()


def test_synth_unwritable_target_leaves_nothing(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    assert cli.main(["synth", "--config", write_cfg(tmp_path), "--out", str(blocker / "sub" / "d")]) == 3
    assert sorted(p.name for p in tmp_path.iterdir()) == ["cfg.json", "file"]


def test_config_errors_exit_2(tmp_path, dataset):
    data, _ = dataset
    bad = tmp_path / "bad.json"
    bad.write_text("{nope")
    assert cli.main(["train", "--config", str(bad), "--data", str(data), "--out", str(tmp_path / "m")]) == 2
    assert cli.main(["train", "--preset", "table9", "--data", str(data), "--out", str(tmp_path / "m")]) == 2
    unknown = tmp_path / "u.json"
    unknown.write_text(json.dumps({"variant": "early"}))
    assert cli.main(["train", "--config", str(unknown), "--data", str(data), "--out", str(tmp_path / "m")]) == 2


def test_missing_stream_file_names_the_video(tmp_path, dataset, capsys):
    data, cfg = dataset
    (data / "vid1.flow.fseq").unlink()
    assert cli.main(["train", "--config", cfg, "--data", str(data), "--out", str(tmp_path / "m")]) == 3
    assert "vid1" in capsys.readouterr().err


def test_train_single_stream_matches_library(tmp_path, dataset):
    data, cfg = dataset
    out = tmp_path / "m.tsm"
    assert cli.main(["train", "--config", cfg, "--preset", "video-stream", "--data", str(data),
                     "--out", str(out)]) == 0
    model, meta = load_checkpoint(out)
    assert isinstance(model, SingleStreamModel) and model.stream == "video"
    rc = expand_config({**SMALL, "preset": "video-stream"})
    pairs, anns = pipeline.read_dataset(data, "train")
    ref, _ = pipeline.train_run(rc, pairs, anns)
    p, q = model.params(), ref.params()
    assert all(np.array_equal(p[k], q[k]) for k in p)


def test_train_repeats_keeps_best_seed(tmp_path, dataset):
    data, cfg = dataset
    out = tmp_path / "m.tsm"
    assert cli.main(["train", "--config", cfg, "--preset", "video-stream", "--data", str(data),
                     "--out", str(out), "--repeats", "3", "--select-subset", "eval"]) == 0
    sel = manifest(tmp_path / "m.tsm.manifest.json")["selection"]
    assert sel["best"] == int(np.argmax(sel["scores"])) and len(sel["scores"]) == 3
    model, meta = load_checkpoint(out)
    assert meta["config"]["seed"] == sel["seed"] == SMALL.get("seed", 0) + 1000 * sel["best"]
    # the winning copy is a plain run at its own seed
    rc = expand_config({**SMALL, "preset": "video-stream", "seed": sel["seed"]})
    ref, _ = pipeline.train_run(rc, *pipeline.read_dataset(data, "train"))
    p, q = model.params(), ref.params()
    assert all(np.array_equal(p[k], q[k]) for k in p)
    ev_pairs, ev_anns = pipeline.read_dataset(data, "eval")
    assert pipeline.evaluate_model(ref, ev_pairs, ev_anns, rc).ar_at_an == pytest.approx(sel["scores"][sel["best"]])


def test_single_repeat_is_plain_run(tmp_path, dataset):
    data, _ = dataset
    rc = expand_config({**SMALL, "preset": "video-stream"})
    pairs, anns = pipeline.read_dataset(data, "train")
    model, _, scores, best = pipeline.train_repeated(rc, pairs, anns, 1)
    ref, _ = pipeline.train_run(rc, pairs, anns)
    assert best == 0 and scores == [None]
    assert all(np.array_equal(a, b) for a, b in zip(model.params().values(), ref.params().values()))
    with pytest.raises(pipeline.ConfigError):
        pipeline.train_repeated(rc, pairs, anns, 0)


def test_train_zero_epochs_is_initialisation(tmp_path, dataset):
    data, cfg = dataset
    out = tmp_path / "m.tsm"
    assert cli.main(["train", "--config", cfg, "--preset", "table1-flow-best", "--data", str(data),
                     "--out", str(out), "--epochs", "0"]) == 0
    model, _ = load_checkpoint(out)
    rc = expand_config({**SMALL, "preset": "table1-flow-best"})
    init = SstModel.init(SstConfig(8, **{k: getattr(rc.flow, k) for k in
                                         ("num_gru_layers", "hidden_dim", "dropout_rate", "learning_rate")},
                                   epochs=0, seed=rc.seed + 2), np.random.default_rng(rc.seed + 2))
    assert all(np.array_equal(a, b) for a, b in zip(model.model.params().values(), init.params().values()))
    m = manifest(tmp_path / "m.tsm.manifest.json")
    assert m["metrics"]["final_losses"]["stage1"] == {}


def test_late_avg_skips_later_stages(tmp_path, dataset):
    data, cfg = dataset
    out = tmp_path / "m.tsm"
    assert cli.main(["train", "--config", cfg, "--preset", "table4-late-avg", "--data", str(data),
                     "--out", str(out)]) == 0
    stages = manifest(tmp_path / "m.tsm.manifest.json")["metrics"]["final_losses"]
    assert set(stages) == {"stage1"} and set(stages["stage1"]) == {"video", "flow"}


def test_manifest_config_reproduces_checkpoint(tmp_path, dataset):
    data, cfg = dataset
    a = tmp_path / "a.tsm"
    assert cli.main(["train", "--config", cfg, "--preset", "table5-late-fc", "--data", str(data),
                     "--out", str(a)]) == 0
    echo = tmp_path / "echo.json"
    m = manifest(tmp_path / "a.tsm.manifest.json")
    echo.write_text(json.dumps(m["config"]))
    b = tmp_path / "b.tsm"
    assert cli.main(["train", "--config", str(echo), "--data", str(data), "--out", str(b)]) == 0
    assert a.read_bytes() == b.read_bytes()
    assert manifest(tmp_path / "b.tsm.manifest.json")["artifacts"][str(b)] == m["artifacts"][str(a)]


def zero_checkpoint(tmp_path, dim=8, K=32):
    m = SstModel.init(SstConfig(dim, 1, 3, K))
    for a in m.params().values():
        a[:] = 0
    path = tmp_path / "zero.tsm"
    save_checkpoint(SingleStreamModel("video", m), path, meta={})
    return path


def test_infer_zero_weights(tmp_path, dataset):
    data, _ = dataset
    ck = zero_checkpoint(tmp_path)
    out = tmp_path / "p.csv"
    assert cli.main(["infer", "--model", str(ck), "--data", str(data), "--out", str(out),
                     "--threshold", "0.6"]) == 0
    assert out.read_text().splitlines() == ["video_id,start_block,end_block,start_frame,end_frame,score"]
    assert cli.main(["infer", "--model", str(ck), "--data", str(data), "--out", str(out),
                     "--threshold", "0", "--no-nms", "--subset", "all"]) == 0
    rows = out.read_text().splitlines()[1:]
    _, anns = pipeline.read_dataset(data)
    assert len(rows) == sum(a.num_blocks * 32 for a in anns)


def test_infer_dim_mismatch_is_data_error(tmp_path, dataset):
    data, _ = dataset
    ck = zero_checkpoint(tmp_path, dim=5)
    assert cli.main(["infer", "--model", str(ck), "--data", str(data), "--out", str(tmp_path / "p.csv")]) == 3


def test_eval_equals_library_and_emits_curves(tmp_path, dataset):
    data, cfg = dataset
    ck = tmp_path / "m.tsm"
    assert cli.main(["train", "--config", cfg, "--preset", "table4-late-avg", "--data", str(data),
                     "--out", str(ck)]) == 0
    csv_path = tmp_path / "p.csv"
    assert cli.main(["infer", "--model", str(ck), "--data", str(data), "--out", str(csv_path)]) == 0
    rep = tmp_path / "r.json"
    assert cli.main(["eval", "--proposals", str(csv_path), "--data", str(data), "--out", str(rep)]) == 0
    rep2 = tmp_path / "r2.json"
    assert cli.main(["eval", "--model", str(ck), "--data", str(data), "--out", str(rep2)]) == 0
    model, meta = load_checkpoint(ck)
    pairs, anns = pipeline.read_dataset(data, "eval")
    lib = pipeline.evaluate_model(model, pairs, anns, expand_config(meta["config"]), prep=meta)
    a = EvalReport.from_json(rep.read_text())
    b = EvalReport.from_json(rep2.read_text())
    assert a.recall_table == lib.recall_table and a.ar_at_an == lib.ar_at_an
    assert b.digest() == lib.digest()
    assert len((tmp_path / "r.recall_vs_tiou.csv").read_text().splitlines()) == 12
    assert len((tmp_path / "r.ar_vs_an.csv").read_text().splitlines()) == 11


def test_eval_ground_truth_and_empty(tmp_path):
    anns = [Annotation("a", 20, [(2, 5), (9, 15)]), Annotation("b", 10, [(0, 9)])]
    save_annotations(anns, tmp_path / "ann.json")
    gt = {a.video_id: [Proposal(a.video_id, s, e, 1.0) for s, e in a.segments] for a in anns}
    write_proposals_csv(gt, tmp_path / "gt.csv")
    write_proposals_csv({}, tmp_path / "empty.csv")
    for name, expected in (("gt", 1.0), ("empty", 0.0)):
        out = tmp_path / f"{name}.json"
        assert cli.main(["eval", "--proposals", str(tmp_path / f"{name}.csv"),
                         "--annotations", str(tmp_path / "ann.json"), "--out", str(out)]) == 0
        r = EvalReport.from_json(out.read_text())
        assert r.ar_at_an == expected
        # AN = 1 cannot cover both segments of video a
        assert all(x == expected for row in r.recall_table[1:] for x in row)
    write_proposals_csv({"zzz": [Proposal("zzz", 0, 1, 0.5)]}, tmp_path / "bad.csv")
    assert cli.main(["eval", "--proposals", str(tmp_path / "bad.csv"), "--annotations",
                     str(tmp_path / "ann.json"), "--out", str(tmp_path / "x.json")]) == 3


def test_compare(tmp_path, capsys):
    anns = [Annotation("a", 20, [(2, 5)])]
    save_annotations(anns, tmp_path / "ann.json")
    write_proposals_csv({"a": [Proposal("a", 2, 5, 1.0)]}, tmp_path / "p.csv")
    base = ["eval", "--proposals", str(tmp_path / "p.csv"), "--annotations", str(tmp_path / "ann.json")]
    assert cli.main(base + ["--out", str(tmp_path / "r1.json")]) == 0
    assert cli.main(base + ["--out", str(tmp_path / "r2.json")]) == 0
    capsys.readouterr()
    assert cli.main(["compare", f"x={tmp_path / 'r1.json'}", f"y={tmp_path / 'r2.json'}",
                     "--out", str(tmp_path / "t.csv")]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines[1].split()[1] == lines[2].split()[1] == "1.0000"
    coarse = tmp_path / "coarse.json"
    coarse.write_text(json.dumps({"eval": {"tiou_grid": [0.5, 1.0]}}))
    assert cli.main(base + ["--config", str(coarse), "--out", str(tmp_path / "r3.json")]) == 0
    assert cli.main(["compare", str(tmp_path / "r1.json"), str(tmp_path / "r3.json")]) == 3
    assert cli.main(["compare", str(tmp_path / "r1.json")]) == 2


def test_preprocess_pca(tmp_path, dataset):
    data, cfg = dataset
    out = tmp_path / "pca"
    assert cli.main(["preprocess", "--data", str(data), "--out", str(out), "--pca-k", "3", "--l2", "both"]) == 0
    pairs, _ = pipeline.read_dataset(out)
    assert pairs[0][0].dim == 3 and pairs[0][1].dim == 3
    assert "PCA-3" in pairs[0][0].provenance
    assert (out / "pca_video.npz").exists() and (out / "split.json").exists()
    assert cli.main(["preprocess", "--data", str(data), "--out", str(out), "--pca-k", "99"]) == 2
    assert cli.main(["preprocess", "--data", str(data), "--out", str(out)]) == 2
