import hashlib
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gradcheck import check_params
from tapg import fusion as fu
from tapg import sst
from tapg.errors import BadMagic, ConfigError, DataError, ShapeError
from tapg.features import Annotation, FeatureSequence
from tapg.sst import SstConfig


def small_configs(H=4, K=3, layers=1, dropout=0.0):
    return fu.StreamConfigs(
        video=SstConfig(0, layers, H, K, dropout_rate=dropout, learning_rate=1e-2),
        flow=SstConfig(0, layers, H + 1, K, dropout_rate=dropout, learning_rate=1e-2),
        fused=SstConfig(0, layers, H, K, dropout_rate=dropout, learning_rate=1e-2),
    )


def make(tag, seed=0, dims=(3, 2), alpha=0.5, fused_dim=4, l2=False, dropout=0.0, layers=1):
    v = fu.FusionVariant(tag, alpha, fused_dim if tag == "mid-fc" else None)
    m = fu.init_two_stream(v, dims, small_configs(dropout=dropout, layers=layers), seed, post_fusion_l2=l2)
    m = m.astype(np.float64)
    rng = np.random.default_rng(seed + 77)
    for a in m.params().values():
        a += rng.normal(0, 0.3, a.shape)
    return m


def feats(rng, T=5, dims=(3, 2)):
    return rng.normal(size=(T, dims[0])), rng.normal(size=(T, dims[1]))


# -- fusion operators ----------------------------------------------------------------

def test_concat_example():
    assert fu.fuse_concat(np.array([1.0, 2.0]), np.array([3.0])).tolist() == [1.0, 2.0, 3.0]
    f = FeatureSequence("v", "video", np.ones((2, 2)))
    out = fu.fuse_concat(f, np.zeros((2, 1)))
    assert out.data.tolist() == [[1, 1, 0], [1, 1, 0]] and out.video_id == "v"
    with pytest.raises(ShapeError):
        fu.fuse_concat(f, np.zeros((3, 1)))


def test_midfc_example():
    W = np.array([[1.0, 0.0, -1.0], [0.0, 2.0, 0.0]])
    b = np.array([0.0, -5.0])
    out = fu.midfc_fuse(W, b, np.array([2.0, 1.0]), np.array([1.0]))
    # [2 - 1, 2 - 5] -> relu -> [1, 0]
    assert out.tolist() == [1.0, 0.0]


def test_late_avg_examples():
    cv = np.array([[0.2, 0.8]])
    cf = np.array([[0.6, 0.4]])
    np.testing.assert_allclose(fu.late_avg(cv, cf, 0.5), [[0.4, 0.6]])
    np.testing.assert_allclose(fu.late_avg(cv, cf, 1 / 3), [[2 / 3 * 0.2 + 0.6 / 3, 2 / 3 * 0.8 + 0.4 / 3]])
    np.testing.assert_allclose(fu.late_avg(cv, cf, 2 / 3), [[0.2 / 3 + 0.4, 0.8 / 3 + 0.4 * 2 / 3]])
    with pytest.raises(ValueError):
        fu.late_avg(cv, cf, 1.5)
    with pytest.raises(ShapeError):
        fu.late_avg(cv, np.zeros((2, 2)), 0.5)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000), st.floats(0, 1), st.floats(0, 1))
def test_late_avg_is_affine_in_alpha(seed, a1, a2):
    rng = np.random.default_rng(seed)
    cv, cf = rng.random((3, 4)), rng.random((3, 4))
    lam = 0.3
    mix = fu.late_avg(cv, cf, lam * a1 + (1 - lam) * a2)
    np.testing.assert_allclose(mix, lam * fu.late_avg(cv, cf, a1) + (1 - lam) * fu.late_avg(cv, cf, a2),
                               atol=1e-12)
    out = fu.late_avg(cv, cf, a1)
    assert np.all(out >= np.minimum(cv, cf) - 1e-12) and np.all(out <= np.maximum(cv, cf) + 1e-12)


def test_late_avg_half_is_symmetric():
    rng = np.random.default_rng(0)
    cv, cf = rng.random((4, 3)), rng.random((4, 3))
    a, b = fu.late_avg(cv, cf, 0.5), fu.late_avg(cf, cv, 0.5)
    assert np.argmax(a) == np.argmax(b)
    np.testing.assert_allclose(a, b, atol=1e-15)


def test_latefc_example():
    W = np.array([[1.0, -1.0, 0.0]])
    out = fu.latefc_fuse(W, np.array([0.0]), np.array([[2.0, 2.0]]), np.array([[5.0]]))
    np.testing.assert_allclose(out, [[0.5]])


@pytest.mark.parametrize("tag", fu.VARIANTS)
def test_outputs_in_open_interval(tag):
    m = make(tag, seed=1)
    for a in m.params().values():
        a *= 20
    Xv, Xf = feats(np.random.default_rng(0), 6)
    v = fu.two_stream_forward(m, Xv * 10, Xf * 10).values
    assert v.shape == (6, 3) and np.all((v > 0) & (v < 1))


# -- degeneracies ----------------------------------------------------------------

def test_late_avg_endpoints_are_bit_exact():
    Xv, Xf = feats(np.random.default_rng(1))
    for alpha, stream in ((0.0, "video"), (1.0, "flow")):
        m = make("late-avg", alpha=alpha)
        single = getattr(m, stream)
        ref = sst.sst_forward(single, Xv if stream == "video" else Xf).values
        assert np.array_equal(fu.two_stream_forward(m, Xv, Xf).values, ref)


def test_mid_concat_is_sst_on_concatenation():
    m = make("mid-concat", seed=2)
    Xv, Xf = feats(np.random.default_rng(2))
    ref = sst.sst_forward(m.fused, np.concatenate([Xv, Xf], axis=1)).values
    assert np.array_equal(fu.two_stream_forward(m, Xv, Xf).values, ref)


def test_mid_concat_with_zero_flow_weights_ignores_flow():
    m = make("mid-concat", seed=3)
    m.fused.gru_layers[0].W[:, 3:] = 0
    Xv, Xf = feats(np.random.default_rng(3))
    # equivalent video-only SST: the same weights minus the flow columns
    cfg = SstConfig(3, 1, 4, 3, dropout_rate=0.0)
    layer = m.fused.gru_layers[0]
    from tapg.numeric import GruLayerParams
    video_only = sst.SstModel(cfg, [GruLayerParams(layer.W[:, :3].copy(), layer.U, layer.b)],
                              m.fused.head_W, m.fused.head_b)
    a = fu.two_stream_forward(m, Xv, Xf).values
    b = fu.two_stream_forward(m, Xv, np.random.default_rng(9).normal(size=Xf.shape)).values
    np.testing.assert_allclose(a, sst.sst_forward(video_only, Xv).values, atol=1e-12)
    np.testing.assert_allclose(a, b, atol=1e-12)


def test_block_count_mismatch_is_a_data_error():
    m = make("late-fc")
    with pytest.raises(DataError):
        fu.two_stream_forward(m, np.zeros((5, 3)), np.zeros((4, 2)))


def test_variant_validation():
    with pytest.raises(ConfigError):
        fu.FusionVariant("early")
    with pytest.raises(ConfigError):
        fu.FusionVariant("late-avg", alpha=1.2)
    with pytest.raises(ShapeError):
        fu.TwoStreamModel(fu.FusionVariant("late-avg"))


# -- gradients -----------------------------------------------------------------------

GRAD_CASES = [(tag, seed) for tag in fu.VARIANTS for seed in range(20)]


@pytest.mark.parametrize("tag, seed", GRAD_CASES)
def test_variant_gradients(tag, seed):
    rng = np.random.default_rng(seed)
    dims = (int(rng.integers(1, 5)), int(rng.integers(1, 5)))
    l2 = tag == "mid-fc" and seed % 2 == 0
    m = make(tag, seed, dims, alpha=float(rng.uniform()), l2=l2, dropout=0.25 if seed % 4 == 0 else 0.0,
             layers=1 + seed % 2)
    T = int(rng.integers(2, 6))
    Xv, Xf = feats(rng, T, dims)
    Y = (rng.random((T, 3)) < 0.4).astype(float)
    pw = float(rng.uniform(0.5, 3))
    if tag == "mid-fc":
        # keep finite differences away from the relu kink
        pre = np.hstack([Xv, Xf]) @ m.fusion_W.T + m.fusion_b
        m.fusion_b[np.abs(pre).min(axis=0) < 1e-2] += 0.05

    def loss():
        return fu.two_stream_loss_and_grads(m, Xv, Xf, Y, pw, np.random.default_rng(seed))[0]

    _, grads = fu.two_stream_loss_and_grads(m, Xv, Xf, Y, pw, np.random.default_rng(seed))
    expected = set(m.params())
    if tag == "late-fc":
        # the stream heads are bypassed by the shared fc
        expected -= {f"{s}.head.{p}" for s in ("video", "flow") for p in "Wb"}
    assert set(grads) == expected
    assert check_params(loss, m.params(), grads) < 1e-5


def test_trainable_subset_filters_grads():
    m = make("late-fc")
    Xv, Xf = feats(np.random.default_rng(0))
    _, g = fu.two_stream_loss_and_grads(m, Xv, Xf, np.zeros((5, 3)), 1.0, None, False, {"fusion"})
    assert set(g) == {"fusion.W", "fusion.b"}


# -- staged training ----------------------------------------------------------------

def toy_pairs(n=6, T=14, seed=0):
    rng = np.random.default_rng(seed)
    pairs, anns = [], []
    for v in range(n):
        Xv = rng.normal(size=(T, 3)) * 0.3
        Xf = rng.normal(size=(T, 2)) * 0.3
        s = int(rng.integers(0, T - 4))
        Xv[s: s + 3, 0] += 1.5
        Xf[s: s + 3, 1] += 1.5
        pairs.append((FeatureSequence(f"v{v}", "video", Xv.astype(np.float32)),
                      FeatureSequence(f"v{v}", "flow", Xf.astype(np.float32))))
        anns.append(Annotation(f"v{v}", T, [(s, s + 2)]))
    return pairs, anns


def digest(model, prefix):
    h = hashlib.sha256()
    for k, v in sorted(model.params().items()):
        if k.startswith(prefix + "."):
            h.update(k.encode())
            h.update(v.tobytes())
    return h.hexdigest()


def test_late_fc_stage2_keeps_pretrained_streams_frozen():
    data = toy_pairs()
    sched = fu.TrainingSchedule(pretrain_epochs=3, fusion_epochs=3)
    cfgs = small_configs()
    pre, _ = fu.pretrain_streams(data, cfgs, sched, seed=1)
    m = fu.train_two_stream(fu.FusionVariant("late-fc"), data, sched, 1, cfgs, pretrained=pre)
    ref = fu.TwoStreamModel(fu.FusionVariant("late-avg"), video=pre["video"], flow=pre["flow"])
    for s in ("video", "flow"):
        assert digest(m, s) == digest(ref, s)
    init = fu.init_two_stream(fu.FusionVariant("late-fc"), (3, 2), cfgs, 1, pre)
    assert not np.array_equal(init.fusion_W, m.fusion_W)


def test_finetune_moves_pretrained_streams():
    data = toy_pairs()
    sched = fu.TrainingSchedule(pretrain_epochs=2, fusion_epochs=2, finetune_epochs=2)
    cfgs = small_configs()
    pre, _ = fu.pretrain_streams(data, cfgs, sched, seed=1)
    m, info = fu.train_two_stream(fu.FusionVariant("late-fc"), data, sched, 1, cfgs, pretrained=pre,
                                  return_info=True)
    assert "stage3" in info.losses
    assert digest(m, "video") != digest(fu.TwoStreamModel(fu.FusionVariant("late-avg"), pre["video"],
                                                          pre["flow"]), "video")


def test_late_models_reuse_pretraining_deterministically():
    data = toy_pairs(n=3)
    sched = fu.TrainingSchedule(pretrain_epochs=2, fusion_epochs=2)
    cfgs = small_configs()
    pre, _ = fu.pretrain_streams(data, cfgs, sched, seed=5)
    a = fu.train_two_stream(fu.FusionVariant("late-avg"), data, sched, 5, cfgs)
    b = fu.train_two_stream(fu.FusionVariant("late-avg"), data, sched, 5, cfgs, pretrained=pre)
    assert digest(a, "video") == digest(b, "video") and digest(a, "flow") == digest(b, "flow")


def test_mid_fc_stage2_reduces_loss():
    data = toy_pairs(n=8)
    sched = fu.TrainingSchedule(fusion_epochs=30, fusion_lr=1e-2)
    m, info = fu.train_two_stream(fu.FusionVariant("mid-fc", fused_dim=6), data, sched, 0, small_configs(H=8),
                                  post_fusion_l2=True, return_info=True)
    losses = info.losses["stage2"]
    assert "stage1" not in info.losses
    assert losses[-1] <= 0.7 * losses[0]
    assert m.post_fusion_l2 and m.fusion_W.shape == (6, 5)


def test_training_rejects_mismatched_streams():
    pairs, anns = toy_pairs(n=2)
    v, f = pairs[0]
    pairs[0] = (v, f.with_data(f.data[:-1]))
    with pytest.raises(DataError):
        fu.train_two_stream(fu.FusionVariant("mid-concat"), (pairs, anns), fu.TrainingSchedule(0, 1))


# -- checkpoint ----------------------------------------------------------------------

def models_identical(a, b):
    pa, pb = a.params(), b.params()
    return pa.keys() == pb.keys() and all(np.array_equal(pa[k], pb[k]) for k in pa)


@pytest.mark.parametrize("tag", fu.VARIANTS)
def test_checkpoint_round_trip(tag, tmp_path):
    m = make(tag, seed=4, alpha=0.3, l2=True).astype(np.float32)
    path = tmp_path / "m.tsm"
    fu.save_checkpoint(m, path, meta={"k": [1, 2]})
    back, meta = fu.load_checkpoint(path)
    assert meta == {"k": [1, 2]} and back.tag == tag
    assert models_identical(m, back)
    Xv, Xf = feats(np.random.default_rng(0))
    assert np.array_equal(fu.two_stream_forward(m, Xv, Xf).values, fu.two_stream_forward(back, Xv, Xf).values)
    if tag == "late-avg":
        assert back.variant.alpha == 0.3
    if tag == "mid-fc":
        assert back.post_fusion_l2 and back.variant.fused_dim == 4


def test_checkpoint_layout_and_errors():
    single = fu.SingleStreamModel("flow", sst.SstModel.init(SstConfig(2, 1, 3, 2)))
    raw = fu.encode_checkpoint(single)
    assert raw[:4] == b"TSM1" and raw[8] == 17
    assert math.isnan(np.frombuffer(raw[9:17], "<f8")[0])
    back, meta = fu.decode_checkpoint(raw)
    assert back.stream == "flow" and sst.models_equal(back.model, single.model) and meta == {}
    with pytest.raises(BadMagic):
        fu.decode_checkpoint(b"TSM2" + raw[4:])
    with pytest.raises(DataError):
        fu.decode_checkpoint(raw[:-2])
    with pytest.raises(DataError):
        fu.decode_checkpoint(raw + b"x")
