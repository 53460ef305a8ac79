import pytest

from tapg import config as cf
from tapg.errors import ConfigError


def sst_values(s):
    return s.num_gru_layers, s.hidden_dim, s.learning_rate, s.dropout_rate


def test_preset_values_at_full_scale():
    c = cf.expand_config({"preset": "table1-flow-best", "scale": "paper"})
    assert c.variant == "single-flow" and sst_values(c.flow) == (1, 256, 1e-2, 0.3)
    assert c.preprocessing.flow_l2
    c = cf.expand_config({"preset": "table1-flow-initial", "scale": "paper"})
    assert sst_values(c.flow) == (2, 128, 1e-3, 0.3) and not c.preprocessing.flow_l2
    c = cf.expand_config({"preset": "video-stream", "scale": "paper"})
    assert sst_values(c.video) == (2, 128, 1e-3, 0.3)
    c = cf.expand_config({"preset": "table2-mid-concat", "scale": "paper"})
    assert sst_values(c.fused) == (2, 256, 1e-2, 0.3)
    assert c.preprocessing.video_l2 and c.preprocessing.flow_l2
    c = cf.expand_config({"preset": "table3-mid-fc", "scale": "paper"})
    assert c.fused_dim == 4096 and c.preprocessing.post_fusion_l2
    c = cf.expand_config({"preset": "table4-late-avg", "scale": "paper"})
    assert c.alpha == 0.5 and c.fusion_variant.tag == "late-avg"
    assert sst_values(c.video) == (2, 128, 1e-3, 0.3) and sst_values(c.flow) == (1, 256, 1e-2, 0.3)
    c = cf.expand_config({"preset": "table5-late-fc", "scale": "paper"})
    assert c.schedule.fusion_lr == 1e-3 and c.schedule.freeze_pretrained


@pytest.mark.parametrize("name", sorted(cf.PRESETS))
def test_every_preset_expands(name):
    c = cf.expand_config({"preset": name})
    assert c.preset == name and c.scale == "desk"
    full = cf.expand_config({"preset": name, "scale": "paper"})
    assert c.flow.hidden_dim * 8 == full.flow.hidden_dim
    assert c.to_dict()["variant"] == c.variant


def test_overrides_deep_merge():
    c = cf.expand_config({"preset": "table4-late-avg", "alpha": 0.25, "flow": {"hidden_dim": 7},
                          "schedule": {"pretrain_epochs": 3}})
    assert c.alpha == 0.25 and c.flow.hidden_dim == 7 and c.flow.num_gru_layers == 1
    assert c.schedule.pretrain_epochs == 3 and c.schedule.fusion_epochs == 50


@pytest.mark.parametrize("bad", [
    {"variant": "early"},
    {"preset": "nope"},
    {"preset": "video-stream", "scale": "huge"},
    {"flow": {"hidden": 3}},
    {"schedule": {"pretrain_epochs": -1}},
    {"eval": {"budget": "nope"}},
    {"alpha": 2.0},
    {"mystery": 1},
])
def test_bad_configs_raise(bad):
    with pytest.raises(ConfigError):
        cf.expand_config(bad)
