"""
Four ways to fuse two streams
=============================

Train every fusion variant on a dataset where each stream carries half of
the action signal and compare them with the single-stream models.
"""
from tapg import pipeline
from tapg.config import expand_config
from tapg.features import SynthConfig, synth_dataset

synth = SynthConfig(num_videos=16, min_blocks=120, max_blocks=160, num_train=10)
pairs, anns = synth_dataset(synth, seed=3)
(train_p, train_a), (eval_p, eval_a) = pipeline.split_dataset(pairs, anns, synth.num_train)

# presets at desk scale, trimmed further so the demo stays short
quick = {"schedule": {"pretrain_epochs": 8, "fusion_epochs": 8}, "seed": 3}
models, scores = {}, {}
for name in ("video-stream", "table1-flow-best", "table2-mid-concat", "table3-mid-fc",
             "table4-late-avg", "table5-late-fc"):
    cfg = expand_config({"preset": name, **quick})
    pretrained = None
    if cfg.variant.startswith("late"):
        # late variants start from the two single-stream models
        pretrained = {"video": models["video-stream"].model, "flow": models["table1-flow-best"].model}
    models[name], losses = pipeline.train_run(cfg, train_p, train_a, pretrained=pretrained)
    scores[name] = pipeline.evaluate_model(models[name], eval_p, eval_a, cfg).ar_at_an
    print(f"{name:20s} AR@100 = {scores[name]:.4f}  stages: {sorted(losses)}")

# late averaging is a one-parameter family between the two streams
late = models["table4-late-avg"]
cfg = expand_config({"preset": "table4-late-avg", **quick})
for alpha in (0.0, 0.25, 0.5, 0.75, 1.0):
    late.variant.alpha = alpha
    print(f"alpha {alpha:.2f}: AR@100 = {pipeline.evaluate_model(late, eval_p, eval_a, cfg).ar_at_an:.4f}")
