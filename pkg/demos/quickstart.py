"""End-to-end walk through the two training stages at a reduced step budget.

    python3 demos/quickstart.py [outdir]

1. generate episodes: (a, a') exemplar pair plus a query b and its edited b'
2. stage 1: teach the backbone to reproduce its source image
3. stage 2: freeze it and train the delta adapter plus the injection branch
4. edit a held-out query from a seen and an unseen family, write PPM previews

Step counts are cut to keep this around three minutes on one core, so the
numbers are worse than the full defaults (2000 + 4000 steps).
"""
import sys
import time
from pathlib import Path

import numpy as np

from deltadapter.evaluation import eval_run, held_out_flow_loss
from deltadapter.synth import SPLIT_EVAL_SEEN, SPLIT_EVAL_UNSEEN, DataConfig, gen_dataset
from deltadapter.toyvision import to_ppm
from deltadapter.trainer import TrainConfig, pretrain_backbone, train_adapter

out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_out")
out.mkdir(exist_ok=True)

cfg = DataConfig(train_episodes=600, eval_episodes=60)
data = gen_dataset(cfg)
print(f"{len(data)} episodes; seen {', '.join(cfg.seen)}; unseen {', '.join(cfg.unseen)}")

t0 = time.perf_counter()
base = pretrain_backbone(TrainConfig(stage="pretrain", steps=800), data)
print(f"stage 1 done in {time.perf_counter() - t0:.0f}s, "
      f"held-out identity loss {held_out_flow_loss(base.build_model(), data):.4f}")

t0 = time.perf_counter()
ckpt = train_adapter(TrainConfig(steps=1000), base, data)
print(f"stage 2 done in {time.perf_counter() - t0:.0f}s")

rep = eval_run(ckpt, data)
for split in ("seen", "unseen"):
    print(f"{split:6s} accuracy {rep.metric(split, 'accuracy'):.3f}  "
          f"consistency {rep.metric(split, 'consistency_mse'):.4f}  "
          f"alignment {rep.metric(split, 'delta_alignment'):.3f}")

model = ckpt.build_model()
for split in (SPLIT_EVAL_SEEN, SPLIT_EVAL_UNSEEN):
    i = data.indices(split)[0]
    ep = data.episodes[i]
    z1 = np.random.default_rng(i).standard_normal((16, 48))
    edited = model.edit(ep.source, ep.target, ep.query, z1=z1)
    plain = model.edit(ep.source, ep.target, ep.query, z1=z1, lam=0.0)
    tag = ep.spec.family
    for name, img in (("a", ep.source), ("a2", ep.target), ("b", ep.query), ("b2_true", ep.query_target),
                      ("b2_model", edited), ("b2_lambda0", plain)):
        (out / f"{tag}.{name}.ppm").write_bytes(to_ppm(img))
    err = np.mean((edited - ep.query_target) ** 2)
    print(f"{tag}: target MSE {err:.4f} with the adapter, {np.mean((plain - ep.query_target) ** 2):.4f} without")
print(f"previews in {out}/")
