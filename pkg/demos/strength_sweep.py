"""Scaling the injection strength at inference time.

    python3 demos/strength_sweep.py [adapter.dfc1]

With a trained checkpoint (e.g. from ``deltadapter train``) this prints how far
the output moves from the query as lambda grows. Without one it trains a small
model first. lambda = 0 always reproduces the frozen backbone exactly.
"""
import sys

import numpy as np

from deltadapter.evaluation import eval_run, spearman, sweep_table
from deltadapter.synth import DataConfig, gen_dataset
from deltadapter.trainer import Checkpoint, TrainConfig, pretrain_backbone, train_adapter

data = gen_dataset(DataConfig(train_episodes=600, eval_episodes=40))
if len(sys.argv) > 1:
    ckpt = Checkpoint.load(sys.argv[1])
else:
    base = pretrain_backbone(TrainConfig(stage="pretrain", steps=800), data)
    ckpt = train_adapter(TrainConfig(steps=1000), base, data)

grid = [0.0, 0.25, 0.5, 0.75, 1.0, 1.25, 1.5]
rep = eval_run(ckpt, data, lambda_grid=grid, limit=20)
lams, dist = sweep_table(rep)
for lam, row in zip(lams, dist):
    acc = rep.metric("seen", "accuracy", lam) if "seen" in rep.aggregates()[repr(lam)] else float("nan")
    print(f"lambda {lam:4.2f}  distance from query {row.mean():.4f}  seen accuracy {acc:.2f}")
rho = np.mean([spearman(lams, dist[:, j]) for j in range(dist.shape[1])])
print(f"mean per-episode Spearman(lambda, distance) = {rho:.3f}")
