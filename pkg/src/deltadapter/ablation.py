"""Ablation batch runs: every variant trained from one shared stage-1 checkpoint.

Rows follow the column order of the usual ablation table (variant, then
fidelity, distance, consistency, accuracy), with the deterministic metrics in
place of judged scores.
"""
from __future__ import annotations

import csv
import dataclasses
import io
import json
from dataclasses import dataclass, field
from typing import Callable, Sequence

from .evaluation import eval_run
from .model import VARIANTS, canonical_variant
from .synth import Dataset
from .trainer import Checkpoint, TrainConfig, adapter_trainer, make_variant, parameter_report

COLUMNS = ("split", "variant", "seed", "delta_alignment", "target_mse", "consistency_mse", "accuracy",
           "adapter_params", "projection_params", "config_hash")


@dataclass
class AblationTable:
    rows: list[dict] = field(default_factory=list)

    def select(self, split: str, seed: int | None = None) -> list[dict]:
        return [r for r in self.rows if r["split"] == split and (seed is None or r["seed"] == seed)]

    def value(self, split: str, variant: str, seed: int, metric: str) -> float:
        variant = canonical_variant(variant)
        for r in self.select(split, seed):
            if r["variant"] == variant:
                return r[metric]
        raise KeyError((split, variant, seed))

    def full_is_best(self, split: str, seed: int, metric: str = "accuracy") -> bool:
        """``full`` attains the maximum of ``metric`` (ties count as attaining it)."""
        rows = self.select(split, seed)
        return self.value(split, "full", seed, metric) >= max(r[metric] for r in rows)

    def to_json(self) -> str:
        return json.dumps({"columns": list(COLUMNS), "rows": self.rows}, indent=1, sort_keys=True)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=list(COLUMNS), lineterminator="\n")
        w.writeheader()
        for r in self.rows:
            w.writerow({k: r[k] for k in COLUMNS})
        return buf.getvalue()


def run_ablation(base: Checkpoint, dataset: Dataset, variants: Sequence[str] = VARIANTS,
                 seeds: Sequence[int] = (0,), train_cfg: TrainConfig | None = None,
                 splits: Sequence[str] = ("seen", "unseen"), eval_seed: int = 0,
                 on_trained: Callable[[str, int, Checkpoint], None] | None = None) -> AblationTable:
    """Train and evaluate each variant for each seed from the same stage-1 weights."""
    train_cfg = train_cfg or TrainConfig()
    table = AblationTable()
    for seed in seeds:
        for tag in variants:
            mc, tc = make_variant(tag, base.model_config, dataclasses.replace(train_cfg, seed=seed))
            tr = adapter_trainer(tc, base, dataset, mc)
            tr.run()
            ckpt = tr.checkpoint()
            if on_trained is not None:
                on_trained(tc.variant, seed, ckpt)
            report = eval_run(tr.model, dataset, splits=splits, seed=eval_seed)
            agg = report.aggregates()["learned"]
            counts = parameter_report(mc)
            for split in splits:
                if split not in agg:
                    continue
                a = agg[split]
                table.rows.append({
                    "split": split, "variant": tc.variant, "seed": seed,
                    "delta_alignment": a["delta_alignment"], "target_mse": a["target_mse"],
                    "consistency_mse": a["consistency_mse"], "accuracy": a["accuracy"],
                    "adapter_params": counts["adapter"], "projection_params": counts["projection"],
                    "config_hash": mc.config_hash(),
                })
    return table
