"""Deterministic editing metrics and reports.

Each held-out episode is scored four ways:

* oracle accuracy: which candidate edit, re-applied to the query, lands
  closest (MSE) to the model output; correct when it is the true family
* target MSE against the ground-truth edited query
* consistency MSE over pixels the true edit leaves alone
* query MSE: how far the output moved from the unedited query (the
  quantity tracked by an injection-strength sweep)
* delta alignment: patch-weighted cosine between the exemplar delta and the
  delta the model induced on the query

Accuracy and consistency are always reported together, since an identity
output scores perfect consistency.
"""
from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .adapter import patch_weights, semantic_delta
from .errors import ContractError, IncompatibleError
from .synth import (FAMILIES, FAMILY_ID, IDENTITY, SPLIT_EVAL_SEEN, SPLIT_EVAL_UNSEEN, SPLIT_NAMES,
                    Dataset, EditSpec, Episode, apply_edit, make_spec)
from .tensor import Tensor, no_grad
from .toyvision import FrozenEncoder, PatchFeatures

EVAL_SCHEMA = 1
IDENTITY_ID = len(FAMILIES)
METRIC_NOTE = {
    "accuracy": "oracle edit classification (stands in for judged editing accuracy)",
    "consistency_mse": "MSE outside the true edit mask (stands in for judged content consistency)",
    "target_mse": "MSE against the ground-truth edited query",
    "delta_alignment": "patch-weighted cosine of exemplar delta vs induced query delta",
    "query_mse": "MSE between the output and the unedited query (edit strength)",
}


def _mse(x, y) -> float:
    d = np.asarray(x, dtype=np.float64) - np.asarray(y, dtype=np.float64)
    return float(np.mean(d * d))


def _spec_id(spec: EditSpec | None) -> int:
    return IDENTITY_ID if spec is None or spec.family == IDENTITY else spec.family_id


def oracle_classify(output, query, candidates: Sequence[EditSpec | None]) -> int:
    """Family id of the candidate whose application to ``query`` best matches ``output``.

    ``None`` (or an identity spec) stands for the identity edit, id ``len(FAMILIES)``.
    Ties go to the lowest family id.
    """
    if not candidates:
        raise ContractError("oracle_classify: empty candidate set")
    best = None
    for spec in sorted(candidates, key=_spec_id):
        ref = query if _spec_id(spec) == IDENTITY_ID else apply_edit(query, spec)[0]
        err = _mse(output, ref)
        if best is None or err < best[0]:
            best = (err, _spec_id(spec))
    return best[1]


def candidate_specs(episode: Episode, families: Sequence[str]) -> list[EditSpec | None]:
    """True spec, every other dataset family drawn with the episode seed, and the identity."""
    out: list[EditSpec | None] = []
    for fam in families:
        out.append(episode.spec if fam == episode.spec.family else make_spec(fam, episode.seed))
    return out + [None]


def consistency_mse(output, query, mask) -> float:
    """MSE over pixels outside ``mask`` (H, W); 0 when the mask covers everything."""
    output, query, mask = np.asarray(output), np.asarray(query), np.asarray(mask, dtype=bool)
    if mask.shape != query.shape[:2]:
        raise ContractError(f"consistency_mse: mask {mask.shape} vs image {query.shape[:2]}")
    keep = ~mask
    if not keep.any():
        return 0.0
    return _mse(output[keep], query[keep])


def delta_alignment(pair, query, output, enc: FrozenEncoder) -> float:
    """Weighted cosine between the exemplar delta and the query delta, in [-1, 1]."""
    a, a2 = pair
    with no_grad():
        feats = [enc.encode(np.asarray(x, dtype=np.float64)) for x in (a, a2, query, output)]
    for f in feats[1:]:
        if f.fingerprint != feats[0].fingerprint:
            raise IncompatibleError("delta_alignment: features from different encoders")
    ref = semantic_delta(feats[0], feats[1]).delta.data
    got = semantic_delta(feats[2], feats[3]).delta.data
    return _weighted_alignment(ref, got)


def _weighted_alignment(ref: np.ndarray, got: np.ndarray) -> float:
    m = patch_weights(ref)
    nr = np.linalg.norm(ref, axis=-1)
    ng = np.linalg.norm(got, axis=-1)
    ok = (nr > 0) & (ng > 0)
    cos = np.where(ok, (ref * got).sum(-1) / np.maximum(nr * ng, 1e-8 ** 2), 0.0)
    total = float(m.sum())
    return 0.0 if total == 0 else float((m * cos).sum() / total)


@dataclass
class EpisodeRecord:
    episode: int
    split: str
    family: str
    lam: float | None
    predicted: str
    correct: bool
    target_mse: float
    consistency_mse: float
    delta_alignment: float
    query_mse: float


def _aggregate(rows: list[EpisodeRecord]) -> dict[str, float]:
    n = len(rows)
    return {
        "count": n,
        "accuracy": sum(r.correct for r in rows) / n,
        "target_mse": float(np.mean([r.target_mse for r in rows])),
        "consistency_mse": float(np.mean([r.consistency_mse for r in rows])),
        "delta_alignment": float(np.mean([r.delta_alignment for r in rows])),
        "query_mse": float(np.mean([r.query_mse for r in rows])),
    }


def _lam_key(lam: float | None) -> str:
    return "learned" if lam is None else repr(float(lam))


@dataclass
class EvalReport:
    records: list[EpisodeRecord]
    meta: dict = field(default_factory=dict)

    def aggregates(self) -> dict[str, dict]:
        """Keyed by lambda, then split (and ``split/family``)."""
        groups: dict[str, dict[str, list]] = {}
        for r in self.records:
            g = groups.setdefault(_lam_key(r.lam), {})
            g.setdefault(r.split, []).append(r)
            g.setdefault(f"{r.split}/{r.family}", []).append(r)
        return {lk: {k: _aggregate(v) for k, v in sorted(g.items())} for lk, g in groups.items()}

    def metric(self, split: str, name: str, lam: float | None = None) -> float:
        return self.aggregates()[_lam_key(lam)][split][name]

    def to_json(self) -> str:
        doc = {"eval_schema": EVAL_SCHEMA, "metrics": METRIC_NOTE, "meta": self.meta,
               "aggregates": self.aggregates(), "records": [asdict(r) for r in self.records]}
        return json.dumps(doc, indent=1, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        doc = json.loads(text)
        if doc.get("eval_schema") != EVAL_SCHEMA:
            raise IncompatibleError(f"unsupported eval_schema {doc.get('eval_schema')!r}")
        return cls([EpisodeRecord(**r) for r in doc["records"]], doc.get("meta", {}))

    def to_csv(self) -> str:
        buf = io.StringIO()
        names = list(EpisodeRecord.__dataclass_fields__)
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(names)
        for r in self.records:
            w.writerow([getattr(r, k) for k in names])
        return buf.getvalue()


def score_episode(ep: Episode, index: int, output: np.ndarray, enc: FrozenEncoder,
                  families: Sequence[str], lam: float | None = None) -> EpisodeRecord:
    pred = oracle_classify(output, ep.query, candidate_specs(ep, families))
    return EpisodeRecord(
        episode=index, split=SPLIT_NAMES[ep.split], family=ep.spec.family, lam=lam,
        predicted=IDENTITY if pred == IDENTITY_ID else FAMILIES[pred],
        correct=pred == ep.spec.family_id,
        target_mse=_mse(output, ep.query_target),
        consistency_mse=consistency_mse(output, ep.query, ep.mask_query),
        delta_alignment=delta_alignment((ep.source, ep.target), ep.query, output, enc),
        query_mse=_mse(output, ep.query),
    )


def rank_average(x) -> np.ndarray:
    """1-based ranks with ties sharing their mean rank."""
    x = np.asarray(x, dtype=np.float64)
    _, inv, counts = np.unique(x, return_inverse=True, return_counts=True)
    top = np.cumsum(counts)
    return (top - (counts - 1) / 2.0)[inv]


def spearman(x, y) -> float:
    """Spearman rank correlation; 0 when either side is constant."""
    rx, ry = rank_average(x), rank_average(y)
    rx, ry = rx - rx.mean(), ry - ry.mean()
    den = np.sqrt((rx * rx).sum() * (ry * ry).sum())
    return 0.0 if den == 0 else float((rx * ry).sum() / den)


def sweep_table(report: EvalReport) -> tuple[list[float], np.ndarray]:
    """Grid values and a (len(grid), episodes) matrix of query MSE from a lambda-grid report."""
    grid = sorted({r.lam for r in report.records if r.lam is not None})
    if not grid:
        raise ContractError("sweep_table: report has no lambda grid")
    cols = sorted({r.episode for r in report.records})
    pos = {e: j for j, e in enumerate(cols)}
    out = np.full((len(grid), len(cols)), np.nan)
    for r in report.records:
        if r.lam is not None:
            out[grid.index(r.lam), pos[r.episode]] = r.query_mse
    return grid, out


def episode_noise(seed: int, index: int, shape) -> np.ndarray:
    return np.random.default_rng([seed, index]).standard_normal(shape)


def eval_run(model, dataset: Dataset, lambda_grid: Sequence[float] | None = None,
             splits: Sequence[str] = ("seen", "unseen"), seed: int = 0, steps: int = 4,
             limit: int | None = None, indices: Sequence[int] | None = None,
             use_adapter: bool = True, batch: int = 50) -> EvalReport:
    """Edit every selected evaluation episode's query and score it.

    ``model`` is an ``EditModel`` or a ``Checkpoint``. Without a grid the learned
    injection scale is used; each grid value overrides it. Noise for episode
    ``i`` depends only on ``(seed, i)``.
    """
    if hasattr(model, "build_model"):
        meta_hash = model.config_hash
        model = model.build_model()
    else:
        meta_hash = model.config.config_hash()
    e = model.config.encoder
    if (dataset.height, dataset.width, dataset.channels, dataset.patch) != (e.height, e.width, e.channels, e.patch):
        raise IncompatibleError("dataset image layout does not match the model encoder")
    wanted = {SPLIT_EVAL_SEEN if s == "seen" else SPLIT_EVAL_UNSEEN for s in splits}
    if indices is None:
        indices = [i for i, ep in enumerate(dataset.episodes) if ep.split in wanted]
        if limit is not None:
            indices = indices[:limit]
    families = dataset.families()
    shape = (model.config.backbone.tokens, model.config.backbone.latent_dim)
    lams = [None] if lambda_grid is None else [float(x) for x in lambda_grid]
    records = []
    for lam in lams:
        for start in range(0, len(indices), batch):
            chunk = list(indices[start:start + batch])
            eps = [dataset.episodes[i] for i in chunk]
            z1 = np.stack([episode_noise(seed, i, shape) for i in chunk])
            a = np.stack([ep.source for ep in eps])
            a2 = np.stack([ep.target for ep in eps])
            b = np.stack([ep.query for ep in eps])
            out = model.edit(a, a2, b, z1=z1, steps=steps, lam=lam, use_adapter=use_adapter)
            for i, ep, o in zip(chunk, eps, out):
                records.append(score_episode(ep, i, o, model.encoder, families, lam))
    meta = {"config_hash": meta_hash, "variant": model.config.variant, "seed": seed,
            "steps": steps, "lambda_grid": None if lambda_grid is None else lams,
            "splits": list(splits)}
    return EvalReport(records, meta)


def held_out_flow_loss(model, dataset: Dataset, seed: int = 0, limit: int = 100,
                       use_targets: bool = False) -> float:
    """Mean flow loss of the identity task (or the edit task) on evaluation episodes."""
    from .flownet import interpolate
    from .objectives import flow_loss
    from .toyvision import patchify

    idx = [i for i, ep in enumerate(dataset.episodes) if ep.split != 0][:limit]
    src = np.stack([dataset.episodes[i].source for i in idx]).astype(np.float64)
    tgt = np.stack([dataset.episodes[i].target for i in idx]).astype(np.float64) if use_targets else src
    rng = np.random.default_rng(seed)
    z0 = patchify(tgt, model.config.encoder.patch).data
    z1 = rng.standard_normal(z0.shape)
    t = rng.uniform(0, 1, len(idx))
    with no_grad():
        E = None
        if use_targets and model.adapter is not None:
            E = model.edit_tokens(src, tgt)
        v = model.backbone.predict_velocity(interpolate(z0, z1, t), src, E)
        return flow_loss(v, z0, z1).item()
