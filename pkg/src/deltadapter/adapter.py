"""Semantic-delta adapter: exemplar pair features -> fixed-length edit tokens.

Pipeline::

    delta   = LN(f_target) - LN(f_source)            token-wise, no affine
    refined = delta + tanh(gate) * (delta @ W + b)    gate starts at 0
    R       = resampler(refined)                      N learnable queries
    E[i]    = R[i] @ W_i + b_i                        one affine map per token

Every stage has an ablation switch in :class:`AdapterConfig`.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import IncompatibleError, ShapeError
from .layers import ParamStore, attend, dense_init, merge_heads, split_heads
from .tensor import Tensor
from .toyvision import PatchFeatures

# LN epsilon for the delta path only. It must stay far below the feature
# variance so rescaling both feature maps leaves the delta unchanged.
DELTA_LN_EPS = 1e-12


@dataclass(frozen=True)
class AdapterConfig:
    feature_dim: int = 32
    num_queries: int = 8
    cond_dim: int = 64
    heads: int = 4
    depth: int = 1
    mlp_ratio: int = 2
    seed: int = 1
    # ablation switches
    layernorm: bool = True
    gated_residual: bool = True
    resampler: str = "perceiver"  # "perceiver" | "pool"
    per_token: bool = True
    condition_on: str = "delta"  # "delta" | "pair"
    # pre-norm on the query stream inside each resampler block
    norm_queries: bool = True


@dataclass
class SemanticDelta:
    delta: Tensor
    weights: np.ndarray
    refined: Tensor | None = None
    fingerprint: str = ""


def patch_weights(delta: np.ndarray) -> np.ndarray:
    """Per-token norm divided by the largest token norm; all zeros for a zero delta."""
    delta = np.asarray(delta)
    norms = np.sqrt((delta * delta).sum(axis=-1))
    peak = norms.max(axis=-1, keepdims=True)
    safe = np.where(peak > 0, peak, 1.0)
    return np.where(peak > 0, norms / safe, 0.0)


def _features(f) -> tuple[Tensor, str | None]:
    if isinstance(f, PatchFeatures):
        return f.tokens, f.fingerprint
    return T.as_tensor(f), None


def semantic_delta(f_a, f_a2, layernorm: bool = True) -> SemanticDelta:
    """Token-wise ``LN(f_a2) - LN(f_a)`` plus patch weights from the raw delta."""
    ta, fa = _features(f_a)
    tb, fb = _features(f_a2)
    if fa is not None and fb is not None and fa != fb:
        raise IncompatibleError(f"semantic_delta: features from different encoders ({fa} vs {fb})")
    if ta.shape != tb.shape:
        raise ShapeError(f"semantic_delta: feature shapes differ {ta.shape} vs {tb.shape}")
    if layernorm:
        delta = T.layer_norm(tb, DELTA_LN_EPS) - T.layer_norm(ta, DELTA_LN_EPS)
    else:
        delta = tb - ta
    return SemanticDelta(delta, patch_weights(delta.data), None, fa or fb or "")


class DeltaAdapter(ParamStore):
    prefix = "adapter."

    def __init__(self, config: AdapterConfig | None = None):
        super().__init__()
        self.config = cfg = config or AdapterConfig()
        rng = np.random.default_rng(cfg.seed)
        d, n, c = cfg.feature_dim, cfg.num_queries, cfg.cond_dim
        hidden = cfg.mlp_ratio * d
        if cfg.gated_residual:
            self.add_param("gate", np.zeros(()))
            self.add_param("res_w", dense_init(rng, d, d))
            self.add_param("res_b", np.zeros(d))
        if cfg.resampler == "perceiver":
            self.add_param("queries", rng.standard_normal((n, d)))
            for i in range(cfg.depth):
                p = f"resampler.{i}."
                for name in ("wq", "wk", "wv"):
                    self.add_param(p + name, dense_init(rng, d, d))
                self.add_param(p + "wo", dense_init(rng, d, d))
                self.add_param(p + "w1", dense_init(rng, d, hidden))
                self.add_param(p + "b1", np.zeros(hidden))
                self.add_param(p + "w2", dense_init(rng, hidden, d))
                self.add_param(p + "b2", np.zeros(d))
        elif cfg.resampler == "pool":
            self.add_param("pool.w1", dense_init(rng, d, hidden))
            self.add_param("pool.b1", np.zeros(hidden))
            self.add_param("pool.w2", dense_init(rng, hidden, d))
            self.add_param("pool.b2", np.zeros(d))
        else:
            raise ValueError(f"unknown resampler {cfg.resampler!r}")
        if cfg.per_token:
            w = np.stack([dense_init(rng, d, c) for _ in range(n)])
            self.add_param("proj.w", w)
            self.add_param("proj.b", np.zeros((n, c)))
        else:
            self.add_param("proj.w", dense_init(rng, d, c))
            self.add_param("proj.b", np.zeros(c))

    # -- stages -----------------------------------------------------------
    def conditioning(self, f_a, f_a2) -> SemanticDelta:
        """Token sequence fed to the refinement stage, with ground-truth weights.

        For ``condition_on="pair"`` the sequence is the two normalized feature
        maps stacked along the token axis instead of their difference.
        """
        d = semantic_delta(f_a, f_a2, self.config.layernorm)
        if self.config.condition_on == "pair":
            ta, _ = _features(f_a)
            tb, _ = _features(f_a2)
            if self.config.layernorm:
                ta, tb = T.layer_norm(ta, DELTA_LN_EPS), T.layer_norm(tb, DELTA_LN_EPS)
            d = SemanticDelta(T.concat([ta, tb], axis=-2), d.weights, None, d.fingerprint)
        return d

    def gated_refine(self, d: SemanticDelta) -> SemanticDelta:
        if not self.config.gated_residual:
            return SemanticDelta(d.delta, d.weights, d.delta, d.fingerprint)
        x = d.delta
        corr = T.tanh(self.params["gate"]) * (x @ self.params["res_w"] + self.params["res_b"])
        return SemanticDelta(d.delta, d.weights, x + corr, d.fingerprint)

    def resample(self, refined) -> Tensor:
        """(..., L, D_r) -> (..., N, D_r), independent of L."""
        if isinstance(refined, SemanticDelta):
            refined = refined.refined if refined.refined is not None else refined.delta
        cfg = self.config
        p = self.params
        if cfg.resampler == "pool":
            pooled = refined.mean(axis=-2)
            h = T.gelu(pooled @ p["pool.w1"] + p["pool.b1"]) @ p["pool.w2"] + p["pool.b2"]
            lead = h.shape[:-1]
            h = h.reshape(*lead, 1, cfg.feature_dim)
            return T.broadcast_to(h, (*lead, cfg.num_queries, cfg.feature_dim))
        q = p["queries"]
        for i in range(cfg.depth):
            b = f"resampler.{i}."
            qn = T.layer_norm(q) if cfg.norm_queries else q
            Q = split_heads(qn @ p[b + "wq"], cfg.heads)
            K = split_heads(refined @ p[b + "wk"], cfg.heads)
            V = split_heads(refined @ p[b + "wv"], cfg.heads)
            q = q + merge_heads(attend(Q, K, V)) @ p[b + "wo"]
            q = q + T.gelu(T.layer_norm(q) @ p[b + "w1"] + p[b + "b1"]) @ p[b + "w2"] + p[b + "b2"]
        return q

    def project(self, R: Tensor) -> Tensor:
        """Edit tokens E (..., N, D_c)."""
        cfg = self.config
        if R.shape[-2] != cfg.num_queries:
            raise ShapeError(f"project: expected {cfg.num_queries} tokens, got {R.shape[-2]}")
        w, b = self.params["proj.w"], self.params["proj.b"]
        if not cfg.per_token:
            return R @ w + b
        lead = R.shape[:-2]
        r = R.reshape(*lead, cfg.num_queries, 1, cfg.feature_dim)
        return (r @ w).reshape(*lead, cfg.num_queries, cfg.cond_dim) + b

    # -- composed ---------------------------------------------------------
    def edit_tokens(self, f_a, f_a2) -> Tensor:
        return self.project(self.resample(self.gated_refine(self.conditioning(f_a, f_a2))))

    def null_tokens(self, num_tokens: int) -> Tensor:
        """Edit tokens of an identity pair (zero delta)."""
        zero = Tensor(np.zeros((num_tokens, self.config.feature_dim)))
        return self.edit_tokens(zero, zero)

    def projection_parameter_count(self) -> int:
        return self.num_parameters("proj.")


def projection_parameter_count(feature_dim: int, cond_dim: int, num_queries: int,
                               per_token: bool = True) -> int:
    shared = feature_dim * cond_dim + cond_dim
    return num_queries * shared if per_token else shared


# functional aliases
def gated_refine(d: SemanticDelta, adapter: DeltaAdapter) -> SemanticDelta:
    return adapter.gated_refine(d)


def resample(d, adapter: DeltaAdapter) -> Tensor:
    return adapter.resample(d)


def per_token_project(R: Tensor, adapter: DeltaAdapter) -> Tensor:
    return adapter.project(R)
