"""Flow-matching loss, semantic delta consistency (SDC) loss, combined objective."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .adapter import DELTA_LN_EPS, SemanticDelta, patch_weights
from .errors import ShapeError
from .tensor import Tensor
from .toyvision import FrozenEncoder, PatchFeatures, unpatchify

COS_EPS = 1e-8


def flow_loss(v_hat: Tensor, z0, z1) -> Tensor:
    """Mean squared error between the predicted velocity and ``z1 - z0``."""
    target = T.as_tensor(z1).data - T.as_tensor(z0).data
    if v_hat.shape != target.shape:
        raise ShapeError(f"flow_loss: prediction {v_hat.shape} vs target {target.shape}")
    return T.square(v_hat - target).mean()


def sdc_loss(gt, pred_delta: Tensor, weights: np.ndarray | None = None) -> Tensor:
    """``1 - (1/L) sum_l m_l cos(gt_l, pred_l)``, averaged over any batch axes.

    ``gt`` is a :class:`SemanticDelta` (weights taken from it) or a raw delta
    array, in which case weights are derived from it.
    """
    if isinstance(gt, SemanticDelta):
        gt_delta, m = gt.delta.data, gt.weights if weights is None else weights
    else:
        gt_delta = T.as_tensor(gt).data
        m = patch_weights(gt_delta) if weights is None else weights
    if gt_delta.shape != pred_delta.shape:
        raise ShapeError(f"sdc_loss: ground truth {gt_delta.shape} vs prediction {pred_delta.shape}")
    cos = T.cosine_similarity(Tensor(gt_delta), pred_delta, eps=COS_EPS)
    per_sample = 1.0 - (cos * np.asarray(m)).mean(axis=-1)
    return per_sample.mean()


def pred_delta(a, z0_hat: Tensor, enc: FrozenEncoder, layernorm: bool = True,
               f_a: PatchFeatures | Tensor | None = None) -> Tensor:
    """Delta induced by the clean-latent estimate: decode (no clamp), encode, LN-difference."""
    cfg = enc.config
    if z0_hat.shape[-2:] != (cfg.tokens, cfg.patch_dim):
        raise ShapeError(f"pred_delta: latent shape {z0_hat.shape} does not match "
                         f"({cfg.tokens}, {cfg.patch_dim})")
    img = unpatchify(z0_hat, cfg.height, cfg.width, cfg.patch)
    f_hat = enc.encode(img).tokens
    if f_a is None:
        base = enc.encode(T.as_tensor(a).detach()).tokens.detach()
    else:
        base = f_a.tokens if isinstance(f_a, PatchFeatures) else T.as_tensor(f_a)
    if layernorm:
        return T.layer_norm(f_hat, DELTA_LN_EPS) - T.layer_norm(base, DELTA_LN_EPS).detach()
    return f_hat - base.detach()


@dataclass
class LossBreakdown:
    flow: Tensor
    sdc: Tensor | None
    total: Tensor
    lambda_sdc: float

    def values(self) -> dict[str, float]:
        return {"flow": self.flow.item(),
                "sdc": float("nan") if self.sdc is None else self.sdc.item(),
                "total": self.total.item()}


def total_loss(flow: Tensor, sdc: Tensor | None, lambda_sdc: float = 1.0) -> LossBreakdown:
    """``flow + lambda_sdc * sdc``; with ``lambda_sdc == 0`` the SDC term is left out entirely."""
    if lambda_sdc == 0 or sdc is None:
        return LossBreakdown(flow, sdc, flow, lambda_sdc)
    return LossBreakdown(flow, sdc, flow + sdc * lambda_sdc, lambda_sdc)
