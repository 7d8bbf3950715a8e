"""Rectified-flow velocity transformer with decoupled edit-token injection.

The token sequence is ``[latent tokens ; source tokens]``. Both halves share
the input projection and a positional table so latent token ``i`` can find
source token ``i``; source tokens also get a type embedding. The timestep
embedding is added to every token. Each block runs pre-norm self-attention,
adds ``lambda_ca * softmax(Q K_e^T / sqrt(d)) V_e`` computed from the edit
tokens with the same queries, then a GELU MLP. The head reads the latent
positions only.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .errors import ContractError, NumericError, ShapeError
from .layers import ParamStore, attend, dense_init, merge_heads, sinusoidal_table, split_heads, timestep_features
from .tensor import Tensor, no_grad
from .toyvision import patchify


@dataclass(frozen=True)
class BackboneConfig:
    tokens: int = 16
    latent_dim: int = 48
    width: int = 64
    heads: int = 4
    blocks: int = 4
    cond_dim: int = 64
    mlp_ratio: int = 2
    time_dim: int = 32
    patch: int = 4
    inject_blocks: tuple[int, ...] | None = None  # None = every block
    seed: int = 2


@dataclass
class FlowState:
    z: Tensor
    t: float | np.ndarray

    def __post_init__(self):
        t = np.asarray(self.t, dtype=np.float64)
        if (t < 0).any() or (t > 1).any():
            raise ContractError(f"FlowState: t must lie in [0, 1], got {self.t}")


def interpolate(z0, z1, t) -> FlowState:
    """``z_t = (1 - t) z0 + t z1``; ``t`` may be a scalar or one value per batch row."""
    z0, z1 = T.as_tensor(z0), T.as_tensor(z1)
    if z0.shape != z1.shape:
        raise ShapeError(f"interpolate: shapes differ {z0.shape} vs {z1.shape}")
    tt = np.asarray(t, dtype=np.float64)
    if (tt < 0).any() or (tt > 1).any():
        raise ContractError(f"interpolate: t must lie in [0, 1], got {t}")
    tb = tt.reshape(tt.shape + (1,) * (z0.ndim - tt.ndim)) if tt.ndim else tt
    return FlowState(z0 * (1.0 - tb) + z1 * tb, t)


def recover_clean(z1, v) -> Tensor:
    """Coarse clean-latent estimate ``z1 - v`` (exact for the true straight-line velocity)."""
    z1, v = T.as_tensor(z1), T.as_tensor(v)
    if z1.shape != v.shape:
        raise ShapeError(f"recover_clean: shapes differ {z1.shape} vs {v.shape}")
    return z1 - v


def inject(Z: Tensor, Q: Tensor, E: Tensor, w_key: Tensor, w_value: Tensor, lam, heads: int) -> Tensor:
    """Decoupled branch fused into the self-attention output.

    ``Z`` and ``Q`` are (..., T, D_m) before head splitting; ``E`` is (..., N, D_c).
    """
    Kd = split_heads(E @ w_key, heads)
    Vd = split_heads(E @ w_value, heads)
    Zd = merge_heads(attend(split_heads(Q, heads), Kd, Vd))
    return Z + Zd * lam


class Backbone(ParamStore):
    prefix = "backbone."

    def __init__(self, config: BackboneConfig | None = None):
        super().__init__()
        self.config = cfg = config or BackboneConfig()
        if cfg.width % cfg.heads:
            raise ValueError("width must be divisible by heads")
        rng = np.random.default_rng(cfg.seed)
        m = cfg.width
        hidden = cfg.mlp_ratio * m
        self.add_param("in_w", dense_init(rng, cfg.latent_dim, m))
        self.add_param("in_b", np.zeros(m))
        self.add_param("src_type", rng.standard_normal(m) * 0.5)
        self.add_param("pos", sinusoidal_table(cfg.tokens, m))
        self.add_param("t_w1", dense_init(rng, cfg.time_dim, m))
        self.add_param("t_b1", np.zeros(m))
        self.add_param("t_w2", dense_init(rng, m, m))
        self.add_param("t_b2", np.zeros(m))
        for i in range(cfg.blocks):
            p = f"blocks.{i}."
            for name in ("wq", "wk", "wv"):
                self.add_param(p + name, dense_init(rng, m, m))
            self.add_param(p + "wo", dense_init(rng, m, m, gain=0.5))
            self.add_param(p + "w1", dense_init(rng, m, hidden))
            self.add_param(p + "b1", np.zeros(hidden))
            self.add_param(p + "w2", dense_init(rng, hidden, m, gain=0.5))
            self.add_param(p + "b2", np.zeros(m))
            # the edit branch starts silent so attaching an adapter changes nothing
            self.add_param(p + "kd", np.zeros((cfg.cond_dim, m)))
            self.add_param(p + "vd", np.zeros((cfg.cond_dim, m)))
        self.add_param("lambda_ca", np.ones(()))
        self.add_param("out_w", dense_init(rng, m, cfg.latent_dim, gain=0.1))
        self.add_param("out_b", np.zeros(cfg.latent_dim))

    def branch_parameter_names(self) -> list[str]:
        """Parameters owned by the edit-injection branch (trained with the adapter)."""
        names = [f"blocks.{i}.{k}" for i in range(self.config.blocks) for k in ("kd", "vd")]
        return names + ["lambda_ca"]

    def base_parameter_names(self) -> list[str]:
        branch = set(self.branch_parameter_names())
        return [k for k in self.params if k not in branch]

    def _injected(self, i: int) -> bool:
        sel = self.config.inject_blocks
        return sel is None or i in sel

    def predict_velocity(self, state: FlowState, source, E: Tensor | None = None,
                         lam: float | None = None) -> Tensor:
        """Velocity for latent tokens ``state.z`` (..., L, D_z) given a source image batch."""
        cfg = self.config
        p = self.params
        z = T.as_tensor(state.z)
        if z.shape[-2:] != (cfg.tokens, cfg.latent_dim):
            raise ShapeError(f"predict_velocity: latent shape {z.shape} does not match "
                             f"({cfg.tokens}, {cfg.latent_dim})")
        src = patchify(source, cfg.patch)
        if src.shape != z.shape:
            raise ShapeError(f"predict_velocity: source tokens {src.shape} vs latent {z.shape}")
        lat = z @ p["in_w"] + p["in_b"] + p["pos"]
        srch = src @ p["in_w"] + p["in_b"] + p["src_type"] + p["pos"]
        h = T.concat([lat, srch], axis=-2)
        t = np.asarray(state.t, dtype=np.float64)
        batched = t.ndim > 0 or z.ndim > 2
        tt = np.broadcast_to(t, z.shape[:-2]) if z.ndim > 2 else t.reshape(-1)
        temb = T.gelu(Tensor(timestep_features(tt, cfg.time_dim)) @ p["t_w1"] + p["t_b1"])
        temb = temb @ p["t_w2"] + p["t_b2"]
        if batched:
            temb = temb.reshape(*temb.shape[:-1], 1, cfg.width)
        h = h + temb
        scale = p["lambda_ca"] if lam is None else float(lam)
        for i in range(cfg.blocks):
            b = f"blocks.{i}."
            try:
                x = T.layer_norm(h)
                q = x @ p[b + "wq"]
                k = split_heads(x @ p[b + "wk"], cfg.heads)
                v = split_heads(x @ p[b + "wv"], cfg.heads)
                Z = merge_heads(attend(split_heads(q, cfg.heads), k, v))
                if E is not None and self._injected(i):
                    Z = inject(Z, q, E, p[b + "kd"], p[b + "vd"], scale, cfg.heads)
                h = h + Z @ p[b + "wo"]
                h = h + T.gelu(T.layer_norm(h) @ p[b + "w1"] + p[b + "b1"]) @ p[b + "w2"] + p[b + "b2"]
            except NumericError as exc:
                raise NumericError(f"backbone block {i}: {exc}") from exc
        out = T.layer_norm(h[..., : cfg.tokens, :]) @ p["out_w"] + p["out_b"]
        return out


def predict_velocity(state: FlowState, source, E, backbone: Backbone, lam: float | None = None) -> Tensor:
    return backbone.predict_velocity(state, source, E, lam)


VelocityFn = Callable[[Tensor, float], Tensor]


def sample(z1, source, E, backbone: Backbone | None, steps: int = 4, lam: float | None = None,
           velocity_fn: VelocityFn | None = None) -> tuple[Tensor, list[Tensor]]:
    """Euler integration from t=1 to t=0 on the grid ``t_k = 1 - k/steps``.

    Returns the final latent and, per step, the straight-line clean estimate
    ``z_{t_k} - t_k * v``. ``velocity_fn(z, t)`` replaces the backbone when given.
    """
    if steps < 1:
        raise ContractError(f"sample: steps must be >= 1, got {steps}")
    z = T.as_tensor(z1).detach()
    traj = []
    dt = 1.0 / steps
    with no_grad():
        for k in range(steps):
            t = 1.0 - k / steps
            if velocity_fn is not None:
                v = T.as_tensor(velocity_fn(z, t))
            else:
                v = backbone.predict_velocity(FlowState(z, t), source, E, lam)
            traj.append(z - v * t)
            z = z - v * dt
    return z, traj
