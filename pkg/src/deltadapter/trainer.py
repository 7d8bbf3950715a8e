"""Two-stage training, AdamW, test-time adaptation and checkpoints.

Stage ``pretrain`` fits the backbone as a conditional identity generator
(reconstruct the source image from noise given its own tokens, no edit
tokens). Stage ``adapter`` freezes the backbone and trains the adapter plus
the injection branch on single pairs: condition on ``(a, delta(a, a'))`` and
reconstruct ``a'``. ``joint`` trains everything.
"""
from __future__ import annotations

import copy
import dataclasses
import json
import logging
from dataclasses import asdict, dataclass
from typing import Callable

import numpy as np

from . import checkpoint as ckptio
from . import tensor as T
from .adapter import patch_weights, semantic_delta
from .errors import ConfigError, IncompatibleError, NumericError
from .flownet import FlowState, interpolate, recover_clean
from .model import EditModel, ModelConfig, apply_variant, canonical_variant
from .objectives import flow_loss, pred_delta, sdc_loss, total_loss
from .synth import Dataset
from .tensor import Tensor, no_grad
from .toyvision import patchify

log = logging.getLogger(__name__)

STAGES = ("pretrain", "adapter", "joint")


@dataclass(frozen=True)
class TrainConfig:
    stage: str = "adapter"
    lr: float = 1e-3
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.99
    eps: float = 1e-8
    batch_size: int = 16
    steps: int = 4000
    lambda_sdc: float = 1.0
    seed: int = 0
    variant: str = "full"
    clip_norm: float = 1.0
    freeze_lambda: bool = False
    # "uniform" weights the SDC term equally at every t; "linear" by (1 - t)
    sdc_weighting: str = "uniform"
    # TTA trains the injection branch too unless restricted to "adapter"
    tta_scope: str = "all"
    dataset: str = ""
    checkpoint: str = ""

    def validate(self) -> None:
        if self.stage not in STAGES:
            raise ConfigError(f"unknown stage {self.stage!r}")
        if self.lr <= 0 or self.steps < 0 or self.batch_size <= 0:
            raise ConfigError("lr and batch_size must be positive, steps non-negative")
        canonical_variant(self.variant)
        if self.sdc_weighting not in ("uniform", "linear"):
            raise ConfigError(f"unknown sdc_weighting {self.sdc_weighting!r}")
        if self.tta_scope not in ("all", "adapter"):
            raise ConfigError(f"unknown tta_scope {self.tta_scope!r}")

    def to_dict(self) -> dict:
        return asdict(self)


def make_variant(tag: str, model_cfg: ModelConfig | None = None,
                 train_cfg: TrainConfig | None = None) -> tuple[ModelConfig, TrainConfig]:
    """Model and training configuration for one of the ablation variants."""
    tag = canonical_variant(tag)
    model_cfg = apply_variant(model_cfg or ModelConfig(), tag)
    train_cfg = train_cfg or TrainConfig()
    lam = 0.0 if tag == "w/o L_sdc" else (train_cfg.lambda_sdc or 1.0)
    return model_cfg, dataclasses.replace(train_cfg, variant=tag, lambda_sdc=lam)


class AdamW:
    """Adam with decoupled weight decay: ``w -= lr * (wd * w + m_hat / (sqrt(v_hat) + eps))``."""

    def __init__(self, params: dict[str, Tensor], lr: float, betas=(0.9, 0.99),
                 eps: float = 1e-8, weight_decay: float = 0.01):
        self.params = params
        self.lr, self.betas, self.eps, self.weight_decay = lr, betas, eps, weight_decay
        self.m = {k: np.zeros(p.shape) for k, p in params.items()}
        self.v = {k: np.zeros(p.shape) for k, p in params.items()}
        self.t = 0

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.betas
        c1, c2 = 1.0 - b1 ** self.t, 1.0 - b2 ** self.t
        for k, p in self.params.items():
            g = p.grad if p.grad is not None else np.zeros(p.shape)
            m = self.m[k] = b1 * self.m[k] + (1.0 - b1) * g
            v = self.v[k] = b2 * self.v[k] + (1.0 - b2) * g * g
            p.data = np.asarray(p.data * (1.0 - self.lr * self.weight_decay)
                                - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps))

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {"opt.step": np.array([float(self.t)])}
        for k in self.params:
            out[f"opt.m.{k}"] = self.m[k].copy()
            out[f"opt.v.{k}"] = self.v[k].copy()
        return out

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        self.t = int(state["opt.step"][0])
        for k in self.params:
            self.m[k] = np.array(state[f"opt.m.{k}"], dtype=np.float64)
            self.v[k] = np.array(state[f"opt.v.{k}"], dtype=np.float64)


def clip_grad_norm(params: dict[str, Tensor], max_norm: float) -> float:
    total = float(np.sqrt(sum(float((p.grad * p.grad).sum()) for p in params.values() if p.grad is not None)))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / (total + 1e-12)
        for p in params.values():
            if p.grad is not None:
                p.grad = p.grad * scale
    return total


@dataclass
class Checkpoint:
    entries: dict[str, np.ndarray]

    @property
    def model_config(self) -> ModelConfig:
        return ModelConfig.from_dict(ckptio.decode_json(self.entries["meta.model_config"]))

    @property
    def train_config(self) -> TrainConfig:
        return TrainConfig(**ckptio.decode_json(self.entries["meta.train_config"]))

    @property
    def config_hash(self) -> str:
        return ckptio.decode_hex(self.entries["meta.config_hash"])

    @property
    def base_hash(self) -> str:
        return ckptio.decode_hex(self.entries["meta.base_hash"])

    @property
    def has_adapter(self) -> bool:
        return any(k.startswith("adapter.") for k in self.entries)

    @property
    def step(self) -> int:
        return int(self.entries["meta.step"][0])

    def params(self) -> dict[str, np.ndarray]:
        return {k: v for k, v in self.entries.items() if k.startswith(("backbone.", "adapter."))}

    def build_model(self, expect_hash: str | None = None) -> EditModel:
        if expect_hash is not None and expect_hash != self.config_hash:
            raise IncompatibleError(f"checkpoint config hash {self.config_hash} != expected {expect_hash}")
        model = EditModel(self.model_config, with_adapter=self.has_adapter)
        model.load_state_dict(self.entries)
        return model

    def copy(self) -> "Checkpoint":
        return Checkpoint({k: v.copy() for k, v in self.entries.items()})

    def save(self, path) -> None:
        ckptio.save(self.entries, path)

    @classmethod
    def load(cls, path) -> "Checkpoint":
        entries = ckptio.load(path)
        for key in ("meta.model_config", "meta.config_hash", "meta.base_hash"):
            if key not in entries:
                raise IncompatibleError(f"checkpoint lacks {key}")
        return cls(entries)


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    ckpt.save(path)


def load_checkpoint(path, expect_hash: str | None = None) -> Checkpoint:
    ckpt = Checkpoint.load(path)
    if expect_hash is not None and ckpt.config_hash != expect_hash:
        raise IncompatibleError(f"checkpoint config hash {ckpt.config_hash} != expected {expect_hash}")
    return ckpt


def _check_dataset(model: EditModel, ds: Dataset) -> None:
    e = model.config.encoder
    if (ds.height, ds.width, ds.channels, ds.patch) != (e.height, e.width, e.channels, e.patch):
        raise IncompatibleError(
            f"dataset layout {(ds.height, ds.width, ds.channels, ds.patch)} does not match encoder "
            f"{(e.height, e.width, e.channels, e.patch)}")


class PairBank:
    """Training pairs as stacked float64 arrays plus their frozen features."""

    def __init__(self, model: EditModel, sources: np.ndarray, targets: np.ndarray):
        self.sources = np.asarray(sources, dtype=np.float64)
        self.targets = np.asarray(targets, dtype=np.float64)
        with no_grad():
            self.f_src = model.encoder.encode(self.sources).tokens.data
            self.f_tgt = model.encoder.encode(self.targets).tokens.data
        layernorm = model.config.adapter.layernorm
        d = semantic_delta(Tensor(self.f_src), Tensor(self.f_tgt), layernorm)
        self.delta = d.delta.data
        self.weights = d.weights

    def __len__(self) -> int:
        return len(self.sources)

    @classmethod
    def from_dataset(cls, model: EditModel, ds: Dataset, indices=None) -> "PairBank":
        idx = ds.train_indices if indices is None else list(indices)
        if not idx:
            raise ConfigError("no training episodes in dataset")
        src = np.stack([ds.episodes[i].source for i in idx])
        tgt = np.stack([ds.episodes[i].target for i in idx])
        return cls(model, src, tgt)


class Trainer:
    def __init__(self, model: EditModel, cfg: TrainConfig, bank: PairBank,
                 rng: np.random.Generator | None = None):
        cfg.validate()
        self.model, self.cfg, self.bank = model, cfg, bank
        self.rng = rng or np.random.default_rng(cfg.seed)
        self.trainable = self._trainable()
        self.opt = AdamW(self.trainable, cfg.lr, (cfg.beta1, cfg.beta2), cfg.eps, cfg.weight_decay)
        self.step_count = 0
        self.history: list[dict[str, float]] = []

    def _trainable(self) -> dict[str, Tensor]:
        cfg, model = self.cfg, self.model
        bb = model.backbone.params
        if cfg.stage == "pretrain":
            names = model.backbone.base_parameter_names()
            out = {f"backbone.{k}": bb[k] for k in names}
        else:
            if model.adapter is None:
                raise ConfigError(f"stage {cfg.stage!r} needs an adapter")
            out = dict(model.adapter.named_parameters())
            names = list(bb) if cfg.stage == "joint" else model.backbone.branch_parameter_names()
            out.update({f"backbone.{k}": bb[k] for k in names})
        if cfg.freeze_lambda:
            out.pop("backbone.lambda_ca", None)
        return out

    # -- one step ---------------------------------------------------------
    def loss_on(self, idx: np.ndarray, z1: np.ndarray, t: np.ndarray):
        model, cfg, bank = self.model, self.cfg, self.bank
        src = bank.sources[idx]
        if cfg.stage == "pretrain":
            target, E = src, None
        else:
            target = bank.targets[idx]
            E = model.adapter.edit_tokens(Tensor(bank.f_src[idx]), Tensor(bank.f_tgt[idx]))
        z0 = patchify(target, model.config.encoder.patch).data
        state = interpolate(z0, z1, t)
        v_hat = model.backbone.predict_velocity(state, src, E)
        flow = flow_loss(v_hat, z0, z1)
        sdc = None
        if cfg.stage != "pretrain" and cfg.lambda_sdc != 0:
            z0_hat = recover_clean(Tensor(z1), v_hat)
            d_hat = pred_delta(src, z0_hat, model.encoder, model.config.adapter.layernorm,
                               f_a=Tensor(bank.f_src[idx]))
            weights = bank.weights[idx]
            if cfg.sdc_weighting == "linear":
                weights = weights * (1.0 - t)[:, None]
            sdc = sdc_loss(bank.delta[idx], d_hat, weights)
        return total_loss(flow, sdc, cfg.lambda_sdc)

    def train_step(self) -> dict[str, float]:
        cfg = self.cfg
        bank = self.bank
        L, D = self.model.config.backbone.tokens, self.model.config.backbone.latent_dim
        idx = self.rng.integers(0, len(bank), size=cfg.batch_size)
        z1 = self.rng.standard_normal((cfg.batch_size, L, D))
        t = self.rng.uniform(0.0, 1.0, size=cfg.batch_size)
        losses = self.loss_on(idx, z1, t)
        if not np.isfinite(losses.total.item()):
            raise NumericError(f"non-finite loss at step {self.step_count}")
        self.opt.zero_grad()
        for p in self.model.named_parameters().values():
            p.grad = None
        T.backward(losses.total)
        gnorm = clip_grad_norm(self.trainable, cfg.clip_norm)
        with no_grad():
            self.opt.step()
        self.step_count += 1
        rec = {"step": self.step_count, **losses.values(), "grad_norm": gnorm}
        self.history.append(rec)
        return rec

    def run(self, steps: int | None = None, callback: Callable[[dict], None] | None = None) -> list[dict]:
        n = self.cfg.steps - self.step_count if steps is None else steps
        out = []
        for _ in range(max(n, 0)):
            try:
                rec = self.train_step()
            except NumericError as exc:
                raise NumericError(f"step {self.step_count}: {exc}") from exc
            out.append(rec)
            if callback is not None:
                callback(rec)
        return out

    # -- checkpoints ------------------------------------------------------
    def checkpoint(self) -> Checkpoint:
        mc = self.model.config
        entries = dict(self.model.state_dict())
        entries.update(self.opt.state_dict())
        entries["rng.pcg64"] = ckptio.encode_rng(self.rng)
        entries["meta.step"] = np.array([float(self.step_count)])
        entries["meta.config_hash"] = ckptio.encode_hex(mc.config_hash())
        entries["meta.base_hash"] = ckptio.encode_hex(mc.base_hash())
        entries["meta.model_config"] = ckptio.encode_json(mc.to_dict())
        entries["meta.train_config"] = ckptio.encode_json(self.cfg.to_dict())
        return Checkpoint(entries)

    @classmethod
    def resume(cls, ckpt: Checkpoint, bank_or_dataset) -> "Trainer":
        model = ckpt.build_model()
        bank = bank_or_dataset
        if isinstance(bank_or_dataset, Dataset):
            _check_dataset(model, bank_or_dataset)
            bank = PairBank.from_dataset(model, bank_or_dataset)
        tr = cls(model, ckpt.train_config, bank, ckptio.decode_rng(ckpt.entries["rng.pcg64"]))
        tr.opt.load_state_dict(ckpt.entries)
        tr.step_count = ckpt.step
        return tr


# -- stage entry points -----------------------------------------------------
def pretrain_trainer(cfg: TrainConfig, dataset: Dataset, model_cfg: ModelConfig | None = None) -> Trainer:
    """Trainer for stage 1: the backbone as a conditional identity generator.

    Both exemplar sources and targets of the training split serve as identity
    examples; no edit tokens are used.
    """
    cfg = dataclasses.replace(cfg, stage="pretrain")
    model = EditModel(model_cfg or ModelConfig(), with_adapter=False)
    _check_dataset(model, dataset)
    idx = dataset.train_indices
    if not idx:
        raise ConfigError("no training episodes in dataset")
    imgs = np.concatenate([np.stack([dataset.episodes[i].source for i in idx]),
                           np.stack([dataset.episodes[i].target for i in idx])])
    return Trainer(model, cfg, PairBank(model, imgs, imgs))


def pretrain_backbone(cfg: TrainConfig, dataset: Dataset, model_cfg: ModelConfig | None = None,
                      callback=None) -> Checkpoint:
    tr = pretrain_trainer(cfg, dataset, model_cfg)
    tr.run(callback=callback)
    return tr.checkpoint()


def adapter_trainer(cfg: TrainConfig, backbone_ckpt: Checkpoint, dataset: Dataset | PairBank,
                    model_cfg: ModelConfig | None = None) -> Trainer:
    if cfg.stage == "pretrain":
        cfg = dataclasses.replace(cfg, stage="adapter")
    base_cfg = backbone_ckpt.model_config
    model_cfg = model_cfg or apply_variant(base_cfg, cfg.variant)
    if model_cfg.base_hash() != backbone_ckpt.base_hash:
        raise IncompatibleError("backbone checkpoint does not match the model configuration "
                                f"({backbone_ckpt.base_hash} != {model_cfg.base_hash()})")
    model = EditModel(model_cfg, with_adapter=True)
    model.backbone.load_state_dict(backbone_ckpt.entries)
    bank = dataset
    if isinstance(dataset, Dataset):
        _check_dataset(model, dataset)
        bank = PairBank.from_dataset(model, dataset)
    return Trainer(model, cfg, bank)


def train_adapter(cfg: TrainConfig, backbone_ckpt: Checkpoint, dataset: Dataset,
                  model_cfg: ModelConfig | None = None, callback=None) -> Checkpoint:
    tr = adapter_trainer(cfg, backbone_ckpt, dataset, model_cfg)
    tr.run(callback=callback)
    return tr.checkpoint()


def tta(ckpt: Checkpoint, pair: tuple[np.ndarray, np.ndarray], steps: int = 20,
        lr: float = 5e-4, seed: int = 0, scope: str | None = None,
        warm_moments: bool = False, noise_draws: int = 16) -> Checkpoint:
    """Fine-tune the adapter on one exemplar pair.

    Each step averages the objective over ``noise_draws`` (noise, timestep)
    draws of that single pair. The input checkpoint is never modified;
    backbone weights outside the injection branch stay fixed. With
    ``warm_moments`` the optimizer continues from the checkpoint's moments.
    """
    if steps == 0:
        return ckpt.copy()
    model = ckpt.build_model()
    if model.adapter is None:
        raise IncompatibleError("tta needs a checkpoint with adapter weights")
    base = ckpt.train_config
    cfg = dataclasses.replace(base, stage="adapter", lr=lr, batch_size=noise_draws, steps=steps, seed=seed,
                              tta_scope=scope or base.tta_scope)
    a, a2 = (np.asarray(x, dtype=np.float64)[None] for x in pair)
    tr = Trainer(model, cfg, PairBank(model, a, a2))
    if cfg.tta_scope == "adapter":
        tr.trainable = dict(model.adapter.named_parameters())
        tr.opt = AdamW(tr.trainable, cfg.lr, (cfg.beta1, cfg.beta2), cfg.eps, cfg.weight_decay)
    if warm_moments and all(f"opt.m.{k}" in ckpt.entries for k in tr.trainable):
        tr.opt.load_state_dict(ckpt.entries)
    tr.run(steps)
    return tr.checkpoint()


def pair_loss(ckpt_or_model, pair, seed: int = 0, draws: int = 8, lambda_sdc: float = 1.0) -> float:
    """Mean full objective on one pair over fixed noise/timestep draws."""
    model = ckpt_or_model.build_model() if isinstance(ckpt_or_model, Checkpoint) else ckpt_or_model
    a, a2 = (np.asarray(x, dtype=np.float64)[None] for x in pair)
    cfg = TrainConfig(stage="adapter", lambda_sdc=lambda_sdc, batch_size=draws)
    tr = Trainer(model, cfg, PairBank(model, a, a2))
    rng = np.random.default_rng(seed)
    L, D = model.config.backbone.tokens, model.config.backbone.latent_dim
    z1 = rng.standard_normal((draws, L, D))
    t = rng.uniform(0, 1, draws)
    with no_grad():
        return tr.loss_on(np.zeros(draws, dtype=int), z1, t).total.item()


def parameter_report(model_cfg: ModelConfig) -> dict[str, int]:
    model = EditModel(model_cfg)
    return {
        "adapter": model.adapter.num_parameters(),
        "projection": model.adapter.projection_parameter_count(),
        "injection_branch": sum(model.backbone.params[k].size for k in model.backbone.branch_parameter_names()),
    }
