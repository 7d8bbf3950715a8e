"""Encoder + backbone + adapter bundle and the ablation variants."""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .adapter import AdapterConfig, DeltaAdapter
from .errors import ConfigError
from .flownet import Backbone, BackboneConfig, sample
from .tensor import Tensor, no_grad
from .toyvision import EncoderConfig, FrozenEncoder, emit_image, patchify, unpatchify

VARIANTS = (
    "full",
    "w/o semantic delta",
    "w/o layernorm",
    "w/o gated residual",
    "w/o perceiver",
    "w/o per-token proj.",
    "w/o L_sdc",
)
_ALIASES = {"w/o 𝓛_sdc": "w/o L_sdc", "w/o l_sdc": "w/o L_sdc", "ours": "full"}


def canonical_variant(tag: str) -> str:
    tag = _ALIASES.get(tag, _ALIASES.get(tag.lower(), tag))
    if tag not in VARIANTS:
        raise ConfigError(f"unknown variant {tag!r}; expected one of {list(VARIANTS)}")
    return tag


@dataclass(frozen=True)
class ModelConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    adapter: AdapterConfig = field(default_factory=AdapterConfig)
    variant: str = "full"

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        bb = dict(d["backbone"])
        if bb.get("inject_blocks") is not None:
            bb["inject_blocks"] = tuple(bb["inject_blocks"])
        return cls(EncoderConfig(**d["encoder"]), BackboneConfig(**bb),
                   AdapterConfig(**d["adapter"]), d.get("variant", "full"))

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def base_hash(self) -> str:
        """Hash of the parts a stage-1 checkpoint fixes (encoder and backbone)."""
        blob = json.dumps({"encoder": asdict(self.encoder), "backbone": asdict(self.backbone)},
                          sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def validate(self) -> None:
        e, b, a = self.encoder, self.backbone, self.adapter
        if b.tokens != e.tokens or b.latent_dim != e.patch_dim or b.patch != e.patch:
            raise ConfigError("backbone token layout does not match the encoder/codec")
        if a.feature_dim != e.dim:
            raise ConfigError("adapter feature_dim must equal encoder dim")
        if a.cond_dim != b.cond_dim:
            raise ConfigError("adapter cond_dim must equal backbone cond_dim")


def apply_variant(cfg: ModelConfig, tag: str) -> ModelConfig:
    """Return ``cfg`` with exactly the mechanism named by ``tag`` switched off."""
    tag = canonical_variant(tag)
    ad = cfg.adapter
    changes = {
        "full": {},
        "w/o semantic delta": {"condition_on": "pair"},
        "w/o layernorm": {"layernorm": False},
        "w/o gated residual": {"gated_residual": False},
        "w/o perceiver": {"resampler": "pool"},
        "w/o per-token proj.": {"per_token": False},
        "w/o L_sdc": {},
    }[tag]
    base = dataclasses.replace(ad, condition_on="delta", layernorm=True, gated_residual=True,
                               resampler="perceiver", per_token=True)
    return dataclasses.replace(cfg, adapter=dataclasses.replace(base, **changes), variant=tag)


class EditModel:
    """Frozen encoder, flow backbone and (optionally) a delta adapter."""

    def __init__(self, config: ModelConfig | None = None, with_adapter: bool = True):
        self.config = cfg = config or ModelConfig()
        cfg.validate()
        self.encoder = FrozenEncoder(cfg.encoder)
        self.backbone = Backbone(cfg.backbone)
        self.adapter = DeltaAdapter(cfg.adapter) if with_adapter else None

    @property
    def image_shape(self) -> tuple[int, int, int]:
        e = self.config.encoder
        return e.height, e.width, e.channels

    def named_parameters(self) -> dict[str, Tensor]:
        out = self.backbone.named_parameters()
        if self.adapter is not None:
            out.update(self.adapter.named_parameters())
        return out

    def state_dict(self) -> dict[str, np.ndarray]:
        out = self.backbone.state_dict()
        if self.adapter is not None:
            out.update(self.adapter.state_dict())
        return out

    def load_state_dict(self, state: dict[str, np.ndarray], strict_adapter: bool = True) -> None:
        self.backbone.load_state_dict(state)
        if self.adapter is not None and (strict_adapter or any(k.startswith("adapter.") for k in state)):
            self.adapter.load_state_dict(state)

    def features(self, img):
        return self.encoder.encode(np.asarray(img, dtype=np.float64))

    def edit_tokens(self, a, a2) -> Tensor:
        return self.adapter.edit_tokens(self.features(a), self.features(a2))

    def edit(self, a, a2, b, z1: np.ndarray | None = None, steps: int = 4,
             lam: float | None = None, rng: np.random.Generator | None = None,
             use_adapter: bool = True) -> np.ndarray:
        """Apply the exemplar edit ``a -> a2`` to ``b``; returns clamped images (..., H, W, C)."""
        h, w, _ = self.image_shape
        b = np.asarray(b, dtype=np.float64)
        lead = b.shape[:-3]
        if z1 is None:
            rng = rng or np.random.default_rng(0)
            z1 = rng.standard_normal((*lead, self.config.backbone.tokens, self.config.backbone.latent_dim))
        with no_grad():
            E = self.edit_tokens(a, a2) if (use_adapter and self.adapter is not None) else None
            z0, _ = sample(Tensor(z1), b, E, self.backbone, steps=steps, lam=lam)
        return emit_image(unpatchify(z0, h, w, self.config.encoder.patch))
