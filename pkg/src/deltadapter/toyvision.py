"""Frozen seeded patch encoder and the exact image <-> token codec.

Images are ``(..., H, W, C)`` float arrays in [0, 1]. The codec is a pure
rearrangement, so it is lossless and differentiable; the latent space of the
flow model is the raw patch tokens.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .errors import CodecError, ShapeError
from .layers import attend, dense_init, merge_heads, sinusoidal_table, split_heads
from .tensor import Tensor


def patchify(img, patch: int) -> Tensor:
    """Split ``(..., H, W, C)`` into raster-ordered tokens ``(..., L, P*P*C)``."""
    img = T.as_tensor(img)
    *lead, h, w, c = img.shape
    if h % patch or w % patch:
        raise CodecError(f"patchify: image {h}x{w} not divisible by patch size {patch}")
    gh, gw = h // patch, w // patch
    nd = len(lead)
    x = img.reshape(*lead, gh, patch, gw, patch, c)
    x = x.transpose(*range(nd), nd, nd + 2, nd + 1, nd + 3, nd + 4)
    return x.reshape(*lead, gh * gw, patch * patch * c)


def unpatchify(tokens, height: int, width: int, patch: int) -> Tensor:
    """Exact inverse of :func:`patchify`. No clamping."""
    tokens = T.as_tensor(tokens)
    *lead, n, d = tokens.shape
    gh, gw = height // patch, width // patch
    if height % patch or width % patch or n != gh * gw:
        raise CodecError(f"unpatchify: {n} tokens do not tile a {height}x{width} image "
                         f"with patch size {patch}")
    c = d // (patch * patch)
    if c * patch * patch != d:
        raise CodecError(f"unpatchify: token width {d} is not patch*patch*channels")
    nd = len(lead)
    x = tokens.reshape(*lead, gh, gw, patch, patch, c)
    x = x.transpose(*range(nd), nd, nd + 2, nd + 1, nd + 3, nd + 4)
    return x.reshape(*lead, height, width, c)


def emit_image(x) -> np.ndarray:
    """Clamp a decoded tensor to a displayable image; only used on final outputs."""
    data = x.data if isinstance(x, Tensor) else np.asarray(x)
    return np.clip(data, 0.0, 1.0)


def to_ppm(img) -> bytes:
    """8-bit binary PPM (P6) preview: header ``P6\\n<W> <H>\\n255\\n`` then RGB rows."""
    x = emit_image(img)
    if x.ndim != 3 or x.shape[-1] != 3:
        raise CodecError(f"to_ppm: expected (H, W, 3), got {x.shape}")
    h, w, _ = x.shape
    body = np.round(x * 255.0).astype(np.uint8).tobytes()
    return f"P6\n{w} {h}\n255\n".encode("ascii") + body


@dataclass(frozen=True)
class EncoderConfig:
    height: int = 16
    width: int = 16
    channels: int = 3
    patch: int = 4
    dim: int = 32
    blocks: int = 1
    heads: int = 2
    seed: int = 0
    positional: bool = True

    @property
    def tokens(self) -> int:
        return (self.height // self.patch) * (self.width // self.patch)

    @property
    def patch_dim(self) -> int:
        return self.patch * self.patch * self.channels

    def fingerprint(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class PatchFeatures:
    tokens: Tensor
    fingerprint: str

    @property
    def shape(self):
        return self.tokens.shape


def _frozen(arr: np.ndarray) -> Tensor:
    arr = np.ascontiguousarray(arr, dtype=np.float64)
    arr.setflags(write=False)
    return _const(arr)


def _const(arr: np.ndarray) -> Tensor:
    t = Tensor.__new__(Tensor)
    t.data = arr
    t.grad = None
    t.requires_grad = False
    t._parents = ()
    t._backward = None
    t.op = "frozen"
    return t


class FrozenEncoder:
    """Seeded random patch encoder standing in for a pre-trained vision model.

    ``tokens = blocks(patchify(img) @ W_embed + pos_table)``; each block is a
    pre-norm self-attention followed by a two-layer GELU MLP, both residual.
    Weights are read-only arrays: gradients pass through to the image but
    can never be applied to the encoder itself.
    """

    def __init__(self, config: EncoderConfig | None = None):
        self.config = cfg = config or EncoderConfig()
        if cfg.height % cfg.patch or cfg.width % cfg.patch:
            raise CodecError("encoder: image size not divisible by patch size")
        rng = np.random.default_rng(cfg.seed)
        d = cfg.dim
        self.embed = _frozen(dense_init(rng, cfg.patch_dim, d))
        pos = sinusoidal_table(cfg.tokens, d) if cfg.positional else np.zeros((cfg.tokens, d))
        self.pos = _frozen(pos)
        self.blocks = []
        for _ in range(cfg.blocks):
            self.blocks.append({
                "wq": _frozen(dense_init(rng, d, d)),
                "wk": _frozen(dense_init(rng, d, d)),
                "wv": _frozen(dense_init(rng, d, d)),
                "wo": _frozen(dense_init(rng, d, d, gain=0.5)),
                "w1": _frozen(dense_init(rng, d, 2 * d)),
                "w2": _frozen(dense_init(rng, 2 * d, d, gain=0.5)),
            })
        self.fingerprint = cfg.fingerprint()

    def weights(self) -> dict[str, np.ndarray]:
        out = {"embed": self.embed.data, "pos": self.pos.data}
        for i, blk in enumerate(self.blocks):
            out.update({f"block{i}.{k}": v.data for k, v in blk.items()})
        return out

    def encode(self, img) -> PatchFeatures:
        cfg = self.config
        img = T.as_tensor(img)
        if img.shape[-3:] != (cfg.height, cfg.width, cfg.channels):
            raise ShapeError(f"encode: image shape {img.shape[-3:]} does not match encoder "
                             f"({cfg.height}, {cfg.width}, {cfg.channels})")
        x = patchify(img, cfg.patch) @ self.embed + self.pos
        for blk in self.blocks:
            h = T.layer_norm(x)
            q = split_heads(h @ blk["wq"], cfg.heads)
            k = split_heads(h @ blk["wk"], cfg.heads)
            v = split_heads(h @ blk["wv"], cfg.heads)
            x = x + merge_heads(attend(q, k, v)) @ blk["wo"]
            x = x + T.gelu(T.layer_norm(x) @ blk["w1"]) @ blk["w2"]
        return PatchFeatures(x, self.fingerprint)

    __call__ = encode


def encode(img, enc: FrozenEncoder) -> PatchFeatures:
    return enc.encode(img)
