"""Procedural exemplar-pair benchmark and the DFD1 container.

Edit families (id: name, formula on RGB in [0, 1]):

    0 invert           x -> 1 - x
    1 brightness       x -> clip(x + beta, 0, 1),          beta in [0.15, 0.35]
    2 grayscale        every channel -> 0.299 R + 0.587 G + 0.114 B
    3 channel-swap     (R, G, B) -> (B, G, R)
    4 red-tint         x -> (1 - s) x + s (1, 0, 0),       s in [0.3, 0.5]
    5 border           1-px frame overwritten with color c
    6 top-half-darken  rows < H/2 scaled by (1 - d),       d in [0.3, 0.6]
    7 checkerboard     P x P cells with even (row + col) blended 50/50 with color c

Images are float32-valued and base images sit on the 2^-24 grid. Every edit
is evaluated in float64 and rounded to float32, so re-applying a spec to a
stored image reproduces the stored target bit for bit. Family parameters are a deterministic function of
``(episode seed, family)``, which lets the evaluation oracle instantiate every
candidate family for an episode.
"""
from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ChecksumError, ConfigError, ContractError, FormatError, MagicError, VersionError

FAMILIES = ("invert", "brightness", "grayscale", "channel-swap", "red-tint",
            "border", "top-half-darken", "checkerboard")
FAMILY_ID = {name: i for i, name in enumerate(FAMILIES)}
LOCAL_FAMILIES = ("border", "top-half-darken", "checkerboard")
IDENTITY = "identity"

SPLIT_TRAIN, SPLIT_EVAL_SEEN, SPLIT_EVAL_UNSEEN = 0, 1, 2
SPLIT_NAMES = {SPLIT_TRAIN: "train", SPLIT_EVAL_SEEN: "seen", SPLIT_EVAL_UNSEEN: "unseen"}

MASK_TOL = 1e-6


@dataclass(frozen=True)
class EditSpec:
    family: str
    params: tuple[float, ...] = ()
    seed: int = 0

    def __post_init__(self):
        if self.family not in FAMILY_ID and self.family != IDENTITY:
            raise ContractError(f"unknown edit family {self.family!r}")

    @property
    def family_id(self) -> int:
        return FAMILY_ID.get(self.family, len(FAMILIES))


def _f32(x) -> float:
    return float(np.float32(x))


def make_spec(family: str, seed: int) -> EditSpec:
    """Instantiate ``family`` with parameters drawn from ``(seed, family id)``."""
    if family == IDENTITY:
        return EditSpec(IDENTITY, (), seed)
    if family not in FAMILY_ID:
        raise ContractError(f"unknown edit family {family!r}")
    rng = np.random.default_rng([seed, FAMILY_ID[family]])
    if family == "brightness":
        params = (rng.uniform(0.15, 0.35),)
    elif family == "red-tint":
        params = (rng.uniform(0.3, 0.5),)
    elif family == "top-half-darken":
        params = (rng.uniform(0.3, 0.6),)
    elif family in ("border", "checkerboard"):
        params = tuple(rng.uniform(0.0, 1.0, 3))
    else:
        params = ()
    return EditSpec(family, tuple(_f32(p) for p in params), seed)


def edit_mask(before: np.ndarray, after: np.ndarray) -> np.ndarray:
    return (np.abs(after.astype(np.float64) - before.astype(np.float64)) > MASK_TOL).any(axis=-1)


def apply_edit(img: np.ndarray, spec: EditSpec, patch: int = 4) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(edited image, changed-pixel mask)``; deterministic and total."""
    x = np.asarray(img, dtype=np.float64)
    h, w, _ = x.shape
    f, p = spec.family, spec.params
    if f == IDENTITY:
        y = x.copy()
    elif f == "invert":
        y = 1.0 - x
    elif f == "brightness":
        y = np.clip(x + p[0], 0.0, 1.0)
    elif f == "grayscale":
        g = 0.299 * x[..., 0] + 0.587 * x[..., 1] + 0.114 * x[..., 2]
        y = np.repeat(g[..., None], 3, axis=-1)
    elif f == "channel-swap":
        y = x[..., ::-1].copy()
    elif f == "red-tint":
        y = (1.0 - p[0]) * x + p[0] * np.array([1.0, 0.0, 0.0])
    elif f == "border":
        y = x.copy()
        color = np.array(p[:3])
        y[0, :], y[-1, :], y[:, 0], y[:, -1] = color, color, color, color
    elif f == "top-half-darken":
        y = x.copy()
        y[: h // 2] *= 1.0 - p[0]
    elif f == "checkerboard":
        y = x.copy()
        rows = (np.arange(h) // patch)[:, None]
        cols = (np.arange(w) // patch)[None, :]
        cells = (rows + cols) % 2 == 0
        y[cells] = 0.5 * y[cells] + 0.5 * np.array(p[:3])
    else:
        raise ContractError(f"unknown edit family {f!r}")
    y = y.astype(np.float32)
    return y, edit_mask(img, y)


def gen_base(seed: int, height: int = 16, width: int = 16) -> np.ndarray:
    """Background fill plus 2-4 random axis-aligned rectangles or discs, float32 in [0, 1]."""
    rng = np.random.default_rng([seed, 0xBA5E])
    img = np.empty((height, width, 3))
    img[:] = rng.uniform(0.0, 1.0, 3)
    yy, xx = np.mgrid[0:height, 0:width]
    for _ in range(rng.integers(2, 5)):
        color = rng.uniform(0.0, 1.0, 3)
        if rng.random() < 0.5:
            y0, x0 = rng.integers(0, height - 2), rng.integers(0, width - 2)
            y1 = rng.integers(y0 + 2, height + 1)
            x1 = rng.integers(x0 + 2, width + 1)
            img[y0:y1, x0:x1] = color
        else:
            cy, cx = rng.uniform(0, height), rng.uniform(0, width)
            r = rng.uniform(2.0, max(height, width) / 3)
            img[(yy - cy) ** 2 + (xx - cx) ** 2 <= r * r] = color
    # snap to multiples of 2^-24 so 1 - x is exact in float32 (invert is an involution)
    return (np.round(img * 2.0 ** 24) / 2.0 ** 24).astype(np.float32)


@dataclass
class Episode:
    source: np.ndarray
    target: np.ndarray
    query: np.ndarray
    query_target: np.ndarray
    mask_source: np.ndarray
    mask_query: np.ndarray
    spec: EditSpec
    split: int
    seed: int

    @property
    def split_name(self) -> str:
        return SPLIT_NAMES[self.split]


def episode_seed(dataset_seed: int, index: int) -> int:
    return int(np.random.SeedSequence([dataset_seed, index]).generate_state(1, np.uint64)[0])


def make_episode(family: str, seed: int, split: int, height: int = 16, width: int = 16,
                 patch: int = 4) -> Episode:
    spec = make_spec(family, seed)
    a = gen_base(seed * 2 % (2 ** 64), height, width)
    b = gen_base((seed * 2 + 1) % (2 ** 64), height, width)
    a2, ma = apply_edit(a, spec, patch)
    b2, mb = apply_edit(b, spec, patch)
    return Episode(a, a2, b, b2, ma, mb, spec, split, seed)


@dataclass(frozen=True)
class DataConfig:
    seen: tuple[str, ...] = ("brightness", "red-tint", "top-half-darken", "border")
    unseen: tuple[str, ...] = ("checkerboard", "invert")
    train_episodes: int = 2000
    eval_episodes: int = 200
    seed: int = 0
    height: int = 16
    width: int = 16
    patch: int = 4

    def validate(self) -> None:
        overlap = set(self.seen) & set(self.unseen)
        if overlap:
            raise ConfigError(f"seen and unseen families overlap: {sorted(overlap)}")
        for f in (*self.seen, *self.unseen):
            if f not in FAMILY_ID:
                raise ConfigError(f"unknown edit family {f!r}")
        if not self.seen:
            raise ConfigError("at least one seen family is required")


@dataclass
class Dataset:
    height: int
    width: int
    channels: int
    patch: int
    episodes: list[Episode] = field(default_factory=list)

    def indices(self, split: int) -> list[int]:
        return [i for i, e in enumerate(self.episodes) if e.split == split]

    @property
    def train_indices(self) -> list[int]:
        return self.indices(SPLIT_TRAIN)

    def families(self) -> list[str]:
        ids = sorted({e.spec.family_id for e in self.episodes})
        return [FAMILIES[i] for i in ids]

    def __len__(self) -> int:
        return len(self.episodes)


def gen_dataset(cfg: DataConfig) -> Dataset:
    """Training episodes from seen families, then evaluation episodes from seen and unseen.

    Episode ``i`` is reproducible from ``(cfg.seed, i)`` alone.
    """
    cfg.validate()
    eps = []
    eval_families = list(cfg.seen) + list(cfg.unseen)
    for i in range(cfg.train_episodes + cfg.eval_episodes):
        seed = episode_seed(cfg.seed, i)
        rng = np.random.default_rng([seed, 7])
        if i < cfg.train_episodes:
            family, split = cfg.seen[rng.integers(len(cfg.seen))], SPLIT_TRAIN
        else:
            family = eval_families[(i - cfg.train_episodes) % len(eval_families)]
            split = SPLIT_EVAL_SEEN if family in cfg.seen else SPLIT_EVAL_UNSEEN
        eps.append(make_episode(family, seed, split, cfg.height, cfg.width, cfg.patch))
    return Dataset(cfg.height, cfg.width, 3, cfg.patch, eps)


# -- DFD1 container -------------------------------------------------------
DFD_MAGIC = b"DFD1"
DFD_VERSION = 1


def _pack_mask(mask: np.ndarray) -> bytes:
    return np.packbits(mask.astype(np.uint8), axis=1).tobytes()


def _unpack_mask(buf: bytes, h: int, w: int) -> np.ndarray:
    row = (w + 7) // 8
    bits = np.frombuffer(buf, dtype=np.uint8).reshape(h, row)
    return np.unpackbits(bits, axis=1, count=w).astype(bool)


def dump_dataset(ds: Dataset) -> bytes:
    parts = [DFD_MAGIC, struct.pack("<II", DFD_VERSION, len(ds.episodes)),
             struct.pack("<HHHH", ds.height, ds.width, ds.channels, ds.patch)]
    for e in ds.episodes:
        params = np.asarray(e.spec.params, dtype="<f4")
        parts.append(struct.pack("<II", e.spec.family_id, params.size))
        parts.append(params.tobytes())
        parts.append(struct.pack("<QB", e.seed, e.split))
        for img in (e.source, e.target, e.query, e.query_target):
            parts.append(np.asarray(img, dtype="<f4").tobytes())
        parts.append(_pack_mask(e.mask_source))
        parts.append(_pack_mask(e.mask_query))
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def save_dataset(ds: Dataset, path) -> None:
    Path(path).write_bytes(dump_dataset(ds))


def parse_dataset(raw: bytes) -> Dataset:
    if len(raw) < 4 or raw[:4] != DFD_MAGIC:
        raise MagicError("DFD1: bad magic")
    if len(raw) < 8:
        raise ChecksumError("DFD1: truncated header")
    (version,) = struct.unpack_from("<I", raw, 4)
    if version != DFD_VERSION:
        raise VersionError(f"DFD1: unsupported version {version}")
    if len(raw) < 24:
        raise ChecksumError("DFD1: truncated file")
    body, (crc,) = raw[:-4], struct.unpack("<I", raw[-4:])
    if zlib.crc32(body) != crc:
        raise ChecksumError("DFD1: checksum mismatch")
    (count,) = struct.unpack_from("<I", raw, 8)
    h, w, c, p = struct.unpack_from("<HHHH", raw, 12)
    off = 20
    img_bytes = h * w * c * 4
    mask_bytes = h * ((w + 7) // 8)
    eps = []
    try:
        for _ in range(count):
            fid, npar = struct.unpack_from("<II", raw, off)
            off += 8
            params = tuple(float(v) for v in np.frombuffer(raw, "<f4", npar, off))
            off += 4 * npar
            seed, split = struct.unpack_from("<QB", raw, off)
            off += 9
            imgs = []
            for _ in range(4):
                imgs.append(np.frombuffer(raw, "<f4", h * w * c, off).reshape(h, w, c).astype(np.float32))
                off += img_bytes
            ma = _unpack_mask(raw[off:off + mask_bytes], h, w)
            off += mask_bytes
            mb = _unpack_mask(raw[off:off + mask_bytes], h, w)
            off += mask_bytes
            family = FAMILIES[fid] if fid < len(FAMILIES) else IDENTITY
            eps.append(Episode(*imgs, ma, mb, EditSpec(family, params, seed), split, seed))
    except (struct.error, ValueError, IndexError) as exc:
        raise FormatError(f"DFD1: malformed body: {exc}") from exc
    if off != len(body):
        raise FormatError("DFD1: trailing bytes after episodes")
    return Dataset(h, w, c, p, eps)


def load_dataset(path) -> Dataset:
    return parse_dataset(Path(path).read_bytes())
