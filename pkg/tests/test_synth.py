import struct
import zlib

import numpy as np
import pytest

from deltadapter.adapter import semantic_delta
from deltadapter.errors import ChecksumError, ConfigError, ContractError, MagicError, VersionError
from deltadapter.synth import (FAMILIES, SPLIT_EVAL_SEEN, SPLIT_EVAL_UNSEEN, SPLIT_TRAIN, DataConfig,
                               EditSpec, apply_edit, dump_dataset, episode_seed, gen_base, gen_dataset,
                               load_dataset, make_episode, make_spec, parse_dataset, save_dataset)
from deltadapter.toyvision import FrozenEncoder


def test_gen_base_deterministic_and_in_range():
    a, b = gen_base(17), gen_base(17)
    assert a.tobytes() == b.tobytes()
    assert a.dtype == np.float32 and a.shape == (16, 16, 3)
    assert a.min() >= 0.0 and a.max() <= 1.0


def test_gen_base_scenes_non_degenerate():
    distinct = [len(np.unique(gen_base(s).reshape(-1, 3), axis=0)) >= 2 for s in range(1000)]
    assert np.mean(distinct) >= 0.99


def test_invert_is_involution():
    img = gen_base(3)
    once, _ = apply_edit(img, make_spec("invert", 0))
    twice, _ = apply_edit(once, make_spec("invert", 0))
    np.testing.assert_array_equal(twice, img)


def test_grayscale_fixed_point():
    gray = np.repeat(np.linspace(0, 1, 16 * 16, dtype=np.float32).reshape(16, 16, 1), 3, axis=-1)
    out, mask = apply_edit(gray, make_spec("grayscale", 0))
    np.testing.assert_array_equal(out, gray)
    assert not mask.any()


def test_border_mask_is_frame():
    img = np.full((16, 16, 3), 0.5, dtype=np.float32)
    spec = EditSpec("border", (0.1, 0.9, 0.2), 0)
    out, mask = apply_edit(img, spec)
    assert mask.sum() == 60 == 4 * (16 - 1)
    assert mask[0].all() and mask[-1].all() and mask[:, 0].all() and mask[:, -1].all()
    assert not mask[1:-1, 1:-1].any()


@pytest.mark.parametrize("family", FAMILIES)
def test_every_family_deterministic_and_total(family):
    img = gen_base(11)
    spec = make_spec(family, 5)
    a, ma = apply_edit(img, spec)
    b, mb = apply_edit(img, spec)
    assert a.tobytes() == b.tobytes() and np.array_equal(ma, mb)
    assert a.min() >= 0.0 and a.max() <= 1.0 and a.dtype == np.float32


def test_family_formulas():
    img = gen_base(21).astype(np.float64)
    f32 = lambda x: x.astype(np.float32)
    np.testing.assert_array_equal(apply_edit(img, EditSpec("brightness", (0.25,)))[0], f32(np.clip(img + 0.25, 0, 1)))
    g = 0.299 * img[..., 0] + 0.587 * img[..., 1] + 0.114 * img[..., 2]
    np.testing.assert_array_equal(apply_edit(img, EditSpec("grayscale"))[0], f32(np.stack([g] * 3, -1)))
    np.testing.assert_array_equal(apply_edit(img, EditSpec("channel-swap"))[0], f32(img[..., ::-1]))
    np.testing.assert_array_equal(apply_edit(img, EditSpec("red-tint", (0.4,)))[0],
                                  f32(0.6 * img + 0.4 * np.array([1.0, 0, 0])))
    dark = img.copy()
    dark[:8] *= 0.5
    np.testing.assert_array_equal(apply_edit(img, EditSpec("top-half-darken", (0.5,)))[0], f32(dark))


def test_checkerboard_cells():
    img = np.zeros((16, 16, 3), dtype=np.float32)
    out, mask = apply_edit(img, EditSpec("checkerboard", (1.0, 1.0, 1.0)))
    assert mask[0:4, 0:4].all() and not mask[0:4, 4:8].any() and mask[4:8, 4:8].all()
    assert out[0, 0, 0] == 0.5


def test_unknown_family():
    with pytest.raises(ContractError):
        EditSpec("sepia")
    with pytest.raises(ContractError):
        make_spec("sepia", 0)


def test_episode_exactness():
    ep = make_episode("red-tint", 99, SPLIT_TRAIN)
    assert apply_edit(ep.source, ep.spec)[0].tobytes() == ep.target.tobytes()
    assert apply_edit(ep.query, ep.spec)[0].tobytes() == ep.query_target.tobytes()
    assert not np.array_equal(ep.source, ep.query)


def test_spec_params_in_documented_ranges():
    for s in range(200):
        assert 0.15 <= make_spec("brightness", s).params[0] <= 0.35
        assert 0.3 <= make_spec("red-tint", s).params[0] <= 0.5
        assert 0.3 <= make_spec("top-half-darken", s).params[0] <= 0.6


def test_gen_dataset_contract():
    cfg = DataConfig(train_episodes=500, eval_episodes=100, seed=4)
    ds = gen_dataset(cfg)
    assert len(ds) == 600
    train = ds.train_indices
    assert len(train) == 500
    assert {ds.episodes[i].spec.family for i in train} <= set(cfg.seen)
    assert not {ds.episodes[i].spec.family for i in train} & set(cfg.unseen)
    for i in ds.indices(SPLIT_EVAL_SEEN):
        assert ds.episodes[i].spec.family in cfg.seen
    for i in ds.indices(SPLIT_EVAL_UNSEEN):
        assert ds.episodes[i].spec.family in cfg.unseen
    assert {ds.episodes[i].spec.family for i in ds.indices(SPLIT_EVAL_UNSEEN)} == set(cfg.unseen)


def test_episode_reproducible_from_seed_and_index():
    ds = gen_dataset(DataConfig(train_episodes=10, eval_episodes=6, seed=8))
    ep = ds.episodes[12]
    assert ep.seed == episode_seed(8, 12)
    again = make_episode(ep.spec.family, ep.seed, ep.split)
    assert again.query_target.tobytes() == ep.query_target.tobytes()


def test_overlapping_splits_rejected():
    with pytest.raises(ConfigError):
        gen_dataset(DataConfig(seen=("invert", "border"), unseen=("border",)))
    with pytest.raises(ConfigError):
        gen_dataset(DataConfig(seen=("sepia",)))


def test_dfd1_roundtrip_and_determinism(tmp_path, tiny_data):
    p1, p2 = tmp_path / "a.dfd1", tmp_path / "b.dfd1"
    save_dataset(tiny_data, p1)
    from conftest import TINY_DATA
    save_dataset(gen_dataset(TINY_DATA), p2)
    assert p1.read_bytes() == p2.read_bytes()
    back = load_dataset(p1)
    assert dump_dataset(back) == p1.read_bytes()
    for x, y in zip(tiny_data.episodes, back.episodes):
        assert x.spec == y.spec and x.split == y.split and x.seed == y.seed
        for name in ("source", "target", "query", "query_target", "mask_source", "mask_query"):
            assert getattr(x, name).tobytes() == getattr(y, name).tobytes()


def test_dfd1_layout(tiny_data):
    raw = dump_dataset(tiny_data)
    assert raw[:4] == b"DFD1"
    assert struct.unpack_from("<III", raw, 0)[1:] == (1, len(tiny_data))
    assert struct.unpack_from("<HHHH", raw, 12) == (8, 8, 3, 4)
    assert struct.unpack("<I", raw[-4:])[0] == zlib.crc32(raw[:-4])


def test_dfd1_errors(tiny_data):
    raw = dump_dataset(tiny_data)
    with pytest.raises(MagicError):
        parse_dataset(b"XXXX" + raw[4:])
    with pytest.raises(ChecksumError):
        parse_dataset(raw[: len(raw) // 2])
    flipped = bytearray(raw)
    flipped[100] ^= 0xFF
    with pytest.raises(ChecksumError):
        parse_dataset(bytes(flipped))
    v2 = bytearray(raw[:-4])
    v2[4:8] = struct.pack("<I", 2)
    v2 = bytes(v2) + struct.pack("<I", zlib.crc32(bytes(v2)))
    with pytest.raises(VersionError):
        parse_dataset(v2)
    assert len({MagicError.tag, ChecksumError.tag, VersionError.tag}) == 3


def test_delta_separability():
    enc = FrozenEncoder()
    fams = FAMILIES
    deltas, labels = [], []
    for i in range(100):
        fam = fams[i % len(fams)]
        ep = make_episode(fam, episode_seed(5, i), SPLIT_TRAIN)
        d = semantic_delta(enc.encode(ep.source.astype(float)), enc.encode(ep.target.astype(float))).delta.data
        deltas.append(d.reshape(-1))
        labels.append(fam)
    X = np.array(deltas)
    X /= np.maximum(np.linalg.norm(X, axis=1, keepdims=True), 1e-12)
    sim = X @ X.T
    lab = np.array(labels)
    same = lab[:, None] == lab[None, :]
    off = ~np.eye(len(lab), dtype=bool)
    within, across = sim[same & off].mean(), sim[~same].mean()
    assert within - across >= 0.2, (within, across)
