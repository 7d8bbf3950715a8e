import dataclasses
import struct

import numpy as np
import pytest

from deltadapter import checkpoint as ckptio
from deltadapter.adapter import semantic_delta
from deltadapter.errors import ChecksumError, ConfigError, IncompatibleError, MagicError, NumericError
from deltadapter.flownet import interpolate, recover_clean
from deltadapter.model import VARIANTS, EditModel
from deltadapter.objectives import flow_loss, pred_delta, sdc_loss
from deltadapter.synth import DataConfig, gen_dataset
from deltadapter.tensor import Tensor, no_grad
from deltadapter.toyvision import patchify
from deltadapter.trainer import (AdamW, Checkpoint, Trainer, TrainConfig, adapter_trainer,
                                 clip_grad_norm, load_checkpoint, make_variant, pair_loss,
                                 parameter_report, pretrain_backbone, save_checkpoint, tta)

from conftest import ADA, PRE, tiny_model_config


def blob(ckpt):
    return ckptio.dump(ckpt.entries)


# -- optimizer ----------------------------------------------------------------
def test_adamw_single_step_by_hand():
    w = Tensor(1.0, requires_grad=True)
    opt = AdamW({"w": w}, lr=0.1, betas=(0.9, 0.99), eps=1e-8, weight_decay=0.01)
    w.grad = np.array(2.0)  # d(w^2)/dw at w = 1
    opt.step()
    m_hat = (0.1 * 2.0) / (1 - 0.9)
    v_hat = (0.01 * 4.0) / (1 - 0.99)
    expected = 1.0 * (1 - 0.1 * 0.01) - 0.1 * m_hat / (np.sqrt(v_hat) + 1e-8)
    assert abs(w.item() - expected) <= 1e-12
    assert abs(opt.m["w"] - 0.2) <= 1e-15 and abs(opt.v["w"] - 0.04) <= 1e-15


def test_adamw_state_roundtrip():
    w = Tensor(np.ones(3), requires_grad=True)
    opt = AdamW({"w": w}, lr=0.01)
    w.grad = np.array([1.0, -2.0, 0.5])
    opt.step()
    other = AdamW({"w": Tensor(np.ones(3))}, lr=0.01)
    other.load_state_dict(opt.state_dict())
    assert other.t == 1 and other.m["w"].tobytes() == opt.m["w"].tobytes()


def test_clip_grad_norm():
    a, b = Tensor(np.zeros(2)), Tensor(np.zeros(1))
    a.grad, b.grad = np.array([3.0, 0.0]), np.array([4.0])
    assert clip_grad_norm({"a": a, "b": b}, 1.0) == 5.0
    np.testing.assert_allclose(np.concatenate([a.grad, b.grad]), [0.6, 0.0, 0.8], rtol=1e-10)


# -- stage 1 ------------------------------------------------------------------
def test_pretrain_zero_steps_is_init(tiny_cfg, tiny_data):
    ckpt = pretrain_backbone(dataclasses.replace(PRE, steps=0), tiny_data, tiny_cfg)
    init = EditModel(tiny_cfg, with_adapter=False).state_dict()
    assert set(ckpt.params()) == set(init)
    for k, v in init.items():
        assert ckpt.entries[k].tobytes() == v.tobytes()


def test_pretrain_deterministic(base, tiny_cfg, tiny_data):
    again = pretrain_backbone(PRE, tiny_data, tiny_cfg)
    assert blob(again) == blob(base)


def test_pretrain_touches_only_base(base, tiny_cfg):
    init = EditModel(tiny_cfg, with_adapter=False).backbone
    for k in init.branch_parameter_names():
        assert base.entries[f"backbone.{k}"].tobytes() == init.params[k].data.tobytes()
    assert not base.has_adapter


# -- stage 2 ------------------------------------------------------------------
def test_adapter_freeze_contract(base, adapted):
    m = EditModel(base.model_config, with_adapter=False)
    for k in m.backbone.base_parameter_names():
        assert adapted.entries[f"backbone.{k}"].tobytes() == base.entries[f"backbone.{k}"].tobytes()
    moved = [k for k in m.backbone.branch_parameter_names()
             if adapted.entries[f"backbone.{k}"].tobytes() != base.entries[f"backbone.{k}"].tobytes()]
    assert moved  # the injection branch does train


def test_encoder_untouched_by_training(base, tiny_data):
    tr = adapter_trainer(dataclasses.replace(ADA, steps=3), base, tiny_data)
    before = {k: v.copy() for k, v in tr.model.encoder.weights().items()}
    tr.run()
    for k, v in tr.model.encoder.weights().items():
        assert v.tobytes() == before[k].tobytes()


def test_training_is_deterministic(base, tiny_data):
    runs = [[r["total"] for r in adapter_trainer(dataclasses.replace(ADA, steps=5), base, tiny_data).run()]
            for _ in range(2)]
    assert runs[0] == runs[1]


def test_resume_equals_uninterrupted(base, tiny_data, tmp_path):
    full = adapter_trainer(dataclasses.replace(ADA, steps=8), base, tiny_data)
    full.run()
    part = adapter_trainer(dataclasses.replace(ADA, steps=8), base, tiny_data)
    part.run(3)
    path = tmp_path / "mid.dfc1"
    part.checkpoint().save(path)
    resumed = Trainer.resume(Checkpoint.load(path), tiny_data)
    assert resumed.step_count == 3
    resumed.run()
    assert blob(resumed.checkpoint()) == blob(full.checkpoint())


def test_injection_off_is_inert(base, tiny_data):
    ep = tiny_data.episodes[tiny_data.train_indices[0]]
    tr = adapter_trainer(dataclasses.replace(ADA, steps=15, freeze_lambda=True), base, tiny_data)
    tr.model.backbone.params["lambda_ca"].data = np.array(0.0)
    baseline = pair_loss(tr.model, (ep.source, ep.target), seed=1)
    unconditioned = EditModel(tr.model.config, with_adapter=False)
    unconditioned.backbone.load_state_dict(tr.model.backbone.state_dict())
    tr.run()
    after = pair_loss(tr.model, (ep.source, ep.target), seed=1)
    assert tr.model.backbone.params["lambda_ca"].item() == 0.0
    assert after == baseline
    # the same objective as the backbone without any edit tokens
    assert pair_loss(tr.model, (ep.source, ep.target), seed=2) == pytest.approx(
        _no_edit_loss(unconditioned, ep, seed=2), abs=0)


def _no_edit_loss(model, ep, seed):
    rng = np.random.default_rng(seed)
    L, D = model.config.backbone.tokens, model.config.backbone.latent_dim
    z1 = rng.standard_normal((8, L, D))
    t = rng.uniform(0, 1, 8)
    a = np.repeat(ep.source[None].astype(float), 8, 0)
    a2 = np.repeat(ep.target[None].astype(float), 8, 0)
    with no_grad():
        z0 = patchify(a2, 4).data
        v = model.backbone.predict_velocity(interpolate(z0, z1, t), a, None)
        gt = semantic_delta(model.encoder.encode(a), model.encoder.encode(a2))
        d_hat = pred_delta(a, recover_clean(Tensor(z1), v), model.encoder,
                           f_a=model.encoder.encode(a).tokens)
        return (flow_loss(v, z0, z1) + sdc_loss(gt, d_hat)).item()


def test_adapter_needs_matching_backbone(base, tiny_data):
    other = dataclasses.replace(base.model_config,
                                backbone=dataclasses.replace(base.model_config.backbone, seed=99))
    with pytest.raises(IncompatibleError):
        adapter_trainer(ADA, base, tiny_data, other)


def test_dataset_layout_checked(base):
    big = gen_dataset(DataConfig(train_episodes=4, eval_episodes=0))
    with pytest.raises(IncompatibleError):
        adapter_trainer(ADA, base, big)


def test_numeric_failure_names_step(base, tiny_data):
    tr = adapter_trainer(ADA, base, tiny_data)
    tr.model.backbone.params["blocks.0.w1"].data = np.full_like(tr.model.backbone.params["blocks.0.w1"].data, 1e200)
    with pytest.raises(NumericError, match="step 0"):
        tr.run(1)


def test_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(stage="warmup").validate()
    with pytest.raises(ConfigError):
        TrainConfig(lr=0).validate()
    with pytest.raises(ConfigError):
        TrainConfig(variant="w/o everything").validate()


# -- checkpoints --------------------------------------------------------------
def test_checkpoint_roundtrip(adapted, tmp_path):
    path = tmp_path / "c.dfc1"
    save_checkpoint(adapted, path)
    back = load_checkpoint(path)
    assert blob(back) == blob(adapted) == path.read_bytes()
    assert back.config_hash == adapted.model_config.config_hash()
    assert back.step == 20


def test_checkpoint_names_namespaced(adapted):
    prefixes = ("backbone.", "adapter.", "opt.", "rng.", "meta.")
    assert all(k.startswith(prefixes) for k in adapted.entries)
    assert "meta.config_hash" in adapted.entries and "rng.pcg64" in adapted.entries


def test_checkpoint_layout(adapted):
    raw = blob(adapted)
    assert raw[:4] == b"DFC1"
    version, count = struct.unpack_from("<II", raw, 4)
    assert (version, count) == (1, len(adapted.entries))
    nlen = struct.unpack_from("<H", raw, 12)[0]
    first = raw[14:14 + nlen].decode()
    assert first == next(iter(adapted.entries))


def test_checkpoint_errors(adapted, tmp_path):
    path = tmp_path / "c.dfc1"
    raw = blob(adapted)
    path.write_bytes(raw[:-10])
    with pytest.raises(ChecksumError):
        load_checkpoint(path)
    path.write_bytes(b"NOPE" + raw[4:])
    with pytest.raises(MagicError):
        load_checkpoint(path)
    path.write_bytes(raw)
    with pytest.raises(IncompatibleError, match="hash"):
        load_checkpoint(path, expect_hash="0123456789abcdef")
    with pytest.raises(IncompatibleError):
        adapted.build_model(expect_hash="0123456789abcdef")


def test_scalar_entries_keep_shape(adapted):
    assert ckptio.parse(blob(adapted))["backbone.lambda_ca"].shape == ()


# -- test-time adaptation -----------------------------------------------------
def test_tta_zero_steps_returns_copy(adapted):
    out = tta(adapted, (np.zeros((8, 8, 3)), np.ones((8, 8, 3))), steps=0)
    assert out is not adapted and blob(out) == blob(adapted)


def test_tta_isolation(adapted, tiny_data):
    before = blob(adapted)
    ep = tiny_data.episodes[tiny_data.indices(2)[0]]
    out = tta(adapted, (ep.source, ep.target), steps=3, noise_draws=2)
    assert blob(adapted) == before
    m = EditModel(adapted.model_config, with_adapter=False)
    for k in m.backbone.base_parameter_names():
        assert out.entries[f"backbone.{k}"].tobytes() == adapted.entries[f"backbone.{k}"].tobytes()
    assert any(out.entries[k].tobytes() != adapted.entries[k].tobytes() for k in out.entries
               if k.startswith("adapter."))


def test_tta_adapter_scope_keeps_branch(adapted, tiny_data):
    ep = tiny_data.episodes[tiny_data.indices(2)[0]]
    out = tta(adapted, (ep.source, ep.target), steps=2, noise_draws=2, scope="adapter")
    for k in EditModel(adapted.model_config).backbone.branch_parameter_names():
        assert out.entries[f"backbone.{k}"].tobytes() == adapted.entries[f"backbone.{k}"].tobytes()


def test_tta_needs_adapter(base):
    with pytest.raises(IncompatibleError):
        tta(base, (np.zeros((8, 8, 3)), np.zeros((8, 8, 3))), steps=1)


# -- variants -----------------------------------------------------------------
def test_make_variant_full_is_default():
    mc, tc = make_variant("full")
    assert mc.adapter == tiny_model_config().adapter.__class__()
    assert tc == TrainConfig()


def test_make_variant_without_sdc():
    mc, tc = make_variant("w/o 𝓛_sdc")
    full_mc, full_tc = make_variant("full")
    assert tc.lambda_sdc == 0.0
    assert dataclasses.replace(tc, lambda_sdc=1.0, variant="full") == full_tc
    assert mc.adapter == full_mc.adapter


@pytest.mark.parametrize("tag", VARIANTS[1:-1])
def test_variants_change_one_switch(tag):
    mc, _ = make_variant(tag)
    full = make_variant("full")[0].adapter
    diff = {f.name for f in dataclasses.fields(full) if getattr(full, f.name) != getattr(mc.adapter, f.name)}
    assert len(diff) == 1


def test_parameter_report_projection_counts():
    full = parameter_report(make_variant("full")[0])
    shared = parameter_report(make_variant("w/o per-token proj.")[0])
    assert full["projection"] == 8 * (32 * 64 + 64) == 16_896
    assert shared["projection"] == 32 * 64 + 64 == 2_112
    assert full["adapter"] - shared["adapter"] == 16_896 - 2_112
    assert full["injection_branch"] == 4 * 2 * 64 * 64 + 1


def test_unknown_variant():
    with pytest.raises(ConfigError):
        make_variant("w/o magic")
