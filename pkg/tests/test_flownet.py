import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from deltadapter.errors import ContractError, NumericError, ShapeError
from deltadapter.flownet import (Backbone, BackboneConfig, FlowState, inject, interpolate,
                                 predict_velocity, recover_clean, sample)
from deltadapter.tensor import Tensor, grad_check

SMALL = BackboneConfig(tokens=4, latent_dim=48, width=16, heads=2, blocks=2, cond_dim=8,
                       time_dim=8, patch=4, seed=2)


def small_inputs(rng, batch=()):
    z = rng.standard_normal((*batch, 4, 48))
    src = rng.uniform(0, 1, (*batch, 8, 8, 3))
    E = Tensor(rng.standard_normal((*batch, 3, 8)))
    return z, src, E


def with_branch(bb, rng, scale=0.3):
    for i in range(bb.config.blocks):
        for k in ("kd", "vd"):
            bb.params[f"blocks.{i}.{k}"].data = rng.standard_normal(bb.params[f"blocks.{i}.{k}"].shape) * scale
    return bb


# -- interpolate / recover_clean ---------------------------------------------
@given(st.integers(0, 2**31))
@settings(max_examples=30, deadline=None)
def test_interpolate_endpoints_and_homogeneity(seed):
    r = np.random.default_rng(seed)
    z0, z1 = r.standard_normal((3, 5)), r.standard_normal((3, 5))
    assert interpolate(z0, z1, 0.0).z.data.tobytes() == z0.tobytes()
    assert interpolate(z0, z1, 1.0).z.data.tobytes() == z1.tobytes()
    t = r.uniform()
    np.testing.assert_allclose(interpolate(2 * z0, 2 * z1, t).z.data, 2 * interpolate(z0, z1, t).z.data,
                               rtol=1e-14, atol=1e-15)


def test_interpolate_midpoint():
    assert interpolate(0.0, 1.0, 0.5).z.item() == 0.5


def test_interpolate_per_row_t(rng):
    z0, z1 = rng.standard_normal((2, 4, 3)), rng.standard_normal((2, 4, 3))
    out = interpolate(z0, z1, np.array([0.0, 1.0])).z.data
    assert out[0].tobytes() == z0[0].tobytes() and out[1].tobytes() == z1[1].tobytes()


def test_interpolate_rejects_bad_t():
    with pytest.raises(ContractError):
        interpolate(0.0, 1.0, 1.5)
    with pytest.raises(ContractError):
        FlowState(Tensor(0.0), -0.1)


def test_recover_clean(rng):
    z0, z1 = rng.standard_normal((4, 48)), rng.standard_normal((4, 48))
    np.testing.assert_array_equal(recover_clean(z1, z1 - z0).data, z1 - (z1 - z0))
    np.testing.assert_allclose(recover_clean(z1, z1 - z0).data, z0, rtol=0, atol=1e-15)
    np.testing.assert_array_equal(recover_clean(z1, np.zeros_like(z1)).data, z1)
    assert recover_clean(2.0, 1.5).item() == 0.5
    with pytest.raises(ShapeError):
        recover_clean(np.zeros(3), np.zeros(4))


# -- inject -----------------------------------------------------------------
def test_inject_lambda_zero_exact(rng):
    Z, Q, E = Tensor(rng.standard_normal((5, 4))), Tensor(rng.standard_normal((5, 4))), Tensor(rng.standard_normal((3, 6)))
    wk, wv = Tensor(rng.standard_normal((6, 4))), Tensor(rng.standard_normal((6, 4)))
    assert inject(Z, Q, E, wk, wv, 0.0, 2).data.tobytes() == Z.data.tobytes()


def test_inject_zero_value_projection(rng):
    Z, Q, E = Tensor(rng.standard_normal((5, 4))), Tensor(rng.standard_normal((5, 4))), Tensor(rng.standard_normal((3, 6)))
    zero = Tensor(np.zeros((6, 4)))
    assert inject(Z, Q, E, zero, zero, 1.0, 2).data.tobytes() == Z.data.tobytes()


def test_inject_linear_in_lambda(rng):
    Z, Q, E = Tensor(rng.standard_normal((5, 4))), Tensor(rng.standard_normal((5, 4))), Tensor(rng.standard_normal((3, 6)))
    wk, wv = Tensor(rng.standard_normal((6, 4))), Tensor(rng.standard_normal((6, 4)))
    d1 = inject(Z, Q, E, wk, wv, 1.0, 2).data - Z.data
    d2 = inject(Z, Q, E, wk, wv, 2.0, 2).data - Z.data
    np.testing.assert_allclose(d2, 2 * d1, rtol=0, atol=1e-12)


def test_inject_matches_hand_attention(rng):
    Z, Q, E = rng.standard_normal((5, 4)), rng.standard_normal((5, 4)), rng.standard_normal((3, 6))
    wk, wv = rng.standard_normal((6, 4)), rng.standard_normal((6, 4))
    K, V = E @ wk, E @ wv
    s = Q @ K.T / np.sqrt(4)
    a = np.exp(s - s.max(-1, keepdims=True))
    a /= a.sum(-1, keepdims=True)
    got = inject(Tensor(Z), Tensor(Q), Tensor(E), Tensor(wk), Tensor(wv), 0.7, 1).data
    np.testing.assert_allclose(got, Z + 0.7 * a @ V, rtol=1e-12)


# -- predict_velocity -------------------------------------------------------
def test_predict_velocity_deterministic_and_shaped(rng):
    bb = Backbone(SMALL)
    z, src, E = small_inputs(rng)
    a = bb.predict_velocity(FlowState(Tensor(z), 0.3), src, E).data
    b = predict_velocity(FlowState(Tensor(z), 0.3), src, E, Backbone(SMALL)).data
    assert a.shape == (4, 48)
    assert a.tobytes() == b.tobytes()


def test_predict_velocity_batched_matches_rows(rng):
    bb = with_branch(Backbone(SMALL), rng)
    z, src, E = small_inputs(rng, (3,))
    t = np.array([0.1, 0.5, 0.9])
    batched = bb.predict_velocity(FlowState(Tensor(z), t), src, E).data
    for i in range(3):
        row = bb.predict_velocity(FlowState(Tensor(z[i]), t[i]), src[i], Tensor(E.data[i])).data
        np.testing.assert_allclose(batched[i], row, rtol=1e-10, atol=1e-12)


def test_default_config_shape(rng):
    bb = Backbone()
    out = bb.predict_velocity(FlowState(Tensor(rng.standard_normal((16, 48))), 0.5),
                              rng.uniform(0, 1, (16, 16, 3)), Tensor(rng.standard_normal((8, 64))))
    assert out.shape == (16, 48)


def test_lambda_zero_ignores_edit_tokens(rng):
    bb = with_branch(Backbone(SMALL), rng)
    z, src, E = small_inputs(rng)
    state = FlowState(Tensor(z), 0.4)
    bb.params["lambda_ca"].data = np.array(0.0)
    ref = bb.predict_velocity(state, src, None).data
    for scale in (1.0, 1e3):
        got = bb.predict_velocity(state, src, Tensor(E.data * scale)).data
        assert got.tobytes() == ref.tobytes()
    bb.params["lambda_ca"].data = np.array(1.0)
    assert bb.predict_velocity(state, src, E, lam=0.0).data.tobytes() == ref.tobytes()


def test_fresh_branch_is_noop(rng):
    bb = Backbone(SMALL)
    z, src, E = small_inputs(rng)
    state = FlowState(Tensor(z), 0.6)
    assert bb.predict_velocity(state, src, E).data.tobytes() == bb.predict_velocity(state, src, None).data.tobytes()


def test_inject_blocks_subset(rng):
    cfg = BackboneConfig(**{**SMALL.__dict__, "inject_blocks": (1,)})
    bb = Backbone(cfg)
    bb.params["blocks.0.kd"].data = rng.standard_normal((8, 16))
    bb.params["blocks.0.vd"].data = rng.standard_normal((8, 16))
    z, src, E = small_inputs(rng)
    state = FlowState(Tensor(z), 0.6)
    # block 0 is excluded, so its non-zero branch weights must be ignored
    assert bb.predict_velocity(state, src, E).data.tobytes() == bb.predict_velocity(state, src, None).data.tobytes()


def test_predict_velocity_gradient(rng):
    bb = with_branch(Backbone(SMALL), rng)
    z, src, E = small_inputs(rng)
    names = ["in_w", "src_type", "t_w1", "blocks.0.wq", "blocks.1.kd", "blocks.1.vd", "blocks.1.w2",
             "lambda_ca", "out_w", "out_b"]
    params = [bb.params[n] for n in names]

    def f(*_):
        return (bb.predict_velocity(FlowState(Tensor(z), 0.35), src, E) ** 2).mean()
    rep = grad_check(f, params, max_entries=6, rng=rng)
    assert rep.worst < 1e-4, dict(zip(names, rep.max_rel_error))


def test_shape_errors(rng):
    bb = Backbone(SMALL)
    with pytest.raises(ShapeError):
        bb.predict_velocity(FlowState(Tensor(np.zeros((5, 48))), 0.5), np.zeros((8, 8, 3)))
    with pytest.raises(ShapeError):
        bb.predict_velocity(FlowState(Tensor(np.zeros((4, 48))), 0.5), np.zeros((12, 8, 3)))


def test_nan_names_block(rng):
    bb = Backbone(SMALL)
    bb.params["blocks.1.w1"].data = np.full((16, 32), 1e200)
    z, src, _ = small_inputs(rng)
    with pytest.raises(NumericError, match="block 1"):
        bb.predict_velocity(FlowState(Tensor(z), 0.5), src)


# -- sampler ----------------------------------------------------------------
@pytest.mark.parametrize("steps", [1, 2, 4, 8])
def test_sampler_exact_under_oracle_velocity(rng, steps):
    z0, z1 = rng.standard_normal((4, 48)), rng.standard_normal((4, 48))
    out, traj = sample(z1, None, None, None, steps=steps, velocity_fn=lambda z, t: z1 - z0)
    assert np.abs(out.data - z0).max() <= 1e-9
    assert len(traj) == steps
    for est in traj:
        assert np.abs(est.data - z0).max() <= 1e-9


def test_single_step_is_recover_clean(rng):
    bb = with_branch(Backbone(SMALL), rng)
    z1, src, E = small_inputs(rng)
    out, traj = sample(z1, src, E, bb, steps=1)
    v = bb.predict_velocity(FlowState(Tensor(z1), 1.0), src, E)
    assert out.data.tobytes() == recover_clean(z1, v).data.tobytes()
    assert traj[0].data.tobytes() == out.data.tobytes()


def test_sampler_rejects_zero_steps():
    with pytest.raises(ContractError):
        sample(np.zeros((4, 48)), None, None, None, steps=0, velocity_fn=lambda z, t: z)


def test_sampler_lambda_zero_matches_unconditioned(rng):
    bb = with_branch(Backbone(SMALL), rng)
    z1, src, E = small_inputs(rng)
    a, _ = sample(z1, src, E, bb, lam=0.0)
    b, _ = sample(z1, src, None, bb)
    assert a.data.tobytes() == b.data.tobytes()
