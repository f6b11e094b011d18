import numpy as np
import pytest
from hypothesis import given, strategies as st

from objboot.config import AugConfig, ConfigError, EncoderConfig, SceneConfig
from objboot.encoder import (LossGraph, NumericError, StructureError, TeacherCenter, backward, ema_update,
                             encode, encode_backward, forward_dense, head_forward, init_params, project,
                             softmax, view_patches, zeros_like)
from objboot.synthdata import augment_pair, generate_scene


@pytest.fixture
def view():
    return augment_pair(generate_scene(0, SceneConfig()), 0, AugConfig())[0]


def _scalar_gelu(x):
    c = np.sqrt(np.longdouble(2) / np.longdouble(np.pi))
    return 0.5 * x * (1 + np.tanh(c * (x + np.longdouble(0.044715) * x ** 3)))


def _reference_tokens(params, patches):
    """Token-by-token forward in extended precision, written without the vectorised helpers."""
    p = {k: v.astype(np.longdouble) for k, v in params.items()}
    depth = sum(1 for k in p if k.startswith("mix") and k.endswith(".w"))
    out = []
    for row in patches.astype(np.longdouble):
        h = np.array([sum(row[f] * p["embed.w"][f, j] for f in range(len(row))) + p["embed.b"][j]
                      for j in range(p["embed.w"].shape[1])])
        for i in range(depth):
            w, b = p[f"mix{i}.w"], p[f"mix{i}.b"]
            pre = [sum(h[a] * w[a, j] for a in range(len(h))) + b[j] for j in range(len(h))]
            h = h + np.array([_scalar_gelu(v) for v in pre])
        out.append(h)
    return np.array(out)


def test_zero_weights_give_zero_tokens(view):
    params = {k: np.zeros_like(v) for k, v in init_params(EncoderConfig(), 8, 0).items()}
    tokens, glob = forward_dense(params, view)
    assert not tokens.any() and not glob.any()


def test_identity_mixer_passes_embedding(view):
    params = init_params(EncoderConfig(depth=1), 8, 0)
    params["mix0.w"][:] = 0
    params["mix0.b"][:] = 0
    x = view_patches([view])[:, :1]
    tokens, _ = encode(params, x)
    np.testing.assert_array_equal(tokens[0, 0], x[0, 0] @ params["embed.w"] + params["embed.b"])


def test_forward_matches_extended_precision_reference(view):
    params = init_params(EncoderConfig(dim=6, depth=2), 8, 3)
    x = view_patches([view])[0][:4]
    tokens, _ = encode(params, x[None])
    ref = _reference_tokens(params, x)
    np.testing.assert_allclose(tokens[0], ref.astype(float), rtol=1e-10, atol=1e-12)


def test_global_is_row_mean(view):
    params = init_params(EncoderConfig(), 8, 0)
    tokens, glob = forward_dense(params, view)
    np.testing.assert_allclose(glob, tokens.mean(axis=0))


def test_dtype_is_preserved(view):
    params = {k: v.astype(np.longdouble) for k, v in init_params(EncoderConfig(), 8, 0).items()}
    tokens, _ = encode(params, view_patches([view]).astype(np.longdouble))
    assert tokens.dtype == np.longdouble


def test_non_finite_reports_layer(view):
    params = init_params(EncoderConfig(depth=2), 8, 0)
    params["mix1.b"][0] = np.inf
    with pytest.raises(NumericError) as exc:
        encode(params, view_patches([view]))
    assert "mixer 1" in exc.value.where


def test_projection_uniform_when_logits_equal():
    params = init_params(EncoderConfig(out_dim=8), 8, 0)
    params["head.obj"][:] = 0.3
    p = project(params, np.ones(32), 0.1)
    np.testing.assert_allclose(p, np.full(8, 1 / 8), atol=1e-15)


def test_projection_flattens_at_high_temperature():
    params = init_params(EncoderConfig(out_dim=16), 8, 0)
    p = project(params, np.linspace(-1, 1, 32), 1e6)
    assert abs(p.max() - 1 / 16) < 1e-3


def test_softmax_values():
    np.testing.assert_allclose(softmax(np.array([1.0, 2.0, 3.0])), [0.09003, 0.24473, 0.66524], atol=1e-5)


@pytest.mark.parametrize("t", [0.0, -1.0])
def test_projection_temperature_rejected(t):
    with pytest.raises(ConfigError):
        project(init_params(EncoderConfig(), 8, 0), np.ones(32), t)


@given(st.integers(0, 1000), st.floats(0.01, 10.0))
def test_projection_is_a_distribution(seed, t):
    params = init_params(EncoderConfig(), 8, seed)
    reps = np.random.default_rng(seed).normal(size=(3, 32))
    for kind in ("object", "global"):
        p = project(params, reps, t, kind)
        np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-9)
        assert np.all(p > 0)


def test_heads_share_all_but_last_layer():
    params = init_params(EncoderConfig(out_dim=8, out_dim_global=5), 8, 0)
    rep = np.ones((1, 32))
    lo, co = head_forward(params, rep, "object")
    lg, cg = head_forward(params, rep, "global")
    np.testing.assert_array_equal(co.u, cg.u)
    assert lo.shape == (1, 8) and lg.shape == (1, 5)


def test_ema_boundaries():
    t = {"w": np.array([1.0, 2.0])}
    s = {"w": np.array([0.0, 5.0])}
    np.testing.assert_array_equal(ema_update(t, s, 1.0)["w"], t["w"])
    np.testing.assert_array_equal(ema_update(t, s, 0.0)["w"], s["w"])
    assert ema_update({"w": np.array(1.0)}, {"w": np.array(0.0)}, 0.9)["w"] == pytest.approx(0.9)


def test_ema_errors():
    with pytest.raises(StructureError):
        ema_update({"w": np.zeros(2)}, {"w": np.zeros(3)}, 0.5)
    with pytest.raises(StructureError):
        ema_update({"w": np.zeros(2)}, {"v": np.zeros(2)}, 0.5)
    with pytest.raises(ConfigError):
        ema_update({"w": np.zeros(2)}, {"w": np.zeros(2)}, 1.5)


@given(st.integers(0, 1000), st.floats(0.0, 1.0))
def test_ema_linearity(seed, m):
    rng = np.random.default_rng(seed)
    t, t2, s, s2 = ({"w": rng.normal(size=(3, 2))} for _ in range(4))
    lhs = ema_update(t, s, m)["w"] + ema_update(t2, s2, m)["w"]
    rhs = ema_update({"w": t["w"] + t2["w"]}, {"w": s["w"] + s2["w"]}, m)["w"]
    np.testing.assert_allclose(lhs, rhs, atol=1e-12)


def test_null_objective_gives_zero_gradients(view):
    params = init_params(EncoderConfig(), 8, 0)
    _, cache = encode(params, view_patches([view]))
    grads = backward(params, LossGraph(dense=cache, num_patches=16))
    assert all(not g.any() for g in grads.values())


def test_linear_layer_squared_norm_gradient(rng):
    params = {"embed.w": rng.normal(size=(5, 3)), "embed.b": np.zeros(3)}
    x = rng.normal(size=(1, 1, 5))
    tokens, cache = encode(params, x)
    grads = zeros_like(params)
    encode_backward(params, cache, 2 * tokens, grads)
    w = params["embed.w"]
    xv = x[0, 0]
    np.testing.assert_allclose(grads["embed.w"], 2 * np.outer(xv, xv @ w), atol=1e-12)


@pytest.mark.parametrize("attention", [False, True])
def test_encoder_backward_matches_finite_differences(rng, attention):
    params = {k: v.astype(np.longdouble) for k, v in
              init_params(EncoderConfig(dim=4, depth=2, attention=attention), 2, 1).items()}
    x = rng.normal(size=(2, 3, 12)).astype(np.longdouble)
    probe = rng.normal(size=(2, 3, 4)).astype(np.longdouble)

    def loss(p):
        return (encode(p, x)[0] * probe).sum()

    _, cache = encode(params, x)
    grads = zeros_like(params)
    encode_backward(params, cache, probe, grads)
    h = np.longdouble(1e-6)
    for name in ("embed.w", "mix0.w", "mix1.b") + (("attn.wq", "attn.wk", "attn.wv") if attention else ()):
        for idx in list(np.ndindex(params[name].shape))[:6]:
            plus = {k: v.copy() for k, v in params.items()}
            minus = {k: v.copy() for k, v in params.items()}
            plus[name][idx] += h
            minus[name][idx] -= h
            fd = (loss(plus) - loss(minus)) / (2 * h)
            assert abs(fd - grads[name][idx]) <= 1e-7 * max(1.0, abs(fd))


def test_center_update_and_shift_absorption():
    c = TeacherCenter.zeros(4, 3, 0.9)
    logits = np.array([[1.0, 2.0, 3.0, 4.0]])
    for _ in range(400):
        c.update(logits + 7.0, None)
    # at the fixed point the constant shift is absorbed by the centre
    centred = softmax((logits + 7.0 - c.center_object) / 0.04)
    np.testing.assert_allclose(c.center_object, logits[0] + 7.0, atol=1e-12)
    np.testing.assert_allclose(centred, softmax(np.zeros((1, 4))), atol=1e-9)
    assert not c.center_global.any()
