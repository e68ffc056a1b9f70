import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ganaug import nn
from ganaug import tensor as T
from ganaug.nn import LayerSpec, NetworkSpec, SpecError
from ganaug.tensor import ShapeError, Tensor


def spec(role="generator", **kw):
    kw.setdefault("latent_dim", 16)
    kw.setdefault("max_resolution", 32)
    kw.setdefault("channel_cap", 8)
    return NetworkSpec(role, **kw)


# layer primitives ------------------------------------------------------------------


def test_he_constant_examples():
    assert nn.he_constant(8) == 0.5
    assert nn.fan_in((4, 16, 3, 3)) == 144
    assert nn.he_constant(nn.fan_in((4, 16, 3, 3))) == pytest.approx(np.sqrt(2 / 144), rel=1e-15)
    assert nn.fan_in((12, 5)) == 12


@pytest.mark.parametrize("res", [4, 8, 16, 32, 64, 128, 256])
def test_equalized_conv_matches_prescaled_plain_conv(res):
    s = NetworkSpec("generator")
    cin, cout = s.channels(res), s.channels(min(2 * res, 256))
    rng = np.random.default_rng(res)
    w = rng.normal(size=(cout, cin, 3, 3))
    b = rng.normal(size=cout)
    x = rng.normal(size=(2, cin, 4, 4))
    layer = LayerSpec("equalized-conv", "conv", {"in": cin, "out": cout, "kernel": 3})
    got = nn.equalized_forward(layer, Tensor(x), Tensor(w), Tensor(b)).data
    c = np.sqrt(2.0 / (cin * 9))
    plain = T.conv2d(x, c * w, 1, 1).data + b[None, :, None, None]
    np.testing.assert_allclose(got, plain, rtol=0, atol=1e-12 * max(1.0, np.abs(plain).max()))


def test_equalized_dense_matches_prescaled(rng):
    w, b, x = rng.normal(size=(16, 7)), rng.normal(size=7), rng.normal(size=(3, 16))
    layer = LayerSpec("equalized-dense", "d", {"in": 16, "out": 7})
    got = nn.equalized_forward(layer, Tensor(x), Tensor(w), Tensor(b)).data
    np.testing.assert_allclose(got, x @ (w * np.sqrt(2 / 16)) + b, rtol=0, atol=1e-12)
    with pytest.raises(ShapeError):
        nn.equalized_forward(layer, Tensor(x[:, :5]), Tensor(w), Tensor(b))


def test_pixelnorm_examples():
    out = nn.pixelnorm(Tensor(np.full((1, 4, 2, 2), 2.0))).data
    np.testing.assert_allclose(out, 2 / np.sqrt(4 + 1e-8), rtol=1e-15)
    assert np.all(nn.pixelnorm(Tensor(np.zeros((2, 3, 2, 2)))).data == 0.0)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 4), st.integers(1, 16), st.integers(1, 5), st.integers(0, 10**6), st.floats(0.1, 100))
def test_pixelnorm_unit_mean_square(n, c, h, seed, scale):
    with T.precision(64):
        x = np.random.default_rng(seed).normal(scale=scale, size=(n, c, h, h))
        out = nn.pixelnorm(Tensor(x)).data
        ms = (out**2).mean(axis=1)
        ok = (x**2).mean(axis=1) > 1e-1  # mean square much larger than eps
        assert np.all(np.abs(ms[ok] - 1.0) <= 1e-6)
        again = nn.pixelnorm(Tensor(out)).data
        assert np.abs(again - out)[np.broadcast_to(ok[:, None], out.shape)].max(initial=0) <= 1e-6


def test_minibatch_stddev_examples():
    same = np.repeat(np.random.default_rng(0).normal(size=(1, 3, 4, 4)), 5, axis=0)
    out = nn.minibatch_stddev(Tensor(same)).data
    assert out.shape == (5, 4, 4, 4)
    assert np.all(out[:, -1] == 0.0)
    np.testing.assert_array_equal(out[:, :-1], same)

    pair = np.stack([np.zeros((2, 3, 3)), np.full((2, 3, 3), 2.0)])
    stat = nn.minibatch_stddev(Tensor(pair)).data[:, -1]
    np.testing.assert_allclose(stat, 1.0, rtol=1e-8)
    exact = nn.minibatch_stddev(Tensor(pair), eps=0.0).data[:, -1]
    np.testing.assert_array_equal(exact, np.ones_like(exact))

    with pytest.raises(ShapeError):
        nn.minibatch_stddev(Tensor(np.zeros((1, 2, 4, 4))))


@settings(max_examples=25, deadline=None)
@given(st.integers(2, 6), st.integers(1, 4), st.integers(1, 6), st.integers(0, 10**6))
def test_minibatch_stddev_map_is_constant(n, c, h, seed):
    with T.precision(64):
        x = np.random.default_rng(seed).normal(size=(n, c, h, h))
        stat = nn.minibatch_stddev(Tensor(x)).data[:, -1]
        assert np.all(stat == stat.flat[0])
        want = x.std(axis=0).mean()
        assert abs(stat.flat[0] - want) <= 1e-6 * max(1.0, want)


def test_minibatch_stddev_gradient_finite_for_identical_batch():
    x = Tensor(np.ones((3, 2, 2, 2)), requires_grad=True)
    (g,) = T.grad(T.reduce_sum(nn.minibatch_stddev(x)), [x])
    assert np.all(np.isfinite(g.data))


def test_fade_identities(rng):
    old, new = Tensor(rng.normal(size=(2, 1, 4, 4))), Tensor(rng.normal(size=(2, 1, 4, 4)))
    np.testing.assert_array_equal(nn.fade_in_blend(old, new, 0.0).data, old.data)
    np.testing.assert_array_equal(nn.fade_in_blend(old, new, 1.0).data, new.data)
    mid = nn.fade_in_blend(Tensor(np.zeros((1, 1, 2, 2))), Tensor(np.full((1, 1, 2, 2), 2.0)), 0.5)
    np.testing.assert_array_equal(mid.data, np.ones((1, 1, 2, 2)))
    for bad in (-0.1, 1.1):
        with pytest.raises(ValueError):
            nn.fade_in_blend(old, new, bad)


# specs and builders ------------------------------------------------------------------


def test_spec_validation():
    with pytest.raises(SpecError):
        NetworkSpec("critic").validate()
    with pytest.raises(SpecError):
        NetworkSpec("generator", max_resolution=48).validate()
    with pytest.raises(SpecError):
        NetworkSpec("generator", latent_dim=0).validate()
    with pytest.raises(SpecError):
        nn.build_generator(spec("discriminator"))


def test_channel_schedule_default():
    s = NetworkSpec("generator")
    assert [s.channels(r) for r in (4, 8, 16, 32, 64, 128, 256)] == [256, 256, 256, 128, 64, 32, 16]
    assert NetworkSpec("generator", channel_cap=32).channels(4) == 32


def test_generator_output_shape_full_ladder():
    s = spec(max_resolution=256, channel_cap=4)
    G = nn.build_generator(s, seed=0)
    z = Tensor(np.zeros((2, 16)))
    for res in (4, 8, 16, 32, 64, 128, 256):
        if res > 4:
            G = nn.grow(G, res)
        out = G(z).data
        assert out.shape == (2, 1, res, res)
        assert np.all(np.isfinite(out)) and np.abs(out).max() <= 1.0


def test_generator_seed_determinism():
    a = nn.build_generator(spec(), seed=3, resolution=8)
    b = nn.build_generator(spec(), seed=3, resolution=8)
    c = nn.build_generator(spec(), seed=4, resolution=8)
    for k in a.parameters:
        np.testing.assert_array_equal(a.parameters[k].data, b.parameters[k].data)
    assert any(not np.array_equal(a.parameters[k].data, c.parameters[k].data) for k in a.parameters if "weight" in k)


def test_init_unit_normal_weights_zero_bias():
    G = nn.build_generator(spec(channel_cap=None, fmap_base=2048, fmap_max=64), seed=0, resolution=8)
    ws = np.concatenate([v.data.ravel() for k, v in G.parameters.items() if k.endswith("weight")])
    assert abs(ws.mean()) < 0.02 and abs(ws.std() - 1.0) < 0.02
    assert all(np.all(v.data == 0) for k, v in G.parameters.items() if k.endswith("bias"))


@pytest.mark.parametrize("res", [4, 8, 16])
def test_discriminator_scores(res, rng):
    D = nn.build_discriminator(spec("discriminator"), seed=1, resolution=res)
    x = rng.uniform(-1, 1, size=(5, 1, res, res))
    assert D(Tensor(x)).shape == (5, 1)
    const = D(Tensor(np.full((4, 1, res, res), 0.3))).data
    assert np.all(np.isfinite(const))


def test_discriminator_head_is_linear(rng):
    D = nn.build_discriminator(spec("discriminator"), seed=2, resolution=8)
    x = Tensor(rng.uniform(-1, 1, size=(4, 1, 8, 8)))
    before = D(x).data
    head = [k for k in D.parameters if k.startswith("block4.dense") and k.endswith("weight")][-1]
    D.parameters[head] = Tensor(2.0 * D.parameters[head].data)
    np.testing.assert_allclose(D(x).data, 2.0 * before, rtol=1e-12, atol=1e-12)


def test_discriminator_permutation_equivariant(rng):
    D = nn.build_discriminator(spec("discriminator"), seed=5, resolution=16)
    x = rng.uniform(-1, 1, size=(6, 1, 16, 16))
    perm = rng.permutation(6)
    np.testing.assert_allclose(D(Tensor(x[perm])).data, D(Tensor(x)).data[perm], rtol=1e-10, atol=1e-12)


def test_discriminator_rejects_wrong_resolution():
    D = nn.build_discriminator(spec("discriminator"), resolution=8)
    with pytest.raises(ShapeError):
        D(Tensor(np.zeros((2, 1, 16, 16))))


def test_encoder_and_latent_critic(rng):
    E = nn.build_encoder(spec("encoder"), seed=0, resolution=16)
    G = nn.build_generator(spec(), seed=0, resolution=16)
    L = nn.build_latent_discriminator(spec("latent-discriminator"), seed=0)
    x = Tensor(rng.uniform(-1, 1, size=(3, 1, 16, 16)))
    z = E(x)
    assert z.shape == (3, 16)
    assert G(z).shape == (3, 1, 16, 16)
    assert np.all(np.isfinite(L(Tensor(np.zeros((2, 16)))).data))
    with pytest.raises(SpecError):
        nn.grow(E, 32)


def test_encoder_is_deterministic(rng):
    E = nn.build_encoder(spec("encoder"), seed=0, resolution=8)
    x = Tensor(rng.uniform(-1, 1, size=(3, 1, 8, 8)))
    np.testing.assert_array_equal(E(x).data, E(x).data)


# growth ----------------------------------------------------------------------------------


def test_grow_retains_parameters_and_resets_alpha():
    G = nn.build_generator(spec(), seed=0, resolution=4)
    G8 = nn.grow(G, 8)
    assert G8.fade_alpha == 0.0 and G8.resolution_active == 8
    for k, v in G.parameters.items():
        assert np.array_equal(G8.parameters[k].data, v.data)
    assert any(k.startswith("block8") for k in G8.parameters)


def test_grow_errors():
    G = nn.build_generator(spec(max_resolution=16), seed=0, resolution=8)
    with pytest.raises(SpecError):
        nn.grow(G, 32)
    G16 = nn.grow(G, 16)
    with pytest.raises(SpecError):
        nn.grow(G16, 32)


@pytest.mark.parametrize("start", [4, 8, 16])
def test_growth_seam_generator(start):
    G = nn.build_generator(spec(), seed=11, resolution=start)
    z = Tensor(np.random.default_rng(start).normal(size=(16, 16)))
    before = G(z).data
    after = nn.grow(G, 2 * start)(z).data
    want = before.repeat(2, axis=2).repeat(2, axis=3)
    assert np.abs(after - want).max() <= 1e-12


def test_growth_seam_discriminator(rng):
    D = nn.build_discriminator(spec("discriminator"), seed=3, resolution=8)
    x = rng.uniform(-1, 1, size=(4, 1, 16, 16))
    pooled = x.reshape(4, 1, 8, 2, 8, 2).mean(axis=(3, 5))
    before = D(Tensor(pooled)).data
    after = nn.grow(D, 16)(Tensor(x)).data
    np.testing.assert_allclose(after, before, rtol=0, atol=1e-12)


def test_active_parameters_follow_alpha():
    G = nn.grow(nn.build_generator(spec(), seed=0, resolution=4), 8)
    assert "to_image4.conv.weight" in G.active_parameters()
    G.fade_alpha = 1.0
    assert "to_image4.conv.weight" not in G.active_parameters()
    assert set(G.active_parameters()) <= set(G.parameters)


def test_fade_alpha_range_checked():
    G = nn.build_generator(spec(), seed=0)
    with pytest.raises(SpecError):
        nn.NetworkState(G.spec, G.parameters, 4, fade_alpha=1.5)


def test_clone_is_independent():
    G = nn.build_generator(spec(), seed=0)
    H = G.clone()
    k = next(iter(G.parameters))
    H.parameters[k].data[...] = 0.0
    assert not np.all(G.parameters[k].data == 0.0)
