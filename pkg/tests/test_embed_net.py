import numpy as np
import pytest

from cope.embed_net import (
    EmbeddingNetwork,
    LinearHead,
    NetConfig,
    ParamGrads,
    StaleCacheError,
    decode_array,
    encode_array,
)
from cope.numerics import grad_check


def small_net(seed=0):
    return EmbeddingNetwork(NetConfig(6, (5, 4), 3, seed))


def test_features_unit_norm_and_shape():
    net = small_net()
    x = np.random.default_rng(0).standard_normal((7, 6))
    f = net.embed(x)
    assert f.shape == (7, 3)
    np.testing.assert_allclose(np.linalg.norm(f, axis=1), 1.0, atol=1e-12)
    assert net.num_params == 6 * 5 + 5 + 5 * 4 + 4 + 4 * 3 + 3


def test_init_deterministic_per_seed():
    a, b, c = small_net(1), small_net(1), small_net(2)
    for wa, wb in zip(a.weights, b.weights):
        np.testing.assert_array_equal(wa, wb)
    assert not np.array_equal(a.weights[0], c.weights[0])
    bound = 1 / np.sqrt(6)
    assert np.all(np.abs(a.weights[0]) <= bound)


def test_input_dim_checked():
    with pytest.raises(ValueError):
        small_net().forward(np.zeros((2, 5)))
    with pytest.raises(ValueError):
        NetConfig(4, (3,), 1)


def _flat_check(net, x, upstream, d_raw=None):
    _, cache = net.forward(x)
    grads = net.backward(cache, upstream, d_raw)
    worst = 0.0
    for k in range(len(net.weights)):
        for params, g in ((net.weights, grads.weights[k]), (net.biases, grads.biases[k])):
            target = params[k]

            def f(p, target=target):
                saved = target.copy()
                target[...] = p
                _, c = net.forward(x)
                out = float(np.sum(c.features * upstream))
                if d_raw is not None:
                    out += float(np.sum(c.raw * d_raw))
                target[...] = saved
                return out

            worst = max(worst, grad_check(f, target.copy(), g))
    return worst


def test_backward_matches_finite_differences():
    rng = np.random.default_rng(3)
    net = small_net()
    x = rng.standard_normal((4, 6))
    assert _flat_check(net, x, rng.standard_normal((4, 3))) < 1e-6
    assert _flat_check(net, x, rng.standard_normal((4, 3)), d_raw=rng.standard_normal((4, 3))) < 1e-6


def test_backward_zero_upstream_and_linearity():
    rng = np.random.default_rng(4)
    net = small_net()
    _, cache = net.forward(rng.standard_normal((5, 6)))
    zero = net.backward(cache, np.zeros((5, 3)))
    assert all(not g.any() for g in zero.weights + zero.biases)
    u, v = rng.standard_normal((5, 3)), rng.standard_normal((5, 3))
    gu, gv, guv = net.backward(cache, u), net.backward(cache, v), net.backward(cache, 2 * u + v)
    combo = gu.scaled(2.0) + gv
    for a, b in zip(combo.weights + combo.biases, guv.weights + guv.biases):
        np.testing.assert_allclose(a, b, atol=1e-12)


def test_sgd_step_descends_and_invalidates_cache():
    net = small_net()
    grads = ParamGrads([np.ones_like(w) for w in net.weights], [np.ones_like(b) for b in net.biases])
    before = net.weights[0].copy()
    _, cache = net.forward(np.ones((1, 6)))
    net.sgd_step(grads, 0.5)
    np.testing.assert_allclose(net.weights[0], before - 0.5)
    with pytest.raises(StaleCacheError):
        net.backward(cache, np.ones((1, 3)))


def test_sgd_step_reduces_simple_objective():
    rng = np.random.default_rng(5)
    net = small_net()
    x = rng.standard_normal((8, 6))
    target = np.array([1.0, 0.0, 0.0])
    f0 = -float(np.sum(net.embed(x) @ target))
    _, cache = net.forward(x)
    net.sgd_step(net.backward(cache, -np.tile(target, (8, 1))), 0.01)
    assert -float(np.sum(net.embed(x) @ target)) < f0


def test_copy_is_independent_and_roundtrip_exact():
    net = small_net()
    clone = net.copy()
    clone.weights[0][0, 0] += 1.0
    assert net.weights[0][0, 0] != clone.weights[0][0, 0]
    back = EmbeddingNetwork.from_dict(net.to_dict())
    x = np.random.default_rng(6).standard_normal((3, 6))
    np.testing.assert_array_equal(back.embed(x), net.embed(x))


def test_from_dict_rejects_inconsistent_shapes():
    d = small_net().to_dict()
    d["config"]["latent_dim"] = 4
    with pytest.raises(ValueError):
        EmbeddingNetwork.from_dict(d)


def test_array_codec_exact():
    a = np.random.default_rng(7).standard_normal((3, 2))
    np.testing.assert_array_equal(decode_array(encode_array(a)), a)


def test_linear_head_grows_per_class():
    head = LinearHead(3, seed=0)
    head.add_class(4)
    head.add_class(1)
    assert head.weight.shape == (3, 2)
    np.testing.assert_array_equal(head.column_of([1, 4]), [1, 0])
    with pytest.raises(ValueError, match="outside head range"):
        head.column_of([2])
    with pytest.raises(ValueError):
        head.add_class(4)
    h = np.random.default_rng(8).standard_normal((5, 3))
    assert set(head.predict(h).tolist()) <= {1, 4}
    back = LinearHead.from_dict(head.to_dict())
    np.testing.assert_array_equal(back.logits(h), head.logits(h))
