import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from hamlet.errors import ContractViolation
from hamlet.model import (
    NUM_MODULES,
    AffineModule,
    GradientSet,
    ModularNet,
    backward_suffix,
    build_net,
    ema_blend,
    features_upto,
    flops_of,
    forward,
    load_net,
    module_fwd_flops,
    net_from_dict,
    net_to_dict,
    save_net,
    sgd_step,
)
from hamlet.trainer import cross_entropy


def _loss(net, x, y, fd_target=None, lam=0.0):
    logits, cache = forward(net, x)
    loss, g = cross_entropy(logits, y)
    if fd_target is not None:
        diff = cache.outputs[0] - fd_target
        loss += lam * float(np.mean(np.sum(diff**2, axis=1)))
    return loss


def _numeric_grad(net, x, y, eps=1e-5, **kw):
    out = []
    for m in net.modules:
        for p in (m.weights, m.bias):
            g = np.zeros_like(p)
            it = np.nditer(p, flags=["multi_index"])
            for _ in it:
                i = it.multi_index
                old = p[i]
                p[i] = old + eps
                up = _loss(net, x, y, **kw)
                p[i] = old - eps
                down = _loss(net, x, y, **kw)
                p[i] = old
                g[i] = (up - down) / (2 * eps)
            out.append(g.ravel())
    return np.concatenate(out)


def _max_rel_err(a, n, floor=1e-6):
    return float(np.max(np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)))


def _random_dims(rng):
    return [int(v) for v in rng.integers(2, 17, size=5)]


@pytest.mark.parametrize("seed", range(20))
def test_gradients_match_central_differences(seed):
    rng = np.random.default_rng(seed)
    dims = _random_dims(rng)
    net = build_net(dims, rng)
    x = rng.normal(size=(5, dims[0]))
    y = rng.integers(0, dims[-1], size=5)
    logits, cache = forward(net, x)
    _, g = cross_entropy(logits, y)
    analytic = backward_suffix(net, cache, g, NUM_MODULES).flat()
    numeric = _numeric_grad(net, x, y)
    assert _max_rel_err(analytic, numeric) < 1e-4


def test_feature_gradient_enters_first_module(rng):
    dims = [4, 6, 5, 4, 3]
    net = build_net(dims, rng)
    x = rng.normal(size=(6, 4))
    y = rng.integers(0, 3, size=6)
    target = np.tanh(rng.normal(size=(6, 6)))
    lam = 0.3
    logits, cache = forward(net, x)
    _, g = cross_entropy(logits, y)
    fd = lam * 2.0 * (cache.outputs[0] - target) / len(x)
    analytic = backward_suffix(net, cache, g, NUM_MODULES, extra_grads={0: fd}).flat()
    numeric = _numeric_grad(net, x, y, fd_target=target, lam=lam)
    assert _max_rel_err(analytic, numeric) < 1e-4


@given(seed=st.integers(0, 10_000), k=st.integers(1, NUM_MODULES))
def test_suffix_gradients_are_exact_slices(seed, k):
    rng = np.random.default_rng(seed)
    dims = _random_dims(rng)
    net = build_net(dims, rng)
    x = rng.normal(size=(3, dims[0]))
    _, cache = forward(net, x)
    g = rng.normal(size=(3, dims[-1]))
    full = backward_suffix(net, cache, g, NUM_MODULES)
    part = backward_suffix(net, cache, g, k)
    first = NUM_MODULES - k
    for i in range(NUM_MODULES):
        if i >= first:
            assert np.array_equal(part.weights[i], full.weights[i])
            assert np.array_equal(part.bias[i], full.bias[i])
        else:
            assert not part.weights[i].any() and not part.bias[i].any()


def test_zero_cotangent_gives_zero_gradients(small_net, rng):
    _, cache = forward(small_net, rng.normal(size=(4, 5)))
    for k in range(1, 5):
        assert not backward_suffix(small_net, cache, np.zeros((4, 3)), k).flat().any()


def test_stale_cache_is_rejected(small_net, rng):
    other = build_net([5, 8, 6, 4, 3], rng)
    _, cache = forward(other, rng.normal(size=(2, 5)))
    with pytest.raises(ContractViolation):
        backward_suffix(small_net, cache, np.zeros((2, 3)), 4)
    _, cache = forward(small_net, rng.normal(size=(2, 5)))
    with pytest.raises(ContractViolation):
        backward_suffix(small_net, cache, np.zeros((2, 3)), 0)
    with pytest.raises(ContractViolation):
        backward_suffix(small_net, cache, np.zeros((3, 3)), 2)


def test_sgd_step_arithmetic():
    mods = [AffineModule(np.ones((2, 2)), np.ones(2)) for _ in range(3)]
    mods.append(AffineModule(np.ones((2, 2)), np.ones(2), "identity"))
    net = ModularNet(mods)
    grads = GradientSet([np.full((2, 2), 0.5)] * 4, [np.full(2, 0.5)] * 4, 4)
    out = sgd_step(net, grads, 0.1)
    for m in out.modules:
        assert np.allclose(m.weights, 0.95) and np.allclose(m.bias, 0.95)
    assert sgd_step(net, grads, 0.0).equals(net)
    with pytest.raises(ContractViolation):
        sgd_step(net, grads, -0.1)


@given(seed=st.integers(0, 10_000), k=st.integers(1, NUM_MODULES), lr=st.floats(0, 1))
def test_sgd_leaves_frozen_prefix_bit_identical(seed, k, lr):
    rng = np.random.default_rng(seed)
    net = build_net([4, 5, 5, 4, 3], rng)
    _, cache = forward(net, rng.normal(size=(3, 4)))
    grads = backward_suffix(net, cache, rng.normal(size=(3, 3)), k)
    out = sgd_step(net, grads, lr)
    for i in range(NUM_MODULES - k):
        assert np.array_equal(out.modules[i].weights, net.modules[i].weights)
        assert np.array_equal(out.modules[i].bias, net.modules[i].bias)


def test_ema_examples(rng):
    t = build_net([3, 4, 4, 3, 2], rng)
    s = build_net([3, 4, 4, 3, 2], rng)
    assert ema_blend(t, s, 1.0).equals(t)
    assert ema_blend(t, s, 0.0).equals(s)
    zeros = ModularNet([AffineModule(np.zeros_like(m.weights), np.zeros_like(m.bias), m.activation) for m in t.modules])
    ones = ModularNet([AffineModule(np.ones_like(m.weights), np.ones_like(m.bias), m.activation) for m in t.modules])
    out = ema_blend(zeros, ones, 0.999)
    assert np.allclose(out.flat(), 0.001, rtol=0, atol=1e-15)
    with pytest.raises(ContractViolation):
        ema_blend(t, build_net([3, 5, 4, 3, 2], rng), 0.5)
    with pytest.raises(ContractViolation):
        ema_blend(t, s, 1.5)


@given(seed=st.integers(0, 10_000), mu=st.floats(0, 1))
def test_ema_is_convex(seed, mu):
    rng = np.random.default_rng(seed)
    t = build_net([3, 4, 4, 3, 2], rng)
    s = build_net([3, 4, 4, 3, 2], rng)
    out = ema_blend(t, s, mu).flat()
    lo = np.minimum(t.flat(), s.flat())
    hi = np.maximum(t.flat(), s.flat())
    assert np.all(out >= lo - 1e-15) and np.all(out <= hi + 1e-15)


def test_flops_examples():
    assert module_fwd_flops([8, 8], 1) == [128]
    dims = [8, 32, 32, 16, 6]
    fwd, bwd = flops_of(dims, 0)
    assert bwd == 0 and fwd == sum(module_fwd_flops(dims))
    assert flops_of(dims, 4)[1] > flops_of(dims, 1)[1]
    with pytest.raises(ContractViolation):
        flops_of(dims, 5)


@given(
    dims=st.lists(st.integers(1, 64), min_size=5, max_size=5),
    k=st.integers(0, NUM_MODULES),
    batch=st.integers(1, 64),
)
def test_flops_additivity(dims, k, batch):
    per = module_fwd_flops(dims, batch)
    fwd, bwd = flops_of(dims, k, batch)
    assert fwd == sum(per)
    assert bwd == sum(2 * per[i] for i in range(NUM_MODULES - k, NUM_MODULES))


def test_forward_contracts(small_net):
    logits, cache = forward(small_net, np.zeros(5))
    assert logits.shape == (3,) and cache.batch_size == 1
    with pytest.raises(ContractViolation):
        forward(small_net, np.zeros(4))
    with pytest.raises(ContractViolation):
        forward(small_net, np.array([0, 0, np.nan, 0, 0]))
    assert features_upto(small_net, np.zeros((2, 5)), 1).shape == (2, 7)


def test_net_validation(rng):
    good = build_net([3, 4, 4, 3, 2], rng)
    with pytest.raises(ContractViolation):
        ModularNet(good.modules[:3])
    with pytest.raises(ContractViolation):
        ModularNet([*good.modules[:3], AffineModule(np.ones((2, 3)), np.ones(2), "tanh")])
    with pytest.raises(ContractViolation):
        AffineModule(np.ones((2, 3)), np.ones(3))
    with pytest.raises(ContractViolation):
        AffineModule(np.ones((2, 3)), np.ones(2), "relu")
    with pytest.raises(ContractViolation):
        build_net([3, 4, 2], rng)


def test_checkpoint_round_trip(tmp_path, small_net):
    path = tmp_path / "net.json"
    save_net(small_net, path)
    loaded = load_net(path)
    assert loaded.equals(small_net)
    assert loaded.checksum() == small_net.checksum()
    assert net_from_dict(net_to_dict(small_net)).equals(small_net)


def test_checkpoint_rejects_foreign_files(tmp_path, small_net):
    path = tmp_path / "net.json"
    save_net(small_net, path)
    text = path.read_text()
    path.write_text(text.replace('"version": 1', '"version": 99'))
    with pytest.raises(ContractViolation):
        load_net(path)
    path.write_text('{"format": "other"}')
    with pytest.raises(ContractViolation):
        load_net(path)
