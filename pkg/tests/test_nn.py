import json
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from tlcv import nn
from tlcv.errors import ContractViolation
from tlcv.io import dumps_json


def _reference_forward(net, x):
    """Second implementation: explicit per-neuron loops with math-module activations."""
    a = list(map(float, x))
    for li, (W, b) in enumerate(zip(net.weights, net.biases)):
        z = [sum(W[i, j] * a[j] for j in range(len(a))) + b[i] for i in range(len(b))]
        if li == len(net.weights) - 1 or net.activation == "identity":
            a = z
        elif net.activation == "tanh":
            a = [math.tanh(v) for v in z]
        else:
            a = [0.5 * v * (1 + math.erf(v / math.sqrt(2))) for v in z]
    return np.array(a)


def _random_net(rng, act=None):
    sizes = [int(rng.integers(1, 6)) for _ in range(int(rng.integers(2, 5)))]
    net = nn.init(sizes, act or str(rng.choice(["tanh", "gelu", "identity"])), int(rng.integers(1 << 30)))
    for b in net.biases:
        b[:] = rng.normal(size=b.shape) * 0.3
    return net


def test_zero_net_outputs_zero():
    net = nn.init([3, 4, 2], "tanh", 0)
    for W in net.weights:
        W[:] = 0
    assert np.all(nn.forward(net, np.ones(3)) == 0.0)


def test_single_linear_layer(rng):
    W, b, x = rng.normal(size=(2, 3)), rng.normal(size=2), rng.normal(size=3)
    net = nn.DenseNet([3, 2], "tanh", [W], [b])
    assert np.array_equal(nn.forward(net, x), W @ x + b)
    _, gx = nn.backward(net, x, np.array([1.0, -2.0]))
    assert np.allclose(gx, W.T @ [1.0, -2.0], atol=1e-15)


def test_forward_matches_reference_implementation(rng):
    for act in ("tanh", "gelu", "identity"):
        for _ in range(10):
            net = _random_net(rng, act)
            x = rng.normal(size=net.n_in)
            assert np.max(np.abs(nn.forward(net, x) - _reference_forward(net, x))) < 1e-12


def test_batch_equals_per_sample(rng):
    net = _random_net(rng, "gelu")
    X = rng.normal(size=(7, net.n_in))
    batch = nn.forward(net, X)
    for i in range(7):
        assert np.max(np.abs(batch[i] - nn.forward(net, X[i]))) < 1e-12


def _fd_check(net, x, up, h=1e-6):
    grads, gx = nn.backward(net, x, up)
    f = lambda: float(np.dot(up, nn.forward(net, x)))
    worst = 0.0
    for p, g in zip(net.parameters(), grads):
        for idx in np.ndindex(p.shape):
            old = p[idx]
            p[idx] = old + h
            fp = f()
            p[idx] = old - h
            fm = f()
            p[idx] = old
            fd = (fp - fm) / (2 * h)
            worst = max(worst, abs(g[idx] - fd) / (abs(g[idx]) + 1e-8) if abs(g[idx] - fd) > 1e-9 else 0.0)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h
        fd = (np.dot(up, nn.forward(net, x + e)) - np.dot(up, nn.forward(net, x - e))) / (2 * h)
        worst = max(worst, abs(gx[i] - fd) / (abs(gx[i]) + 1e-8) if abs(gx[i] - fd) > 1e-9 else 0.0)
    return worst


def test_backward_matches_fd_100_cases(rng):
    worst = max(_fd_check(net, rng.normal(size=net.n_in), rng.normal(size=net.n_out))
                for net in (_random_net(rng) for _ in range(100)))
    assert worst < 1e-5


def test_adam_zero_gradient_keeps_parameters():
    net = nn.init([2, 3, 1], "tanh", 1)
    before = [p.copy() for p in net.parameters()]
    st_ = nn.adam_state(net, 1e-2)
    nn.adam_update(net, [np.zeros_like(p) for p in net.parameters()], st_)
    assert all(np.array_equal(a, b) for a, b in zip(before, net.parameters()))


def test_adam_first_step_is_lr_sign(rng):
    theta = [rng.normal(size=5)]
    g = [rng.normal(size=5)]
    before = theta[0].copy()
    nn.adam_update(theta, g, nn.adam_state(theta, lr=0.01))
    step = theta[0] - before
    assert np.allclose(step, -0.01 * np.sign(g[0]), rtol=1e-6)


def test_adam_minimizes_quadratic_bowl(rng):
    theta = [rng.normal(size=4) * 3]
    st_ = nn.adam_state(theta, lr=1e-2)
    for _ in range(2000):
        nn.adam_update(theta, [2 * theta[0]], st_)
    assert np.linalg.norm(theta[0]) < 1e-3


def test_init_determinism_and_xavier_variance():
    a, b, c = nn.init([400, 300, 1], "tanh", 5), nn.init([400, 300, 1], "tanh", 5), nn.init([400, 300, 1], "tanh", 6)
    assert all(np.array_equal(x, y) for x, y in zip(a.parameters(), b.parameters()))
    assert not np.array_equal(a.weights[0], c.weights[0])
    assert np.var(a.weights[0]) == pytest.approx(2.0 / 700, rel=0.1)
    assert all(np.all(bias == 0) for bias in a.biases)


def test_contract_violations():
    with pytest.raises(ContractViolation):
        nn.init([3], "tanh", 0)
    net = nn.init([3, 2], "tanh", 0)
    with pytest.raises(ContractViolation):
        nn.forward(net, np.zeros(4))
    with pytest.raises(ContractViolation):
        nn.init([3, 2], "relu", 0)


def test_checkpoint_roundtrip_is_bit_exact(rng):
    net = _random_net(rng, "gelu")
    for W in net.weights:
        W += rng.normal(size=W.shape) * 1e-17
    text = dumps_json(nn.net_to_dict(net, {"note": "x"}))
    back, extras = nn.net_from_dict(json.loads(text))
    assert extras == {"note": "x"}
    assert back.layer_sizes == net.layer_sizes and back.activation == net.activation
    assert all(np.array_equal(p, q) for p, q in zip(net.parameters(), back.parameters()))
    assert dumps_json(nn.net_to_dict(back, {"note": "x"})) == text


@given(st.integers(0, 2**31 - 1))
def test_forward_is_pure(seed):
    rng = np.random.default_rng(seed)
    net = _random_net(rng)
    x = rng.normal(size=net.n_in)
    snapshot = [p.copy() for p in net.parameters()]
    y1, y2 = nn.forward(net, x), nn.forward(net, x.copy())
    assert np.array_equal(y1, y2)
    assert all(np.array_equal(a, b) for a, b in zip(snapshot, net.parameters()))
