"""Dense feed-forward networks with exact reverse-mode gradients, plus Adam.

Weights are stored as (fan_out, fan_in) arrays, so a layer maps a row batch
``X`` to ``X @ W.T + b``. Hidden layers use the chosen activation and the
final layer is always linear. Everything is float64.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import erf

from .errors import ContractViolation

ACTIVATIONS = ("tanh", "gelu", "identity")
CHECKPOINT_SCHEMA = 1
_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


@dataclass
class DenseNet:
    layer_sizes: list
    activation: str
    weights: list
    biases: list

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ContractViolation(f"unknown activation {self.activation!r}")
        if len(self.layer_sizes) < 2:
            raise ContractViolation("a network needs at least an input and an output layer")
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            if W.shape != (self.layer_sizes[i + 1], self.layer_sizes[i]) or b.shape != (self.layer_sizes[i + 1],):
                raise ContractViolation(f"layer {i} shapes inconsistent with {self.layer_sizes}")

    @property
    def n_in(self) -> int:
        return self.layer_sizes[0]

    @property
    def n_out(self) -> int:
        return self.layer_sizes[-1]

    def parameters(self) -> list:
        """Parameter arrays (views, not copies) in W0, b0, W1, b1, ... order."""
        out = []
        for W, b in zip(self.weights, self.biases):
            out += [W, b]
        return out

    def copy(self) -> "DenseNet":
        return DenseNet(list(self.layer_sizes), self.activation,
                        [W.copy() for W in self.weights], [b.copy() for b in self.biases])

    def __call__(self, x):
        return forward(self, x)


def init(layer_sizes, activation="tanh", seed=0) -> DenseNet:
    """Xavier-uniform weights and zero biases."""
    if len(layer_sizes) < 2:
        raise ContractViolation("need at least two layer sizes")
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(layer_sizes[:-1], layer_sizes[1:]):
        limit = math.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-limit, limit, size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    return DenseNet(list(layer_sizes), activation, weights, biases)


def _act(name, z):
    if name == "tanh":
        return np.tanh(z)
    if name == "gelu":
        return 0.5 * z * (1.0 + erf(z * _INV_SQRT2))
    return z


def _act_grad(name, z, a):
    if name == "tanh":
        return 1.0 - a * a
    if name == "gelu":
        return 0.5 * (1.0 + erf(z * _INV_SQRT2)) + z * _INV_SQRT_2PI * np.exp(-0.5 * z * z)
    return np.ones_like(z)


def _check_input(net, x):
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != net.n_in or x.ndim > 2:
        raise ContractViolation(f"network expects {net.n_in} inputs, got shape {x.shape}")
    return x


def forward_cached(net: DenseNet, X):
    """Batched forward pass keeping pre-activations for ``backward_cached``."""
    X = np.atleast_2d(_check_input(net, X))
    zs, acts = [], [X]
    a = X
    last = len(net.weights) - 1
    for i, (W, b) in enumerate(zip(net.weights, net.biases)):
        z = a @ W.T + b
        a = z if i == last else _act(net.activation, z)
        zs.append(z)
        acts.append(a)
    return a, (zs, acts)


def forward(net: DenseNet, x):
    x = _check_input(net, x)
    out, _ = forward_cached(net, x)
    return out[0] if x.ndim == 1 else out


def backward_cached(net: DenseNet, cache, upstream, need_params=True):
    """Gradients of sum_i <upstream_i, net(x_i)> w.r.t. parameters and inputs."""
    zs, acts = cache
    delta = np.atleast_2d(np.asarray(upstream, dtype=float))
    if delta.shape != acts[-1].shape:
        raise ContractViolation(f"upstream shape {delta.shape} != output shape {acts[-1].shape}")
    grads = [None] * (2 * len(net.weights))
    for i in range(len(net.weights) - 1, -1, -1):
        if i != len(net.weights) - 1:
            delta = delta * _act_grad(net.activation, zs[i], acts[i + 1])
        if need_params:
            grads[2 * i] = delta.T @ acts[i]
            grads[2 * i + 1] = delta.sum(axis=0)
        delta = delta @ net.weights[i]
    return grads, delta


def backward(net: DenseNet, x, upstream):
    """Returns (param_grads in ``parameters()`` order, input gradient)."""
    x = _check_input(net, x)
    _, cache = forward_cached(net, x)
    grads, gx = backward_cached(net, cache, upstream)
    return grads, (gx[0] if x.ndim == 1 else gx)


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adam_state(params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8) -> AdamState:
    params = params.parameters() if isinstance(params, DenseNet) else params
    return AdamState(lr, beta1, beta2, eps, 0, [np.zeros_like(p) for p in params],
                     [np.zeros_like(p) for p in params])


def adam_update(params, grads, state: AdamState):
    """One bias-corrected Adam step applied in place to ``params`` (a net or a list of arrays)."""
    plist = params.parameters() if isinstance(params, DenseNet) else params
    if len(plist) != len(grads) or len(plist) != len(state.m):
        raise ContractViolation("parameter, gradient and moment lists differ in length")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for p, g, m, v in zip(plist, grads, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params, state


def net_to_dict(net: DenseNet, extras=None) -> dict:
    return {
        "schema_version": CHECKPOINT_SCHEMA,
        "layer_sizes": list(net.layer_sizes),
        "activation": net.activation,
        "weights": [W.tolist() for W in net.weights],
        "biases": [b.tolist() for b in net.biases],
        "extras": extras or {},
    }


def net_from_dict(d: dict):
    if d.get("schema_version") != CHECKPOINT_SCHEMA:
        raise ContractViolation(f"unsupported checkpoint schema {d.get('schema_version')!r}")
    net = DenseNet(list(d["layer_sizes"]), d["activation"],
                   [np.array(W, dtype=float).reshape(o, i) for W, i, o in
                    zip(d["weights"], d["layer_sizes"][:-1], d["layer_sizes"][1:])],
                   [np.array(b, dtype=float) for b in d["biases"]])
    return net, d.get("extras", {})
