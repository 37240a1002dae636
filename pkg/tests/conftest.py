import numpy as np
import pytest

from freqprop.network import ConvLayer, Network, UpsampleLayer, init_network


def random_net(rng, depth, channels, K, padding="circular", activation="identity", std=0.3, mean=0.0,
               zero_bias=False, upsample_at=()):
    """Conv stack with random channel counts in ``1..channels``; returns (net, in_channels)."""
    chans = [int(rng.integers(1, channels + 1)) for _ in range(depth + 1)]
    layers = []
    for i in range(depth):
        if i in upsample_at:
            layers.append(UpsampleLayer(2))
        k = int(rng.integers(1, K + 1))
        layers.append(ConvLayer.template(chans[i], chans[i + 1], k, padding=padding, activation=activation,
                                         init_mean=mean, init_std=std, zero_bias=zero_bias))
    seed = int(rng.integers(0, 2**31))
    return init_network(Network(tuple(layers), learning_rate=0.05, seed=seed), seed), chans[0]


def naive_dft2(f):
    """Direct quadruple sum, one frequency at a time (independent of the twiddle tables)."""
    f = np.asarray(f, dtype=np.complex128)
    M, N = f.shape[-2:]
    m = np.arange(M)[:, None]
    n = np.arange(N)[None, :]
    out = np.empty(f.shape, dtype=np.complex128)
    for u in range(M):
        for v in range(N):
            phase = np.exp(-2j * np.pi * (u * m / M + v * n / N))
            out[..., u, v] = np.sum(f * phase, axis=(-2, -1))
    return out


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def fd_gradient_error(net, x, target, eps=1e-6):
    """Max-norm relative error between backprop and central differences over all parameters."""
    from freqprop.network import (flatten_grads, flatten_params, loss_and_gradients, mse_loss_and_grad,
                                  network_forward, unflatten_params)

    _, grads = loss_and_gradients(net, x, target)
    g = flatten_grads(grads)
    theta = flatten_params(net)
    fd = np.empty_like(theta)
    for i in range(theta.size):
        tp, tm = theta.copy(), theta.copy()
        tp[i] += eps
        tm[i] -= eps
        lp = mse_loss_and_grad(network_forward(unflatten_params(net, tp), x)[0], target)[0]
        lm = mse_loss_and_grad(network_forward(unflatten_params(net, tm), x)[0], target)[0]
        fd[i] = (lp - lm) / (2 * eps)
    return float(np.max(np.abs(fd - g)) / max(np.max(np.abs(fd)), 1e-300))


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
