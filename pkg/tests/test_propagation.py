import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import random_net
from freqprop.exceptions import KernelTooLarge, RegimeViolation, ShapeMismatch, SizeRegimeUnsupported, UpsamplePresent
from freqprop.network import (
    ConvLayer,
    Network,
    UpsampleLayer,
    backprop,
    conv_forward,
    init_network,
    mse_loss_and_grad,
    network_forward,
    sgd_step,
)
from freqprop.propagation import (
    _cascade_from_fields,
    cascade_spectra,
    cascade_transfer,
    compute_alpha,
    compute_chi,
    compute_transfer_field,
    delta_T_from_layer,
    explicit_beta,
    measure_delta_T,
    predict_delta_T,
    predict_delta_T_all,
    predict_output_spectrum,
    propagate_layer_general,
    propagate_layer_same,
    transfer_fields,
)
from freqprop.tensor import cosine_similarity_norm_maps, dft2


def conv(W, b=None, **kw):
    W = np.asarray(W, dtype=float)
    return ConvLayer(weights=W, bias=np.zeros(W.shape[0]) if b is None else np.asarray(b, float), **kw)


def brute_transfer(W, M, N):
    D, C, K, _ = W.shape
    T = np.zeros((M, N, D, C), dtype=complex)
    for u in range(M):
        for v in range(N):
            for t in range(K):
                for s in range(K):
                    T[u, v] += W[:, :, t, s] * np.exp(2j * np.pi * (u * t / M + v * s / N))
    return T


def rel_err(a, b):
    return np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-300)


class TestTransferField:
    def test_single_tap(self, rng):
        W = rng.normal(size=(3, 2, 1, 1))
        T = compute_transfer_field(conv(W), (5, 4)).matrices
        np.testing.assert_allclose(T, np.broadcast_to(W[:, :, 0, 0], (5, 4, 3, 2)))

    def test_fundamental_sums_taps(self, rng):
        W = rng.normal(size=(2, 3, 3, 3))
        T = compute_transfer_field(conv(W), (6, 6)).matrices
        np.testing.assert_allclose(T[0, 0], W.sum(axis=(2, 3)), atol=1e-12)

    def test_hand_value(self):
        W = np.zeros((1, 1, 2, 2))
        W[0, 0, 1, 0] = 1
        T = compute_transfer_field(conv(W), (4, 4)).matrices
        assert abs(T[1, 0, 0, 0] - 1j) < 1e-12

    def test_matches_brute_force(self, rng):
        W = rng.normal(size=(2, 3, 3, 3))
        np.testing.assert_allclose(compute_transfer_field(conv(W), (8, 6)).matrices, brute_transfer(W, 8, 6), atol=1e-12)

    def test_conjugate_symmetry(self, rng):
        W = rng.normal(size=(2, 2, 3, 3))
        T = compute_transfer_field(conv(W), (7, 6)).matrices
        mirror = np.conj(T[(-np.arange(7)) % 7][:, (-np.arange(6)) % 6])
        np.testing.assert_allclose(T, mirror, atol=1e-12)

    def test_kernel_too_large(self):
        with pytest.raises(KernelTooLarge):
            compute_transfer_field(conv(np.ones((1, 1, 5, 5))), (4, 4))


class TestAlpha:
    def test_same_size_is_kronecker(self):
        a = compute_alpha((5, 4), (5, 4), 3).full()
        expect = np.einsum("pu,qv->pquv", np.eye(5), np.eye(4))
        np.testing.assert_allclose(a, expect, atol=1e-12)

    def test_valid_fundamental(self):
        a = compute_alpha((6, 6), (8, 8), 3)
        assert a.coefficient(0, 0, 0, 0) == pytest.approx(36 / 64)

    def test_matches_double_sum(self, rng):
        M = N = 8
        K = 3
        Mp = Np = M - K + 1
        a = compute_alpha((Mp, Np), (M, N), K)
        m = np.arange(Mp)[:, None]
        n = np.arange(Np)[None, :]
        for _ in range(20):
            up, vp = rng.integers(Mp), rng.integers(Np)
            u, v = rng.integers(M), rng.integers(N)
            direct = np.sum(np.exp(2j * np.pi * ((u / M - up / Mp) * m + (v / N - vp / Np) * n))) / (M * N)
            assert abs(a.coefficient(up, vp, u, v) - direct) < 1e-10

    def test_unsupported_sizes(self):
        with pytest.raises(SizeRegimeUnsupported):
            compute_alpha((5, 5), (8, 8), 3)


class TestSameLayer:
    def test_hand_example(self):
        h = propagate_layer_same(compute_transfer_field(conv([[[[3.0]]]], [1.0]), (2, 2)),
                                 np.array([[[10.0, -2], [-4, 0]]]), [1.0])
        np.testing.assert_allclose(h[0], [[34, -6], [-12, 0]], atol=1e-12)
        np.testing.assert_allclose(h, dft2(np.array([[[4.0, 7], [10, 13]]])), atol=1e-12)

    def test_identity_transfer(self, rng):
        tf = compute_transfer_field(conv(np.eye(3)[:, :, None, None]), (4, 4))
        g = dft2(rng.normal(size=(3, 4, 4)))
        np.testing.assert_allclose(propagate_layer_same(tf, g, np.zeros(3)), g)

    def test_zero_input_leaves_bias_spike(self, rng):
        L = conv(rng.normal(size=(2, 1, 3, 3)), [0.5, -1.0])
        h = propagate_layer_same(compute_transfer_field(L, (4, 4)), np.zeros((1, 4, 4)), L.bias)
        expect = np.zeros((2, 4, 4), dtype=complex)
        expect[:, 0, 0] = 16 * L.bias
        np.testing.assert_allclose(h, expect)

    def test_fuzzed_circular_layers(self):
        """100 random layers, M = N in {4, 8, 16}, C, D <= 4, K <= 3."""
        r = np.random.default_rng(77)
        worst = 0.0
        for _ in range(100):
            M = int(r.choice([4, 8, 16]))
            C, D, K = (int(v) for v in r.integers(1, [5, 5, 4]))
            L = conv(r.normal(size=(D, C, K, K)), r.normal(size=D), padding="circular")
            f = r.normal(size=(C, M, M))
            h = propagate_layer_same(compute_transfer_field(L, (M, M)), dft2(f), L.bias)
            worst = max(worst, rel_err(h, dft2(conv_forward(L, f))))
        assert worst < 1e-8

    @settings(max_examples=25, deadline=None)
    @given(seed=st.integers(0, 2**31), u=st.integers(0, 5), v=st.integers(0, 5))
    def test_frequency_independence(self, seed, u, v):
        r = np.random.default_rng(seed)
        L = conv(r.normal(size=(2, 3, 3, 3)), r.normal(size=2))
        tf = compute_transfer_field(L, (6, 6))
        g = dft2(r.normal(size=(3, 6, 6)))
        g2 = g.copy()
        g2[:, u, v] = 0
        diff = np.abs(propagate_layer_same(tf, g, L.bias) - propagate_layer_same(tf, g2, L.bias))
        diff[:, u, v] = 0
        assert np.all(diff == 0)

    def test_shape_checked(self, rng):
        tf = compute_transfer_field(conv(rng.normal(size=(2, 3, 1, 1))), (4, 4))
        with pytest.raises(ShapeMismatch):
            propagate_layer_same(tf, np.zeros((2, 4, 4)), np.zeros(2))


class TestGeneralLayer:
    def test_same_size_reduces(self, rng):
        L = conv(rng.normal(size=(2, 2, 3, 3)), rng.normal(size=2))
        tf = compute_transfer_field(L, (5, 5))
        g = dft2(rng.normal(size=(2, 5, 5)))
        np.testing.assert_allclose(
            propagate_layer_general(tf, compute_alpha((5, 5), (5, 5), 3), g, L.bias),
            propagate_layer_same(tf, g, L.bias), atol=1e-10,
        )

    def test_zero_input(self, rng):
        L = conv(rng.normal(size=(1, 1, 2, 2)), [0.3], padding="none")
        h = propagate_layer_general(compute_transfer_field(L, (4, 4)), compute_alpha((3, 3), (4, 4), 2),
                                    np.zeros((1, 4, 4)), L.bias)
        assert h[0, 0, 0] == pytest.approx(9 * 0.3)
        h[0, 0, 0] = 0
        assert np.all(np.abs(h) < 1e-12)

    def test_hand_sized_valid_layer(self, rng):
        L = conv(rng.normal(size=(1, 1, 2, 2)), rng.normal(size=1), padding="none")
        f = rng.normal(size=(1, 4, 4))
        h = propagate_layer_general(compute_transfer_field(L, (4, 4)), compute_alpha((3, 3), (4, 4), 2), dft2(f), L.bias)
        assert rel_err(h, dft2(conv_forward(L, f))) < 1e-8

    @settings(max_examples=40, deadline=None)
    @given(seed=st.integers(0, 2**31), M=st.integers(3, 12), K=st.integers(1, 3))
    def test_valid_layers_match_spatial(self, seed, M, K):
        r = np.random.default_rng(seed)
        C, D = (int(v) for v in r.integers(1, 4, size=2))
        L = conv(r.normal(size=(D, C, K, K)), r.normal(size=D), padding="none")
        f = r.normal(size=(C, M, M))
        out = (M - K + 1,) * 2
        h = propagate_layer_general(compute_transfer_field(L, (M, M)), compute_alpha(out, (M, M), K), dft2(f), L.bias)
        assert rel_err(h, dft2(conv_forward(L, f))) < 1e-7


class TestCascade:
    def test_single_layer(self, rng):
        L = conv(rng.normal(size=(2, 3, 3, 3)), rng.normal(size=2))
        ct = cascade_transfer(Network((L,)), (4, 4))
        np.testing.assert_allclose(ct.products, compute_transfer_field(L, (4, 4)).matrices)
        np.testing.assert_allclose(ct.beta, 16 * L.bias)

    def test_scalar_product(self):
        ct = cascade_transfer(Network((conv([[[[2.0]]]]), conv([[[[3.0]]]]))), (3, 3))
        np.testing.assert_allclose(ct.products, 6.0)

    def test_identity_cascade(self, rng):
        ct = _cascade_from_fields([], [], (4, 4), 2)
        g = dft2(rng.normal(size=(2, 4, 4)))
        np.testing.assert_allclose(predict_output_spectrum(ct, g), g)

    def test_zero_input_gives_beta(self, rng):
        net, C = random_net(rng, 3, 2, 3)
        ct = cascade_transfer(net, (4, 4))
        h = predict_output_spectrum(ct, np.zeros((C, 4, 4)))
        np.testing.assert_allclose(h[:, 0, 0], ct.beta)
        h[:, 0, 0] = 0
        assert np.all(h == 0)

    def test_three_layer_oracle(self, rng):
        net, C = random_net(rng, 3, 2, 3)
        x = rng.normal(size=(C, 8, 8))
        h = predict_output_spectrum(cascade_transfer(net, (8, 8)), dft2(x))
        assert rel_err(h, dft2(network_forward(net, x)[0])) < 1e-7

    def test_beta_routes_agree(self, rng):
        net, _ = random_net(rng, 4, 3, 3)
        fields = transfer_fields(net, (4, 4))
        np.testing.assert_allclose(explicit_beta(fields, [l.bias for l in net.conv_layers]),
                                   cascade_transfer(net, (4, 4)).beta, atol=1e-10)

    def test_layer_spectra(self, rng):
        net, C = random_net(rng, 3, 3, 3)
        x = rng.normal(size=(2, C, 6, 6))
        _, trace = network_forward(net, x)
        for pred, meas in zip(cascade_spectra(net, dft2(x)), trace):
            assert rel_err(pred, dft2(meas)) < 1e-8

    def test_regime_checks(self, rng):
        relu = Network((ConvLayer.template(1, 1, 3, activation="relu"),))
        with pytest.raises(RegimeViolation):
            cascade_transfer(relu, (4, 4))
        cascade_transfer(relu, (4, 4), strict=False)
        zero = Network((ConvLayer.template(1, 1, 3, padding="zero_same"),))
        with pytest.raises(RegimeViolation):
            cascade_transfer(zero, (4, 4))
        up = Network((ConvLayer.template(1, 1, 1), UpsampleLayer(2), ConvLayer.template(1, 1, 1)))
        with pytest.raises(UpsamplePresent) as info:
            cascade_transfer(up, (4, 4), strict=False)
        assert info.value.position == 1


class TestChi:
    def test_diagonal(self):
        chi = compute_chi((8, 6), 3)
        assert chi.coefficient(2, 3, 2, 3) == pytest.approx(9 / 48)

    def test_single_tap(self):
        np.testing.assert_allclose(compute_chi((5, 4), 1).table, 1 / 20)

    def test_matches_brute_force(self):
        M = N = 8
        K = 3
        chi = compute_chi((M, N), K)
        t = np.arange(K)
        for up, vp, u, v in [(0, 0, 1, 2), (3, 5, 7, 1), (6, 6, 2, 2), (1, 7, 7, 0)]:
            direct = np.sum(np.exp(2j * np.pi * ((u - up) * t[:, None] / M + (v - vp) * t[None, :] / N))) / (M * N)
            assert abs(chi.coefficient(up, vp, u, v) - direct) < 1e-12


class TestDeltaT:
    def test_zero_loss_gradient(self, rng):
        net, C = random_net(rng, 3, 2, 3)
        x = rng.normal(size=(C, 4, 4))
        target = network_forward(net, x)[0]
        for l in range(3):
            assert np.all(np.abs(predict_delta_T(net, l, x, target)) < 1e-14)

    def test_scalar_reduction(self, rng):
        # one K=1 single-channel layer: dT = -eta * sum(dLoss/dW) exactly
        eta = 0.3
        L = conv([[[[0.8]]]], [0.1])
        net = Network((L,), learning_rate=eta)
        x = rng.normal(size=(1, 2, 2))
        t = rng.normal(size=(1, 2, 2))
        out = conv_forward(L, x)
        grad_w = np.sum(2 * (out - t) / 4 * x)
        dT = predict_delta_T(net, 0, x, t)
        np.testing.assert_allclose(dT[..., 0, 0], -eta * grad_w, atol=1e-12)

    def test_single_tap_perturbation(self, rng):
        W = rng.normal(size=(1, 1, 3, 3))
        eps = 1e-3
        W2 = W.copy()
        W2[0, 0, 2, 1] += eps
        before, after = Network((conv(W),)), Network((conv(W2),))
        dT = measure_delta_T(before, after, 0, (5, 5))[..., 0, 0]
        u = np.arange(5)[:, None]
        v = np.arange(5)[None, :]
        np.testing.assert_allclose(dT, eps * np.exp(2j * np.pi * (u * 2 / 5 + v * 1 / 5)), atol=1e-12)
        assert np.all(measure_delta_T(before, before, 0, (5, 5)) == 0)

    def test_measured_matches_predicted(self, rng):
        net, C = random_net(rng, 3, 3, 3)
        x = rng.normal(size=(2, C, 6, 6))
        t = rng.normal(size=network_forward(net, x)[0].shape)
        after = sgd_step(net, x, t)
        for l in range(3):
            assert rel_err(predict_delta_T(net, l, x, t), measure_delta_T(net, after, l, (6, 6))) < 1e-6

    def test_all_layers_route(self, rng):
        net, C = random_net(rng, 4, 3, 3)
        x = rng.normal(size=(C, 5, 5))
        t = rng.normal(size=network_forward(net, x)[0].shape)
        for l, f in enumerate(predict_delta_T_all(net, x, t)):
            np.testing.assert_allclose(f, predict_delta_T(net, l, x, t), atol=1e-12)

    def test_layer_route(self, rng):
        net, C = random_net(rng, 3, 2, 3)
        x = rng.normal(size=(2, C, 6, 6))
        t = rng.normal(size=network_forward(net, x)[0].shape)
        out, trace = network_forward(net, x)
        _, grad = mse_loss_and_grad(out, t)
        _, layer_grads = backprop(net, x, grad, trace)
        inputs = [x] + trace[:-1]
        after = sgd_step(net, x, t)
        for l, L in enumerate(net.conv_layers):
            dT = delta_T_from_layer(inputs[l], layer_grads[l], L.kernel_size, net.learning_rate)
            assert rel_err(dT, measure_delta_T(net, after, l, (6, 6))) < 1e-9

    def test_relu_nets_similarity(self):
        r = np.random.default_rng(5)
        sims = []
        for _ in range(20):
            net, C = random_net(r, 3, 3, 3, padding="zero_same", activation="relu", mean=0.05, std=0.3)
            x = r.normal(size=(2, C, 8, 8))
            t = r.normal(size=network_forward(net, x)[0].shape)
            after = sgd_step(net, x, t)
            pred = predict_delta_T_all(net, x, t, strict=False)
            for l in range(3):
                meas = measure_delta_T(net, after, l, (8, 8))
                if np.any(meas != 0):
                    sims.append(cosine_similarity_norm_maps(np.moveaxis(meas, (2, 3), (0, 1)),
                                                            np.moveaxis(pred[l], (2, 3), (0, 1)), skip_zero=True))
        assert np.mean(sims) >= 0.88

    def test_circular_similarity(self, rng):
        net, C = random_net(rng, 3, 3, 3)
        x = rng.normal(size=(C, 8, 8))
        t = rng.normal(size=network_forward(net, x)[0].shape)
        after = sgd_step(net, x, t)
        for l, f in enumerate(predict_delta_T_all(net, x, t)):
            meas = measure_delta_T(net, after, l, (8, 8))
            assert cosine_similarity_norm_maps(np.moveaxis(meas, (2, 3), (0, 1)), np.moveaxis(f, (2, 3), (0, 1))) >= 0.999
