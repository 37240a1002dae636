"""Spectrum propagation through conv layers, in closed form.

Every conv layer acts on spectra through a field of complex matrices
``T[u, v] (D x C)`` built from its weights alone,

    T[u, v][d, c] = sum_{t, s < K} W[d, c, t, s] exp(+2*pi*i*(u*t/M + v*s/N)),

the positive exponent being the image of correlation-style taps under the
negative-exponent forward DFT. Under circular padding each frequency is
propagated on its own, ``h[u, v] = T[u, v] g[u, v] + [u = v = 0] * M*N*b``;
when the layer shrinks the map (no padding) frequencies mix through the
diffraction coefficients ``alpha``.

Fields are stored frequency-major: a transfer field is an array shaped
``(M, N, D, C)``, spectra are ``(..., C, M, N)`` as elsewhere.
"""
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from .exceptions import (
    KernelTooLarge,
    RegimeViolation,
    ShapeMismatch,
    SizeRegimeUnsupported,
    SpecMismatch,
    UpsamplePresent,
)
from .network import ConvLayer, UpsampleLayer, mse_loss_and_grad, network_forward
from .tensor import dft2, dirichlet_sum, twiddle


@dataclass(frozen=True, eq=False)
class TransferField:
    matrices: np.ndarray  # (M, N, D, C) complex
    kernel_size: int
    size: Tuple[int, int]
    layer_index: Optional[int] = None

    def at(self, u, v):
        return self.matrices[u, v]

    def __sub__(self, other):
        if self.matrices.shape != other.matrices.shape:
            raise SpecMismatch("transfer fields have different shapes")
        return self.matrices - other.matrices


@dataclass(frozen=True, eq=False)
class CascadeTransfer:
    """Per-frequency product ``T_L ... T_1`` and the accumulated bias spectrum."""

    products: np.ndarray  # (M, N, C_L, C_0)
    beta: np.ndarray  # (C_L,)
    size: Tuple[int, int]


@dataclass(frozen=True, eq=False)
class DiffractionField:
    """Separable mixing coefficients ``alpha[u', v', u, v] = rows[u', u] * cols[v', v] / (M*N)``.

    ``rows[u', u]`` is the Dirichlet sum over ``M'`` output rows at angle
    ``2*pi*lambda[u', u]`` with ``lambda = u/M - u'/M'`` (likewise for columns).
    """

    rows: np.ndarray  # (M', M)
    cols: np.ndarray  # (N', N)
    lam: np.ndarray
    gamma: np.ndarray
    in_size: Tuple[int, int]
    out_size: Tuple[int, int]

    def coefficient(self, up, vp, u, v):
        M, N = self.in_size
        return self.rows[up, u] * self.cols[vp, v] / (M * N)

    def full(self):
        M, N = self.in_size
        return np.einsum("pu,qv->pquv", self.rows, self.cols) / (M * N)


@dataclass(frozen=True, eq=False)
class ChiField:
    """Cross-frequency weights of the transfer-update law.

    ``chi[u', v', u, v]`` depends only on ``((u - u') mod M, (v - v') mod N)``
    and factorizes as ``row[du] * col[dv] / (M*N)`` with
    ``row[du] = sum_{t < K} exp(2*pi*i*du*t/M)``.
    """

    row: np.ndarray  # (M,)
    col: np.ndarray  # (N,)
    size: Tuple[int, int]
    kernel_size: int

    @property
    def table(self):
        M, N = self.size
        return np.outer(self.row, self.col) / (M * N)

    def coefficient(self, up, vp, u, v):
        M, N = self.size
        return self.row[(u - up) % M] * self.col[(v - vp) % N] / (M * N)

    def circulants(self):
        """Matrices ``A[u, u'] = row[(u - u') mod M]`` and the column analogue."""
        M, N = self.size
        iu = (np.arange(M)[:, None] - np.arange(M)[None, :]) % M
        iv = (np.arange(N)[:, None] - np.arange(N)[None, :]) % N
        return self.row[iu], self.col[iv]


# --------------------------------------------------------------------------
# single layer


def compute_transfer_field(layer, size, layer_index=None):
    """Transfer matrices of ``layer`` on an ``M x N`` grid."""
    M, N = size
    K = layer.kernel_size
    if K > min(M, N):
        raise KernelTooLarge(f"kernel {K} exceeds feature size {M}x{N}")
    pu = twiddle(M, +1)[:, :K]  # (M, K)
    pv = twiddle(N, +1)[:, :K]  # (N, K)
    tmp = np.tensordot(pu, layer.weights, axes=([1], [2]))  # (M, D, C, K_s)
    T = np.tensordot(tmp, pv, axes=([3], [1]))  # (M, D, C, N)
    T = np.ascontiguousarray(np.transpose(T, (0, 3, 1, 2)))
    return TransferField(T, K, (M, N), layer_index)


def _dirichlet_rows(in_len, out_len):
    """Dirichlet sums over ``out_len`` terms at ``2*pi*(u/in_len - u'/out_len)``."""
    up = np.arange(out_len)[:, None]
    u = np.arange(in_len)[None, :]
    # lambda = (u*out_len - u'*in_len) / (in_len*out_len), an exact ratio of integers
    num = u * out_len - up * in_len
    den = in_len * out_len
    lam = num / den
    theta = 2.0 * np.pi * (num % den) / den
    return dirichlet_sum(theta, out_len), lam


def compute_alpha(out_size, in_size, K):
    """Diffraction coefficients for a stride-1 layer.

    Supported regimes: same size (``alpha`` is an exact Kronecker delta) and
    valid correlation, ``M' = M - K + 1``, ``N' = N - K + 1``.
    """
    M, N = in_size
    Mp, Np = out_size
    if (Mp, Np) == (M, N):
        rows = M * np.eye(M, dtype=np.complex128)
        cols = N * np.eye(N, dtype=np.complex128)
        lam = (np.arange(M)[None, :] - np.arange(M)[:, None]) / M
        gamma = (np.arange(N)[None, :] - np.arange(N)[:, None]) / N
        return DiffractionField(rows, cols, lam, gamma, (M, N), (Mp, Np))
    if (Mp, Np) != (M - K + 1, N - K + 1) or Mp < 1 or Np < 1:
        raise SizeRegimeUnsupported(f"cannot map {in_size} -> {out_size} with K={K}")
    rows, lam = _dirichlet_rows(M, Mp)
    cols, gamma = _dirichlet_rows(N, Np)
    return DiffractionField(rows, cols, lam, gamma, (M, N), (Mp, Np))


def _mix(tf, g):
    """``y[..., d, u, v] = sum_c T[u, v, d, c] g[..., c, u, v]``."""
    g = np.asarray(g)
    M, N, D, C = tf.matrices.shape
    if g.ndim < 3 or g.shape[-3:] != (C, M, N):
        raise ShapeMismatch(f"spectrum {g.shape} does not match transfer field ({C}, {M}, {N})")
    return _apply_field(tf.matrices, g)


def _apply_field(mats, g):
    """Per-frequency matrix action ``mats (M, N, D, C)`` on ``g (..., C, M, N)``."""
    lead = g.shape[:-3]
    C, M, N = g.shape[-3:]
    gm = np.moveaxis(g.reshape((-1, C, M, N)), (2, 3), (0, 1))  # (M, N, B, C)
    out = gm @ np.swapaxes(mats, -1, -2)  # (M, N, B, D)
    return np.moveaxis(out, (0, 1), (2, 3)).reshape(lead + (mats.shape[2], M, N))


def propagate_layer_same(tf, g, b):
    """Circular-padding layer in the frequency domain: ``T g`` plus ``M*N*b`` at (0, 0)."""
    M, N = tf.size
    b = np.asarray(b, dtype=np.float64)
    h = _mix(tf, g)
    if b.shape != (h.shape[-3],):
        raise ShapeMismatch(f"bias length {b.shape} vs {h.shape[-3]} output channels")
    h[..., 0, 0] += M * N * b
    return h


def propagate_layer_general(tf, alpha, g, b):
    """Size-changing layer: ``h[u', v'] = sum_{u, v} alpha T g`` plus ``M'*N'*b`` at (0, 0).

    The bias enters once per output pixel, so the fundamental picks up the
    output area ``M' N'``.
    """
    M, N = tf.size
    if alpha.in_size != (M, N):
        raise ShapeMismatch(f"alpha built for {alpha.in_size}, transfer field for {(M, N)}")
    Mp, Np = alpha.out_size
    y = _mix(tf, g)
    h = alpha.rows @ y @ alpha.cols.T / (M * N)
    b = np.asarray(b, dtype=np.float64)
    if b.shape != (h.shape[-3],):
        raise ShapeMismatch(f"bias length {b.shape} vs {h.shape[-3]} output channels")
    h[..., 0, 0] += Mp * Np * b
    return h


# --------------------------------------------------------------------------
# cascades


def _check_regime(net, strict, start=0, stop=None):
    layers = net.layers[start:stop]
    for i, layer in enumerate(layers, start=start):
        if isinstance(layer, UpsampleLayer):
            raise UpsamplePresent(i)
        if strict and layer.padding != "circular":
            raise RegimeViolation(f"layer {i} uses {layer.padding} padding, not circular")
        if strict and layer.activation != "identity":
            raise RegimeViolation(f"layer {i} has a {layer.activation} activation")
        if layer.padding in ("none", "zero_one_side"):
            raise RegimeViolation(f"layer {i} changes the feature size")
    return layers


def transfer_fields(net, size, strict=True):
    layers = _check_regime(net, strict)
    return [compute_transfer_field(layer, size, i) for i, layer in enumerate(layers)]


def _cascade_from_fields(fields, biases, size, in_channels):
    M, N = size
    prod = np.broadcast_to(np.eye(in_channels, dtype=np.complex128), (M, N, in_channels, in_channels)).copy()
    beta = np.zeros(in_channels, dtype=np.complex128)
    for tf, b in zip(fields, biases):
        prod = tf.matrices @ prod
        beta = tf.matrices[0, 0] @ beta + M * N * np.asarray(b)
    return CascadeTransfer(prod, beta, size)


def cascade_transfer(net, size, strict=True, stop=None):
    """Per-frequency products and bias spectrum of the first ``stop`` conv layers.

    With ``strict=False`` zero-padded or ReLU layers are accepted and treated
    as if they were circular and linear (the approximation used when checking
    ordinary networks against the closed form).
    """
    fields = transfer_fields(net, size, strict)[:stop]
    layers = net.conv_layers[: len(fields)]
    return _cascade_from_fields(fields, [l.bias for l in layers], size, net.in_channels)


def cascade_spectra(net, g, strict=True):
    """Predicted spectrum after every conv layer, from the input spectrum ``g``."""
    g = np.asarray(g)
    size = g.shape[-2:]
    fields = transfer_fields(net, size, strict)
    out = []
    h = g
    for tf, layer in zip(fields, net.conv_layers):
        h = propagate_layer_same(tf, h, layer.bias)
        out.append(h)
    return out


def predict_output_spectrum(ct, g):
    """``h[u, v] = TT[u, v] g[u, v]``, plus ``beta`` at the fundamental."""
    g = np.asarray(g)
    M, N, CL, C0 = ct.products.shape
    if g.ndim < 3 or g.shape[-3:] != (C0, M, N):
        raise ShapeMismatch(f"spectrum {g.shape} does not match cascade ({C0}, {M}, {N})")
    h = _apply_field(ct.products, g)
    h[..., 0, 0] += ct.beta
    return h


# --------------------------------------------------------------------------
# learning dynamics


def compute_chi(size, K):
    M, N = size
    if K > min(M, N):
        raise KernelTooLarge(f"kernel {K} exceeds feature size {M}x{N}")
    row = dirichlet_sum(2.0 * np.pi * np.arange(M) / M, K)
    col = dirichlet_sum(2.0 * np.pi * np.arange(N) / N, K)
    return ChiField(np.atleast_1d(row), np.atleast_1d(col), (M, N), K)


def spectral_loss_gradient(grad):
    """``dLoss/d(conj G) = dft2(dLoss/dF) / (M*N)`` for a real feature gradient."""
    grad = np.asarray(grad)
    M, N = grad.shape[-2:]
    return dft2(grad) / (M * N)


def _outer_sum(left, right):
    """``sum_b left[b, d, u, v] * conj(right[b, c, u, v])`` as ``(D, C, M, N)``."""
    lm = np.moveaxis(left, (2, 3), (0, 1))  # (M, N, B, D)
    rm = np.moveaxis(right, (2, 3), (0, 1))  # (M, N, B, C)
    out = np.swapaxes(lm, -1, -2) @ np.conj(rm)  # (M, N, D, C)
    return np.moveaxis(out, (0, 1), (2, 3))


def _chi_update(chi, outer, eta):
    """``-eta*M*N * sum_{u', v'} chi[u', v', u, v] * outer[u', v']`` for every (u, v).

    ``outer`` is shaped ``(D, C, M, N)``; the sum over (u', v') is a pair of
    circulant products because chi is separable.
    """
    M, N = chi.size
    A, B = chi.circulants()
    outer = np.ascontiguousarray(outer)
    summed = np.matmul(np.matmul(A, outer), np.ascontiguousarray(B.T)) / (M * N)
    return np.ascontiguousarray(-eta * M * N * np.transpose(summed, (2, 3, 0, 1)))


def delta_T_from_layer(layer_input, grad_pre, kernel_size, eta):
    """Transfer-matrix change implied by one layer's input and pre-activation gradient.

    ``layer_input`` is ``(..., C, M, N)`` and ``grad_pre`` is
    ``dLoss/d(conv output before activation)``, ``(..., D, M, N)``; leading axes
    are summed over. Exact for circular padding; zero padding only perturbs
    boundary taps.
    """
    g_in = dft2(layer_input)
    dl = spectral_loss_gradient(grad_pre)
    M, N = g_in.shape[-2:]
    g_in = g_in.reshape((-1,) + g_in.shape[-3:])
    dl = dl.reshape((-1,) + dl.shape[-3:])
    outer = _outer_sum(dl, g_in)
    return _chi_update(compute_chi((M, N), kernel_size), outer, eta)


def predict_delta_T(net, l, x, target, learning_rate=None, strict=True):
    """Closed-form change of layer ``l``'s transfer field after one SGD step.

    ``l`` indexes conv layers from 0. Combines the conjugated upstream cascade
    (including the bias spectrum of layers ``< l``), the spectral loss gradient
    pulled back through the downstream cascade, and the chi weights. Exact for
    a circular, linear, upsample-free network; ``strict=False`` evaluates the
    same closed form on zero-padded or ReLU networks (as if they were circular
    and linear), using the loss gradient of the real forward pass.
    """
    eta = net.learning_rate if learning_rate is None else learning_rate
    x = np.asarray(x, dtype=np.float64)
    M, N = x.shape[-2:]
    fields = transfer_fields(net, (M, N), strict=strict)
    convs = net.conv_layers
    if not 0 <= l < len(fields):
        raise IndexError(f"layer index {l} out of range for {len(fields)} conv layers")

    upstream = _cascade_from_fields(fields[:l], [c.bias for c in convs[:l]], (M, N), net.in_channels)
    downstream = _cascade_from_fields(
        fields[l + 1:], [np.zeros(c.out_channels) for c in convs[l + 1:]], (M, N), convs[l].out_channels
    )

    out, _ = network_forward(net, x)
    _, grad = mse_loss_and_grad(out, target)
    dl_dh = spectral_loss_gradient(grad)  # (..., C_L, M, N)

    g = dft2(x)
    a = _apply_field(upstream.products, g)
    a[..., 0, 0] += upstream.beta
    # row vector dLoss/dh^T conj(TT_down) -> (..., C_l, M, N)
    back = _apply_field(np.conj(np.swapaxes(downstream.products, -1, -2)), dl_dh)

    a = a.reshape((-1,) + a.shape[-3:])
    back = back.reshape((-1,) + back.shape[-3:])
    outer = _outer_sum(back, a)
    return _chi_update(compute_chi((M, N), convs[l].kernel_size), outer, eta)


def predict_delta_T_all(net, x, target, learning_rate=None, strict=True):
    """:func:`predict_delta_T` for every conv layer, sharing one forward pass.

    Prefix cascades are accumulated front to back and suffix cascades back to
    front, so the cost is linear in depth.
    """
    eta = net.learning_rate if learning_rate is None else learning_rate
    x = np.asarray(x, dtype=np.float64)
    M, N = x.shape[-2:]
    fields = transfer_fields(net, (M, N), strict=strict)
    convs = net.conv_layers
    L = len(fields)

    out, _ = network_forward(net, x)
    _, grad = mse_loss_and_grad(out, target)
    dl_dh = spectral_loss_gradient(grad)
    dl_dh = dl_dh.reshape((-1,) + dl_dh.shape[-3:])

    # a[l]: predicted spectrum entering layer l (cascade of layers < l, with bias)
    a = dft2(x).reshape((-1,) + x.shape[-3:]).astype(np.complex128)
    inputs = []
    for tf, conv in zip(fields, convs):
        inputs.append(a)
        a = propagate_layer_same(tf, a, conv.bias)

    # back[l]: loss gradient pulled back through layers > l
    backs = [None] * L
    back = dl_dh
    for l in range(L - 1, -1, -1):
        backs[l] = back
        back = _apply_field(np.conj(np.swapaxes(fields[l].matrices, -1, -2)), back)

    out_fields = []
    for l in range(L):
        outer = _outer_sum(backs[l], inputs[l])
        out_fields.append(_chi_update(compute_chi((M, N), convs[l].kernel_size), outer, eta))
    return out_fields


def measure_delta_T(before, after, l, size):
    """Entrywise difference of layer ``l``'s transfer fields in two networks."""
    b_layers = before.conv_layers
    a_layers = after.conv_layers
    if len(b_layers) != len(a_layers) or len(before.layers) != len(after.layers):
        raise SpecMismatch("networks differ in structure")
    lb, la = b_layers[l], a_layers[l]
    if lb.weights.shape != la.weights.shape:
        raise SpecMismatch(f"layer {l} weight shapes differ: {lb.weights.shape} vs {la.weights.shape}")
    return compute_transfer_field(la, size).matrices - compute_transfer_field(lb, size).matrices


def explicit_beta(fields, biases):
    """Bias spectrum written as the explicit sum ``MN(b_L + sum_j TT[00](L:j) b_(j-1))``.

    Kept alongside the recursive accumulation in :func:`cascade_transfer` so the
    two can be checked against each other.
    """
    M, N = fields[0].size
    L = len(fields)
    beta = M * N * np.asarray(biases[L - 1], dtype=np.complex128)
    for j in range(2, L + 1):  # 1-based layer numbers
        prod = np.eye(fields[L - 1].matrices.shape[2], dtype=np.complex128)
        for k in range(L, j - 1, -1):
            prod = prod @ fields[k - 1].matrices[0, 0]
        beta = beta + M * N * prod @ np.asarray(biases[j - 2])
    return beta
