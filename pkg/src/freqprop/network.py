"""Time-domain decoder networks and their backpropagation.

Convolution is correlation-style, ``out[d, m, n] = b[d] + sum W[d, c, t, s] *
F[c, m + t, n + s]``, with stride 1. Padding modes:

``circular``       taps wrap modulo the input size; output size = input size.
``zero_same``      ``K - 1`` zero rows/columns appended at the bottom/right only.
``zero_one_side``  the input is embedded at the top-left of an ``M' x N'`` zero
                   canvas, which is then convolved without padding.
``none``           valid correlation, output ``(M - K + 1, N - K + 1)``.

All arrays may carry extra leading (batch) axes in front of ``(C, M, N)``.
Layers and networks are frozen; updates return new objects.
"""
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence, Tuple, Union

import numpy as np

from .exceptions import ShapeMismatch
from .rng import gaussian, make_rng

PADDINGS = ("circular", "zero_same", "zero_one_side", "none")
ACTIVATIONS = ("identity", "relu")


def _frozen(arr):
    arr = np.array(arr, dtype=np.float64, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class ConvLayer:
    """One stride-1 convolution plus activation.

    ``weights`` is shaped ``(D, C, K, K)`` (kernel, channel, tap t, tap s) and
    ``bias`` has length ``D``. ``init_mean``/``init_std`` describe the Gaussian
    used by :func:`init_network`.
    """

    weights: np.ndarray
    bias: np.ndarray
    padding: str = "circular"
    activation: str = "identity"
    canvas: Optional[Tuple[int, int]] = None
    init_mean: float = 0.0
    init_std: float = 0.0
    zero_bias: bool = False

    def __post_init__(self):
        w = _frozen(self.weights)
        b = _frozen(self.bias)
        if w.ndim != 4 or w.shape[2] != w.shape[3] or w.shape[2] < 1:
            raise ShapeMismatch(f"weights must be (D, C, K, K), got {w.shape}")
        if b.shape != (w.shape[0],):
            raise ShapeMismatch(f"bias must have length {w.shape[0]}, got {b.shape}")
        if self.padding not in PADDINGS:
            raise ValueError(f"unknown padding {self.padding!r}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.padding == "zero_one_side" and self.canvas is None:
            raise ValueError("zero_one_side padding needs a canvas size")
        if self.init_std < 0:
            raise ValueError("init_std must be >= 0")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "bias", b)
        if self.canvas is not None:
            object.__setattr__(self, "canvas", (int(self.canvas[0]), int(self.canvas[1])))

    @classmethod
    def template(cls, in_channels, out_channels, kernel_size, **kwargs):
        """Zero-weight layer of the given shape, to be filled by :func:`init_network`."""
        w = np.zeros((out_channels, in_channels, kernel_size, kernel_size))
        return cls(weights=w, bias=np.zeros(out_channels), **kwargs)

    @property
    def in_channels(self):
        return self.weights.shape[1]

    @property
    def out_channels(self):
        return self.weights.shape[0]

    @property
    def kernel_size(self):
        return self.weights.shape[2]

    def output_size(self, size):
        M, N = size
        K = self.kernel_size
        if self.padding in ("circular", "zero_same"):
            return (M, N)
        if self.padding == "zero_one_side":
            Mc, Nc = self.canvas
            return (Mc - K + 1, Nc - K + 1)
        return (M - K + 1, N - K + 1)

    def with_params(self, weights, bias):
        return replace(self, weights=weights, bias=bias)


@dataclass(frozen=True)
class UpsampleLayer:
    """Zero-insertion upsampling by an integer ``ratio >= 2``."""

    ratio: int = 2

    def __post_init__(self):
        if int(self.ratio) < 2:
            raise ValueError("upsampling ratio must be >= 2")

    def output_size(self, size):
        return (size[0] * self.ratio, size[1] * self.ratio)


Layer = Union[ConvLayer, UpsampleLayer]


@dataclass(frozen=True, eq=False)
class Network:
    layers: Tuple[Layer, ...]
    learning_rate: float = 0.01
    seed: int = 42

    def __post_init__(self):
        layers = tuple(self.layers)
        object.__setattr__(self, "layers", layers)
        convs = [l for l in layers if isinstance(l, ConvLayer)]
        if not convs:
            raise ValueError("a network needs at least one conv layer")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        channels = None
        for i, layer in enumerate(layers):
            if isinstance(layer, ConvLayer):
                if channels is not None and layer.in_channels != channels:
                    raise ShapeMismatch(
                        f"layer {i} expects {layer.in_channels} channels, predecessor gives {channels}"
                    )
                channels = layer.out_channels

    @property
    def depth(self):
        return sum(isinstance(l, ConvLayer) for l in self.layers)

    @property
    def conv_layers(self):
        return [l for l in self.layers if isinstance(l, ConvLayer)]

    @property
    def in_channels(self):
        return self.conv_layers[0].in_channels

    def conv_positions(self):
        return [i for i, l in enumerate(self.layers) if isinstance(l, ConvLayer)]

    def output_size(self, size):
        for layer in self.layers:
            size = layer.output_size(size)
        return size

    def replace_layers(self, layers):
        return replace(self, layers=tuple(layers))


# --------------------------------------------------------------------------
# initialization


def init_network(template, seed=None):
    """Fill every conv layer with i.i.d. ``N(init_mean, init_std**2)`` draws.

    Layers are visited in order; each draws its weights (row-major over
    ``(D, C, K, K)``) and then, unless ``zero_bias`` is set, its biases from
    one Philox/Box-Muller stream keyed by the network seed.
    """
    seed = template.seed if seed is None else seed
    rng = make_rng(seed)
    layers = []
    for layer in template.layers:
        if isinstance(layer, ConvLayer):
            w = gaussian(rng, layer.weights.shape, layer.init_mean, layer.init_std)
            if layer.zero_bias:
                b = np.zeros(layer.out_channels)
            else:
                b = gaussian(rng, (layer.out_channels,), layer.init_mean, layer.init_std)
            layer = layer.with_params(w, b)
        layers.append(layer)
    return replace(template, layers=tuple(layers), seed=seed)


# --------------------------------------------------------------------------
# forward pieces


def _check_input(layer, f):
    f = np.asarray(f, dtype=np.float64)
    if f.ndim < 3 or f.shape[-3] != layer.in_channels:
        raise ShapeMismatch(f"layer expects {layer.in_channels} channels, got shape {f.shape}")
    M, N = f.shape[-2:]
    K = layer.kernel_size
    if layer.padding == "none" and (M < K or N < K):
        raise ShapeMismatch(f"input {M}x{N} smaller than kernel {K} without padding")
    if layer.padding == "zero_one_side":
        Mc, Nc = layer.canvas
        if Mc < M or Nc < N or Mc < K or Nc < K:
            raise ShapeMismatch(f"canvas {layer.canvas} cannot hold input {M}x{N} and kernel {K}")
    return f


def _pad(layer, f):
    """Padded input ``P`` on which a valid correlation yields the layer output."""
    K = layer.kernel_size
    lead = [(0, 0)] * (f.ndim - 2)
    if layer.padding == "circular":
        return np.pad(f, lead + [(0, K - 1), (0, K - 1)], mode="wrap")
    if layer.padding == "zero_same":
        return np.pad(f, lead + [(0, K - 1), (0, K - 1)])
    if layer.padding == "zero_one_side":
        M, N = f.shape[-2:]
        Mc, Nc = layer.canvas
        return np.pad(f, lead + [(0, Mc - M), (0, Nc - N)])
    return f


def _im2col(P, K):
    """Columns ``cols[..., (c, t, s), m*No + n] = P[..., c, m + t, n + s]`` (contiguous)."""
    C, Mp, Np = P.shape[-3:]
    Mo, No = Mp - K + 1, Np - K + 1
    cols = np.empty(P.shape[:-3] + (C, K, K, Mo, No))
    for t in range(K):
        for s in range(K):
            cols[..., t, s, :, :] = P[..., t:t + Mo, s:s + No]
    return cols.reshape(P.shape[:-3] + (C * K * K, Mo * No)), (Mo, No)


def _correlate(P, W, cols=None):
    """Valid correlation of ``P (..., C, Mp, Np)`` with ``W (D, C, K, K)``."""
    K = W.shape[-1]
    if cols is None:
        cols, (Mo, No) = _im2col(P, K)
    else:
        Mo, No = P.shape[-2] - K + 1, P.shape[-1] - K + 1
    out = W.reshape(W.shape[0], -1) @ cols  # (..., D, Mo*No)
    return out.reshape(out.shape[:-1] + (Mo, No))


def conv_preactivation(layer, f):
    f = _check_input(layer, f)
    return _correlate(_pad(layer, f), layer.weights) + layer.bias[:, None, None]


def activate(layer, z):
    if layer.activation == "relu":
        return np.maximum(z, 0.0)
    return z


def conv_forward(layer, f):
    """Apply one conv layer (padding, correlation, bias, activation)."""
    return activate(layer, conv_preactivation(layer, f))


def upsample(layer, f):
    """Zero insertion: ``out[r*m, r*n] = f[m, n]``, every other entry 0."""
    f = np.asarray(f, dtype=np.float64)
    if f.ndim < 3:
        raise ShapeMismatch(f"expected (C, M, N), got {f.shape}")
    r = int(layer.ratio)
    M0, N0 = f.shape[-2:]
    out = np.zeros(f.shape[:-2] + (M0 * r, N0 * r))
    out[..., ::r, ::r] = f
    return out


def apply_layer(layer, f):
    if isinstance(layer, UpsampleLayer):
        return upsample(layer, f)
    return conv_forward(layer, f)


def network_forward(net, x):
    """Run ``x`` through every layer; returns ``(output, trace)``.

    ``trace[i]`` is the (post-activation) output of ``net.layers[i]``.
    """
    h = np.asarray(x, dtype=np.float64)
    if h.ndim < 3 or h.shape[-3] != net.in_channels:
        raise ShapeMismatch(f"network expects {net.in_channels} input channels, got {h.shape}")
    trace = []
    for layer in net.layers:
        h = apply_layer(layer, h)
        trace.append(h)
    return h, trace


# --------------------------------------------------------------------------
# loss and backward pieces


def mse_loss_and_grad(output, target):
    """Mean squared error over all entries and its gradient w.r.t. ``output``."""
    output = np.asarray(output, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if output.shape != target.shape:
        raise ShapeMismatch(f"output {output.shape} vs target {target.shape}")
    diff = output - target
    count = diff.size
    return float(np.sum(diff**2) / count), 2.0 * diff / count


def _fold(g, size, axis):
    """Adjoint of wrap padding along one axis: sum rows congruent mod ``size``."""
    length = g.shape[axis]
    reps = -(-length // size)
    pad = [(0, 0)] * g.ndim
    pad[axis] = (0, reps * size - length)
    g = np.pad(g, pad)
    shape = g.shape[:axis] + (reps, size) + g.shape[axis + 1:]
    return g.reshape(shape).sum(axis=axis)


def conv_backward(layer, f, grad_out):
    """Gradients of a conv layer given its input ``f`` and ``dLoss/d(output)``.

    Returns ``(grad_input, grad_weights, grad_bias)``.
    """
    f = _check_input(layer, f)
    P = _pad(layer, f)
    W = layer.weights
    D, C, K, _ = W.shape
    cols, (Mo, No) = _im2col(P, K)
    z = _correlate(P, W, cols) + layer.bias[:, None, None]
    grad_z = grad_out * (z > 0) if layer.activation == "relu" else np.asarray(grad_out)

    gz = grad_z.reshape((-1, D, Mo * No))
    cb = cols.reshape((-1, C * K * K, Mo * No))
    grad_w = np.matmul(gz, np.swapaxes(cb, 1, 2)).sum(axis=0).reshape(W.shape)
    grad_b = gz.sum(axis=(0, 2))

    grad_cols = (W.reshape(D, -1).T @ gz).reshape(grad_z.shape[:-3] + (C, K, K, Mo, No))
    grad_P = np.zeros(P.shape)
    for t in range(K):
        for s in range(K):
            grad_P[..., t:t + Mo, s:s + No] += grad_cols[..., t, s, :, :]

    M, N = f.shape[-2:]
    if layer.padding == "circular":
        grad_f = _fold(_fold(grad_P, M, grad_P.ndim - 2), N, grad_P.ndim - 1)
    elif layer.padding in ("zero_same", "zero_one_side"):
        grad_f = grad_P[..., :M, :N]
    else:
        grad_f = grad_P
    return grad_f, grad_w, grad_b


def upsample_backward(layer, grad_out):
    r = int(layer.ratio)
    return np.asarray(grad_out)[..., ::r, ::r]


def backprop(net, x, grad_output, trace=None):
    """Parameter gradients given ``dLoss/d(output)``.

    Returns a list aligned with ``net.layers``: ``(grad_W, grad_b)`` for conv
    layers, ``None`` for upsampling layers. Also returns the gradient w.r.t. the
    output of every layer (``layer_grads[i]`` is ``dLoss/d(trace[i])``).
    """
    x = np.asarray(x, dtype=np.float64)
    if trace is None:
        _, trace = network_forward(net, x)
    inputs = [x] + trace[:-1]
    grads = [None] * len(net.layers)
    layer_grads = [None] * len(net.layers)
    g = np.asarray(grad_output, dtype=np.float64)
    for i in range(len(net.layers) - 1, -1, -1):
        layer = net.layers[i]
        layer_grads[i] = g
        if isinstance(layer, UpsampleLayer):
            g = upsample_backward(layer, g)
        else:
            g, gw, gb = conv_backward(layer, inputs[i], g)
            grads[i] = (gw, gb)
    return grads, layer_grads


def loss_and_gradients(net, x, target):
    out, trace = network_forward(net, x)
    loss, grad = mse_loss_and_grad(out, target)
    grads, _ = backprop(net, x, grad, trace)
    return loss, grads


def apply_gradients(net, grads, learning_rate=None):
    eta = net.learning_rate if learning_rate is None else learning_rate
    layers = []
    for layer, g in zip(net.layers, grads):
        if g is not None:
            gw, gb = g
            layer = layer.with_params(layer.weights - eta * gw, layer.bias - eta * gb)
        layers.append(layer)
    return net.replace_layers(layers)


def sgd_step(net, x, target):
    """One full-batch gradient-descent step on the MSE loss; ``net`` is untouched."""
    _, grads = loss_and_gradients(net, x, target)
    return apply_gradients(net, grads)


def flatten_params(net):
    parts = []
    for layer in net.conv_layers:
        parts.append(layer.weights.ravel())
        parts.append(layer.bias.ravel())
    return np.concatenate(parts)


def unflatten_params(net, theta):
    theta = np.asarray(theta, dtype=np.float64)
    pos = 0
    layers = []
    for layer in net.layers:
        if isinstance(layer, ConvLayer):
            nw = layer.weights.size
            nb = layer.bias.size
            if pos + nw + nb > theta.size:
                raise ShapeMismatch("parameter vector too short")
            w = theta[pos:pos + nw].reshape(layer.weights.shape)
            b = theta[pos + nw:pos + nw + nb]
            pos += nw + nb
            layer = layer.with_params(w, b)
        layers.append(layer)
    if pos != theta.size:
        raise ShapeMismatch("parameter vector length does not match network")
    return net.replace_layers(layers)


def flatten_grads(grads):
    parts = []
    for g in grads:
        if g is not None:
            parts.append(g[0].ravel())
            parts.append(g[1].ravel())
    return np.concatenate(parts)
