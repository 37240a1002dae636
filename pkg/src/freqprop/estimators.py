"""scikit-learn style wrappers around the decoder and the spectrum utilities.

Inputs are image batches shaped ``(n_samples, channels, M, N)`` rather than
2-D design matrices, so these estimators work with ``get_params``/``clone``
and pipelines but not with sklearn's tabular validation helpers.
"""
import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.exceptions import NotFittedError

from .analysis import low_mask, magnitude_map_render, p_low_ratio
from .exceptions import ShapeMismatch
from .network import ConvLayer, Network, UpsampleLayer, init_network, mse_loss_and_grad, network_forward, sgd_step
from .tensor import dft2, idft2


def _batch(X):
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 4:
        raise ShapeMismatch(f"expected (n_samples, channels, M, N), got shape {X.shape}")
    return X


class ConvDecoder(BaseEstimator):
    """Upsampling conv decoder trained by full-batch SGD on the MSE loss.

    ``n_upsample`` blocks of (zero-insertion upsampling by 2, conv) are
    followed by ``n_conv`` same-size convs; the final conv maps back to the
    input channel count with no activation.
    """

    def __init__(self, width=8, kernel_size=3, n_upsample=2, n_conv=2, padding="zero_same",
                 activation="relu", init_mean=0.0, init_std=None, zero_bias=False,
                 learning_rate=0.1, epochs=200, random_state=42):
        self.width = width
        self.kernel_size = kernel_size
        self.n_upsample = n_upsample
        self.n_conv = n_conv
        self.padding = padding
        self.activation = activation
        self.init_mean = init_mean
        self.init_std = init_std
        self.zero_bias = zero_bias
        self.learning_rate = learning_rate
        self.epochs = epochs
        self.random_state = random_state

    def _build(self, channels):
        K = self.kernel_size

        def conv(c, d, act):
            std = self.init_std if self.init_std is not None else np.sqrt(2.0 / (c * K * K))
            return ConvLayer.template(c, d, K, padding=self.padding, activation=act, init_mean=self.init_mean,
                                      init_std=std, zero_bias=self.zero_bias)

        layers = []
        c = channels
        for _ in range(self.n_upsample):
            layers += [UpsampleLayer(2), conv(c, self.width, self.activation)]
            c = self.width
        for i in range(self.n_conv):
            last = i == self.n_conv - 1
            d = channels if last else self.width
            layers.append(conv(c, d, "identity" if last else self.activation))
            c = d
        if self.n_conv == 0:
            layers.append(conv(c, channels, "identity"))
        seed = int(self.random_state)
        return init_network(Network(tuple(layers), learning_rate=self.learning_rate, seed=seed), seed)

    def fit(self, X, y):
        X, y = _batch(X), _batch(y)
        net = self._build(X.shape[1])
        if net.output_size(X.shape[-2:]) != y.shape[-2:] or y.shape[1] != X.shape[1]:
            raise ShapeMismatch(f"decoder maps {X.shape[1:]} to a different shape than targets {y.shape[1:]}")
        mask = low_mask(y.shape[-2:])
        ht = dft2(y)
        losses, bands = [], []
        for e in range(self.epochs + 1):
            out, _ = network_forward(net, X)
            err = np.abs(dft2(out) - ht) ** 2
            losses.append(mse_loss_and_grad(out, y)[0])
            bands.append((err[..., mask].sum(), err[..., ~mask].sum()))
            if e < self.epochs:
                net = sgd_step(net, X, y)
        self.network_ = net
        self.loss_curve_ = np.array(losses)
        self.band_errors_ = np.array(bands)
        self.n_channels_ = X.shape[1]
        return self

    def _check(self):
        if not hasattr(self, "network_"):
            raise NotFittedError("ConvDecoder is not fitted yet")

    def predict(self, X):
        self._check()
        return network_forward(self.network_, _batch(X))[0]

    def predict_spectrum(self, X):
        return dft2(self.predict(X))

    def score(self, X, y):
        """Negative mean squared error (higher is better)."""
        pred = self.predict(X)
        return -float(np.mean((pred - _batch(y)) ** 2))


class SpectrumTransformer(TransformerMixin, BaseEstimator):
    """Map image batches to spectral features.

    ``output`` selects ``"complex"`` (the raw spectrum), ``"magnitude"``,
    ``"log_magnitude"``, ``"p_low"`` (one low-frequency energy fraction per
    sample) or ``"render"`` (8-bit display maps, one per sample).
    """

    OUTPUTS = ("complex", "magnitude", "log_magnitude", "p_low", "render")

    def __init__(self, output="magnitude", clamp_fundamental=False):
        self.output = output
        self.clamp_fundamental = clamp_fundamental

    def fit(self, X, y=None):
        if self.output not in self.OUTPUTS:
            raise ValueError(f"output must be one of {self.OUTPUTS}, got {self.output!r}")
        X = _batch(X)
        self.n_channels_ = X.shape[1]
        self.size_ = X.shape[-2:]
        return self

    def transform(self, X):
        if not hasattr(self, "size_"):
            raise NotFittedError("SpectrumTransformer is not fitted yet")
        X = _batch(X)
        if X.shape[1:] != (self.n_channels_,) + tuple(self.size_):
            raise ShapeMismatch(f"fitted on {(self.n_channels_,) + tuple(self.size_)}, got {X.shape[1:]}")
        g = dft2(X)
        if self.output == "complex":
            return g
        if self.output == "magnitude":
            return np.abs(g)
        if self.output == "log_magnitude":
            return np.log1p(np.abs(g))
        if self.output == "p_low":
            return np.array([[p_low_ratio(s)] for s in g])
        return np.stack([magnitude_map_render(s, self.clamp_fundamental) for s in g])

    def inverse_transform(self, G):
        if self.output != "complex":
            raise ValueError("only the complex output can be inverted")
        return idft2(np.asarray(G))
