"""Statistics of transfer matrices and spectra under random initialization.

Closed forms here are all products of Dirichlet sums: the kernel-shape
coefficient ``R[u, v] = sum_{t, s < K} exp(2*pi*i*(u*t/M + v*s/N))`` governs how
strongly a random ``K x K`` kernel passes frequency (u, v).
"""
from dataclasses import dataclass
from typing import Sequence, Tuple

import numpy as np

from .exceptions import (
    DegenerateLayer,
    InsufficientSamples,
    SizeTooSmall,
    ZeroEnergy,
)
from .rng import gaussian, make_rng
from .tensor import dft2, dirichlet_sum, fftshift


@dataclass(frozen=True)
class ComplexGaussianParams:
    mean: complex
    variance: float
    pseudo_variance: complex


@dataclass(frozen=True, eq=False)
class SomCurve:
    depths: np.ndarray
    log_som: np.ndarray
    analytic: bool = True


@dataclass(frozen=True, eq=False)
class ZeroPaddingAnalysis:
    mean: float
    std: float
    in_size: Tuple[int, int]
    out_size: Tuple[int, int]
    strength: np.ndarray  # (M', N')


def compute_R(u, v, size, K):
    """Kernel-shape coefficient ``R[u, v]``; indices are taken modulo the size."""
    M, N = size
    ru = dirichlet_sum(2.0 * np.pi * (np.asarray(u) % M) / M, K)
    rv = dirichlet_sum(2.0 * np.pi * (np.asarray(v) % N) / N, K)
    return ru * rv


def R_grid(size, K):
    M, N = size
    ru = np.atleast_1d(dirichlet_sum(2.0 * np.pi * np.arange(M) / M, K))
    rv = np.atleast_1d(dirichlet_sum(2.0 * np.pi * np.arange(N) / N, K))
    return np.outer(ru, rv)


def transfer_entry_law(layer, u, v, size, mean=None, std=None):
    """Complex-Gaussian law of one transfer-matrix entry under Gaussian weights.

    Mean ``mu*R[u, v]``, variance ``K^2 sigma^2`` and pseudo-variance
    ``sigma^2 R[2u, 2v]``. ``mean``/``std`` default to the layer's init values.
    """
    K = layer.kernel_size
    mu = layer.init_mean if mean is None else mean
    sigma = layer.init_std if std is None else std
    return ComplexGaussianParams(
        mean=complex(mu * compute_R(u, v, size, K)),
        variance=float(K**2 * sigma**2),
        pseudo_variance=complex(sigma**2 * compute_R(2 * u, 2 * v, size, K)),
    )


def estimate_complex_gaussian(samples):
    """Method-of-moments estimate of ``(mean, variance, pseudo-variance)``."""
    z = np.asarray(samples, dtype=np.complex128).ravel()
    if z.size < 2:
        raise InsufficientSamples("need at least two samples")
    mu = z.mean()
    dz = z - mu
    return ComplexGaussianParams(complex(mu), float(np.mean(np.abs(dz) ** 2)), complex(np.mean(dz**2)))


def moment_standard_errors(samples, params):
    """Standard errors of the three moment estimates (same sample)."""
    z = np.asarray(samples, dtype=np.complex128).ravel()
    n = z.size
    dz = z - params.mean
    se_mean = np.sqrt(params.variance / n)
    se_var = np.std(np.abs(dz) ** 2) / np.sqrt(n)
    se_pseudo = np.sqrt(np.mean(np.abs(dz**2 - params.pseudo_variance) ** 2) / n)
    return se_mean, se_var, se_pseudo


def sample_transfer_entries(n, K, size, mean, std, seed, shape=()):
    """Transfer entries ``T[u, v]`` of ``n`` independent random ``K x K`` kernels.

    Returns ``(n, *shape, M, N)`` complex. ``shape`` adds independent kernel axes
    (e.g. ``(L,)`` or ``(L, D, C)``).
    """
    M, N = size
    rng = make_rng(seed)
    W = gaussian(rng, (n,) + tuple(shape) + (K, K), mean, std)
    pu = np.exp(2j * np.pi * np.outer(np.arange(M), np.arange(K)) / M)
    pv = np.exp(2j * np.pi * np.outer(np.arange(N), np.arange(K)) / N)
    return np.einsum("ut,...ts,vs->...uv", pu, W, pv, optimize=True)


def som_singlechannel_log(layers, u, v, size, K):
    """Partial sums of ``log(|mu_l R|^2 + K^2 sigma_l^2)`` over depth."""
    R2 = abs(compute_R(u, v, size, K)) ** 2
    terms = []
    for mu, sigma in layers:
        s = abs(mu) ** 2 * R2 + K**2 * sigma**2
        if s <= 0:
            raise DegenerateLayer(f"layer with mean {mu}, std {sigma} has zero second moment")
        terms.append(np.log(s))
    return SomCurve(np.arange(1, len(terms) + 1), np.cumsum(terms), analytic=True)


def som_multichannel_analytic(layers, u, v, size, K):
    """Second moment of a cascade-product entry for multi-channel layers.

    ``layers`` is a list of ``(C_l, mu_l, sigma_l)`` for ``l = 1..L`` (output
    channel counts). Assumes the entries of every partial product are
    mutually independent, so this is an approximation once ``L >= 3``.
    """
    R = compute_R(u, v, size, K)
    C = [int(c) for c, _, _ in layers]
    mu = [m for _, m, _ in layers]
    som = [abs(m * R) ** 2 + (K * s) ** 2 for _, m, s in layers]
    L = len(layers)

    main = np.prod([C[l] * som[l] for l in range(L)]) / C[L - 1]
    corr = 0.0
    for l in range(2, L + 1):  # 1-based
        cprev = C[l - 2]
        mean_l = np.prod([C[k] * mu[k] * R for k in range(l)]) / C[l - 1]
        tail = np.prod([C[j - 2] * som[j - 1] for j in range(l + 1, L + 1)])
        corr += (cprev - 1) / cprev * abs(mean_l) ** 2 * tail
    return float(main + corr)


def som_empirical(h_samples):
    """Mean of ``|h|^2`` over samples and channels, per frequency."""
    h = np.asarray(h_samples)
    M, N = h.shape[-2:]
    return np.mean(np.abs(h.reshape(-1, M, N)) ** 2, axis=0)


def _dirichlet_abs(freqs, length, period):
    return np.abs(np.atleast_1d(dirichlet_sum(-2.0 * np.pi * freqs / period, length)))


def zero_padding_expected_signal(a, in_size, out_size, std=1.0):
    """Predicted strength of the signal added by one-side zero padding.

    For ``u < M and v < N`` the grid holds ``|a| (|D_M(u) D_N(v)| - M N [u=v=0])``
    (the expected change ``|E[H - G]|``), elsewhere ``|a| |D_M(u) D_N(v)|``
    (expected ``|E[H]|``), where ``D_M(u)`` sums ``exp(-2*pi*i*u*m/M')`` over
    ``m < M``. ``std`` is carried for reference only.
    """
    M, N = in_size
    Mp, Np = out_size
    if Mp < M or Np < N or (Mp, Np) == (M, N):
        raise ValueError("padding must enlarge at least one side")
    du = _dirichlet_abs(np.arange(Mp), M, Mp)
    dv = _dirichlet_abs(np.arange(Np), N, Np)
    grid = abs(a) * np.outer(du, dv)
    # (0, 0) is always inside the original grid; D_M(0) D_N(0) = M N exactly
    grid[0, 0] = 0.0
    return ZeroPaddingAnalysis(float(a), float(std), (M, N), (Mp, Np), grid)


def zero_padding_monte_carlo(a, std, in_size, out_size, n, seed):
    """Sample ``H - G`` for Gaussian features under one-side zero padding.

    ``G`` (the ``M x N`` spectrum) is read as 0 outside its own grid. Returns
    the complex differences, shape ``(n, M', N')``.
    """
    M, N = in_size
    Mp, Np = out_size
    rng = make_rng(seed)
    F = gaussian(rng, (n, M, N), a, std)
    G = dft2(F)
    H = dft2(np.pad(F, ((0, 0), (0, Mp - M), (0, Np - N))))
    G_ext = np.zeros_like(H)
    G_ext[:, :M, :N] = G
    return H - G_ext


def upsample_spectrum_predict(g, ratio):
    """Spectrum after zero-insertion upsampling: the input spectrum tiled ``ratio x ratio`` times."""
    if int(ratio) < 2:
        raise ValueError("ratio must be >= 2")
    g = np.asarray(g)
    reps = (1,) * (g.ndim - 2) + (int(ratio), int(ratio))
    return np.tile(g, reps)


def low_mask(size):
    """Boolean mask of the four low-frequency corner blocks."""
    M, N = size
    u = np.arange(M)
    v = np.arange(N)
    lu = (u < M // 8) | (u >= (7 * M) // 8)
    lv = (v < N // 8) | (v >= (7 * N) // 8)
    return lu[:, None] & lv[None, :]


def p_low_ratio(h):
    """Fraction of channel-averaged spectral energy in the low-frequency corners.

    Leading axes (channels, batch) are averaged over.
    """
    h = np.asarray(h)
    M, N = h.shape[-2:]
    if M < 8 or N < 8:
        raise SizeTooSmall(f"p_low needs M, N >= 8, got {M}x{N}")
    energy = som_empirical(h)
    total = energy.sum()
    if total <= 0:
        raise ZeroEnergy("spectrum has no energy")
    return float(energy[low_mask((M, N))].sum() / total)


def band_energies(h, mask):
    """Energy (channel-averaged ``|h|^2``) inside and outside a frequency mask."""
    e = som_empirical(h)
    return float(e[mask].sum()), float(e[~mask].sum())


def magnitude_map_render(h, clamp_fundamental=False):
    """8-bit grayscale view of a spectrum.

    Channel-averaged magnitude, shifted so (0, 0) sits in the center,
    optionally clamping the fundamental to the second-largest magnitude, then
    ``log1p`` and min-max scaling to ``[0, 255]``.
    """
    h = np.asarray(h)
    M, N = h.shape[-2:]
    mag = np.mean(np.abs(h.reshape(-1, M, N)), axis=0)
    if clamp_fundamental and mag.size > 1:
        rest = np.delete(mag.ravel(), 0)
        mag = mag.copy()
        mag[0, 0] = rest.max()
    img = np.log1p(fftshift(mag))
    lo, hi = img.min(), img.max()
    if hi <= lo:
        return np.zeros((M, N), dtype=np.uint8)
    scaled = (img - lo) / (hi - lo) * 255.0
    return np.floor(scaled + 0.5).astype(np.uint8)
