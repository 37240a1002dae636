"""Dense feature/spectrum helpers: exact 2D DFT pair, Dirichlet sums, shifts.

Feature maps are real ``float64`` arrays shaped ``(C, M, N)`` and spectra are
``complex128`` arrays of the same shape. Every transform acts on the last two
axes, so extra leading axes (a batch, say) pass through untouched.
"""
from functools import lru_cache

import numpy as np

from .exceptions import ShapeMismatch, SymmetryViolation, ZeroVector

#: below this |sin(theta/2)| the Dirichlet sum takes its limit branch
DIRICHLET_EPS = 1e-12
SYMMETRY_RTOL = 1e-9


@lru_cache(maxsize=64)
def twiddle(size, sign=-1):
    """Table ``exp(sign * 2*pi*i * (k*j mod size) / size)`` of shape (size, size).

    Reducing ``k*j`` modulo ``size`` before scaling keeps every angle in
    ``[0, 2*pi)`` so the table is accurate to a few ulps.
    """
    k = np.arange(size)
    phase = np.outer(k, k) % size
    table = np.exp(sign * 2j * np.pi * phase / size)
    table.setflags(write=False)
    return table


def as_feature_map(f, name="feature map"):
    """Validate and return ``f`` as a float64 array with at least 3 dims."""
    arr = np.asarray(f, dtype=np.float64)
    if arr.ndim < 3:
        raise ShapeMismatch(f"{name} must be shaped (C, M, N), got {arr.shape}")
    if min(arr.shape[-3:]) < 1:
        raise ShapeMismatch(f"{name} has an empty axis: {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    return arr


def dft2(f):
    """Unnormalized forward DFT over the last two axes.

    ``G[c, u, v] = sum_{m, n} F[c, m, n] exp(-2*pi*i*(u*m/M + v*n/N))``,
    evaluated as a separable direct sum with precomputed twiddle tables.
    """
    arr = np.asarray(f)
    M, N = arr.shape[-2:]
    return twiddle(M, -1) @ arr @ twiddle(N, -1).T


def idft2(g, real=True):
    """Inverse of :func:`dft2`, carrying the ``1/(MN)`` factor.

    With ``real=True`` (default) the imaginary residue is checked against
    ``1e-9`` times the spectrum's magnitude scale and then discarded;
    :class:`SymmetryViolation` is raised if it is larger.
    """
    arr = np.asarray(g, dtype=np.complex128)
    M, N = arr.shape[-2:]
    f = (twiddle(M, +1) @ arr @ twiddle(N, +1).T) / (M * N)
    if not real:
        return f
    scale = np.max(np.abs(arr), initial=0.0) / (M * N)
    residue = np.max(np.abs(f.imag), initial=0.0)
    if residue > SYMMETRY_RTOL * max(scale, np.finfo(float).tiny):
        raise SymmetryViolation(
            f"imaginary residue {residue:.3e} exceeds tolerance for scale {scale:.3e}"
        )
    return f.real.copy()


def dirichlet_sum(theta, n):
    """Closed form of ``sum_{k=0}^{n-1} exp(i*k*theta)``.

    Uses ``sin(n*theta/2)/sin(theta/2) * exp(i*(n-1)*theta/2)``; when
    ``|sin(theta/2)| < 1e-12`` the ratio is replaced by its limit, giving
    ``n`` exactly at ``theta = 0`` and ``n*exp(i*(n-1)*theta/2)`` near other
    multiples of ``2*pi``. Vectorized over ``theta``.
    """
    if np.any(np.asarray(n) < 1):
        raise ValueError("n must be >= 1")
    theta = np.asarray(theta, dtype=np.float64)
    half = 0.5 * theta
    s = np.sin(half)
    singular = np.abs(s) < DIRICHLET_EPS
    safe = np.where(singular, 1.0, s)
    ratio = np.where(singular, n * np.cos(n * half) / np.where(singular, np.cos(half), 1.0), np.sin(n * half) / safe)
    out = ratio * np.exp(1j * (n - 1) * half)
    out = np.where(theta == 0.0, complex(n), out)
    if out.ndim == 0:
        return complex(out)
    return out


def fftshift(s):
    """Rotate the last two axes by ``(M//2, N//2)`` so (0, 0) lands in the center."""
    arr = np.asarray(s)
    M, N = arr.shape[-2:]
    return np.roll(arr, (M // 2, N // 2), axis=(-2, -1))


def cosine_similarity_norm_maps(a, b, skip_zero=False):
    """Channel-averaged cosine similarity of the magnitude maps of two spectra.

    Accepts arrays shaped ``(..., M, N)``; every leading index counts as one
    channel. Raises :class:`ZeroVector` when any channel's magnitude map is
    identically zero, unless ``skip_zero`` is set, in which case such channels
    (dead ReLU units, say) are left out of the average.
    """
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise ShapeMismatch(f"shapes differ: {a.shape} vs {b.shape}")
    M, N = a.shape[-2:]
    na = np.abs(a).reshape(-1, M * N)
    nb = np.abs(b).reshape(-1, M * N)
    la = np.linalg.norm(na, axis=1)
    lb = np.linalg.norm(nb, axis=1)
    live = (la > 0) & (lb > 0)
    if not np.all(live) and not (skip_zero and np.any(live)):
        raise ZeroVector("a channel magnitude map has zero length")
    na, nb, la, lb = na[live], nb[live], la[live], lb[live]
    cos = np.einsum("ij,ij->i", na, nb) / (la * lb)
    return float(np.mean(np.clip(cos, -1.0, 1.0)))


def is_fundamental(u, v):
    return u == 0 and v == 0


def parseval_gap(f):
    """Relative gap between time and frequency energies, per channel (max)."""
    f = np.asarray(f, dtype=np.float64)
    M, N = f.shape[-2:]
    e_time = np.sum(f**2, axis=(-2, -1))
    e_freq = np.sum(np.abs(dft2(f)) ** 2, axis=(-2, -1)) / (M * N)
    denom = np.maximum(e_time, np.finfo(float).tiny)
    return float(np.max(np.abs(e_time - e_freq) / denom))
