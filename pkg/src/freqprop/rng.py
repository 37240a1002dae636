"""Seeded Gaussian streams: Philox-4x64 counter-based bits, Box-Muller normals.

numpy's ``Generator.normal`` uses a ziggurat sampler whose stream layout is an
implementation detail; here the uniform-to-normal step is pinned to the
textbook Box-Muller transform so the mapping from seed to weights is fully
documented. Substreams for parallel shards are keyed by ``(seed, shard)``.
"""
import numpy as np

MASK64 = (1 << 64) - 1


def make_rng(seed, shard=None):
    """Philox bit generator keyed by ``seed`` (and optionally a shard index)."""
    seed = int(seed) & MASK64
    if shard is None:
        ss = np.random.SeedSequence(seed)
    else:
        ss = np.random.SeedSequence([seed, int(shard)])
    return np.random.Generator(np.random.Philox(ss))


def box_muller(rng, size):
    """Standard normals from pairs of uniforms, ``z = sqrt(-2 ln u1) cos(2 pi u2)``.

    Both the cosine and the sine branch are used, so ``n`` normals consume
    ``2 * ceil(n / 2)`` uniforms.
    """
    n = int(np.prod(size, dtype=np.int64))
    half = (n + 1) // 2
    u1 = 1.0 - rng.random(half)  # (0, 1]
    u2 = rng.random(half)
    radius = np.sqrt(-2.0 * np.log(u1))
    angle = 2.0 * np.pi * u2
    z = np.empty(2 * half)
    z[0::2] = radius * np.cos(angle)
    z[1::2] = radius * np.sin(angle)
    return z[:n].reshape(size)


def gaussian(rng, size, mean=0.0, std=1.0):
    """Draw ``N(mean, std**2)`` samples; ``std == 0`` returns ``mean`` exactly."""
    if std == 0:
        return np.full(size, float(mean))
    return mean + std * box_muller(rng, size)
