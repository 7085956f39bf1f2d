"""Seeded randomness shared by every module.

All draws go through a Philox4x64 counter-based generator so that a seed
reproduces the same stream on any platform.  Gaussian variates use the
Box-Muller transform on top of the generator's uniforms rather than numpy's
ziggurat sampler, which keeps the normal stream a documented function of the
uniform stream.
"""

from __future__ import annotations

import numpy as np

_MASK64 = (1 << 64) - 1


def make_rng(seed: int) -> np.random.Generator:
    """Return a Philox-backed generator for any (possibly negative) 64-bit seed."""
    return np.random.Generator(np.random.Philox(int(seed) & _MASK64))


def spawn_seeds(seed: int, n: int) -> list[int]:
    """Derive ``n`` independent child seeds from ``seed``."""
    ss = np.random.SeedSequence(int(seed) & _MASK64)
    return [int(c.generate_state(1, dtype=np.uint64)[0]) for c in ss.spawn(n)]


def normal(rng: np.random.Generator, size, std: float = 1.0) -> np.ndarray:
    """Gaussian draws via Box-Muller.

    Pairs of uniforms ``(u1, u2)`` with ``u1`` in (0, 1] give two independent
    standard normals ``r cos(2 pi u2)`` and ``r sin(2 pi u2)``,
    ``r = sqrt(-2 log u1)``.
    """
    shape = (size,) if np.isscalar(size) else tuple(size)
    n = int(np.prod(shape, dtype=np.int64))
    half = (n + 1) // 2
    u1 = 1.0 - rng.random(half)
    u2 = rng.random(half)
    r = np.sqrt(-2.0 * np.log(u1))
    z = np.empty(2 * half)
    z[0::2] = r * np.cos(2.0 * np.pi * u2)
    z[1::2] = r * np.sin(2.0 * np.pi * u2)
    return (std * z[:n]).reshape(shape)


def truncated_normal(rng: np.random.Generator, size, std: float, clip: float = 3.0) -> np.ndarray:
    """Zero-mean Gaussian truncated at ``clip`` standard deviations.

    Out-of-range draws are resampled, so the law is symmetric and the mean is
    exactly zero.
    """
    shape = (size,) if np.isscalar(size) else tuple(size)
    out = normal(rng, shape)
    bad = np.abs(out) > clip
    while bad.any():
        out[bad] = normal(rng, int(bad.sum()))
        bad = np.abs(out) > clip
    return std * out


def rademacher(rng: np.random.Generator, size) -> np.ndarray:
    """Uniform draws from {-1, +1}."""
    return np.where(rng.random(size) < 0.5, -1.0, 1.0)


def uniform_ball(rng: np.random.Generator, dim: int, radius: float) -> np.ndarray:
    """A point drawn uniformly from the Euclidean ball of given radius in R^dim."""
    v = normal(rng, dim)
    v /= np.linalg.norm(v)
    return radius * rng.random() ** (1.0 / dim) * v


def unit_sphere(rng: np.random.Generator, n: int, dim: int) -> np.ndarray:
    """``n`` points uniform on the unit sphere in R^dim, one per row."""
    v = normal(rng, (n, dim))
    return v / np.linalg.norm(v, axis=1, keepdims=True)
