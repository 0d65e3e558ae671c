"""Dense float tensors and the seeded random source everything else builds on.

Tensors are plain numpy arrays in row-major (batch, channel, height, width)
order, so element (n, c, h, w) of an array with extents (N, C, H, W) sits at
flat offset ((n*C + c)*H + h)*W + w. float32 is the working dtype; float64
exists only for gradient checking.
"""

from __future__ import annotations

import numpy as np

# Guard against absurd allocations from corrupt shape data.
MAX_ELEMENTS = 1 << 32


class ShapeError(ValueError):
    """Tensor extents or operand shapes are inconsistent."""


def check_shape(shape) -> tuple[int, ...]:
    """Validate extents and return them as a tuple of ints."""
    shape = tuple(int(e) for e in shape)
    if not 1 <= len(shape) <= 4:
        raise ShapeError(f"rank must be 1..4, got {len(shape)}")
    if any(e < 1 for e in shape):
        raise ShapeError(f"all extents must be >= 1, got {shape}")
    n = 1
    for e in shape:
        n *= e
    if n > MAX_ELEMENTS:
        raise ShapeError(f"extent product {n} exceeds supported size {MAX_ELEMENTS}")
    return shape


def tensor_new(shape, fill: float = 0.0, dtype=np.float32) -> np.ndarray:
    """Allocate a constant-filled tensor with validated extents."""
    return np.full(check_shape(shape), fill, dtype=dtype)


def flat_index(shape, n: int, c: int, h: int, w: int) -> int:
    """Flat offset of element (n, c, h, w) in the canonical layout."""
    _, C, H, W = shape
    return ((n * C + c) * H + h) * W + w


class Rng:
    """Deterministic random source with derivable child streams.

    Backed by numpy's PCG64; a given seed produces the same draw sequence
    on every platform and run. Children created with spawn(key) are
    independent streams that are themselves reproducible.
    """

    def __init__(self, seed: int, _spawn_key: tuple[int, ...] = ()):
        self.seed = int(seed)
        self._spawn_key = tuple(int(k) for k in _spawn_key)
        seq = np.random.SeedSequence(self.seed, spawn_key=self._spawn_key)
        self._gen = np.random.Generator(np.random.PCG64(seq))

    def spawn(self, key: int) -> "Rng":
        return Rng(self.seed, self._spawn_key + (key,))

    def normal(self, shape, mean: float = 0.0, std: float = 1.0, dtype=np.float32) -> np.ndarray:
        if std < 0:
            raise ValueError(f"std must be >= 0, got {std}")
        shape = check_shape(shape)
        # Always sample in float64 so the stream is identical for every dtype.
        z = self._gen.standard_normal(size=shape, dtype=np.float64)
        return (mean + std * z).astype(dtype)

    def uniform(self, shape, low: float = 0.0, high: float = 1.0, dtype=np.float32) -> np.ndarray:
        shape = check_shape(shape)
        u = self._gen.random(size=shape, dtype=np.float64)
        return (low + (high - low) * u).astype(dtype)

    def integers(self, low: int, high: int, size=None) -> np.ndarray:
        return self._gen.integers(low, high, size=size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)


def rand_normal(shape, mean: float, std: float, rng: Rng, dtype=np.float32) -> np.ndarray:
    """Seeded Gaussian tensor; std == 0 collapses to a constant fill."""
    return rng.normal(shape, mean=mean, std=std, dtype=dtype)
