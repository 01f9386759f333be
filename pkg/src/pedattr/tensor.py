"""Dense tensor kernels.

Tensors are C-contiguous float64 ``numpy.ndarray`` values throughout; the
helpers here add the shape checking, numerical stabilization, and seeded
initialization the rest of the package relies on. All functions are pure.
"""
from __future__ import annotations

import numpy as np
from scipy.special import erf

from .errors import NumericError, ShapeError

_MASK64 = (1 << 64) - 1
_SPLITMIX_GAMMA = 0x9E3779B97F4A7C15
_INV_2_53 = 2.0 ** -53


def check_finite(x: np.ndarray, what: str) -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise NumericError(f"non-finite values in {what}")
    return x


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product with explicit inner-dimension validation."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dimensions disagree: {a.shape} x {b.shape}")
    return a @ b


def softmax_rows(x: np.ndarray) -> np.ndarray:
    """Stabilized softmax along the last axis.

    Rows of all -inf are not supported (every attention row keeps at least
    one unmasked entry); finite rows produce nonnegative entries summing
    to 1 within 1e-12.
    """
    x = np.asarray(x, dtype=np.float64)
    shifted = x - np.max(x, axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=-1, keepdims=True)


def layer_norm(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray,
               eps: float = 1e-5) -> np.ndarray:
    """Normalize the last axis to zero mean / unit variance, then affine map.

    Variance is the biased (divide by d) estimate; ``eps`` sits inside the
    square root so constant vectors normalize to zero instead of dividing
    by zero.
    """
    out, _, _ = layer_norm_with_cache(x, gamma, beta, eps)
    return out


def layer_norm_with_cache(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray,
                          eps: float = 1e-5):
    """layer_norm that also returns (xhat, inv_std) for the backward pass."""
    x = np.asarray(x, dtype=np.float64)
    gamma = np.asarray(gamma, dtype=np.float64)
    beta = np.asarray(beta, dtype=np.float64)
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(
            f"layer_norm affine parameters {gamma.shape}/{beta.shape} "
            f"do not match feature width {x.shape}")
    if eps <= 0.0:
        raise NumericError(f"layer_norm eps must be positive, got {eps}")
    mean = np.mean(x, axis=-1, keepdims=True)
    var = np.mean((x - mean) ** 2, axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x - mean) * inv_std
    return gamma * xhat + beta, xhat, np.squeeze(inv_std, axis=-1)


def gelu(x: np.ndarray) -> np.ndarray:
    """Exact Gaussian-error linear unit, x * Phi(x)."""
    x = np.asarray(x, dtype=np.float64)
    return 0.5 * x * (1.0 + erf(x / np.sqrt(2.0)))


def weighted_sum_rows(weights: np.ndarray, values: np.ndarray) -> np.ndarray:
    """Compute weights @ values by accumulating value rows in index order.

    Equivalent to a matrix product but with a pinned summation order, so a
    row whose trailing weights are exactly zero is bitwise independent of
    the corresponding value rows (the masked-attention contract).
    """
    weights = np.asarray(weights, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    if weights.shape[1] != values.shape[0]:
        raise ShapeError(
            f"weighted_sum_rows dimensions disagree: {weights.shape} x {values.shape}")
    out = np.zeros((weights.shape[0], values.shape[1]))
    for s in range(values.shape[0]):
        out += weights[:, s:s + 1] * values[s:s + 1, :]
    return out


class Prng:
    """SplitMix64 generator.

    The state advances by the golden-ratio gamma and each output is the
    standard SplitMix64 finalizer of the new state, so identical seeds give
    identical streams on every platform.
    """

    def __init__(self, seed: int):
        self.state = seed & _MASK64

    @staticmethod
    def _mix(z: int) -> int:
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9 & _MASK64
        z = (z ^ (z >> 27)) * 0x94D049BB133111EB & _MASK64
        return z ^ (z >> 31)

    def next_u64(self) -> int:
        self.state = (self.state + _SPLITMIX_GAMMA) & _MASK64
        return self._mix(self.state)

    def uniform(self) -> float:
        """Uniform double in [0, 1) with 53 random bits."""
        return (self.next_u64() >> 11) * _INV_2_53

    def randint(self, n: int) -> int:
        """Uniform integer in [0, n) (modulo bias negligible for small n)."""
        return self.next_u64() % n

    def shuffle(self, items: list) -> None:
        """In-place Fisher-Yates shuffle."""
        for i in range(len(items) - 1, 0, -1):
            j = self.randint(i + 1)
            items[i], items[j] = items[j], items[i]


def _splitmix_block(seed: int, count: int) -> np.ndarray:
    """Vectorized SplitMix64: the first ``count`` outputs from ``seed``."""
    idx = np.arange(1, count + 1, dtype=np.uint64)
    z = (np.uint64(seed & _MASK64) + idx * np.uint64(_SPLITMIX_GAMMA))
    z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return z ^ (z >> np.uint64(31))


def derive_seeds(base_seed: int, count: int) -> list[int]:
    """Deterministic child seeds: the SplitMix64 stream of ``base_seed``."""
    return [int(v) for v in _splitmix_block(base_seed, count)]


def seeded_uniform(shape, seed: int) -> np.ndarray:
    """Uniform [0, 1) samples from the SplitMix64 stream of ``seed``."""
    shape = (shape,) if isinstance(shape, int) else tuple(shape)
    n = 1
    for dim in shape:
        if dim <= 0:
            raise ShapeError(f"seeded_uniform dimensions must be positive, got {shape}")
        n *= dim
    words = _splitmix_block(seed, n)
    return ((words >> np.uint64(11)).astype(np.float64) * _INV_2_53).reshape(shape)


def seeded_normal(shape, seed: int, scale: float = 1.0) -> np.ndarray:
    """I.i.d. N(0, scale^2) samples, reproducible byte-for-byte per seed.

    SplitMix64 supplies 64-bit words, each pair of words becomes two
    uniforms, and Box-Muller turns every uniform pair into two normals.
    """
    if scale <= 0.0:
        raise NumericError(f"seeded_normal scale must be positive, got {scale}")
    shape = (shape,) if isinstance(shape, int) else tuple(shape)
    n = 1
    for dim in shape:
        if dim <= 0:
            raise ShapeError(f"seeded_normal dimensions must be positive, got {shape}")
        n *= dim
    pairs = (n + 1) // 2
    words = _splitmix_block(seed, 2 * pairs)
    # u1 in (0, 1] keeps log finite; u2 in [0, 1).
    u1 = ((words[0::2] >> np.uint64(11)).astype(np.float64) + 1.0) * _INV_2_53
    u2 = (words[1::2] >> np.uint64(11)).astype(np.float64) * _INV_2_53
    radius = np.sqrt(-2.0 * np.log(u1))
    theta = 2.0 * np.pi * u2
    samples = np.empty(2 * pairs)
    samples[0::2] = radius * np.cos(theta)
    samples[1::2] = radius * np.sin(theta)
    return (scale * samples[:n]).reshape(shape)
