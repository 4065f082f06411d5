"""Slow, obviously-correct reference implementations used only by the tests."""

import numpy as np


def conv3x3_naive(x, w, b):
    """Direct same-padded 3x3 cross-correlation, one output pixel at a time."""
    n, c, h, wd = x.shape
    o = w.shape[0]
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    y = np.zeros((n, o, h, wd), dtype=np.float64)
    for s in range(n):
        for q in range(o):
            for r in range(h):
                for k in range(wd):
                    y[s, q, r, k] = b[q] + np.sum(w[q] * xp[s, :, r:r + 3, k:k + 3])
    return y


def batchnorm_train_naive(x, gamma, beta, eps):
    axes = (0,) + tuple(range(2, x.ndim))
    shape = (1, -1) + (1,) * (x.ndim - 2)
    mean = x.mean(axis=axes, keepdims=True)
    var = x.var(axis=axes, keepdims=True)
    return (x - mean) / np.sqrt(var + eps) * gamma.reshape(shape) + beta.reshape(shape)


def numeric_grad(f, x, eps=1e-6):
    """Central differences of scalar f with respect to every entry of x (modified in place, restored)."""
    g = np.zeros_like(x, dtype=np.float64)
    for idx in np.ndindex(x.shape):
        old = x[idx]
        x[idx] = old + eps
        fp = f()
        x[idx] = old - eps
        fm = f()
        x[idx] = old
        g[idx] = (fp - fm) / (2 * eps)
    return g


def rel_error(a, b):
    dtype = np.complex128 if np.iscomplexobj(a) or np.iscomplexobj(b) else np.float64
    a = np.asarray(a, dtype=dtype)
    b = np.asarray(b, dtype=dtype)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), 1e-300))


def best_scaled_sign(W):
    """Exhaustive minimizer of ||W - alpha B||_F^2 over all sign patterns B and alpha >= 0.

    For a fixed pattern the optimal alpha is max(0, <W, B>) / (m n). Every
    one of the 2^(mn) patterns is scored; among equal-cost patterns (which
    differ only where W is zero) the one with +1 at the zeros wins.
    """
    w = np.asarray(W, dtype=np.float64).ravel()
    size = w.size
    codes = np.arange(2 ** size)[:, None]
    patterns = np.where((codes >> np.arange(size)) & 1, -1.0, 1.0)
    alphas = np.maximum(0.0, patterns @ w) / size
    costs = np.sum((w[None, :] - alphas[:, None] * patterns) ** 2, axis=1)
    tied = np.flatnonzero(costs <= costs.min() + 1e-12 * max(1.0, costs.min()))
    zeros = w == 0
    preferred = [i for i in tied if np.all(patterns[i][zeros] == 1)]
    best = preferred[0] if preferred else tied[0]
    return patterns[best].reshape(np.shape(W)).astype(np.int8), float(alphas[best])


def dft_naive(n):
    """Unitary DFT matrix from its defining sum, entry by entry."""
    F = np.empty((n, n), dtype=np.complex128)
    for k in range(n):
        for j in range(n):
            F[k, j] = np.exp(-2j * np.pi * k * j / n)
    return F / np.sqrt(n)


def pack_naive(B):
    """Column-by-column bit setting: word w of row r holds bit t for column 64 w + t."""
    m, n = B.shape
    words = -(-n // 64)
    out = np.zeros((m, words), dtype=np.uint64)
    for j in range(n):
        out[:, j // 64] |= (B[:, j] == 1).astype(np.uint64) << np.uint64(j % 64)
    return out


def binary_dense_reference(B, x, alpha, bias):
    """alpha B x + b in float64 with the scaled matrix formed explicitly."""
    return (alpha * np.asarray(B, dtype=np.float64)) @ np.asarray(x, dtype=np.float64) + bias


class CountingFloat:
    """Float wrapper that counts arithmetic operations by kind."""

    counts = {"add": 0, "sub": 0, "mul": 0, "div": 0}

    def __init__(self, value):
        self.value = float(value)

    @classmethod
    def reset(cls):
        cls.counts = {"add": 0, "sub": 0, "mul": 0, "div": 0}

    def _v(self, other):
        return other.value if isinstance(other, CountingFloat) else float(other)

    def __add__(self, other):
        CountingFloat.counts["add"] += 1
        return CountingFloat(self.value + self._v(other))

    __radd__ = __add__

    def __sub__(self, other):
        CountingFloat.counts["sub"] += 1
        return CountingFloat(self.value - self._v(other))

    def __rsub__(self, other):
        CountingFloat.counts["sub"] += 1
        return CountingFloat(self._v(other) - self.value)

    def __mul__(self, other):
        CountingFloat.counts["mul"] += 1
        return CountingFloat(self.value * self._v(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        CountingFloat.counts["div"] += 1
        return CountingFloat(self.value / self._v(other))

    def __float__(self):
        return self.value
