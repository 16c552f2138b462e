"""Dense float64 kernels and a reproducible random stream.

Tensors are plain ``numpy.ndarray`` objects of dtype float64; the helpers here
add the shape/finiteness contracts the rest of the package relies on.
"""

from __future__ import annotations

import hashlib
import math

import numpy as np

LOG_FLOOR = 1e-300


class ContractError(ValueError):
    """Raised when an operation receives inputs outside its contract."""


def as_tensor(values, rows: int | None = None, cols: int | None = None) -> np.ndarray:
    """Coerce ``values`` to a finite 2-D float64 array, checking the shape if given."""
    t = np.asarray(values, dtype=np.float64)
    if t.ndim == 1:
        t = t.reshape(1, -1)
    if t.ndim != 2:
        raise ContractError(f"expected a 2-D tensor, got shape {t.shape}")
    if rows is not None and t.shape[0] != rows:
        raise ContractError(f"expected {rows} rows, got {t.shape[0]}")
    if cols is not None and t.shape[1] != cols:
        raise ContractError(f"expected {cols} cols, got {t.shape[1]}")
    if not np.all(np.isfinite(t)):
        raise ContractError("tensor contains non-finite entries")
    return t


def matmul(a, b) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2:
        raise ContractError(f"matmul needs 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ContractError(f"matmul dimension mismatch: {a.shape} x {b.shape}")
    return a @ b


def softmax(v, axis: int = -1) -> np.ndarray:
    """Numerically stable softmax along ``axis`` (max-subtracted)."""
    v = np.asarray(v, dtype=np.float64)
    shifted = v - np.max(v, axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=axis, keepdims=True)


def _check_distribution(p: np.ndarray, name: str = "p") -> None:
    if p.ndim != 1 or p.size == 0:
        raise ContractError(f"{name} must be a non-empty vector")
    if not np.all(np.isfinite(p)) or np.any(p < 0):
        raise ContractError(f"{name} must be finite and nonnegative")
    if abs(math.fsum(p) - 1.0) > 1e-9:
        raise ContractError(f"{name} must sum to 1, got {math.fsum(p)!r}")


def entropy(p) -> float:
    """Shannon entropy in nats, with 0 * ln 0 taken as 0."""
    p = np.asarray(p, dtype=np.float64)
    _check_distribution(p)
    return float(-np.sum(p * np.log(np.maximum(p, LOG_FLOOR))))


def kl_divergence(p, q) -> float:
    """KL(p || q) in nats. ``q`` must be positive wherever ``p`` is."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    _check_distribution(p, "p")
    _check_distribution(q, "q")
    if p.shape != q.shape:
        raise ContractError(f"dimension mismatch: {p.shape} vs {q.shape}")
    support = p > 0
    if np.any(q[support] == 0):
        raise ContractError("q has zero mass where p is positive")
    ps, qs = p[support], q[support]
    return max(float(np.sum(ps * (np.log(ps) - np.log(qs)))), 0.0)


def uniform(d: int) -> np.ndarray:
    return np.full(d, 1.0 / d)


def derive_seed(seed: int, *keys) -> int:
    """Map a base seed plus a key path to an independent 64-bit seed."""
    text = ":".join([str(int(seed))] + [str(k) for k in keys])
    return int.from_bytes(hashlib.sha256(text.encode("ascii")).digest()[:8], "little")


class Rng:
    """Seeded random stream.

    Raw bits come from the PCG64 generator (a fixed algorithm whose raw
    output does not depend on platform). Everything built on top of the raw
    64-bit words is done here so the derived streams are pinned too:

    * uniforms on [0, 1) take the top 53 bits: ``(w >> 11) * 2**-53``;
    * normals use the Box-Muller transform on consecutive uniform pairs
      ``(u1, u2)``: ``sqrt(-2 ln(1 - u1)) * (cos 2 pi u2, sin 2 pi u2)``,
      emitted cos-first, sin-second; an odd tail discards the last sine;
    * permutations are a stable argsort of fresh uniforms.

    A Rng has a single owner; use :meth:`child` for independent substreams.
    """

    def __init__(self, seed: int):
        self.seed = int(seed)
        self._bits = np.random.PCG64(self.seed)

    def child(self, *keys) -> "Rng":
        return Rng(derive_seed(self.seed, *keys))

    def raw(self, n: int) -> np.ndarray:
        return self._bits.random_raw(int(n)).astype(np.uint64)

    def uniform(self, size=None) -> np.ndarray | float:
        n = 1 if size is None else int(np.prod(size))
        u = (self.raw(n) >> np.uint64(11)).astype(np.float64) * 2.0**-53
        return float(u[0]) if size is None else u.reshape(size)

    def standard_normal(self, size) -> np.ndarray:
        n = int(np.prod(size))
        pairs = (n + 1) // 2
        u = self.uniform(2 * pairs)
        u1, u2 = u[0::2], u[1::2]
        radius = np.sqrt(-2.0 * np.log1p(-u1))
        angle = 2.0 * np.pi * u2
        z = np.empty(2 * pairs)
        z[0::2] = radius * np.cos(angle)
        z[1::2] = radius * np.sin(angle)
        return z[:n].reshape(size)

    def normal(self, mean: float = 0.0, std: float = 1.0, size=None):
        if std < 0:
            raise ContractError(f"std must be nonnegative, got {std}")
        if size is None:
            return float(mean + std * self.standard_normal(1)[0])
        return mean + std * self.standard_normal(size)

    def permutation(self, n: int) -> np.ndarray:
        return np.argsort(self.uniform(n), kind="stable")

    def choice(self, n: int, m: int) -> np.ndarray:
        """Uniform random subset of ``m`` distinct indices from ``range(n)``, sorted."""
        if not 0 <= m <= n:
            raise ContractError(f"cannot draw {m} distinct items from {n}")
        return np.sort(self.permutation(n)[:m])


def sample_gaussian(rng: Rng, mean: float, std: float, shape) -> np.ndarray:
    """Tensor of i.i.d. N(mean, std**2) draws from ``rng``."""
    if std < 0:
        raise ContractError(f"std must be nonnegative, got {std}")
    shape = (shape, 1) if isinstance(shape, int) else tuple(shape)
    z = rng.standard_normal(shape)
    if std == 0:
        return np.full(shape, float(mean))
    return mean + std * z
