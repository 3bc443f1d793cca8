"""Deterministic vector math and the seeded random stream used everywhere.

All numerics are float64. The similarity helpers are pure functions and safe
to call from any thread; an Rng instance is single-owner and must not be
shared across threads.
"""

from __future__ import annotations

import numpy as np

from .errors import ContractError, DomainError


def _as_vector(a, name: str) -> np.ndarray:
    arr = np.asarray(a, dtype=np.float64)
    if arr.ndim != 1:
        raise ContractError(f"{name} must be a 1-D vector, got shape {arr.shape}")
    return arr


def cosine_similarity(a, b) -> float:
    """Cosine of the angle between two vectors, in [-1, 1].

    Raises DomainError if either vector has zero norm (a degenerate
    embedding or proxy has no direction to compare).
    """
    va = _as_vector(a, "a")
    vb = _as_vector(b, "b")
    if va.shape != vb.shape:
        raise ContractError(f"dimension mismatch: {va.shape} vs {vb.shape}")
    na = float(np.linalg.norm(va))
    nb = float(np.linalg.norm(vb))
    if na == 0.0 or nb == 0.0:
        raise DomainError("cosine similarity is undefined for a zero-norm vector")
    return float(np.dot(va, vb)) / (na * nb)


def sq_euclidean(a, b) -> float:
    """Squared Euclidean distance between two vectors of equal dimension."""
    va = _as_vector(a, "a")
    vb = _as_vector(b, "b")
    if va.shape != vb.shape:
        raise ContractError(f"dimension mismatch: {va.shape} vs {vb.shape}")
    d = va - vb
    return float(np.dot(d, d))


def l2_normalize(a) -> np.ndarray:
    """Vector rescaled to unit L2 norm; direction is preserved."""
    va = _as_vector(a, "a")
    norm = float(np.linalg.norm(va))
    if norm == 0.0:
        raise DomainError("cannot normalize a zero vector")
    return va / norm


def normalize_rows(mat, what: str = "input"):
    """Row-normalized copy of a 2-D array plus the row norms.

    Raises DomainError naming the first zero-norm row; losses and ranking
    treat such rows as degenerate rather than silently producing NaNs.
    """
    arr = np.asarray(mat, dtype=np.float64)
    if arr.ndim != 2:
        raise ContractError(f"{what} must be a 2-D array, got shape {arr.shape}")
    norms = np.sqrt((arr * arr).sum(axis=1))
    zero = np.flatnonzero(norms == 0.0)
    if zero.size:
        raise DomainError(f"zero-norm {what} row at index {int(zero[0])}")
    return arr / norms[:, None], norms


class Rng:
    """Counter-based (Philox) random stream.

    Equal seeds produce byte-identical draw sequences on every platform.
    `derive` creates an independent child stream addressed by integer salts,
    so subsystems (init, batching, clustering) can consume randomness
    without perturbing each other.
    """

    def __init__(self, seed: int, _salts: tuple = ()):
        seed = int(seed)
        if seed < 0 or seed >= 2**64:
            raise ContractError("seed must be a 64-bit unsigned integer")
        self.seed = seed
        self._salts = tuple(int(s) for s in _salts)
        ss = np.random.SeedSequence(self.seed, spawn_key=self._salts)
        self._gen = np.random.Generator(np.random.Philox(ss))

    def derive(self, *salts: int) -> "Rng":
        """Independent stream fully determined by (seed, existing salts, new salts)."""
        return Rng(self.seed, _salts=self._salts + tuple(salts))

    def normal(self, size=None, scale: float = 1.0):
        return self._gen.normal(scale=scale, size=size)

    def uniform(self, low: float, high: float, size=None):
        return self._gen.uniform(low, high, size=size)

    def random(self) -> float:
        return float(self._gen.random())

    def integers(self, n: int) -> int:
        return int(self._gen.integers(n))

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def __repr__(self):
        return f"Rng(seed={self.seed}, salts={self._salts})"
