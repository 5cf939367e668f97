"""Shared vector primitives: norms, cosine similarity, weighted averaging, seeded streams.

Parameter vectors are plain 1-D float64 numpy arrays throughout the package.
All reductions use numpy's fixed-order pairwise summation, so repeated runs in
the same environment produce bitwise-identical results.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

__all__ = [
    "DegenerateVectorError",
    "RandomStream",
    "as_param_vec",
    "cosine",
    "norm",
    "weighted_mean",
]

_MASK64 = (1 << 64) - 1


class DegenerateVectorError(ValueError):
    """A zero-norm vector was passed where a direction is required.

    A zero update means a perfectly stationary client; callers decide the
    policy. ``client_id`` identifies the offending client when the error is
    raised while processing per-client updates.
    """

    def __init__(self, message: str, client_id: int | None = None):
        super().__init__(message)
        self.client_id = client_id


def as_param_vec(values, *, name: str = "vector") -> np.ndarray:
    """Coerce to a 1-D float64 array, rejecting empty or non-finite input."""
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim != 1:
        raise ValueError(f"{name} must be 1-D, got shape {arr.shape}")
    if arr.size == 0:
        raise ValueError(f"{name} must have dimension >= 1")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite entries")
    return arr


def norm(v) -> float:
    """Euclidean norm of a vector."""
    return float(np.linalg.norm(np.asarray(v, dtype=np.float64)))


def cosine(v, w) -> float:
    """Cosine similarity ``<v, w> / (|v| |w|)``, clamped to [-1, 1].

    The clamp guards downstream logic against floating-point overshoot such
    as ``1 + 1e-16``. Zero-norm inputs raise :class:`DegenerateVectorError`
    rather than silently returning 0.
    """
    v = np.asarray(v, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    if v.shape != w.shape:
        raise ValueError(f"dimension mismatch: {v.shape} vs {w.shape}")
    nv = float(np.linalg.norm(v))
    nw = float(np.linalg.norm(w))
    if nv == 0.0 or nw == 0.0:
        raise DegenerateVectorError("cosine similarity undefined for zero-norm input")
    return float(np.clip(float(np.dot(v, w)) / (nv * nw), -1.0, 1.0))


def weighted_mean(vectors, weights) -> np.ndarray:
    """Convex combination ``sum_i (w_i / sum(w)) * v_i`` of equal-dimension vectors."""
    if len(vectors) == 0:
        raise ValueError("weighted_mean requires at least one vector")
    if len(vectors) != len(weights):
        raise ValueError(
            f"got {len(vectors)} vectors but {len(weights)} weights"
        )
    mat = np.stack([as_param_vec(v) for v in vectors])
    w = np.asarray(weights, dtype=np.float64)
    if np.any(w < 0):
        raise ValueError("weights must be nonnegative")
    total = float(np.sum(w))
    if total <= 0.0:
        raise ValueError("weights must not all be zero")
    return (mat * (w / total)[:, None]).sum(axis=0)


def _label_key(label: str) -> int:
    digest = hashlib.blake2b(label.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "big")


@dataclass(frozen=True)
class RandomStream:
    """Deterministic random stream addressed by (seed, label, client, round).

    ``generator()`` returns a fresh numpy Generator seeded from the full
    stream identity, so the same identity replays the same draw sequence in
    any run. Derive a distinct stream for every independent purpose and call
    ``generator()`` once per consuming operation. Streams are never shared
    across concurrent tasks; each task derives its own.
    """

    seed: int
    label: str = "root"
    client: int = 0
    round_index: int = 0

    def derive(
        self,
        label: str | None = None,
        *,
        client: int | None = None,
        round_index: int | None = None,
    ) -> "RandomStream":
        """Child stream; labels compose with '/' so derivation paths stay unique."""
        return RandomStream(
            seed=self.seed,
            label=self.label if label is None else f"{self.label}/{label}",
            client=self.client if client is None else client,
            round_index=self.round_index if round_index is None else round_index,
        )

    def generator(self) -> np.random.Generator:
        entropy = (
            self.seed & _MASK64,
            _label_key(self.label),
            self.client & _MASK64,
            self.round_index & _MASK64,
        )
        return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))
