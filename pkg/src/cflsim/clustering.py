"""Similarity-driven cluster mathematics.

This module holds the analytical core of the framework: pairwise cosine
similarity matrices of client updates, the min-max-cross optimal bipartition
(an agglomerative merge that is provably exact, with a brute-force twin as
test oracle), the separation gap between intra- and cross-cluster
similarities, the worst-case similarity bounds as functions of the relative
approximation noise, and the four-way split/terminate decision rule.
"""

from __future__ import annotations

import csv
import enum
import io
import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .numerics import DegenerateVectorError

__all__ = [
    "Bipartition",
    "SimilarityMatrix",
    "SplitConfig",
    "SplitDecision",
    "adjusted_rand_index",
    "brute_force_bipartition",
    "cross_bound",
    "h_bound",
    "optimal_bipartition",
    "separation_gap",
    "similarity_matrix",
    "similarity_matrix_from_csv",
    "similarity_matrix_to_csv",
    "split_decision",
]

SIMILARITY_SOURCES = ("weight_update", "gradient")

_SYMMETRY_TOL = 1e-12


@dataclass(frozen=True, eq=False)
class SimilarityMatrix:
    """Symmetric matrix of pairwise cosine similarities with unit diagonal."""

    ids: tuple[int, ...]
    values: np.ndarray

    def __post_init__(self):
        ids = tuple(int(i) for i in self.ids)
        vals = np.asarray(self.values, dtype=np.float64)
        m = len(ids)
        if len(set(ids)) != m:
            raise ValueError("client ids must be unique")
        if vals.shape != (m, m):
            raise ValueError(f"matrix shape {vals.shape} does not match {m} ids")
        if not np.all(np.isfinite(vals)):
            raise ValueError("similarity entries must be finite")
        if np.abs(vals - vals.T).max(initial=0.0) > _SYMMETRY_TOL:
            raise ValueError("similarity matrix must be symmetric within 1e-12")
        if np.any(vals < -1.0) or np.any(vals > 1.0):
            raise ValueError("similarity entries must lie in [-1, 1]")
        if not np.all(np.diag(vals) == 1.0):
            raise ValueError("similarity diagonal must be exactly 1")
        object.__setattr__(self, "ids", ids)
        object.__setattr__(self, "values", vals)

    @property
    def m(self) -> int:
        return len(self.ids)

    def positions(self, members: Sequence[int]) -> np.ndarray:
        index = {cid: pos for pos, cid in enumerate(self.ids)}
        return np.asarray([index[int(c)] for c in members], dtype=np.int64)


@dataclass(frozen=True)
class Bipartition:
    """Two disjoint covering client groups and the achieved max cross similarity."""

    c1: tuple[int, ...]
    c2: tuple[int, ...]
    cross_max: float

    def __post_init__(self):
        if not self.c1 or not self.c2:
            raise ValueError("both sides of a bipartition must be nonempty")
        if set(self.c1) & set(self.c2):
            raise ValueError("bipartition sides must be disjoint")

    def as_sets(self) -> tuple[frozenset, frozenset]:
        return frozenset(self.c1), frozenset(self.c2)


@dataclass(frozen=True)
class SplitConfig:
    """Thresholds of the split criteria.

    ``eps1`` bounds the aggregated update norm (server stationarity), ``eps2``
    the largest client update norm (client non-stationarity), ``gamma_max``
    is the assumed bound on the relative approximation noise used by the
    rejection rule, and ``similarity_source`` selects what the similarity
    matrix is computed from.
    """

    eps1: float
    eps2: float
    gamma_max: float
    similarity_source: str = "weight_update"

    def __post_init__(self):
        if self.eps1 <= 0 or self.eps2 <= 0:
            raise ValueError("eps1 and eps2 must be positive")
        if not (0.0 <= self.gamma_max < 1.0):
            raise ValueError("gamma_max must lie in [0, 1)")
        if self.similarity_source not in SIMILARITY_SOURCES:
            raise ValueError(f"unknown similarity_source {self.similarity_source!r}")

    def to_dict(self) -> dict:
        return {
            "eps1": self.eps1,
            "eps2": self.eps2,
            "gamma_max": self.gamma_max,
            "similarity_source": self.similarity_source,
        }

    @staticmethod
    def from_dict(d: dict) -> "SplitConfig":
        return SplitConfig(
            eps1=float(d["eps1"]),
            eps2=float(d["eps2"]),
            gamma_max=float(d["gamma_max"]),
            similarity_source=d.get("similarity_source", "weight_update"),
        )


class SplitDecision(enum.Enum):
    NOT_STATIONARY = "not_stationary"
    CONVERGED_TERMINAL = "converged_terminal"
    SPLIT = "split"
    STATIONARY_BUT_REJECT = "stationary_but_reject"


def similarity_matrix(updates: Sequence[np.ndarray], ids: Sequence[int] | None = None) -> SimilarityMatrix:
    """Pairwise cosine matrix of updates, symmetry-enforced, unit diagonal.

    Floating-point dot products are order sensitive, so (i,j) and (j,i) are
    averaged before use. A zero-norm update raises
    :class:`DegenerateVectorError` carrying the offending client id.
    """
    m = len(updates)
    if m == 0:
        raise ValueError("similarity matrix requires at least one update")
    id_list = list(range(m)) if ids is None else [int(i) for i in ids]
    if len(id_list) != m:
        raise ValueError("ids must match the number of updates")
    mat = np.stack([np.asarray(u, dtype=np.float64) for u in updates])
    norms = np.linalg.norm(mat, axis=1)
    for pos in np.flatnonzero(norms == 0.0):
        raise DegenerateVectorError(
            f"client {id_list[pos]} produced a zero-norm update", client_id=id_list[pos]
        )
    unit = mat / norms[:, None]
    sims = unit @ unit.T
    sims = 0.5 * (sims + sims.T)
    sims = np.clip(sims, -1.0, 1.0)
    np.fill_diagonal(sims, 1.0)
    return SimilarityMatrix(ids=tuple(id_list), values=sims)


def _positions_to_bipartition(alpha: SimilarityMatrix, group1: list[int], group2: list[int]) -> Bipartition:
    cross = float(alpha.values[np.ix_(group1, group2)].max())
    ids = alpha.ids
    side1 = tuple(sorted(ids[p] for p in group1))
    side2 = tuple(sorted(ids[p] for p in group2))
    if min(side2) < min(side1):
        side1, side2 = side2, side1
    return Bipartition(c1=side1, c2=side2, cross_max=cross)


def optimal_bipartition(alpha: SimilarityMatrix) -> Bipartition:
    """Partition minimizing the maximum cross-group similarity.

    Agglomerative merge: visit all ordered index pairs by descending
    similarity (ties broken by row-major position), union the groups holding
    the endpoints, and stop as soon as exactly two groups remain. The merge
    sequence is the maximum-spanning-tree construction, so the resulting cut
    attains the exact min-max-cross optimum. Runs in O(m^2 log m + m^2).
    """
    m = alpha.m
    if m < 2:
        raise ValueError("bipartition requires at least 2 clients")
    flat = alpha.values.ravel()
    order = np.lexsort((np.arange(m * m), -flat))
    parent = list(range(m))

    def find(a: int) -> int:
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    groups = m
    for f in order:
        if groups == 2:
            break
        i, j = divmod(int(f), m)
        if i == j:
            continue  # self-merge is a no-op
        ri, rj = find(i), find(j)
        if ri != rj:
            parent[rj] = ri
            groups -= 1
    roots = [find(p) for p in range(m)]
    first_root = roots[0]
    group1 = [p for p in range(m) if roots[p] == first_root]
    group2 = [p for p in range(m) if roots[p] != first_root]
    return _positions_to_bipartition(alpha, group1, group2)


def brute_force_bipartition(alpha: SimilarityMatrix) -> Bipartition:
    """Exhaustive min-max-cross bipartition; the independent oracle for the merge algorithm.

    Enumerates all 2^(m-1) - 1 splits, so m is capped at 20. Ties resolve to
    the lexicographically smallest first group containing the lowest id.
    """
    m = alpha.m
    if m < 2:
        raise ValueError("bipartition requires at least 2 clients")
    if m > 20:
        raise ValueError("brute force bipartition is limited to m <= 20")
    vals = alpha.values
    positions = np.arange(m)
    best: tuple[float, tuple[int, ...], list[int], list[int]] | None = None
    for mask in range(2 ** (m - 1)):
        bits = [(mask >> (p - 1)) & 1 for p in range(1, m)]
        group1 = [0] + [p for p in range(1, m) if bits[p - 1] == 0]
        group2 = [p for p in range(1, m) if bits[p - 1] == 1]
        if not group2:
            continue
        cross = float(vals[np.ix_(group1, group2)].max())
        side1 = tuple(sorted(alpha.ids[p] for p in group1))
        key = (cross, side1)
        if best is None or key < (best[0], best[1]):
            best = (cross, side1, group1, group2)
    assert best is not None
    _, _, group1, group2 = best
    return _positions_to_bipartition(alpha, group1, group2)


def separation_gap(alpha: SimilarityMatrix, truth: Mapping[int, int]) -> float:
    """Minimum same-distribution similarity minus the optimal cut's cross maximum.

    Positive gap means the optimal bipartition never separates two clients of
    the same distribution; the split is correct if and only if the gap is
    greater than zero.
    """
    m = alpha.m
    labels = np.asarray([int(truth[cid]) for cid in alpha.ids])
    same = labels[:, None] == labels[None, :]
    off_diag = ~np.eye(m, dtype=bool)
    intra_mask = same & off_diag
    if not intra_mask.any():
        raise ValueError("separation gap requires at least one same-distribution pair")
    intra_min = float(alpha.values[intra_mask].min())
    return intra_min - optimal_bipartition(alpha).cross_max


def h_bound(gamma_i: float, gamma_j: float) -> float:
    """Worst-case similarity of two noisy copies of one direction.

    For noise-to-signal ratios ``gamma`` below one, two perturbed versions of
    the same vector can disagree at most down to this value:
    ``-gi*gj + sqrt(1-gi^2)*sqrt(1-gj^2)``.
    """
    for g in (gamma_i, gamma_j):
        if not (0.0 <= g < 1.0):
            raise ValueError("noise ratios must lie in [0, 1)")
    return float(
        -gamma_i * gamma_j + math.sqrt(1.0 - gamma_i**2) * math.sqrt(1.0 - gamma_j**2)
    )


def cross_bound(k: int, h: float) -> float:
    """Worst-case cross-cluster similarity achievable with k distributions.

    Piecewise: ``cos(pi/(k-1))*h + sin(pi/(k-1))*sqrt(1-h^2)`` when
    ``h >= cos(pi/(k-1))``, otherwise the vacuous bound 1. For k=2 this
    reduces to ``-h`` (up to the float value of sin(pi)).
    """
    if k < 2:
        raise ValueError("cross bound requires k >= 2")
    phi = math.pi / (k - 1)
    if h >= math.cos(phi):
        return float(math.cos(phi) * h + math.sin(phi) * math.sqrt(max(0.0, 1.0 - h * h)))
    return 1.0


def split_decision(
    server_norm: float,
    max_client_norm: float,
    cross_max: float,
    cfg: SplitConfig,
) -> SplitDecision:
    """Four-way classification of a cluster's state after a training phase.

    Not yet stationary while the aggregated update norm is at or above
    ``eps1``. At a stationary point, clients whose own updates are all small
    are congruent and terminal. Otherwise the cluster is incongruent and the
    proposed cut is accepted only when the assumed noise bound satisfies
    ``gamma_max < sqrt((1 - cross_max)/2)``; rejected cuts leave the cluster
    intact.
    """
    if server_norm < 0 or max_client_norm < 0:
        raise ValueError("norms must be nonnegative")
    if not (-1.0 <= cross_max <= 1.0):
        raise ValueError("cross_max must lie in [-1, 1]")
    if server_norm >= cfg.eps1:
        return SplitDecision.NOT_STATIONARY
    if max_client_norm <= cfg.eps2:
        return SplitDecision.CONVERGED_TERMINAL
    if cfg.gamma_max < math.sqrt((1.0 - cross_max) / 2.0):
        return SplitDecision.SPLIT
    return SplitDecision.STATIONARY_BUT_REJECT


def similarity_matrix_to_csv(alpha: SimilarityMatrix) -> str:
    """Header of ids then m rows of m full-precision floats."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(alpha.ids)
    for row in alpha.values:
        writer.writerow([repr(float(x)) for x in row])
    return buf.getvalue()


def similarity_matrix_from_csv(text: str) -> SimilarityMatrix:
    rows = [r for r in csv.reader(io.StringIO(text)) if r]
    if len(rows) < 2:
        raise ValueError("similarity CSV needs a header row and at least one data row")
    ids = [int(x) for x in rows[0]]
    data = rows[1:]
    if len(data) != len(ids):
        raise ValueError(f"expected {len(ids)} rows after the header, got {len(data)}")
    for r in data:
        if len(r) != len(ids):
            raise ValueError("similarity CSV rows must match the header length")
    values = np.asarray([[float(x) for x in r] for r in data])
    return SimilarityMatrix(ids=tuple(ids), values=values)


def adjusted_rand_index(labels_a: Sequence[int], labels_b: Sequence[int]) -> float:
    """Chance-corrected agreement between two partitions (1.0 iff identical)."""
    a = np.asarray(labels_a)
    b = np.asarray(labels_b)
    if a.shape != b.shape or a.ndim != 1 or a.size == 0:
        raise ValueError("partitions must be nonempty equal-length label sequences")
    n = a.size
    _, a_idx = np.unique(a, return_inverse=True)
    _, b_idx = np.unique(b, return_inverse=True)
    contingency = np.zeros((a_idx.max() + 1, b_idx.max() + 1), dtype=np.int64)
    np.add.at(contingency, (a_idx, b_idx), 1)

    def comb2(x):
        return x * (x - 1) // 2

    sum_cells = comb2(contingency).sum()
    sum_rows = comb2(contingency.sum(axis=1)).sum()
    sum_cols = comb2(contingency.sum(axis=0)).sum()
    total = comb2(n)
    expected = sum_rows * sum_cols / total if total else 0.0
    max_index = 0.5 * (sum_rows + sum_cols)
    if max_index == expected:
        return 1.0
    return float((sum_cells - expected) / (max_index - expected))
