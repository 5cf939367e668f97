"""Synthetic non-iid client populations with known cluster structure.

Four scenarios cover the interesting geometries:

* ``label_permutation`` -- shared Gaussian-blob features; each cluster
  relabels classes through its own permutation, so feature marginals agree
  across clusters while the conditionals conflict.
* ``congruent_split`` -- a single distribution; each client only sees a
  contiguous slice of the classes (classic congruent non-iid).
* ``xor_clusters`` -- two-class checkerboard of four blobs; the second
  cluster's labels are the complement of the first's.
* ``conditional_flip`` -- identical feature distribution; the second cluster
  flips labels inside one designated region (the cell of the last anchor).

Blobs are isotropic Gaussians whose centers sit on a circle in the first two
feature dimensions with pairwise distance at least ``blob_min_separation``
standard deviations, so every per-cluster problem is easy and the clustering
mechanism is the only thing under test. Each client's ``truth`` index records
the generating distribution; it exists for the harness and must never inform
the learner.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .models import Batch, ModelSpec, grad
from .numerics import RandomStream

__all__ = [
    "ClientRecord",
    "PopulationSpec",
    "SCENARIOS",
    "make_heldout_clients",
    "make_population",
    "population_from_dict",
    "population_to_dict",
    "quadratic_client",
    "relative_gradient_noise",
    "true_risk_gradient_oracle",
]

SCENARIOS = ("label_permutation", "congruent_split", "xor_clusters", "conditional_flip")

# no label value may be shared by more than max(1, k // 2) cluster permutations
# at any position; keeps the best single model at or below 50% accuracy
_MAX_SAMPLING_ATTEMPTS = 500


@dataclass(frozen=True, eq=False)
class ClientRecord:
    """One simulated client: id, local train/test data, hidden distribution index."""

    id: int
    train: Batch
    test: Batch
    truth: int

    def __post_init__(self):
        if self.train.size < 1 or self.test.size < 1:
            raise ValueError("client train and test sets must be nonempty")
        if self.truth < 0:
            raise ValueError("truth index must be nonnegative")


@dataclass(frozen=True)
class PopulationSpec:
    """Recipe for a deterministic client population."""

    scenario: str
    m: int
    k: int
    n_per_client: int
    n_features: int
    n_classes: int
    seed: int
    n_test_per_client: int | None = None
    cluster_sizes: tuple[int, ...] | None = None
    permutation_style: str = "derangement"
    blob_sigma: float = 1.0
    blob_min_separation: float = 6.0

    def __post_init__(self):
        if self.scenario not in SCENARIOS:
            raise ValueError(f"unknown scenario {self.scenario!r}")
        if not (self.m >= self.k >= 1):
            raise ValueError("population requires m >= k >= 1")
        if self.n_per_client < 1:
            raise ValueError("n_per_client must be >= 1")
        if self.n_features < 2:
            raise ValueError("n_features must be >= 2")
        if self.n_classes < 2:
            raise ValueError("n_classes must be >= 2")
        if self.scenario in ("label_permutation", "conditional_flip", "xor_clusters") and self.k < 2:
            raise ValueError(f"{self.scenario} requires k >= 2")
        if self.scenario in ("xor_clusters", "conditional_flip"):
            if self.k != 2:
                raise ValueError(f"{self.scenario} defines exactly two conditionals, use k=2")
            if self.n_classes != 2:
                raise ValueError(f"{self.scenario} is a two-class problem")
        if self.scenario == "congruent_split":
            if self.k != 1:
                raise ValueError("congruent_split draws every client from one distribution, use k=1")
            if self.m > self.n_classes:
                raise ValueError("congruent_split needs m <= n_classes for nonempty label slices")
        if self.permutation_style not in ("derangement", "swap"):
            raise ValueError(f"unknown permutation_style {self.permutation_style!r}")
        if self.cluster_sizes is not None:
            sizes = tuple(int(s) for s in self.cluster_sizes)
            if len(sizes) != self.k or any(s < 1 for s in sizes) or sum(sizes) != self.m:
                raise ValueError("cluster_sizes must be k positive integers summing to m")
            object.__setattr__(self, "cluster_sizes", sizes)
        if self.blob_sigma <= 0 or self.blob_min_separation <= 0:
            raise ValueError("blob geometry parameters must be positive")

    @property
    def test_size(self) -> int:
        return self.n_per_client if self.n_test_per_client is None else self.n_test_per_client

    def to_dict(self) -> dict:
        d = {
            "scenario": self.scenario,
            "m": self.m,
            "k": self.k,
            "n_per_client": self.n_per_client,
            "n_features": self.n_features,
            "n_classes": self.n_classes,
            "seed": self.seed,
        }
        if self.n_test_per_client is not None:
            d["n_test_per_client"] = self.n_test_per_client
        if self.cluster_sizes is not None:
            d["cluster_sizes"] = list(self.cluster_sizes)
        if self.permutation_style != "derangement":
            d["permutation_style"] = self.permutation_style
        if self.blob_sigma != 1.0:
            d["blob_sigma"] = self.blob_sigma
        if self.blob_min_separation != 6.0:
            d["blob_min_separation"] = self.blob_min_separation
        return d

    @staticmethod
    def from_dict(d: dict) -> "PopulationSpec":
        kwargs = dict(d)
        if "cluster_sizes" in kwargs and kwargs["cluster_sizes"] is not None:
            kwargs["cluster_sizes"] = tuple(kwargs["cluster_sizes"])
        return PopulationSpec(**kwargs)


def _anchor_centers(n_anchors: int, n_features: int, sigma: float, min_sep: float) -> np.ndarray:
    """Anchor blobs on a circle in the first two dims, adjacent distance >= min_sep*sigma."""
    centers = np.zeros((n_anchors, n_features))
    if n_anchors == 1:
        return centers
    radius = min_sep * sigma / (2.0 * math.sin(math.pi / n_anchors))
    angles = 2.0 * math.pi * np.arange(n_anchors) / n_anchors
    centers[:, 0] = radius * np.cos(angles)
    centers[:, 1] = radius * np.sin(angles)
    return centers


def _subfactorial(n: int) -> int:
    a, b = 1, 0  # !0, !1
    for i in range(2, n + 1):
        a, b = b, (i - 1) * (a + b)
    return b if n >= 1 else a


def _sample_derangement(g: np.random.Generator, n: int) -> np.ndarray:
    while True:
        perm = g.permutation(n)
        if not np.any(perm == np.arange(n)):
            return perm


def _sample_swap(g: np.random.Generator, n: int) -> np.ndarray:
    i, j = sorted(g.choice(n, size=2, replace=False).tolist())
    perm = np.arange(n)
    perm[i], perm[j] = j, i
    return perm


def _plurality_ok(perms: list[np.ndarray], k: int, n_classes: int) -> bool:
    cap = max(1, k // 2)
    table = np.stack(perms)
    for pos in range(n_classes):
        _, counts = np.unique(table[:, pos], return_counts=True)
        if counts.max() > cap:
            return False
    return True


def _sample_permutations(stream: RandomStream, k: int, n_classes: int, style: str) -> list[np.ndarray]:
    if style == "derangement" and _subfactorial(n_classes) < k:
        raise ValueError(
            f"only {_subfactorial(n_classes)} derangements of {n_classes} classes, need {k}"
        )
    if style == "swap" and n_classes * (n_classes - 1) // 2 < k:
        raise ValueError(f"not enough distinct swaps of {n_classes} classes for k={k}")
    g = stream.generator()
    if style == "derangement" and k < n_classes:
        # conjugated cyclic shifts: fixed-point free, and any two cluster
        # permutations disagree on every single label, so every pair of
        # clusters conflicts on every blob
        sigma = g.permutation(n_classes)
        inv = np.argsort(sigma)
        shifts = 1 + g.permutation(n_classes - 1)[:k]
        base = np.arange(n_classes)
        return [sigma[(base + s) % n_classes][inv] for s in shifts]
    sampler = _sample_derangement if style == "derangement" else _sample_swap
    for _ in range(_MAX_SAMPLING_ATTEMPTS):
        perms = [sampler(g, n_classes) for _ in range(k)]
        keys = {tuple(p.tolist()) for p in perms}
        if len(keys) != k:
            continue
        if style == "derangement" and not _plurality_ok(perms, k, n_classes):
            continue
        return perms
    raise ValueError(
        f"could not sample {k} sufficiently conflicting permutations of {n_classes} classes"
    )


def _truth_assignment(spec: PopulationSpec) -> list[int]:
    if spec.cluster_sizes is not None:
        out: list[int] = []
        for idx, size in enumerate(spec.cluster_sizes):
            out.extend([idx] * size)
        return out
    return [i % spec.k for i in range(spec.m)]


@dataclass(frozen=True)
class _Generator:
    """Scenario-resolved sampling machinery shared by clients and the oracle."""

    spec: PopulationSpec
    anchors: np.ndarray
    permutations: tuple = ()
    class_slices: tuple = ()

    def allowed_anchors(self, truth: int, client_id: int | None) -> np.ndarray:
        if self.spec.scenario == "congruent_split" and client_id is not None:
            return np.asarray(self.class_slices[client_id])
        return np.arange(self.anchors.shape[0])

    def label(self, truth: int, anchor_idx: np.ndarray, features: np.ndarray) -> np.ndarray:
        scenario = self.spec.scenario
        if scenario == "label_permutation":
            return self.permutations[truth][anchor_idx]
        if scenario == "congruent_split":
            return anchor_idx.copy()
        if scenario == "xor_clusters":
            base = anchor_idx % 2
            return base if truth == 0 else 1 - base
        base = anchor_idx // 2
        if truth == 0:
            return base.copy()
        # flip inside the designated region: the cell nearest the last anchor
        dist = np.linalg.norm(features[:, None, :] - self.anchors[None, :, :], axis=2)
        in_region = np.argmin(dist, axis=1) == self.anchors.shape[0] - 1
        return np.where(in_region, 1 - base, base)

    def sample(self, stream: RandomStream, n: int, truth: int, client_id: int | None) -> Batch:
        g = stream.generator()
        allowed = self.allowed_anchors(truth, client_id)
        anchor_idx = allowed[g.integers(0, len(allowed), size=n)]
        features = self.anchors[anchor_idx] + self.spec.blob_sigma * g.standard_normal(
            (n, self.spec.n_features)
        )
        return Batch(features, self.label(truth, anchor_idx, features))


def _build_generator(spec: PopulationSpec) -> _Generator:
    scenario = spec.scenario
    if scenario in ("xor_clusters", "conditional_flip"):
        anchors = _anchor_centers(4, spec.n_features, spec.blob_sigma, spec.blob_min_separation)
    else:
        anchors = _anchor_centers(
            spec.n_classes, spec.n_features, spec.blob_sigma, spec.blob_min_separation
        )
    permutations: tuple = ()
    class_slices: tuple = ()
    if scenario == "label_permutation":
        stream = RandomStream(spec.seed, label="population/perms")
        permutations = tuple(
            _sample_permutations(stream, spec.k, spec.n_classes, spec.permutation_style)
        )
    elif scenario == "congruent_split":
        class_slices = tuple(
            tuple(chunk.tolist()) for chunk in np.array_split(np.arange(spec.n_classes), spec.m)
        )
    return _Generator(spec, anchors, permutations, class_slices)


def make_population(spec: PopulationSpec) -> list[ClientRecord]:
    """Materialize the client records for a population spec, bit-reproducibly."""
    gen = _build_generator(spec)
    base = RandomStream(spec.seed, label="population")
    truths = _truth_assignment(spec)
    clients = []
    for i in range(spec.m):
        train = gen.sample(base.derive("train", client=i), spec.n_per_client, truths[i], i)
        test = gen.sample(base.derive("test", client=i), spec.test_size, truths[i], i)
        clients.append(ClientRecord(id=i, train=train, test=test, truth=truths[i]))
    return clients


def make_heldout_clients(spec: PopulationSpec, per_truth: int, tag: str = "heldout") -> list[ClientRecord]:
    """Fresh clients (per_truth for each distribution) disjoint from the training population."""
    if per_truth < 1:
        raise ValueError("per_truth must be >= 1")
    gen = _build_generator(spec)
    base = RandomStream(spec.seed, label=f"population/{tag}")
    clients = []
    next_id = spec.m
    for truth in range(spec.k):
        for _ in range(per_truth):
            train = gen.sample(
                base.derive("train", client=next_id), spec.n_per_client, truth, None
            )
            test = gen.sample(base.derive("test", client=next_id), spec.test_size, truth, None)
            clients.append(ClientRecord(id=next_id, train=train, test=test, truth=truth))
            next_id += 1
    return clients


def quadratic_client(client_id: int, center, truth: int = 0) -> ClientRecord:
    """Toy client whose risk is the bowl 0.5*|theta - center|^2 (single-row batch)."""
    row = np.asarray(center, dtype=np.float64)[None, :]
    batch = Batch(row, np.zeros(1, dtype=np.int64))
    return ClientRecord(id=client_id, train=batch, test=batch, truth=truth)


def true_risk_gradient_oracle(
    spec: PopulationSpec,
    truth: int,
    model: ModelSpec,
    theta,
    n_oracle: int,
    seed: int,
) -> np.ndarray:
    """Gradient of the loss on a fresh large sample from the given distribution.

    Harness-only estimate of the true-risk gradient. Quadratic models are
    exact by construction (no sampling), so the declared center is used
    directly regardless of ``n_oracle``.
    """
    if model.kind == "quadratic":
        return np.asarray(theta, dtype=np.float64) - model.center_vec
    if n_oracle < 10 * spec.n_per_client:
        raise ValueError("n_oracle must be at least 10x the per-client data size")
    if not (0 <= truth < spec.k):
        raise ValueError(f"truth index {truth} outside [0, {spec.k})")
    gen = _build_generator(spec)
    stream = RandomStream(seed, label="oracle", client=truth)
    batch = gen.sample(stream, n_oracle, truth, None)
    return grad(model, theta, batch)


def relative_gradient_noise(
    spec: PopulationSpec,
    client: ClientRecord,
    model: ModelSpec,
    theta,
    n_oracle: int,
    seed: int,
) -> float:
    """Ratio |true_grad - client_grad| / |true_grad| at theta (harness-only)."""
    true_grad = true_risk_gradient_oracle(spec, client.truth, model, theta, n_oracle, seed)
    denom = float(np.linalg.norm(true_grad))
    if denom == 0.0:
        raise ValueError("true-risk gradient vanished; noise ratio undefined")
    return float(np.linalg.norm(true_grad - grad(model, theta, client.train))) / denom


def population_to_dict(spec: PopulationSpec, clients: list[ClientRecord]) -> dict:
    """JSON-ready document (spec plus per-client arrays) for reproducibility."""
    return {
        "schema_version": 1,
        "spec": spec.to_dict(),
        "clients": [
            {
                "id": c.id,
                "truth": c.truth,
                "train": {
                    "features": c.train.features.tolist(),
                    "labels": c.train.labels.tolist(),
                },
                "test": {
                    "features": c.test.features.tolist(),
                    "labels": c.test.labels.tolist(),
                },
            }
            for c in clients
        ],
    }


def population_from_dict(doc: dict) -> tuple[PopulationSpec, list[ClientRecord]]:
    spec = PopulationSpec.from_dict(doc["spec"])
    clients = [
        ClientRecord(
            id=int(c["id"]),
            train=Batch(c["train"]["features"], c["train"]["labels"]),
            test=Batch(c["test"]["features"], c["test"]["labels"]),
            truth=int(c["truth"]),
        )
        for c in doc["clients"]
    ]
    return spec, clients
