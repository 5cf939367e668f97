"""Monte-Carlo verification of the separation guarantees on synthetic
configurations with known ground truth.

The harness samples stationary-point configurations (true per-distribution
gradients that cancel under their weights, plus per-client noise of exactly
controlled relative magnitude), then checks that the worst-case similarity
bounds hold in every trial, maps the correct-clustering probability over a
(k, noise) grid, and compares the separation quality of gradient-based and
weight-update-based similarities during federated training. The bounds are
proven results: a violation beyond float slack always indicates an
implementation bug, which is exactly what these checks are for.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .clustering import (
    brute_force_bipartition,
    cross_bound,
    h_bound,
    optimal_bipartition,
    separation_gap,
    similarity_matrix,
)
from .datagen import ClientRecord
from .flcore import FLConfig, aggregate, client_update
from .models import ModelSpec, grad, init_params
from .numerics import RandomStream, cosine

__all__ = [
    "GapComparisonRow",
    "LemmaReport",
    "PhaseCell",
    "StationaryConfig",
    "TheoremReport",
    "compare_update_vs_gradient",
    "phase_diagram",
    "phase_table_to_csv",
    "sample_stationary_config",
    "verify_lemma1",
    "verify_lemma2",
    "verify_lemma3",
    "verify_theorem",
]

# proven inequalities are checked up to float rounding: with zero noise the
# clamped cosine of two identical vectors can sit one ulp below the bound
_FLOAT_SLACK = 1e-9


@dataclass(frozen=True, eq=False)
class StationaryConfig:
    """A synthetic stationary point: true gradients that cancel, noisy copies per client."""

    k: int
    m: int
    d: int
    weights: np.ndarray
    true_gradients: np.ndarray
    gammas: np.ndarray
    noisy_gradients: np.ndarray
    truth: np.ndarray

    def stationarity_residual(self) -> float:
        return float(np.linalg.norm(self.weights @ self.true_gradients))


def _sample_config(stream: RandomStream, k: int, m: int, d: int, gamma: float,
                   weights: np.ndarray | None = None) -> StationaryConfig:
    g = stream.generator()
    if weights is None:
        weights = np.ones(k)
    else:
        weights = np.asarray(weights, dtype=np.float64)
        if weights.shape != (k,) or np.any(weights <= 0):
            raise ValueError("weights must be k positive reals")
    vs = g.standard_normal((k - 1, d))
    last = -(weights[:-1, None] * vs).sum(axis=0) / weights[-1]
    true_gradients = np.vstack([vs, last[None, :]])
    truth = np.arange(m) % k
    gammas = np.full(m, float(gamma))
    noise = g.standard_normal((m, d))
    signal_norms = np.linalg.norm(true_gradients, axis=1)
    noisy = np.empty((m, d))
    for i in range(m):
        v = true_gradients[truth[i]]
        if gamma == 0.0:
            noisy[i] = v
            continue
        x = noise[i]
        x = x * (gamma * signal_norms[truth[i]] / np.linalg.norm(x))
        noisy[i] = v + x
    return StationaryConfig(
        k=k,
        m=m,
        d=d,
        weights=weights,
        true_gradients=true_gradients,
        gammas=gammas,
        noisy_gradients=noisy,
        truth=truth,
    )


def sample_stationary_config(
    k: int, m: int, d: int, gamma: float, seed: int, weights=None
) -> StationaryConfig:
    """Gaussian true gradients with exact zero weighted sum; client assignment is
    balanced and every client's noise norm is rescaled to exactly gamma times
    its signal norm."""
    if not (m >= k >= 2):
        raise ValueError("requires m >= k >= 2")
    if d < 2:
        raise ValueError("requires d >= 2")
    if gamma < 0:
        raise ValueError("gamma must be nonnegative")
    return _sample_config(RandomStream(seed, label="stationary"), k, m, d, gamma, weights)


@dataclass
class TheoremReport:
    trials: int
    lower_bound_violations: int
    upper_bound_violations: int
    applicable_trials: int
    correct_clustering_trials: int

    @property
    def correct_clustering_rate(self) -> float:
        return self.correct_clustering_trials / self.trials if self.trials else 0.0

    @property
    def ok(self) -> bool:
        return self.lower_bound_violations == 0 and self.upper_bound_violations == 0

    def to_dict(self) -> dict:
        return {
            "trials": self.trials,
            "lower_bound_violations": self.lower_bound_violations,
            "upper_bound_violations": self.upper_bound_violations,
            "applicable_trials": self.applicable_trials,
            "correct_clustering_trials": self.correct_clustering_trials,
            "correct_clustering_rate": self.correct_clustering_rate,
        }


def _pairwise_h(gammas: np.ndarray) -> np.ndarray:
    root = np.sqrt(1.0 - gammas**2)
    return -np.outer(gammas, gammas) + np.outer(root, root)


def _trial_quantities(cfg: StationaryConfig):
    alpha = similarity_matrix(list(cfg.noisy_gradients))
    labels = cfg.truth
    same = labels[:, None] == labels[None, :]
    off = ~np.eye(cfg.m, dtype=bool)
    intra_mask = same & off
    cross_mask = ~same
    cut = optimal_bipartition(alpha)
    intra_min = float(alpha.values[intra_mask].min()) if intra_mask.any() else None
    return alpha, intra_mask, cross_mask, intra_min, cut


def verify_theorem(trials: int, k: int, m: int, d: int, gamma: float, seed: int) -> TheoremReport:
    """Check both worst-case similarity bounds and count correct clusterings.

    Lower bound: the minimum same-distribution similarity is at least the
    minimum pairwise noise floor. Upper bound (only applicable when the
    minimum pairwise floor reaches cos(pi/(k-1))): the optimal cut's cross
    maximum is at most the worst-case cross bound. Requires gamma < 1, the
    regime where the bounds are defined.
    """
    if trials < 1:
        raise ValueError("trials must be >= 1")
    if not (0.0 <= gamma < 1.0):
        raise ValueError("the bounds require gamma in [0, 1)")
    base = RandomStream(seed, label="theorem")
    lower_viol = upper_viol = applicable = correct = 0
    threshold = math.cos(math.pi / (k - 1))
    for trial in range(trials):
        cfg = _sample_config(base.derive(round_index=trial), k, m, d, gamma)
        _, intra_mask, cross_mask, intra_min, cut = _trial_quantities(cfg)
        h = _pairwise_h(cfg.gammas)
        if intra_min is not None:
            if intra_min < float(h[intra_mask].min()) - _FLOAT_SLACK:
                lower_viol += 1
            if intra_min - cut.cross_max > 0:
                correct += 1
        pair_h_min = float(h[~np.eye(cfg.m, dtype=bool)].min())
        if pair_h_min >= threshold:
            applicable += 1
            bound = float(
                np.max([cross_bound(k, float(val)) for val in h[cross_mask]])
            )
            if cut.cross_max > bound + _FLOAT_SLACK:
                upper_viol += 1
    return TheoremReport(
        trials=trials,
        lower_bound_violations=lower_viol,
        upper_bound_violations=upper_viol,
        applicable_trials=applicable,
        correct_clustering_trials=correct,
    )


@dataclass
class PhaseCell:
    k: int
    gamma: float
    probability: float
    guaranteed: bool
    trials: int

    def to_dict(self) -> dict:
        return {
            "k": self.k,
            "gamma": self.gamma,
            "probability": self.probability,
            "guaranteed": self.guaranteed,
            "trials": self.trials,
        }


def _guaranteed_cell(k: int, gamma: float) -> bool:
    """Whether the worst-case bounds alone force a positive separation gap."""
    if gamma >= 1.0:
        return False
    h = h_bound(gamma, gamma)
    if h < math.cos(math.pi / (k - 1)):
        return False
    return h > cross_bound(k, h)


def phase_diagram(
    k_values: Sequence[int],
    gamma_values: Sequence[float],
    d: int,
    trials_per_cell: int,
    seed: int,
    m_factor: int = 3,
) -> list[PhaseCell]:
    """Empirical correct-clustering probability per (k, gamma) cell, m = m_factor*k."""
    if not k_values or not len(gamma_values):
        raise ValueError("grids must be nonempty")
    if trials_per_cell < 1:
        raise ValueError("trials_per_cell must be >= 1")
    base = RandomStream(seed, label="phase")
    cells = []
    for ki, k in enumerate(k_values):
        m = m_factor * k
        for gi, gamma in enumerate(gamma_values):
            stream = base.derive(f"cell{ki}", client=gi)
            hits = 0
            for trial in range(trials_per_cell):
                cfg = _sample_config(stream.derive(round_index=trial), k, m, d, float(gamma))
                alpha = similarity_matrix(list(cfg.noisy_gradients))
                truth = {i: int(cfg.truth[i]) for i in range(m)}
                if separation_gap(alpha, truth) > 0:
                    hits += 1
            cells.append(
                PhaseCell(
                    k=int(k),
                    gamma=float(gamma),
                    probability=hits / trials_per_cell,
                    guaranteed=_guaranteed_cell(int(k), float(gamma)),
                    trials=trials_per_cell,
                )
            )
    return cells


def phase_table_to_csv(cells: Sequence[PhaseCell]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["k", "gamma", "probability", "guaranteed", "trials"])
    for c in cells:
        writer.writerow([c.k, repr(c.gamma), repr(c.probability), int(c.guaranteed), c.trials])
    return buf.getvalue()


@dataclass
class LemmaReport:
    trials: int
    violations: int
    min_margin: float

    @property
    def ok(self) -> bool:
        return self.violations == 0

    def to_dict(self) -> dict:
        return {"trials": self.trials, "violations": self.violations, "min_margin": self.min_margin}


def _scaled_noise(g: np.random.Generator, ref_norm: float, d: int) -> np.ndarray:
    """Noise vector with norm uniform in (0, ref_norm)."""
    x = g.standard_normal(d)
    target = g.uniform(0.0, 1.0) * ref_norm
    n = np.linalg.norm(x)
    return x * (target / n)


def verify_lemma1(trials: int, d: int, seed: int) -> LemmaReport:
    """Two noisy copies of one vector are at least as aligned as the noise floor.

    Samples v with noise X, Y strictly shorter than v and asserts
    ``cos(v+X, v+Y) >= -|X||Y|/|v|^2 + sqrt(1-|X|^2/|v|^2)*sqrt(1-|Y|^2/|v|^2)``.
    """
    if trials < 1:
        raise ValueError("trials must be >= 1")
    base = RandomStream(seed, label="lemma1")
    violations = 0
    min_margin = math.inf
    for trial in range(trials):
        g = base.derive(round_index=trial).generator()
        v = g.standard_normal(d)
        nv = float(np.linalg.norm(v))
        x = _scaled_noise(g, nv, d)
        y = _scaled_noise(g, nv, d)
        gx = float(np.linalg.norm(x)) / nv
        gy = float(np.linalg.norm(y)) / nv
        bound = h_bound(gx, gy)
        margin = cosine(v + x, v + y) - bound
        min_margin = min(min_margin, margin)
        if margin < -_FLOAT_SLACK:
            violations += 1
    return LemmaReport(trials=trials, violations=violations, min_margin=min_margin)


def verify_lemma2(trials: int, d: int, seed: int) -> LemmaReport:
    """Noisy copies of two vectors stay no more aligned than the rotated noise floor.

    Requires the precondition ``cos(v, w) <= h`` where h is the pairwise noise
    floor; candidate draws violating it are rejected and resampled. Asserts
    ``cos(v+X, w+Y) <= cos(v,w)*h + sqrt(1-cos(v,w)^2)*sqrt(1-h^2)``.
    """
    if trials < 1:
        raise ValueError("trials must be >= 1")
    base = RandomStream(seed, label="lemma2")
    violations = 0
    min_margin = math.inf
    for trial in range(trials):
        g = base.derive(round_index=trial).generator()
        while True:
            v = g.standard_normal(d)
            w = g.standard_normal(d)
            nv = float(np.linalg.norm(v))
            nw = float(np.linalg.norm(w))
            x = _scaled_noise(g, nv, d)
            y = _scaled_noise(g, nw, d)
            h = h_bound(float(np.linalg.norm(x)) / nv, float(np.linalg.norm(y)) / nw)
            a = cosine(v, w)
            if a <= h:
                break
        bound = a * h + math.sqrt(1.0 - a * a) * math.sqrt(max(0.0, 1.0 - h * h))
        margin = bound - cosine(v + x, w + y)
        min_margin = min(min_margin, margin)
        if margin < -_FLOAT_SLACK:
            violations += 1
    return LemmaReport(trials=trials, violations=violations, min_margin=min_margin)


def verify_lemma3(trials: int, k: int, d: int, seed: int, weights=None) -> LemmaReport:
    """Any weighted zero-sum vector set splits with cross similarity <= cos(pi/(k-1)).

    Brute-forces the optimal bipartition of sampled zero-sum sets and checks
    the achieved min-max cross similarity against the bound.
    """
    if trials < 1:
        raise ValueError("trials must be >= 1")
    if k < 2:
        raise ValueError("k must be >= 2")
    base = RandomStream(seed, label="lemma3")
    bound = math.cos(math.pi / (k - 1))
    violations = 0
    min_margin = math.inf
    for trial in range(trials):
        cfg = _sample_config(base.derive(round_index=trial), k, k, d, 0.0, weights)
        alpha = similarity_matrix(list(cfg.true_gradients))
        cut = brute_force_bipartition(alpha)
        margin = bound - cut.cross_max
        min_margin = min(min_margin, margin)
        if margin < -_FLOAT_SLACK:
            violations += 1
    return LemmaReport(trials=trials, violations=violations, min_margin=min_margin)


@dataclass
class GapComparisonRow:
    """Separation gap measured two ways in the same round, plus how well the
    weight-updates align with the negative full-batch gradients."""

    round_index: int
    g_gradient: float
    g_weight_update: float
    mean_alignment: float

    def to_dict(self) -> dict:
        return {
            "round": self.round_index,
            "g_gradient": self.g_gradient,
            "g_weight_update": self.g_weight_update,
            "mean_alignment": self.mean_alignment,
        }


def compare_update_vs_gradient(
    clients: Sequence[ClientRecord],
    model: ModelSpec,
    fl_cfg: FLConfig,
    rounds: int,
    rng: RandomStream,
) -> list[GapComparisonRow]:
    """Per round, the separation gap from full-batch gradients at the shared
    parameters versus from that round's weight-updates.

    ``mean_alignment`` is the average cosine between each client's update and
    its negative full-batch gradient; near 1 at small steps, where an
    accumulated epoch of mini-batch steps tracks the full gradient direction.
    """
    if model.kind == "quadratic":
        raise ValueError("comparison requires a classifier population")
    if rounds < 1:
        raise ValueError("rounds must be >= 1")
    truth = {c.id: c.truth for c in clients}
    ids = [c.id for c in clients]
    sizes = [c.train.size for c in clients]
    theta = init_params(model, rng.derive("init"))
    rows = []
    for t in range(1, rounds + 1):
        grads = [grad(model, theta, c.train) for c in clients]
        g_grad = separation_gap(similarity_matrix(grads, ids=ids), truth)
        updates = [
            client_update(model, theta, c, fl_cfg, rng.derive("cmp_sgd", client=c.id, round_index=t))
            for c in clients
        ]
        g_upd = separation_gap(similarity_matrix(updates, ids=ids), truth)
        alignment = float(
            np.mean([cosine(u, -gr) for u, gr in zip(updates, grads)])
        )
        rows.append(
            GapComparisonRow(
                round_index=t,
                g_gradient=g_grad,
                g_weight_update=g_upd,
                mean_alignment=alignment,
            )
        )
        theta = theta + aggregate(updates, sizes, fl_cfg.weighting)
    return rows
