"""The synchronous federated training loop: local updates, weighted aggregation,
stationarity detection.

Every round, all clients start from the shared parameters, train locally, and
upload weight-updates which the server averages and applies. The loop stops
when the aggregated update norm drops below the stationarity threshold or the
round cap is reached. Client updates within a round are independent and may
run on a thread pool; aggregation is a barrier in fixed client order, so the
result never depends on the worker count.
"""

from __future__ import annotations

import csv
import io
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .clustering import separation_gap, similarity_matrix
from .datagen import ClientRecord
from .models import ModelSpec, accuracy, loss, sgd_n
from .numerics import DegenerateVectorError, RandomStream, as_param_vec, norm, weighted_mean

__all__ = [
    "FLConfig",
    "FLResult",
    "RoundRecord",
    "aggregate",
    "client_update",
    "history_to_csv",
    "history_to_jsonl",
    "run_fl",
]

WEIGHTINGS = ("data_size", "uniform")


@dataclass(frozen=True)
class FLConfig:
    """Knobs of one federated training run."""

    eps1: float
    max_rounds: int
    n_local: int
    lr: float
    batch_size: int
    weighting: str = "data_size"
    sgd_unit: str = "epochs"
    record_metrics: bool = True

    def __post_init__(self):
        if self.eps1 <= 0:
            raise ValueError("eps1 must be positive")
        if self.max_rounds < 1:
            raise ValueError("max_rounds must be >= 1")
        if self.n_local < 1:
            raise ValueError("n_local must be >= 1")
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.weighting not in WEIGHTINGS:
            raise ValueError(f"unknown weighting {self.weighting!r}")

    def to_dict(self) -> dict:
        return {
            "eps1": self.eps1,
            "max_rounds": self.max_rounds,
            "n_local": self.n_local,
            "lr": self.lr,
            "batch_size": self.batch_size,
            "weighting": self.weighting,
            "sgd_unit": self.sgd_unit,
        }

    @staticmethod
    def from_dict(d: dict) -> "FLConfig":
        return FLConfig(
            eps1=float(d["eps1"]),
            max_rounds=int(d["max_rounds"]),
            n_local=int(d["n_local"]),
            lr=float(d["lr"]),
            batch_size=int(d["batch_size"]),
            weighting=d.get("weighting", "data_size"),
            sgd_unit=d.get("sgd_unit", "epochs"),
        )


@dataclass
class RoundRecord:
    """Per-round trace: the norms driving the split criteria plus client metrics."""

    round_index: int
    server_update_norm: float
    max_client_norm: float
    client_train_loss: dict[int, float] = field(default_factory=dict)
    client_test_accuracy: dict[int, float] | None = None
    g_alpha: float | None = None

    def to_dict(self) -> dict:
        return {
            "round": self.round_index,
            "server_update_norm": self.server_update_norm,
            "max_client_norm": self.max_client_norm,
            "client_train_loss": {str(k): v for k, v in self.client_train_loss.items()},
            "client_test_accuracy": None
            if self.client_test_accuracy is None
            else {str(k): v for k, v in self.client_test_accuracy.items()},
            "g_alpha": self.g_alpha,
        }


@dataclass
class FLResult:
    theta: np.ndarray
    history: list[RoundRecord]
    converged: bool
    final_updates: list[np.ndarray]


def client_update(
    model: ModelSpec,
    theta,
    client: ClientRecord,
    cfg: FLConfig,
    rng: RandomStream,
) -> np.ndarray:
    """Local weight-update: parameters after local SGD minus the starting point."""
    theta = as_param_vec(theta, name="theta")
    trained = sgd_n(
        model,
        theta,
        client.train,
        cfg.n_local,
        cfg.lr,
        cfg.batch_size,
        rng,
        unit=cfg.sgd_unit,
    )
    return trained - theta


def aggregate(
    updates: Sequence[np.ndarray],
    data_sizes: Sequence[int],
    weighting: str = "data_size",
) -> np.ndarray:
    """Server-side combination of client updates.

    ``data_size`` weights each update by its client's share of the cluster
    data; ``uniform`` is the plain mean. The two coincide for balanced data.
    """
    if len(updates) == 0:
        raise ValueError("cannot aggregate an empty update list")
    if weighting not in WEIGHTINGS:
        raise ValueError(f"unknown weighting {weighting!r}")
    if any(int(s) < 1 for s in data_sizes):
        raise ValueError("data sizes must be positive")
    if weighting == "data_size":
        weights = [float(s) for s in data_sizes]
    else:
        weights = [1.0] * len(updates)
    return weighted_mean(updates, weights)


def _evaluate_clients(
    model: ModelSpec, theta: np.ndarray, cluster: Sequence[ClientRecord]
) -> tuple[dict[int, float], dict[int, float] | None]:
    train_loss = {c.id: loss(model, theta, c.train) for c in cluster}
    if model.kind == "quadratic":
        return train_loss, None
    return train_loss, {c.id: accuracy(model, theta, c.test) for c in cluster}


def _maybe_gap(
    updates: Sequence[np.ndarray],
    cluster: Sequence[ClientRecord],
    truth: Mapping[int, int] | None,
) -> float | None:
    if truth is None or len(cluster) < 2:
        return None
    try:
        alpha = similarity_matrix(list(updates), ids=[c.id for c in cluster])
        return separation_gap(alpha, truth)
    except (DegenerateVectorError, ValueError):
        return None


def run_fl(
    model: ModelSpec,
    theta0,
    cluster: Sequence[ClientRecord],
    cfg: FLConfig,
    rng: RandomStream,
    *,
    truth: Mapping[int, int] | None = None,
    workers: int = 1,
) -> FLResult:
    """Train one cluster until the aggregated update is stationary or rounds run out.

    All clients synchronize to the shared parameters at the start of every
    round. ``converged`` is true exactly when the last aggregated update norm
    fell below ``cfg.eps1``. Passing a ``truth`` mapping records the per-round
    separation gap of the update similarities (harness metric only; it never
    influences training).
    """
    if len(cluster) == 0:
        raise ValueError("cluster must be nonempty")
    theta = as_param_vec(theta0, name="theta0").copy()
    sizes = [c.train.size for c in cluster]
    history: list[RoundRecord] = []
    converged = False
    updates: list[np.ndarray] = []

    def local(c: ClientRecord, t: int) -> np.ndarray:
        return client_update(model, theta, c, cfg, rng.derive("sgd", client=c.id, round_index=t))

    for t in range(1, cfg.max_rounds + 1):
        if workers > 1:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                updates = list(pool.map(lambda c: local(c, t), cluster))
        else:
            updates = [local(c, t) for c in cluster]
        combined = aggregate(updates, sizes, cfg.weighting)
        theta = theta + combined
        record = RoundRecord(
            round_index=t,
            server_update_norm=norm(combined),
            max_client_norm=max(norm(u) for u in updates),
            g_alpha=_maybe_gap(updates, cluster, truth),
        )
        if cfg.record_metrics:
            record.client_train_loss, record.client_test_accuracy = _evaluate_clients(
                model, theta, cluster
            )
        history.append(record)
        if record.server_update_norm < cfg.eps1:
            converged = True
            break
    return FLResult(theta=theta, history=history, converged=converged, final_updates=updates)


def history_to_jsonl(history: Sequence[RoundRecord]) -> str:
    """One JSON document per round, newline separated."""
    return "\n".join(json.dumps(r.to_dict(), sort_keys=True) for r in history) + "\n"


def history_to_csv(history: Sequence[RoundRecord]) -> str:
    """Flat numeric columns for plotting; blanks where a metric is undefined."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(
        ["round", "server_update_norm", "max_client_norm", "mean_train_loss", "mean_test_accuracy", "g_alpha"]
    )
    for r in history:
        writer.writerow(
            [
                r.round_index,
                repr(r.server_update_norm),
                repr(r.max_client_norm),
                "" if not r.client_train_loss else repr(float(np.mean(list(r.client_train_loss.values())))),
                ""
                if r.client_test_accuracy is None
                else repr(float(np.mean(list(r.client_test_accuracy.values())))),
                "" if r.g_alpha is None else repr(r.g_alpha),
            ]
        )
    return buf.getvalue()
