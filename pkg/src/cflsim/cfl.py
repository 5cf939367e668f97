"""Cluster controllers: recursive bipartitioning, the online multi-round
variant, the parameter tree for routing new clients, and the shared-seed
permutation masking that hides raw updates from the server.

The recursive controller trains a cluster to a stationary point, inspects the
final-round update norms and similarities, and either terminates the branch
or splits it and recurses on both halves from the stationary solution. The
online controller keeps a flat set of live clusters and applies the same
criteria every round, as a server would during an open-ended deployment.
Both build a binary parameter tree whose edges cache the pre-split updates of
the child clients, so a newly joining client can be routed from the root to
the leaf whose members' updates it resembles most.
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .clustering import (
    SimilarityMatrix,
    SplitConfig,
    SplitDecision,
    optimal_bipartition,
    separation_gap,
    similarity_matrix,
    split_decision,
)
from .datagen import ClientRecord
from .flcore import FLConfig, FLResult, RoundRecord, aggregate, run_fl
from .models import ModelSpec, accuracy, grad, sgd_n
from .numerics import DegenerateVectorError, RandomStream, as_param_vec, cosine, norm

__all__ = [
    "ClusterNode",
    "OnlineCFLResult",
    "OnlineRoundRecord",
    "ParameterTree",
    "PermutationKey",
    "RecursiveCFLResult",
    "assign_client",
    "mask",
    "online_history_to_jsonl",
    "run_cfl_online",
    "run_cfl_recursive",
    "tree_from_dict",
    "tree_to_dict",
    "unmask",
]


# ---------------------------------------------------------------------------
# privacy masking


@dataclass(frozen=True, eq=False)
class PermutationKey:
    """Shared-seed coordinate permutation; an orthonormal map the server cannot invert
    without the seed. Cosine similarities and norms of masked vectors equal the raw ones."""

    seed: int
    dim: int
    perm: np.ndarray
    inverse: np.ndarray

    @staticmethod
    def from_seed(seed: int, dim: int) -> "PermutationKey":
        if dim < 1:
            raise ValueError("dimension must be >= 1")
        perm = RandomStream(seed, label="mask").generator().permutation(dim)
        inverse = np.argsort(perm)
        return PermutationKey(seed=seed, dim=dim, perm=perm, inverse=inverse)

    @staticmethod
    def identity(dim: int) -> "PermutationKey":
        if dim < 1:
            raise ValueError("dimension must be >= 1")
        eye = np.arange(dim)
        return PermutationKey(seed=0, dim=dim, perm=eye.copy(), inverse=eye.copy())


def mask(key: PermutationKey, v) -> np.ndarray:
    v = as_param_vec(v)
    if v.size != key.dim:
        raise ValueError(f"vector dim {v.size} does not match key dim {key.dim}")
    return v[key.perm]


def unmask(key: PermutationKey, v) -> np.ndarray:
    v = as_param_vec(v)
    if v.size != key.dim:
        raise ValueError(f"vector dim {v.size} does not match key dim {key.dim}")
    return v[key.inverse]


# ---------------------------------------------------------------------------
# parameter tree


@dataclass
class ClusterNode:
    """One (intermediate) cluster: membership, its stationary solution, and for
    each child edge the pre-split updates of that child's clients."""

    id: int
    clients: tuple[int, ...]
    theta_star: np.ndarray | None = None
    children: tuple[int, int] | None = None
    edge_cache: dict[int, list[tuple[int, np.ndarray]]] = field(default_factory=dict)

    @property
    def is_leaf(self) -> bool:
        return self.children is None


@dataclass
class ParameterTree:
    """Binary tree over clusters; the root covers the whole population."""

    nodes: dict[int, ClusterNode]
    root: int

    def node(self, node_id: int) -> ClusterNode:
        return self.nodes[node_id]

    def leaves(self) -> list[ClusterNode]:
        return [n for n in self.nodes.values() if n.is_leaf]

    def leaf_for(self, client_id: int) -> int:
        for node in self.nodes.values():
            if node.is_leaf and client_id in node.clients:
                return node.id
        raise KeyError(f"client {client_id} is not in any leaf")

    def validate(self) -> None:
        """Structural invariants: binary non-leaves, children partition the parent,
        every edge carries a cache covering exactly the child's clients."""
        if self.root not in self.nodes:
            raise ValueError("root node missing")
        for node in self.nodes.values():
            if node.children is None:
                continue
            if len(node.children) != 2:
                raise ValueError(f"node {node.id} must have exactly 2 children")
            kids = [self.nodes[c] for c in node.children]
            merged = sorted(kids[0].clients + kids[1].clients)
            if merged != sorted(node.clients) or set(kids[0].clients) & set(kids[1].clients):
                raise ValueError(f"children of node {node.id} do not partition it")
            for kid in kids:
                cache = node.edge_cache.get(kid.id)
                if cache is None:
                    raise ValueError(f"edge {node.id}->{kid.id} has no update cache")
                if sorted(cid for cid, _ in cache) != sorted(kid.clients):
                    raise ValueError(f"edge {node.id}->{kid.id} cache does not cover the child")


def tree_to_dict(tree: ParameterTree) -> dict:
    return {
        "root": tree.root,
        "nodes": [
            {
                "id": n.id,
                "clients": list(n.clients),
                "theta_star": None if n.theta_star is None else n.theta_star.tolist(),
                "children": None if n.children is None else list(n.children),
                "edge_cache": {
                    str(child): [[cid, u.tolist()] for cid, u in cache]
                    for child, cache in n.edge_cache.items()
                },
            }
            for n in sorted(tree.nodes.values(), key=lambda n: n.id)
        ],
    }


def tree_from_dict(doc: dict) -> ParameterTree:
    nodes = {}
    for nd in doc["nodes"]:
        nodes[int(nd["id"])] = ClusterNode(
            id=int(nd["id"]),
            clients=tuple(int(c) for c in nd["clients"]),
            theta_star=None if nd["theta_star"] is None else np.asarray(nd["theta_star"], dtype=np.float64),
            children=None if nd["children"] is None else (int(nd["children"][0]), int(nd["children"][1])),
            edge_cache={
                int(child): [(int(cid), np.asarray(u, dtype=np.float64)) for cid, u in cache]
                for child, cache in nd.get("edge_cache", {}).items()
            },
        )
    tree = ParameterTree(nodes=nodes, root=int(doc["root"]))
    tree.validate()
    return tree


# ---------------------------------------------------------------------------
# recursive controller


@dataclass
class NodeReport:
    """Why a node became a leaf or split, with the quantities that decided it."""

    node_id: int
    decision: SplitDecision | None
    converged: bool
    server_norm: float
    max_client_norm: float
    cross_max: float | None = None
    rounds: int = 0


@dataclass
class RecursiveCFLResult:
    tree: ParameterTree
    assignment: dict[int, int]
    client_params: dict[int, np.ndarray]
    histories: dict[int, list[RoundRecord]]
    reports: dict[int, NodeReport]
    node_similarity: dict[int, SimilarityMatrix]

    @property
    def root_theta(self) -> np.ndarray:
        theta = self.tree.node(self.tree.root).theta_star
        assert theta is not None
        return theta


def _split_similarity(
    model: ModelSpec,
    theta: np.ndarray,
    cluster: Sequence[ClientRecord],
    fl_result: FLResult,
    source: str,
) -> SimilarityMatrix:
    ids = [c.id for c in cluster]
    if source == "gradient":
        vectors = [grad(model, theta, c.train) for c in cluster]
    else:
        vectors = fl_result.final_updates
    return similarity_matrix(vectors, ids=ids)


def run_cfl_recursive(
    model: ModelSpec,
    theta0,
    clients: Sequence[ClientRecord],
    fl_cfg: FLConfig,
    split_cfg: SplitConfig,
    rng: RandomStream,
    *,
    max_depth: int = 10,
    truth: Mapping[int, int] | None = None,
    workers: int = 1,
) -> RecursiveCFLResult:
    """Depth-first recursive clustering from one shared starting point.

    Each node runs federated training to a stationary solution, then applies
    the split criteria to the final round's norms and the optimal bipartition
    of the final-round update similarities. Accepted splits recurse on both
    halves starting from the node's stationary solution; every other outcome
    (still moving, congruent, rejected cut, singleton, depth cap) makes the
    node a leaf that returns its solution to its clients.
    """
    if len(clients) == 0:
        raise ValueError("client set must be nonempty")
    theta0 = as_param_vec(theta0, name="theta0")
    nodes: dict[int, ClusterNode] = {}
    histories: dict[int, list[RoundRecord]] = {}
    reports: dict[int, NodeReport] = {}
    similarities: dict[int, SimilarityMatrix] = {}
    assignment: dict[int, int] = {}
    client_params: dict[int, np.ndarray] = {}
    by_id = {c.id: c for c in clients}
    counter = iter(range(len(clients) * 4 + 8))

    def descend(member_ids: tuple[int, ...], theta_start: np.ndarray, depth: int) -> int:
        node_id = next(counter)
        node = ClusterNode(id=node_id, clients=member_ids)
        nodes[node_id] = node
        cluster = [by_id[c] for c in member_ids]
        result = run_fl(
            model,
            theta_start,
            cluster,
            fl_cfg,
            rng.derive(f"node{node_id}"),
            truth=truth,
            workers=workers,
        )
        node.theta_star = result.theta
        histories[node_id] = result.history
        last = result.history[-1]
        report = NodeReport(
            node_id=node_id,
            decision=None,
            converged=result.converged,
            server_norm=last.server_update_norm,
            max_client_norm=last.max_client_norm,
            rounds=len(result.history),
        )
        reports[node_id] = report

        def leaf(decision: SplitDecision | None) -> int:
            report.decision = decision
            for cid in member_ids:
                assignment[cid] = node_id
                client_params[cid] = result.theta
            return node_id

        if len(member_ids) < 2 or depth >= max_depth:
            return leaf(None)
        if not result.converged:
            return leaf(SplitDecision.NOT_STATIONARY)
        if last.max_client_norm <= split_cfg.eps2:
            return leaf(SplitDecision.CONVERGED_TERMINAL)
        alpha = _split_similarity(model, result.theta, cluster, result, split_cfg.similarity_source)
        similarities[node_id] = alpha
        cut = optimal_bipartition(alpha)
        report.cross_max = cut.cross_max
        decision = split_decision(
            last.server_update_norm, last.max_client_norm, cut.cross_max, split_cfg
        )
        if decision is not SplitDecision.SPLIT:
            return leaf(decision)
        report.decision = SplitDecision.SPLIT
        updates_by_id = dict(zip([c.id for c in cluster], result.final_updates))
        child_ids = []
        for side in (cut.c1, cut.c2):
            child = descend(side, result.theta, depth + 1)
            node.edge_cache[child] = [(cid, updates_by_id[cid]) for cid in side]
            child_ids.append(child)
        node.children = (child_ids[0], child_ids[1])
        return node_id

    root = descend(tuple(sorted(by_id)), theta0, 0)
    tree = ParameterTree(nodes=nodes, root=root)
    tree.validate()
    return RecursiveCFLResult(
        tree=tree,
        assignment=assignment,
        client_params=client_params,
        histories=histories,
        reports=reports,
        node_similarity=similarities,
    )


# ---------------------------------------------------------------------------
# online controller


@dataclass
class OnlineRoundRecord:
    """One communication round of the flat multi-cluster protocol."""

    round_index: int
    cluster_clients: dict[int, tuple[int, ...]]
    server_norms: dict[int, float]
    max_client_norms: dict[int, float]
    gaps: dict[int, float]
    splits: list[tuple[int, int, int]]
    mean_test_accuracy: float | None
    similarities: dict[int, SimilarityMatrix] = field(default_factory=dict)

    @property
    def n_clusters(self) -> int:
        return len(self.cluster_clients)

    def to_dict(self) -> dict:
        return {
            "round": self.round_index,
            "n_clusters": self.n_clusters,
            "cluster_clients": {str(k): list(v) for k, v in self.cluster_clients.items()},
            "server_norms": {str(k): v for k, v in self.server_norms.items()},
            "max_client_norms": {str(k): v for k, v in self.max_client_norms.items()},
            "gaps": {str(k): v for k, v in self.gaps.items()},
            "splits": [list(s) for s in self.splits],
            "mean_test_accuracy": self.mean_test_accuracy,
        }


@dataclass
class OnlineCFLResult:
    tree: ParameterTree
    history: list[OnlineRoundRecord]
    assignment: dict[int, int]
    client_params: dict[int, np.ndarray]


@dataclass
class _LiveCluster:
    node_id: int
    member_ids: tuple[int, ...]
    pending: np.ndarray | None = None


def online_history_to_jsonl(history: Sequence[OnlineRoundRecord]) -> str:
    return "\n".join(json.dumps(r.to_dict(), sort_keys=True) for r in history) + "\n"


def run_cfl_online(
    model: ModelSpec,
    theta0,
    clients: Sequence[ClientRecord],
    fl_cfg: FLConfig,
    split_cfg: SplitConfig,
    rng: RandomStream,
    *,
    total_rounds: int,
    privacy_key: PermutationKey | None = None,
    workers: int = 1,
) -> OnlineCFLResult:
    """Flat multi-round protocol with per-round split checks, optionally masked.

    Every round each client applies its cluster's (inverse-masked) pending
    aggregate, trains locally, and uploads a masked update. Per cluster the
    server aggregates and, when the aggregate is stationary while some client
    is not, bipartitions the cluster by update similarity and splits it if
    the noise-bound rule accepts the cut. Children inherit the parent's
    pending aggregate. Runs exactly ``total_rounds`` rounds; the last pending
    aggregates are applied once at the end so the returned models reflect
    every round. With masking enabled the server only ever sees permuted
    updates; similarities and norms are invariant, so the cluster evolution
    matches the unmasked run.
    """
    if len(clients) == 0:
        raise ValueError("client set must be nonempty")
    if total_rounds < 1:
        raise ValueError("total_rounds must be >= 1")
    theta0 = as_param_vec(theta0, name="theta0")
    key = privacy_key if privacy_key is not None else PermutationKey.identity(theta0.size)
    if key.dim != theta0.size:
        raise ValueError("privacy key dimension does not match the model")
    by_id = {c.id: c for c in clients}
    theta: dict[int, np.ndarray] = {c.id: theta0.copy() for c in clients}
    sizes = {c.id: c.train.size for c in clients}
    truth = {c.id: c.truth for c in clients}

    root = ClusterNode(id=0, clients=tuple(sorted(by_id)))
    nodes = {0: root}
    live = [_LiveCluster(node_id=0, member_ids=root.clients)]
    next_node_id = 1
    history: list[OnlineRoundRecord] = []

    def local_update(cid: int, t: int) -> np.ndarray:
        stream = rng.derive("online_sgd", client=cid, round_index=t)
        trained = sgd_n(
            model,
            theta[cid],
            by_id[cid].train,
            fl_cfg.n_local,
            fl_cfg.lr,
            fl_cfg.batch_size,
            stream,
            unit=fl_cfg.sgd_unit,
        )
        return trained - theta[cid]

    for t in range(1, total_rounds + 1):
        # clients download their cluster's aggregate, then train
        for cluster in live:
            if cluster.pending is not None:
                step = unmask(key, cluster.pending)
                for cid in cluster.member_ids:
                    theta[cid] = theta[cid] + step
        all_ids = [cid for cluster in live for cid in cluster.member_ids]
        if workers > 1:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                raw_list = list(pool.map(lambda cid: local_update(cid, t), all_ids))
        else:
            raw_list = [local_update(cid, t) for cid in all_ids]
        raw = dict(zip(all_ids, raw_list))
        masked = {cid: mask(key, u) for cid, u in raw.items()}

        server_norms: dict[int, float] = {}
        max_client_norms: dict[int, float] = {}
        gaps: dict[int, float] = {}
        sim_records: dict[int, SimilarityMatrix] = {}
        splits: list[tuple[int, int, int]] = []
        new_live: list[_LiveCluster] = []
        for cluster in live:
            members = cluster.member_ids
            agg = aggregate(
                [masked[cid] for cid in members],
                [sizes[cid] for cid in members],
                fl_cfg.weighting,
            )
            server_norms[cluster.node_id] = norm(agg)
            max_client_norms[cluster.node_id] = max(norm(masked[cid]) for cid in members)
            alpha: SimilarityMatrix | None = None
            if len(members) >= 2:
                try:
                    alpha = similarity_matrix([masked[cid] for cid in members], ids=members)
                    gaps[cluster.node_id] = separation_gap(alpha, truth)
                except (DegenerateVectorError, ValueError):
                    alpha = None
            do_split = (
                alpha is not None
                and server_norms[cluster.node_id] < split_cfg.eps1
                and max_client_norms[cluster.node_id] > split_cfg.eps2
            )
            if do_split:
                sim_records[cluster.node_id] = alpha
                cut = optimal_bipartition(alpha)
                do_split = split_cfg.gamma_max < np.sqrt((1.0 - cut.cross_max) / 2.0)
            if not do_split:
                cluster.pending = agg
                new_live.append(cluster)
                continue
            parent = nodes[cluster.node_id]
            parent.theta_star = theta[members[0]].copy()
            child_ids = []
            for side in (cut.c1, cut.c2):
                child = ClusterNode(id=next_node_id, clients=side)
                nodes[next_node_id] = child
                parent.edge_cache[next_node_id] = [(cid, raw[cid]) for cid in side]
                new_live.append(
                    _LiveCluster(node_id=next_node_id, member_ids=side, pending=agg)
                )
                child_ids.append(next_node_id)
                next_node_id += 1
            parent.children = (child_ids[0], child_ids[1])
            splits.append((cluster.node_id, child_ids[0], child_ids[1]))
        live = new_live

        mean_acc = None
        if model.kind != "quadratic" and fl_cfg.record_metrics:
            accs = [accuracy(model, theta[c.id], c.test) for c in clients]
            mean_acc = float(np.mean(accs))
        history.append(
            OnlineRoundRecord(
                round_index=t,
                cluster_clients={c.node_id: c.member_ids for c in live},
                server_norms=server_norms,
                max_client_norms=max_client_norms,
                gaps=gaps,
                splits=splits,
                mean_test_accuracy=mean_acc,
                similarities=sim_records,
            )
        )

    # final download so the returned models include the last aggregates
    for cluster in live:
        if cluster.pending is not None:
            step = unmask(key, cluster.pending)
            for cid in cluster.member_ids:
                theta[cid] = theta[cid] + step
        nodes[cluster.node_id].theta_star = theta[cluster.member_ids[0]].copy()

    tree = ParameterTree(nodes=nodes, root=0)
    tree.validate()
    assignment = {cid: tree.leaf_for(cid) for cid in by_id}
    return OnlineCFLResult(
        tree=tree,
        history=history,
        assignment=assignment,
        client_params=theta,
    )


# ---------------------------------------------------------------------------
# routing new clients


def assign_client(
    tree: ParameterTree,
    new_client: ClientRecord,
    model: ModelSpec,
    fl_cfg: FLConfig,
    rng: RandomStream,
) -> tuple[int, np.ndarray]:
    """Route a new client from the root to the leaf with the most similar updates.

    At every internal node the client trains locally from the node's
    stationary solution; the walk descends into the child whose cached
    pre-split updates contain the best cosine match (ties take the first
    child). A single-leaf tree needs no training at all.
    """
    node = tree.node(tree.root)
    while node.children is not None:
        if node.theta_star is None:
            raise ValueError(f"node {node.id} has no cached solution to train from")
        stream = rng.derive("assign", client=new_client.id, round_index=node.id)
        trained = sgd_n(
            model,
            node.theta_star,
            new_client.train,
            fl_cfg.n_local,
            fl_cfg.lr,
            fl_cfg.batch_size,
            stream,
            unit=fl_cfg.sgd_unit,
        )
        delta = trained - node.theta_star
        if norm(delta) == 0.0:
            raise DegenerateVectorError(
                "new client produced a zero-norm update; cannot route", client_id=new_client.id
            )
        best_child = None
        best_sim = -np.inf
        for child_id in node.children:
            cache = node.edge_cache[child_id]
            sim = max(cosine(delta, cached) for _, cached in cache)
            if sim > best_sim:
                best_sim = sim
                best_child = child_id
        node = tree.node(best_child)
    if node.theta_star is None:
        raise ValueError(f"leaf {node.id} has no parameters")
    return node.id, node.theta_star
