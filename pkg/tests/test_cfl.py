"""Controller contracts: recursion, the online protocol, masking, routing."""

import numpy as np
import pytest

from cflsim.cfl import (
    ParameterTree,
    PermutationKey,
    assign_client,
    mask,
    run_cfl_online,
    run_cfl_recursive,
    tree_from_dict,
    tree_to_dict,
    unmask,
)
from cflsim.clustering import SplitConfig, adjusted_rand_index
from cflsim.datagen import (
    PopulationSpec,
    make_heldout_clients,
    make_population,
    quadratic_client,
)
from cflsim.flcore import FLConfig
from cflsim.models import ModelSpec, accuracy, init_params
from cflsim.numerics import DegenerateVectorError, RandomStream, cosine


def perm_population(seed, m=20, k=4):
    spec = PopulationSpec(
        scenario="label_permutation", m=m, k=k, n_per_client=60,
        n_features=2, n_classes=5, seed=seed, blob_sigma=0.5,
    )
    return spec, make_population(spec)


MLP = ModelSpec.mlp(2, 5, 16, "tanh")
FL_CFG = FLConfig(eps1=5e-3, max_rounds=1000, n_local=1, lr=0.3, batch_size=60,
                  record_metrics=False)
SPLIT_CFG = SplitConfig(eps1=5e-3, eps2=0.05, gamma_max=0.5)


class TestMasking:
    def test_round_trip_exact(self):
        key = PermutationKey.from_seed(17, 40)
        rng = np.random.default_rng(0)
        for _ in range(100):
            v = rng.standard_normal(40)
            np.testing.assert_array_equal(unmask(key, mask(key, v)), v)

    def test_identity_key(self):
        key = PermutationKey.identity(5)
        v = np.arange(5.0)
        np.testing.assert_array_equal(mask(key, v), v)

    def test_cosine_invariance(self):
        key = PermutationKey.from_seed(3, 64)
        rng = np.random.default_rng(1)
        for _ in range(50):
            u, v = rng.standard_normal((2, 64))
            assert cosine(mask(key, u), mask(key, v)) == pytest.approx(
                cosine(u, v), abs=1e-10
            )

    def test_unmask_of_masked_mean_is_raw_mean(self):
        key = PermutationKey.from_seed(5, 16)
        rng = np.random.default_rng(2)
        updates = list(rng.standard_normal((7, 16)))
        masked_mean = np.mean([mask(key, u) for u in updates], axis=0)
        raw_mean = np.mean(updates, axis=0)
        np.testing.assert_allclose(unmask(key, masked_mean), raw_mean, atol=1e-12)

    def test_dim_mismatch(self):
        key = PermutationKey.from_seed(1, 4)
        with pytest.raises(ValueError):
            mask(key, np.ones(5))


class TestRecursive:
    def test_congruent_population_stays_single_leaf(self):
        spec = PopulationSpec(scenario="congruent_split", m=2, k=1, n_per_client=80,
                              n_features=2, n_classes=4, seed=1, blob_sigma=0.5)
        clients = make_population(spec)
        model = ModelSpec.softmax(2, 4)
        fl = FLConfig(eps1=1e-3, max_rounds=400, n_local=2, lr=0.5, batch_size=80,
                      record_metrics=False)
        sp = SplitConfig(eps1=1e-3, eps2=0.1, gamma_max=0.5)
        rng = RandomStream(1)
        theta0 = init_params(model, rng.derive("init"))
        res = run_cfl_recursive(model, theta0, clients, fl, sp, rng.derive("cfl"))
        assert len(res.tree.leaves()) == 1
        # the clustered run over a congruent population IS the plain federated run
        from cflsim.flcore import run_fl

        plain = run_fl(model, theta0, clients, fl, rng.derive("cfl").derive("node0"))
        np.testing.assert_array_equal(res.root_theta, plain.theta)
        for cid in (0, 1):
            np.testing.assert_array_equal(res.client_params[cid], plain.theta)

    def test_two_quadratic_clients_split_to_singletons(self):
        model = ModelSpec.quadratic([0.0, 0.0])
        clients = [quadratic_client(0, [1.0, 0.0]), quadratic_client(1, [-1.0, 0.0])]
        fl = FLConfig(eps1=1e-3, max_rounds=200, n_local=3, lr=0.1, batch_size=4,
                      record_metrics=False)
        sp = SplitConfig(eps1=1e-3, eps2=0.1, gamma_max=0.5)
        res = run_cfl_recursive(model, [0.3, 0.7], clients, fl, sp, RandomStream(2))
        leaves = res.tree.leaves()
        assert sorted(tuple(l.clients) for l in leaves) == [(0,), (1,)]
        np.testing.assert_allclose(res.client_params[0], [1.0, 0.0], atol=5e-3)
        np.testing.assert_allclose(res.client_params[1], [-1.0, 0.0], atol=5e-3)

    def test_label_permutation_recovers_truth(self):
        spec, clients = perm_population(seed=2)
        rng = RandomStream(2)
        theta0 = init_params(MLP, rng.derive("init"))
        res = run_cfl_recursive(MLP, theta0, clients, FL_CFG, SPLIT_CFG, rng.derive("cfl"))
        assert len(res.tree.leaves()) == 4
        truth = [c.truth for c in clients]
        assigned = [res.assignment[c.id] for c in clients]
        assert adjusted_rand_index(truth, assigned) == 1.0
        # a k-cluster structure needs at most k-1 splits
        internal = [n for n in res.tree.nodes.values() if not n.is_leaf]
        assert len(internal) <= spec.k - 1
        res.tree.validate()

    def test_post_split_accuracy_dominates_root(self):
        _spec, clients = perm_population(seed=6)
        rng = RandomStream(6)
        theta0 = init_params(MLP, rng.derive("init"))
        res = run_cfl_recursive(MLP, theta0, clients, FL_CFG, SPLIT_CFG, rng.derive("cfl"))
        post = np.mean([accuracy(MLP, res.client_params[c.id], c.test) for c in clients])
        root = np.mean([accuracy(MLP, res.root_theta, c.test) for c in clients])
        assert post >= root - 1e-9

    def test_split_with_positive_gap_is_correct(self):
        from cflsim.clustering import separation_gap

        _spec, clients = perm_population(seed=3)
        truth = {c.id: c.truth for c in clients}
        rng = RandomStream(3)
        theta0 = init_params(MLP, rng.derive("init"))
        res = run_cfl_recursive(MLP, theta0, clients, FL_CFG, SPLIT_CFG, rng.derive("cfl"))
        checked = 0
        for node_id, alpha in res.node_similarity.items():
            node = res.tree.node(node_id)
            if node.is_leaf or separation_gap(alpha, truth) <= 0:
                continue
            kids = [res.tree.node(c) for c in node.children]
            for i in kids[0].clients:
                for j in kids[1].clients:
                    assert truth[i] != truth[j]
            checked += 1
        assert checked >= 1

    def test_singleton_cluster_is_leaf(self):
        model = ModelSpec.quadratic([0.0, 0.0])
        res = run_cfl_recursive(
            model, [1.0, 1.0], [quadratic_client(0, [0.5, 0.0])],
            FLConfig(eps1=1e-4, max_rounds=100, n_local=2, lr=0.2, batch_size=1,
                     record_metrics=False),
            SplitConfig(eps1=1e-4, eps2=0.01, gamma_max=0.5),
            RandomStream(0),
        )
        assert len(res.tree.nodes) == 1

    def test_max_depth_caps_recursion(self):
        _spec, clients = perm_population(seed=2)
        rng = RandomStream(2)
        theta0 = init_params(MLP, rng.derive("init"))
        res = run_cfl_recursive(MLP, theta0, clients, FL_CFG, SPLIT_CFG,
                                rng.derive("cfl"), max_depth=1)
        assert len(res.tree.leaves()) <= 2

    def test_edge_caches_cover_children(self):
        _spec, clients = perm_population(seed=2)
        rng = RandomStream(2)
        theta0 = init_params(MLP, rng.derive("init"))
        res = run_cfl_recursive(MLP, theta0, clients, FL_CFG, SPLIT_CFG, rng.derive("cfl"))
        for node in res.tree.nodes.values():
            if node.is_leaf:
                continue
            for child_id in node.children:
                cache = node.edge_cache[child_id]
                assert sorted(c for c, _ in cache) == sorted(res.tree.node(child_id).clients)
                for _cid, update in cache:
                    assert np.linalg.norm(update) > 0


class TestOnline:
    def _run(self, privacy=False, seed=3, rounds=900):
        _spec, clients = perm_population(seed=seed)
        rng = RandomStream(seed)
        theta0 = init_params(MLP, rng.derive("init"))
        key = PermutationKey.from_seed(99, MLP.dim) if privacy else None
        return clients, run_cfl_online(
            MLP, theta0, clients, FL_CFG, SPLIT_CFG, rng.derive("online"),
            total_rounds=rounds, privacy_key=key,
        )

    def test_cluster_count_trajectory(self):
        clients, res = self._run()
        counts = [r.n_clusters for r in res.history]
        assert counts[0] == 1
        assert counts[-1] == 4
        # strictly staged: 1 -> 2 -> 3 -> 4, never skipping or shrinking
        transitions = [(a, b) for a, b in zip(counts, counts[1:]) if a != b]
        assert transitions == [(1, 2), (2, 3), (3, 4)]
        truth = [c.truth for c in clients]
        assigned = [res.assignment[c.id] for c in clients]
        assert adjusted_rand_index(truth, assigned) == 1.0

    def test_privacy_on_equals_privacy_off(self):
        clients, plain = self._run(privacy=False)
        _, masked = self._run(privacy=True)
        assert [r.n_clusters for r in plain.history] == [r.n_clusters for r in masked.history]
        for rec_a, rec_b in zip(plain.history, masked.history):
            assert rec_a.similarities.keys() == rec_b.similarities.keys()
            for nid in rec_a.similarities:
                np.testing.assert_allclose(
                    rec_a.similarities[nid].values,
                    rec_b.similarities[nid].values,
                    atol=1e-10,
                )
        for c in clients:
            np.testing.assert_allclose(
                plain.client_params[c.id], masked.client_params[c.id], atol=1e-9
            )

    def test_high_eps2_never_splits(self):
        _spec, clients = perm_population(seed=4, m=8, k=2)
        rng = RandomStream(4)
        theta0 = init_params(MLP, rng.derive("init"))
        sp = SplitConfig(eps1=5e-3, eps2=100.0, gamma_max=0.5)
        res = run_cfl_online(MLP, theta0, clients, FL_CFG, sp, rng.derive("online"),
                             total_rounds=120)
        assert all(r.n_clusters == 1 for r in res.history)
        # all clients end on the same model: plain federated behavior
        ref = res.client_params[clients[0].id]
        for c in clients[1:]:
            np.testing.assert_array_equal(res.client_params[c.id], ref)

    def test_runs_exactly_total_rounds(self):
        _clients, res = self._run(rounds=50)
        assert [r.round_index for r in res.history] == list(range(1, 51))


class TestTreeSerialization:
    def test_round_trip_preserves_structure_and_caches(self):
        _spec, clients = perm_population(seed=2)
        rng = RandomStream(2)
        theta0 = init_params(MLP, rng.derive("init"))
        res = run_cfl_recursive(MLP, theta0, clients, FL_CFG, SPLIT_CFG, rng.derive("cfl"))
        doc = tree_to_dict(res.tree)
        import json

        back = tree_from_dict(json.loads(json.dumps(doc)))
        assert back.root == res.tree.root
        assert set(back.nodes) == set(res.tree.nodes)
        for nid, node in res.tree.nodes.items():
            other = back.node(nid)
            assert other.clients == node.clients
            assert other.children == node.children
            np.testing.assert_array_equal(other.theta_star, node.theta_star)
            for child, cache in node.edge_cache.items():
                for (cid_a, upd_a), (cid_b, upd_b) in zip(cache, other.edge_cache[child]):
                    assert cid_a == cid_b
                    np.testing.assert_array_equal(upd_a, upd_b)

    def test_validate_rejects_broken_partition(self):
        import copy

        _spec, clients = perm_population(seed=2)
        rng = RandomStream(2)
        theta0 = init_params(MLP, rng.derive("init"))
        res = run_cfl_recursive(MLP, theta0, clients, FL_CFG, SPLIT_CFG, rng.derive("cfl"))
        broken = copy.deepcopy(res.tree)
        root = broken.node(broken.root)
        if root.children is not None:
            kid = broken.node(root.children[0])
            kid.clients = kid.clients[:-1]
            with pytest.raises(ValueError):
                broken.validate()


class TestAssign:
    def _tree(self, seed=5):
        spec, clients = perm_population(seed=seed)
        rng = RandomStream(seed)
        theta0 = init_params(MLP, rng.derive("init"))
        res = run_cfl_recursive(MLP, theta0, clients, FL_CFG, SPLIT_CFG, rng.derive("cfl"))
        by_id = {c.id: c for c in clients}
        leaf_truth = {}
        for leaf in res.tree.leaves():
            truths = {by_id[c].truth for c in leaf.clients}
            assert len(truths) == 1
            leaf_truth[leaf.id] = truths.pop()
        return spec, clients, res, leaf_truth

    def test_single_leaf_tree_routes_immediately(self):
        from cflsim.cfl import ClusterNode

        tree = ParameterTree(
            nodes={0: ClusterNode(id=0, clients=(0, 1), theta_star=np.zeros(MLP.dim))},
            root=0,
        )
        c = quadratic_client(5, [0.0] * 2)
        leaf, theta = assign_client(tree, c, MLP, FL_CFG, RandomStream(0))
        assert leaf == 0
        np.testing.assert_array_equal(theta, np.zeros(MLP.dim))

    def test_heldout_clients_route_to_matching_leaf(self):
        spec, _clients, res, leaf_truth = self._tree()
        held = make_heldout_clients(spec, per_truth=5)
        for hc in held:
            leaf, _theta = assign_client(res.tree, hc, MLP, FL_CFG, RandomStream(11))
            assert leaf_truth[leaf] == hc.truth

    def test_existing_client_routes_to_own_leaf(self):
        _spec, clients, res, _leaf_truth = self._tree()
        for c in clients[:5]:
            leaf, _theta = assign_client(res.tree, c, MLP, FL_CFG, RandomStream(12))
            assert leaf == res.assignment[c.id]

    def test_zero_update_raises_routing_error(self):
        from cflsim.cfl import ClusterNode

        quad = ModelSpec.quadratic([1.0, 0.0])
        # internal node with two children and caches; the new client sits
        # exactly at the node solution, so its update vanishes
        nodes = {
            0: ClusterNode(
                id=0, clients=(0, 1), theta_star=np.array([1.0, 0.0]),
                children=(1, 2),
                edge_cache={
                    1: [(0, np.array([1.0, 0.0]))],
                    2: [(1, np.array([-1.0, 0.0]))],
                },
            ),
            1: ClusterNode(id=1, clients=(0,), theta_star=np.array([1.0, 0.0])),
            2: ClusterNode(id=2, clients=(1,), theta_star=np.array([-1.0, 0.0])),
        }
        tree = ParameterTree(nodes=nodes, root=0)
        stuck = quadratic_client(9, [1.0, 0.0])
        fl = FLConfig(eps1=1e-3, max_rounds=10, n_local=1, lr=0.1, batch_size=1,
                      record_metrics=False)
        with pytest.raises(DegenerateVectorError):
            assign_client(tree, stuck, quad, fl, RandomStream(0))
